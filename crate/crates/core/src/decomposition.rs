//! Decomposition of the state and input components into subsystems, and
//! comparison of two decompositions by index-set inclusion.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::ComponentSet;

/// Raw index sets of one subsystem, as written by a user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsystemSpec {
    /// State components this subsystem is responsible for keeping safe.
    pub controlled: Vec<usize>,
    /// State components it models (controlled plus observed neighbours).
    pub modeled: Vec<usize>,
    /// Input components it chooses.
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionSpec {
    pub subsystems: Vec<SubsystemSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NoSubsystems,
    StateComponentOutOfRange { subsystem: usize, component: usize },
    InputComponentOutOfRange { subsystem: usize, component: usize },
    ControlledOverlap { component: usize, subsystems: (usize, usize) },
    ControlledGap { component: usize },
    InputOverlap { component: usize, subsystems: (usize, usize) },
    InputGap { component: usize },
    ControlledNotModeled { subsystem: usize, component: usize },
    EmptyControlled { subsystem: usize },
    EmptyInputs { subsystem: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoSubsystems => write!(f, "decomposition has no subsystems"),
            Violation::StateComponentOutOfRange { subsystem, component } => {
                write!(f, "subsystem {subsystem}: state component {component} does not exist")
            }
            Violation::InputComponentOutOfRange { subsystem, component } => {
                write!(f, "subsystem {subsystem}: input component {component} does not exist")
            }
            Violation::ControlledOverlap { component, subsystems: (a, b) } => write!(
                f,
                "controlled sets overlap at component {component} (subsystems {a} and {b})"
            ),
            Violation::ControlledGap { component } => {
                write!(f, "state component {component} is controlled by no subsystem")
            }
            Violation::InputOverlap { component, subsystems: (a, b) } => write!(
                f,
                "input sets overlap at component {component} (subsystems {a} and {b})"
            ),
            Violation::InputGap { component } => {
                write!(f, "input component {component} is assigned to no subsystem")
            }
            Violation::ControlledNotModeled { subsystem, component } => write!(
                f,
                "subsystem {subsystem}: controlled component {component} is not modeled"
            ),
            Violation::EmptyControlled { subsystem } => {
                write!(f, "subsystem {subsystem}: controlled set is empty")
            }
            Violation::EmptyInputs { subsystem } => {
                write!(f, "subsystem {subsystem}: input set is empty")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecompositionError {
    #[error("invalid decomposition: {}", join(.0))]
    Invalid(Vec<Violation>),
    #[error("generator {name:?} needs {requirement}")]
    Generator {
        name: &'static str,
        requirement: String,
    },
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Validated index sets of one subsystem, with derived sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SubsystemIndices {
    pub controlled: ComponentSet,
    pub modeled: ComponentSet,
    /// Modeled but not controlled.
    pub observed: ComponentSet,
    pub unmodeled: ComponentSet,
    pub inputs: ComponentSet,
    pub unmodeled_inputs: ComponentSet,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Decomposition {
    state_dim: usize,
    input_dim: usize,
    subsystems: Vec<SubsystemIndices>,
}

impl DecompositionSpec {
    /// One subsystem modelling and controlling everything.
    pub fn centralized(state_dim: usize, input_dim: usize) -> Self {
        Self {
            subsystems: vec![SubsystemSpec {
                controlled: (0..state_dim).collect(),
                modeled: (0..state_dim).collect(),
                inputs: (0..input_dim).collect(),
            }],
        }
    }

    /// One subsystem per component of a ring, modelling its two neighbours.
    pub fn ring_overlap(n: usize) -> Result<Self, DecompositionError> {
        if n < 3 {
            return Err(DecompositionError::Generator {
                name: "ring-overlap",
                requirement: format!("at least 3 components, got {n}"),
            });
        }
        Ok(Self {
            subsystems: (0..n)
                .map(|s| SubsystemSpec {
                    controlled: vec![s],
                    modeled: vec![(s + n - 1) % n, s, (s + 1) % n],
                    inputs: vec![s],
                })
                .collect(),
        })
    }

    /// One subsystem per component with no shared state.
    pub fn disjoint(n: usize) -> Self {
        Self {
            subsystems: (0..n)
                .map(|s| SubsystemSpec {
                    controlled: vec![s],
                    modeled: vec![s],
                    inputs: vec![s],
                })
                .collect(),
        }
    }

    /// Checks the partition constraints and derives the remaining sets.
    /// Every violated constraint is reported.
    pub fn validate(
        &self,
        state_dim: usize,
        input_dim: usize,
    ) -> Result<Decomposition, DecompositionError> {
        let mut violations = Vec::new();
        if self.subsystems.is_empty() {
            violations.push(Violation::NoSubsystems);
        }
        let mut controller_of: Vec<Option<usize>> = vec![None; state_dim];
        let mut input_owner: Vec<Option<usize>> = vec![None; input_dim];
        for (s, sub) in self.subsystems.iter().enumerate() {
            for &c in sub.controlled.iter().chain(&sub.modeled) {
                if c >= state_dim {
                    let v = Violation::StateComponentOutOfRange {
                        subsystem: s,
                        component: c,
                    };
                    if !violations.contains(&v) {
                        violations.push(v);
                    }
                }
            }
            for &j in &sub.inputs {
                if j >= input_dim {
                    violations.push(Violation::InputComponentOutOfRange {
                        subsystem: s,
                        component: j,
                    });
                }
            }
            if sub.controlled.is_empty() {
                violations.push(Violation::EmptyControlled { subsystem: s });
            }
            if sub.inputs.is_empty() {
                violations.push(Violation::EmptyInputs { subsystem: s });
            }
            let controlled = ComponentSet::new(sub.controlled.iter().copied());
            let modeled = ComponentSet::new(sub.modeled.iter().copied());
            for c in controlled.iter() {
                if !modeled.contains(c) {
                    violations.push(Violation::ControlledNotModeled {
                        subsystem: s,
                        component: c,
                    });
                }
                if c < state_dim {
                    match controller_of[c] {
                        Some(prev) => violations.push(Violation::ControlledOverlap {
                            component: c,
                            subsystems: (prev, s),
                        }),
                        None => controller_of[c] = Some(s),
                    }
                }
            }
            for j in ComponentSet::new(sub.inputs.iter().copied()).iter() {
                if j < input_dim {
                    match input_owner[j] {
                        Some(prev) => violations.push(Violation::InputOverlap {
                            component: j,
                            subsystems: (prev, s),
                        }),
                        None => input_owner[j] = Some(s),
                    }
                }
            }
        }
        if !self.subsystems.is_empty() {
            for (c, owner) in controller_of.iter().enumerate() {
                if owner.is_none() {
                    violations.push(Violation::ControlledGap { component: c });
                }
            }
            for (j, owner) in input_owner.iter().enumerate() {
                if owner.is_none() {
                    violations.push(Violation::InputGap { component: j });
                }
            }
        }
        if !violations.is_empty() {
            return Err(DecompositionError::Invalid(violations));
        }

        let all_states = ComponentSet::range(state_dim);
        let all_inputs = ComponentSet::range(input_dim);
        let subsystems = self
            .subsystems
            .iter()
            .map(|sub| {
                let controlled = ComponentSet::new(sub.controlled.iter().copied());
                let modeled = ComponentSet::new(sub.modeled.iter().copied());
                let inputs = ComponentSet::new(sub.inputs.iter().copied());
                SubsystemIndices {
                    observed: modeled.difference(&controlled),
                    unmodeled: all_states.difference(&modeled),
                    unmodeled_inputs: all_inputs.difference(&inputs),
                    controlled,
                    modeled,
                    inputs,
                }
            })
            .collect();
        Ok(Decomposition {
            state_dim,
            input_dim,
            subsystems,
        })
    }
}

impl Decomposition {
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn len(&self) -> usize {
        self.subsystems.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subsystems.is_empty()
    }

    pub fn subsystems(&self) -> &[SubsystemIndices] {
        &self.subsystems
    }

    pub fn subsystem(&self, sigma: usize) -> &SubsystemIndices {
        &self.subsystems[sigma]
    }

    /// True when no subsystem observes components it does not control.
    pub fn is_non_overlapping(&self) -> bool {
        self.subsystems.iter().all(|s| s.observed.is_empty())
    }

    pub fn to_spec(&self) -> DecompositionSpec {
        DecompositionSpec {
            subsystems: self
                .subsystems
                .iter()
                .map(|s| SubsystemSpec {
                    controlled: s.controlled.as_slice().to_vec(),
                    modeled: s.modeled.as_slice().to_vec(),
                    inputs: s.inputs.as_slice().to_vec(),
                })
                .collect(),
        }
    }
}

/// Surjective map from the subsystems of a finer decomposition to those of a
/// coarser one, under which every fine index set is included in its image's.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RefinementWitness {
    pub map: Vec<usize>,
}

impl RefinementWitness {
    /// Fine subsystems mapped onto coarse subsystem `sigma`.
    pub fn preimage(&self, sigma: usize) -> impl Iterator<Item = usize> + '_ {
        self.map
            .iter()
            .enumerate()
            .filter(move |(_, &s)| s == sigma)
            .map(|(f, _)| f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ComparisonFailure {
    #[error("decompositions live over different dimensions")]
    DimensionMismatch,
    #[error("fine subsystem {fine}: controlled set {controlled} not included in coarse subsystem {coarse}'s")]
    Controlled {
        fine: usize,
        coarse: usize,
        controlled: ComponentSet,
    },
    #[error("fine subsystem {fine}: modeled set {modeled} not included in coarse subsystem {coarse}'s")]
    Modeled {
        fine: usize,
        coarse: usize,
        modeled: ComponentSet,
    },
    #[error("fine subsystem {fine}: input set {inputs} not included in coarse subsystem {coarse}'s")]
    Inputs {
        fine: usize,
        coarse: usize,
        inputs: ComponentSet,
    },
    #[error("coarse subsystem {0} is the image of no fine subsystem")]
    NotSurjective(usize),
}

/// Builds the witness map from `fine` to `coarse`. Each fine subsystem is
/// sent to the coarse subsystem controlling its first controlled component;
/// this choice is forced because controlled sets partition the state.
pub fn compare(
    fine: &Decomposition,
    coarse: &Decomposition,
) -> Result<RefinementWitness, ComparisonFailure> {
    if fine.state_dim != coarse.state_dim || fine.input_dim != coarse.input_dim {
        return Err(ComparisonFailure::DimensionMismatch);
    }
    let mut map = Vec::with_capacity(fine.len());
    for (f, fsub) in fine.subsystems.iter().enumerate() {
        let first = fsub
            .controlled
            .iter()
            .next()
            .expect("validated subsystems control something");
        let c = coarse
            .subsystems
            .iter()
            .position(|s| s.controlled.contains(first))
            .expect("validated controlled sets cover every component");
        let csub = &coarse.subsystems[c];
        if !fsub.controlled.is_subset(&csub.controlled) {
            return Err(ComparisonFailure::Controlled {
                fine: f,
                coarse: c,
                controlled: fsub.controlled.clone(),
            });
        }
        if !fsub.modeled.is_subset(&csub.modeled) {
            return Err(ComparisonFailure::Modeled {
                fine: f,
                coarse: c,
                modeled: fsub.modeled.clone(),
            });
        }
        if !fsub.inputs.is_subset(&csub.inputs) {
            return Err(ComparisonFailure::Inputs {
                fine: f,
                coarse: c,
                inputs: fsub.inputs.clone(),
            });
        }
        map.push(c);
    }
    for c in 0..coarse.len() {
        if !map.contains(&c) {
            return Err(ComparisonFailure::NotSurjective(c));
        }
    }
    Ok(RefinementWitness { map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(v: &[usize]) -> ComponentSet {
        ComponentSet::new(v.iter().copied())
    }

    #[test]
    fn centralized_is_valid() {
        let d = DecompositionSpec::centralized(4, 4).validate(4, 4).unwrap();
        assert_eq!(d.len(), 1);
        let s = d.subsystem(0);
        assert!(s.observed.is_empty());
        assert!(s.unmodeled.is_empty());
        assert!(s.unmodeled_inputs.is_empty());
    }

    #[test]
    fn ring_overlap_is_valid() {
        let d = DecompositionSpec::ring_overlap(4).unwrap().validate(4, 4).unwrap();
        assert_eq!(d.len(), 4);
        assert_eq!(d.subsystem(0).observed, set(&[1, 3]));
        assert_eq!(d.subsystem(0).unmodeled, set(&[2]));
        assert_eq!(d.subsystem(2).observed, set(&[1, 3]));
        assert_eq!(d.subsystem(1).unmodeled_inputs, set(&[0, 2, 3]));
        assert!(!d.is_non_overlapping());
        assert!(DecompositionSpec::ring_overlap(2).is_err());
    }

    #[test]
    fn overlapping_controlled_sets_are_rejected() {
        let spec = DecompositionSpec {
            subsystems: vec![
                SubsystemSpec {
                    controlled: vec![0, 1],
                    modeled: vec![0, 1],
                    inputs: vec![0],
                },
                SubsystemSpec {
                    controlled: vec![1, 2],
                    modeled: vec![1, 2],
                    inputs: vec![1],
                },
            ],
        };
        let err = spec.validate(3, 2).unwrap_err();
        let DecompositionError::Invalid(v) = &err else {
            panic!("{err}")
        };
        assert_eq!(
            v,
            &vec![Violation::ControlledOverlap {
                component: 1,
                subsystems: (0, 1)
            }]
        );
        assert!(err.to_string().contains("overlap at component 1"));
    }

    #[test]
    fn every_violation_is_reported() {
        let spec = DecompositionSpec {
            subsystems: vec![SubsystemSpec {
                controlled: vec![0, 5],
                modeled: vec![1],
                inputs: vec![],
            }],
        };
        let DecompositionError::Invalid(v) = spec.validate(2, 1).unwrap_err() else {
            unreachable!()
        };
        assert!(v.contains(&Violation::StateComponentOutOfRange { subsystem: 0, component: 5 }));
        assert!(v.contains(&Violation::EmptyInputs { subsystem: 0 }));
        assert!(v.contains(&Violation::ControlledNotModeled { subsystem: 0, component: 0 }));
        assert!(v.contains(&Violation::ControlledGap { component: 1 }));
        assert!(v.contains(&Violation::InputGap { component: 0 }));
        assert!(DecompositionSpec { subsystems: vec![] }.validate(1, 1).is_err());
    }

    #[test]
    fn compare_reference_family() {
        let n = 4;
        let central = DecompositionSpec::centralized(n, n).validate(n, n).unwrap();
        let overlap = DecompositionSpec::ring_overlap(n).unwrap().validate(n, n).unwrap();
        let disjoint = DecompositionSpec::disjoint(n).validate(n, n).unwrap();

        let w = compare(&disjoint, &overlap).unwrap();
        assert_eq!(w.map, vec![0, 1, 2, 3]);
        let w = compare(&overlap, &central).unwrap();
        assert_eq!(w.map, vec![0; 4]);
        assert_eq!(w.preimage(0).count(), 4);
        let w = compare(&overlap, &overlap).unwrap();
        assert_eq!(w.map, vec![0, 1, 2, 3]);

        assert!(matches!(
            compare(&overlap, &disjoint),
            Err(ComparisonFailure::Modeled { fine: 0, coarse: 0, .. })
        ));
        assert!(matches!(
            compare(&central, &disjoint),
            Err(ComparisonFailure::Controlled { .. })
        ));
    }

    /// Random decomposition: a random partition of components into blocks,
    /// each block also modelling some random extra components.
    fn arb_decomposition(n: usize) -> impl Strategy<Value = DecompositionSpec> {
        (
            proptest::collection::vec(0usize..n, n),
            proptest::collection::vec(proptest::collection::vec(0usize..n, 0..3), n),
        )
            .prop_map(move |(labels, extras)| {
                let mut blocks: Vec<Vec<usize>> = Vec::new();
                let mut label_to_block = std::collections::BTreeMap::new();
                for (c, &l) in labels.iter().enumerate() {
                    let b = *label_to_block.entry(l).or_insert_with(|| {
                        blocks.push(Vec::new());
                        blocks.len() - 1
                    });
                    blocks[b].push(c);
                }
                DecompositionSpec {
                    subsystems: blocks
                        .iter()
                        .enumerate()
                        .map(|(b, block)| {
                            let mut modeled = block.clone();
                            modeled.extend(&extras[b]);
                            SubsystemSpec {
                                controlled: block.clone(),
                                modeled,
                                inputs: block.clone(),
                            }
                        })
                        .collect(),
                }
            })
    }

    /// Coarsens a decomposition by merging subsystems according to `merge`.
    fn coarsen(spec: &DecompositionSpec, merge: &[usize]) -> DecompositionSpec {
        let mut groups: std::collections::BTreeMap<usize, SubsystemSpec> = Default::default();
        for (s, sub) in spec.subsystems.iter().enumerate() {
            let g = merge[s % merge.len()];
            let e = groups.entry(g).or_insert_with(|| SubsystemSpec {
                controlled: vec![],
                modeled: vec![],
                inputs: vec![],
            });
            e.controlled.extend(&sub.controlled);
            e.modeled.extend(&sub.modeled);
            e.inputs.extend(&sub.inputs);
        }
        DecompositionSpec {
            subsystems: groups.into_values().collect(),
        }
    }

    proptest! {
        #[test]
        fn compare_is_reflexive(spec in arb_decomposition(6)) {
            let d = spec.validate(6, 6).unwrap();
            let w = compare(&d, &d).unwrap();
            prop_assert_eq!(w.map, (0..d.len()).collect::<Vec<_>>());
        }

        #[test]
        fn compare_is_transitive(
            spec in arb_decomposition(6),
            m1 in proptest::collection::vec(0usize..4, 1..6),
            m2 in proptest::collection::vec(0usize..3, 1..4),
        ) {
            let a = spec.validate(6, 6).unwrap();
            let b_spec = coarsen(&spec, &m1);
            let b = b_spec.validate(6, 6).unwrap();
            let c = coarsen(&b_spec, &m2).validate(6, 6).unwrap();
            let ab = compare(&a, &b);
            let bc = compare(&b, &c);
            prop_assert!(ab.is_ok());
            prop_assert!(bc.is_ok());
            let ac = compare(&a, &c).unwrap();
            let (ab, bc) = (ab.unwrap(), bc.unwrap());
            for (f, &g) in ac.map.iter().enumerate() {
                prop_assert_eq!(g, bc.map[ab.map[f]]);
            }
        }
    }
}
