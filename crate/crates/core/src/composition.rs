//! The composed abstraction, evaluated lazily from the subsystem relations
//! or materialized for small instances, and exhaustive or sampled checks of
//! its properties.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::abstraction::{AbstractionError, Problem, SubsystemAbstraction};
use crate::decomposition::{compare, RefinementWitness};
use crate::geometry::{next_index, AbstractState, CellIndex, CellRange, Shape};
use crate::synthesis::ComposedController;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompositionError {
    #[error("subsystem abstraction {sigma} does not belong to this problem: {reason}")]
    Provenance { sigma: usize, reason: String },
    #[error("{pairs} (cell, input) pairs exceed the cap of {cap}")]
    TooLarge { pairs: u128, cap: u128 },
    #[error("{0}")]
    Mismatch(String),
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error(transparent)]
    Abstraction(#[from] AbstractionError),
}

pub const DEFAULT_COMPOSED_CAP: u128 = 1_000_000;

/// Successors of one composed (cell, input) pair: a range of global cells
/// (or none) and the `Out` flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ComposedSuccessors {
    pub cells: Option<CellRange>,
    pub out: bool,
}

impl ComposedSuccessors {
    pub fn is_empty(&self) -> bool {
        self.cells.is_none() && !self.out
    }

    pub fn contains(&self, s: &AbstractState) -> bool {
        match s {
            AbstractState::Out => self.out,
            AbstractState::Cell(c) => self.cells.as_ref().is_some_and(|r| r.contains(&c.0)),
        }
    }

    /// Setwise inclusion.
    pub fn is_subset(&self, other: &ComposedSuccessors) -> bool {
        let cells = match (&self.cells, &other.cells) {
            (None, _) => true,
            (Some(_), None) => false,
            (Some(a), Some(b)) => (0..a.rank()).all(|k| b.lower[k] <= a.lower[k] && a.upper[k] <= b.upper[k]),
        };
        cells && (!self.out || other.out)
    }

    pub fn expand(&self) -> Vec<AbstractState> {
        let mut v: Vec<AbstractState> = self
            .cells
            .as_ref()
            .map(|r| r.cells().map(AbstractState::Cell).collect())
            .unwrap_or_default();
        if self.out {
            v.push(AbstractState::Out);
        }
        v
    }
}

/// Lazy view of the composed transition relation.
pub struct Composer<'a> {
    problem: &'a Problem,
    subsystems: &'a [SubsystemAbstraction],
    cell_extents: Vec<u32>,
    input_extents: Vec<u32>,
    /// Flattening shapes, absent when the global grid overflows `u64`.
    shapes: Option<(Shape, Shape)>,
}

impl<'a> Composer<'a> {
    /// Checks that the subsystem abstractions were built for `problem`.
    pub fn new(problem: &'a Problem, subsystems: &'a [SubsystemAbstraction]) -> Result<Self, CompositionError> {
        let d = problem.decomposition();
        if subsystems.len() != d.len() {
            return Err(CompositionError::Mismatch(format!(
                "{} subsystem abstractions for {} subsystems",
                subsystems.len(),
                d.len()
            )));
        }
        for (s, (a, sub)) in subsystems.iter().zip(d.subsystems()).enumerate() {
            let bad = |reason: &str| {
                Err(CompositionError::Provenance {
                    sigma: s,
                    reason: reason.to_string(),
                })
            };
            if a.sigma() != s {
                return bad("subsystem index differs");
            }
            if a.modeled() != &sub.modeled || a.controlled() != &sub.controlled {
                return bad("state index sets differ");
            }
            if a.input_components() != &sub.inputs {
                return bad("input index sets differ");
            }
            if a.cell_shape() != &problem.cell_shape(s) {
                return bad("grid resolution differs");
            }
            if a.input_shape() != &problem.input_shape(s) {
                return bad("input discretization differs");
            }
        }
        let cell_extents = problem.grid().cells_per_component().to_vec();
        let input_extents = problem.inputs().counts();
        let shapes = Shape::try_new(cell_extents.clone()).zip(Shape::try_new(input_extents.clone()));
        Ok(Self {
            problem,
            subsystems,
            cell_extents,
            input_extents,
            shapes,
        })
    }

    pub fn problem(&self) -> &Problem {
        self.problem
    }

    pub fn subsystems(&self) -> &[SubsystemAbstraction] {
        self.subsystems
    }

    pub fn cell_extents(&self) -> &[u32] {
        &self.cell_extents
    }

    pub fn input_extents(&self) -> &[u32] {
        &self.input_extents
    }

    /// Number of composed (cell, input) pairs, saturating at `u128::MAX`.
    pub fn n_pairs(&self) -> u128 {
        self.cell_extents
            .iter()
            .chain(&self.input_extents)
            .fold(1u128, |acc, &e| acc.saturating_mul(e as u128))
    }

    /// Cell and input shapes for exhaustive passes, refused above `cap` pairs.
    pub fn flat_shapes(&self, cap: u128) -> Result<(&Shape, &Shape), CompositionError> {
        let pairs = self.n_pairs();
        match &self.shapes {
            Some((c, i)) if pairs <= cap => Ok((c, i)),
            _ => Err(CompositionError::TooLarge { pairs, cap }),
        }
    }

    /// A cell successor survives when its projection is a successor in every
    /// subsystem; `Out` is a successor when some subsystem reports it.
    pub fn successors(&self, cell: &[u32], input: &[u32]) -> ComposedSuccessors {
        let n = cell.len();
        let mut lower = vec![0u32; n];
        let mut upper: Vec<u32> = self.cell_extents.iter().map(|e| e - 1).collect();
        let mut empty = false;
        let mut out = false;
        let mut local_cell = Vec::new();
        let mut local_input = Vec::new();
        for a in self.subsystems {
            local_cell.clear();
            local_cell.extend(a.modeled().iter().map(|c| cell[c]));
            local_input.clear();
            local_input.extend(a.input_components().iter().map(|j| input[j]));
            let pair = a.pair_id(a.cell_shape().flat(&local_cell), a.input_shape().flat(&local_input));
            out |= a.has_out(pair);
            if empty {
                continue;
            }
            match a.range_slices(pair) {
                None => empty = true,
                Some((l, u)) => {
                    for (k, c) in a.modeled().iter().enumerate() {
                        lower[c] = lower[c].max(l[k] as u32);
                        upper[c] = upper[c].min(u[k] as u32);
                        if lower[c] > upper[c] {
                            empty = true;
                        }
                    }
                }
            }
        }
        ComposedSuccessors {
            cells: (!empty).then_some(CellRange { lower, upper }),
            out,
        }
    }

    /// Materializes the relation; refused above `cap` pairs.
    pub fn build(&self, cap: u128) -> Result<ComposedAbstraction, CompositionError> {
        let (cs, is) = self.flat_shapes(cap)?;
        let ni = is.size();
        let entries = (0..cs.size() * ni)
            .into_par_iter()
            .map(|p| self.successors(&cs.unflat(p / ni), &is.unflat(p % ni)))
            .collect();
        Ok(ComposedAbstraction {
            cell_shape: cs.clone(),
            input_shape: is.clone(),
            decomposition_overlaps: !self.problem.decomposition().is_non_overlapping(),
            decomposition: self.problem.decomposition().to_spec(),
            entries,
        })
    }
}

/// Explicit composed transition relation over all global cells and inputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComposedAbstraction {
    cell_shape: Shape,
    input_shape: Shape,
    decomposition: crate::decomposition::DecompositionSpec,
    decomposition_overlaps: bool,
    entries: Vec<ComposedSuccessors>,
}

impl ComposedAbstraction {
    pub fn cell_shape(&self) -> &Shape {
        &self.cell_shape
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn n_cells(&self) -> u64 {
        self.cell_shape.size()
    }

    pub fn n_inputs(&self) -> u64 {
        self.input_shape.size()
    }

    pub fn get(&self, cell_id: u64, input_id: u64) -> &ComposedSuccessors {
        &self.entries[(cell_id * self.n_inputs() + input_id) as usize]
    }

    /// Pairs with an empty successor set.
    pub fn empty_pairs(&self) -> Vec<(u64, u64)> {
        let ni = self.n_inputs();
        (0..self.entries.len() as u64)
            .filter(|&p| self.entries[p as usize].is_empty())
            .map(|p| (p / ni, p % ni))
            .collect()
    }

    /// Maximal safety controller of the materialized relation by plain
    /// iteration, as (cell, input) allowed flags.
    pub fn maximal_controller(&self) -> Vec<bool> {
        let ni = self.n_inputs() as usize;
        let mut allowed: Vec<bool> = self.entries.iter().map(|e| !e.out).collect();
        loop {
            let alive: Vec<bool> = allowed.chunks(ni).map(|r| r.iter().any(|&a| a)).collect();
            let mut changed = false;
            for (p, e) in self.entries.iter().enumerate() {
                if !allowed[p] {
                    continue;
                }
                let ok = e.cells.as_ref().is_none_or(|r| {
                    r.cells().all(|c| alive[self.cell_shape.flat(&c.0) as usize])
                });
                if !ok {
                    allowed[p] = false;
                    changed = true;
                }
            }
            if !changed {
                return allowed;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairWitness {
    pub cell: CellIndex,
    pub input: Vec<u32>,
}

impl PairWitness {
    fn new(shape: &Shape, input_shape: &Shape, cell: u64, input: u64) -> Self {
        Self {
            cell: CellIndex(shape.unflat(cell)),
            input: input_shape.unflat(input),
        }
    }
}

/// Outcome of an exhaustive check over (cell, input) pairs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub pairs_checked: u64,
    pub holds: bool,
    /// First counterexamples found, up to a small limit.
    pub counterexamples: Vec<PairWitness>,
    pub counterexample_count: u64,
}

const KEEP: usize = 16;

fn collect_report(shape: &Shape, input_shape: &Shape, bad: Vec<u64>, checked: u64) -> CheckReport {
    let ni = input_shape.size();
    CheckReport {
        pairs_checked: checked,
        holds: bad.is_empty(),
        counterexample_count: bad.len() as u64,
        counterexamples: bad
            .iter()
            .take(KEEP)
            .map(|&p| PairWitness::new(shape, input_shape, p / ni, p % ni))
            .collect(),
    }
}

fn scan(composer: &Composer, cap: u128, bad: impl Fn(&[u32], &[u32]) -> bool + Sync) -> Result<CheckReport, CompositionError> {
    let (cs, is) = composer.flat_shapes(cap)?;
    let ni = is.size();
    let pairs = cs.size() * ni;
    let found: Vec<u64> = (0..pairs)
        .into_par_iter()
        .filter(|&p| bad(&cs.unflat(p / ni), &is.unflat(p % ni)))
        .collect();
    Ok(collect_report(cs, is, found, pairs))
}

/// Every composed pair has at least one successor.
pub fn check_nonempty(composer: &Composer, cap: u128) -> Result<CheckReport, CompositionError> {
    scan(composer, cap, |c, u| composer.successors(c, u).is_empty())
}

/// `Out` is a composed successor exactly when some subsystem's reach box,
/// projected on its controlled components, leaves the safe set. The right
/// side is recomputed from the model.
pub fn check_lemma1(composer: &Composer, cap: u128) -> Result<CheckReport, CompositionError> {
    let p = composer.problem();
    let safe = p.safe_set();
    let d = p.decomposition();
    scan(composer, cap, |cell, input| {
        let lhs = composer.successors(cell, input).out;
        let rhs = d.subsystems().iter().enumerate().any(|(s, sub)| {
            let local = CellIndex(sub.modeled.iter().map(|i| cell[i]).collect());
            let local_u: Vec<u32> = sub.inputs.iter().map(|j| input[j]).collect();
            let phi = p.phi(s, &local, &local_u).expect("indices come from the problem's shapes");
            sub.controlled.iter().any(|i| {
                let (lo, hi) = phi.interval(i);
                let (a, b) = safe.interval(i);
                !(lo >= a && hi <= b)
            })
        });
        lhs != rhs
    })
}

/// Setwise inclusion of the composed relation built from `coarse` (the
/// decomposition with the larger index sets) in the one built from `fine`,
/// with the witness from [`compare`]`(fine, coarse)`.
pub fn check_refinement_pair(
    coarse: &Composer,
    fine: &Composer,
    witness: &RefinementWitness,
    cap: u128,
) -> Result<CheckReport, CompositionError> {
    if coarse.cell_extents() != fine.cell_extents() || coarse.input_extents() != fine.input_extents() {
        return Err(CompositionError::Mismatch("grids or input discretizations differ".into()));
    }
    if coarse.problem().grid() != fine.problem().grid()
        || coarse.problem().inputs() != fine.problem().inputs()
    {
        return Err(CompositionError::Mismatch("grids or input discretizations differ".into()));
    }
    let derived = compare(fine.problem().decomposition(), coarse.problem().decomposition())
        .map_err(|e| CompositionError::NotApplicable(e.to_string()))?;
    if &derived != witness {
        return Err(CompositionError::Mismatch("witness does not match the decompositions".into()));
    }
    scan(coarse, cap, |c, u| {
        !coarse.successors(c, u).is_subset(&fine.successors(c, u))
    })
}

/// Same check without a witness, for pairs that are not comparable by index
/// sets. Reports the violating pairs.
pub fn check_inclusion(a: &Composer, b: &Composer, cap: u128) -> Result<CheckReport, CompositionError> {
    if a.cell_extents() != b.cell_extents() || a.input_extents() != b.input_extents() {
        return Err(CompositionError::Mismatch("grids or input discretizations differ".into()));
    }
    scan(a, cap, |c, u| !a.successors(c, u).is_subset(&b.successors(c, u)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MaximalityReport {
    /// Equality is only claimed for non-overlapping decompositions.
    pub equality_expected: bool,
    pub equal: bool,
    /// The composed controller allows nothing the direct maximal controller forbids.
    pub included: bool,
    pub first_difference: Option<PairWitness>,
}

impl MaximalityReport {
    pub fn holds(&self) -> bool {
        self.included && (!self.equality_expected || self.equal)
    }
}

/// Compares the composed controller with the maximal controller of the
/// materialized composed relation.
pub fn check_maximality(composed: &ComposedAbstraction, cc: &ComposedController) -> Result<MaximalityReport, CompositionError> {
    if cc.extents() != composed.cell_shape().extents() {
        return Err(CompositionError::Mismatch("controller and abstraction grids differ".into()));
    }
    let direct = composed.maximal_controller();
    let ni = composed.n_inputs();
    let mut equal = true;
    let mut included = true;
    let mut first = None;
    let mut cell = vec![0u32; cc.extents().len()];
    let mut input = vec![0u32; composed.input_shape().rank()];
    for (p, &d) in direct.iter().enumerate() {
        let (c, u) = (p as u64 / ni, p as u64 % ni);
        let mut id = c;
        composed.cell_shape().unflat_into(&mut id, &mut cell);
        let mut id = u;
        composed.input_shape().unflat_into(&mut id, &mut input);
        let a = cc.allows(&cell, &input);
        if a != d {
            equal = false;
            if a && !d {
                included = false;
            }
            if first.is_none() {
                first = Some(PairWitness::new(composed.cell_shape(), composed.input_shape(), c, u));
            }
        }
    }
    Ok(MaximalityReport {
        equality_expected: !composed.decomposition_overlaps,
        equal,
        included,
        first_difference: first,
    })
}

/// Every allowed input of every domain cell leads only to domain cells.
pub fn check_closure(composer: &Composer, cc: &ComposedController, cap: u128) -> Result<CheckReport, CompositionError> {
    if cc.extents() != composer.cell_extents() {
        return Err(CompositionError::Mismatch("controller and abstraction grids differ".into()));
    }
    scan(composer, cap, |cell, input| {
        if !cc.allows(cell, input) {
            return false;
        }
        let s = composer.successors(cell, input);
        s.out || s.cells.is_some_and(|r| r.cells().any(|x| !cc.in_domain(&x.0)))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorollaryReport {
    /// The coarse decomposition is non-overlapping, so the inclusion is
    /// implied by maximality; otherwise it is only observed.
    pub guaranteed: bool,
    pub holds: bool,
    pub cells_checked: u64,
    pub violation: Option<CellIndex>,
}

/// Checks that the controller of the finer decomposition allows, at every
/// cell, a subset of what the coarser one allows.
pub fn check_corollary1(
    fine: &ComposedController,
    coarse: &ComposedController,
    cap: u128,
) -> Result<CorollaryReport, CompositionError> {
    if fine.extents() != coarse.extents() {
        return Err(CompositionError::Mismatch("controllers live on different grids".into()));
    }
    let witness = compare(fine.decomposition(), coarse.decomposition())
        .map_err(|e| CompositionError::NotApplicable(e.to_string()))?;
    let total = fine.total_cells();
    if total > cap {
        return Err(CompositionError::TooLarge { pairs: total, cap });
    }
    let extents = fine.extents().to_vec();
    let violation = (0..total as u64).into_par_iter().find_first(|&id| {
        let cell = Shape::new(extents.clone()).unflat(id);
        !cell_included(fine, coarse, &witness, &cell)
    });
    Ok(CorollaryReport {
        guaranteed: coarse.decomposition().is_non_overlapping(),
        holds: violation.is_none(),
        cells_checked: total as u64,
        violation: violation.map(|id| CellIndex(Shape::new(extents.clone()).unflat(id))),
    })
}

/// Blockwise inclusion at one cell: the fine subsystems mapped onto a coarse
/// subsystem jointly choose that subsystem's inputs.
fn cell_included(fine: &ComposedController, coarse: &ComposedController, w: &RefinementWitness, cell: &[u32]) -> bool {
    let cell_idx = CellIndex(cell.to_vec());
    let fine_factors = fine.composed_allowed(&cell_idx);
    if fine_factors.iter().any(|f| f.is_empty()) {
        return true;
    }
    let p = fine.decomposition().input_dim();
    for (sigma, cctrl) in coarse.controllers().iter().enumerate() {
        let members: Vec<usize> = w.preimage(sigma).collect();
        let local_cell = coarse.local_cell(sigma, cell);
        // odometer over the product of the members' allowed sets
        let mut pick = vec![0usize; members.len()];
        let mut input = vec![0u32; p];
        loop {
            for (m, &f) in members.iter().enumerate() {
                let fc = &fine.controllers()[f];
                let vals = fc.input_shape().unflat(fine_factors[f][pick[m]]);
                for (k, j) in fc.input_components().iter().enumerate() {
                    input[j] = vals[k];
                }
            }
            if !cctrl.is_allowed(local_cell, coarse.local_input(sigma, &input)) {
                return false;
            }
            if !advance(&mut pick, |m| fine_factors[members[m]].len()) {
                break;
            }
        }
    }
    true
}

/// Steps a mixed-radix counter; false once it wraps around.
fn advance(pick: &mut [usize], radix: impl Fn(usize) -> usize) -> bool {
    for m in (0..pick.len()).rev() {
        pick[m] += 1;
        if pick[m] < radix(m) {
            return true;
        }
        pick[m] = 0;
    }
    false
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RefinementViolation {
    pub x: Vec<f64>,
    pub input: Vec<u32>,
    pub next: Vec<f64>,
    pub cell: AbstractState,
    pub next_cell: AbstractState,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SamplingReport {
    pub samples: u64,
    pub seed: u64,
    pub violation_count: u64,
    pub violations: Vec<RefinementViolation>,
}

impl SamplingReport {
    pub fn holds(&self) -> bool {
        self.violation_count == 0
    }
}

/// Draws states uniformly from the safe set and inputs uniformly from the
/// discretization, steps the model and checks that the quantized successor
/// is a composed successor of the quantized state.
pub fn sample_refinement(composer: &Composer, samples: u64, seed: u64) -> SamplingReport {
    const CHUNK: u64 = 4096;
    let p = composer.problem();
    let model = p.model();
    let safe = p.safe_set();
    let values = p.inputs().all();
    let chunks = samples.div_ceil(CHUNK);
    let results: Vec<(u64, Vec<RefinementViolation>)> = (0..chunks)
        .into_par_iter()
        .map(|chunk| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk);
            let n = CHUNK.min(samples - chunk * CHUNK);
            let mut x = vec![0.0; safe.dim()];
            let mut next = vec![0.0; safe.dim()];
            let mut u = vec![0.0; values.len()];
            let mut ui = vec![0u32; values.len()];
            let mut count = 0;
            let mut kept = Vec::new();
            for _ in 0..n {
                for (k, xk) in x.iter_mut().enumerate() {
                    let (lo, hi) = safe.interval(k);
                    *xk = rng.gen_range(lo..=hi);
                }
                for (j, vals) in values.iter().enumerate() {
                    ui[j] = rng.gen_range(0..vals.len()) as u32;
                    u[j] = vals[ui[j] as usize];
                }
                model.step_into(&x, &u, &mut next);
                let cell = p.grid().locate(&x);
                let AbstractState::Cell(c) = &cell else {
                    continue;
                };
                let next_cell = p.grid().locate(&next);
                if !composer.successors(&c.0, &ui).contains(&next_cell) {
                    count += 1;
                    if kept.len() < KEEP {
                        kept.push(RefinementViolation {
                            x: x.clone(),
                            input: ui.clone(),
                            next: next.clone(),
                            cell: cell.clone(),
                            next_cell,
                        });
                    }
                }
            }
            (count, kept)
        })
        .collect();
    let mut violations = Vec::new();
    let mut violation_count = 0;
    for (c, v) in results {
        violation_count += c;
        violations.extend(v);
    }
    violations.truncate(KEEP);
    SamplingReport {
        samples,
        seed,
        violation_count,
        violations,
    }
}

/// All global cells, in row-major order.
pub fn all_cells(extents: &[u32]) -> impl Iterator<Item = Vec<u32>> + '_ {
    let mut idx = Some(vec![0u32; extents.len()]);
    std::iter::from_fn(move || {
        let cur = idx.take()?;
        let mut next = cur.clone();
        if next_index(&mut next, extents) {
            idx = Some(next);
        }
        Some(cur)
    })
}
