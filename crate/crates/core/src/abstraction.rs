//! Finite subsystem abstractions built from a model, a uniform grid over the
//! safe set, an input discretization and a decomposition.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomposition::{Decomposition, SubsystemIndices};
use crate::dynamics::Dynamics;
use crate::geometry::{
    AbstractState, CellIndex, CellRange, ComponentSet, GeometryError, IntervalBox, Shape,
    UniformGrid,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AbstractionError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{0}")]
    Mismatch(String),
    #[error("input component {component}: {reason}")]
    Input { component: usize, reason: String },
    #[error("subsystem {0} does not exist")]
    UnknownSubsystem(usize),
    #[error("input id {id} out of range (subsystem has {count} input combinations)")]
    InvalidInput { id: u64, count: u64 },
    #[error("subsystem {sigma}: {what} has {size} entries, above the supported maximum")]
    TooLarge {
        sigma: usize,
        what: &'static str,
        size: u128,
    },
}

/// Finite set of values per input component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDiscretization {
    values: Vec<Vec<f64>>,
}

impl InputDiscretization {
    /// Values must be finite, nonempty per component and lie inside `domain`.
    /// They are sorted and deduplicated.
    pub fn new(values: Vec<Vec<f64>>, domain: &IntervalBox) -> Result<Self, AbstractionError> {
        if values.len() != domain.dim() {
            return Err(AbstractionError::Mismatch(format!(
                "input discretization has {} components, input domain has {}",
                values.len(),
                domain.dim()
            )));
        }
        let mut out = Vec::with_capacity(values.len());
        for (j, mut v) in values.into_iter().enumerate() {
            if v.is_empty() {
                return Err(AbstractionError::Input {
                    component: j,
                    reason: "no values".into(),
                });
            }
            let (lo, hi) = domain.interval(j);
            if let Some(bad) = v.iter().find(|x| !(lo..=hi).contains(*x)) {
                return Err(AbstractionError::Input {
                    component: j,
                    reason: format!("value {bad} outside [{lo}, {hi}]"),
                });
            }
            v.sort_by(f64::total_cmp);
            v.dedup();
            out.push(v);
        }
        Ok(Self { values: out })
    }

    /// `counts[j]` evenly spaced values over `domain`, both endpoints included
    /// (a single value sits at the lower bound).
    pub fn uniform(domain: &IntervalBox, counts: &[usize]) -> Result<Self, AbstractionError> {
        if counts.len() != domain.dim() {
            return Err(AbstractionError::Mismatch(format!(
                "{} input counts for a {}-dimensional input domain",
                counts.len(),
                domain.dim()
            )));
        }
        let values = counts
            .iter()
            .enumerate()
            .map(|(j, &n)| {
                let (lo, hi) = domain.interval(j);
                match n {
                    0 => Vec::new(),
                    1 => vec![lo],
                    _ => {
                        let step = (hi - lo) / (n - 1) as f64;
                        let mut v: Vec<f64> = (0..n).map(|k| lo + k as f64 * step).collect();
                        v[n - 1] = hi;
                        v
                    }
                }
            })
            .collect();
        Self::new(values, domain)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self, component: usize) -> &[f64] {
        &self.values[component]
    }

    pub fn counts(&self) -> Vec<u32> {
        self.values.iter().map(|v| v.len() as u32).collect()
    }

    pub fn all(&self) -> &[Vec<f64>] {
        &self.values
    }
}

/// Everything an abstraction is built from. The grid's domain is the safe set.
#[derive(Debug, Clone)]
pub struct Problem {
    model: Arc<dyn Dynamics>,
    grid: UniformGrid,
    inputs: InputDiscretization,
    decomposition: Decomposition,
}

impl Problem {
    pub fn new(
        model: Arc<dyn Dynamics>,
        grid: UniformGrid,
        inputs: InputDiscretization,
        decomposition: Decomposition,
    ) -> Result<Self, AbstractionError> {
        let n = model.state_dim();
        let p = model.input_dim();
        if grid.dim() != n {
            return Err(AbstractionError::Mismatch(format!(
                "grid has {} components, model state has {n}",
                grid.dim()
            )));
        }
        if inputs.dim() != p {
            return Err(AbstractionError::Mismatch(format!(
                "input discretization has {} components, model input has {p}",
                inputs.dim()
            )));
        }
        if decomposition.state_dim() != n || decomposition.input_dim() != p {
            return Err(AbstractionError::Mismatch(format!(
                "decomposition is over {} states and {} inputs, model has {n} and {p}",
                decomposition.state_dim(),
                decomposition.input_dim()
            )));
        }
        let domain = model.input_domain();
        for j in 0..p {
            let (lo, hi) = domain.interval(j);
            if let Some(bad) = inputs.values(j).iter().find(|x| !(lo..=hi).contains(*x)) {
                return Err(AbstractionError::Input {
                    component: j,
                    reason: format!("value {bad} outside [{lo}, {hi}]"),
                });
            }
        }
        Ok(Self {
            model,
            grid,
            inputs,
            decomposition,
        })
    }

    /// Same model, grid and inputs under another decomposition.
    pub fn with_decomposition(&self, decomposition: Decomposition) -> Result<Self, AbstractionError> {
        Self::new(
            self.model.clone(),
            self.grid.clone(),
            self.inputs.clone(),
            decomposition,
        )
    }

    pub fn model(&self) -> &Arc<dyn Dynamics> {
        &self.model
    }

    pub fn grid(&self) -> &UniformGrid {
        &self.grid
    }

    pub fn safe_set(&self) -> &IntervalBox {
        self.grid.domain()
    }

    pub fn inputs(&self) -> &InputDiscretization {
        &self.inputs
    }

    pub fn decomposition(&self) -> &Decomposition {
        &self.decomposition
    }

    pub fn cell_shape(&self, sigma: usize) -> Shape {
        Shape::new(self.grid.extents(&self.decomposition.subsystem(sigma).modeled))
    }

    pub fn input_shape(&self, sigma: usize) -> Shape {
        let counts = self.inputs.counts();
        Shape::new(
            self.decomposition
                .subsystem(sigma)
                .inputs
                .iter()
                .map(|j| counts[j])
                .collect(),
        )
    }

    /// Shape of the global input set.
    pub fn global_input_shape(&self) -> Shape {
        Shape::new(self.inputs.counts())
    }

    fn subsystem(&self, sigma: usize) -> Result<&SubsystemIndices, AbstractionError> {
        self.decomposition
            .subsystems()
            .get(sigma)
            .ok_or(AbstractionError::UnknownSubsystem(sigma))
    }

    /// Over-approximation of the successors of a subsystem cell under a
    /// subsystem input: the cell hull on modeled components, the full safe
    /// interval on the others, the chosen values on the subsystem's inputs
    /// and the full input interval on the others. `input` holds one value
    /// index per input component of the subsystem.
    pub fn phi(
        &self,
        sigma: usize,
        cell: &CellIndex,
        input: &[u32],
    ) -> Result<IntervalBox, AbstractionError> {
        let sub = self.subsystem(sigma)?;
        let hull = self.grid.cell_box(cell, &sub.modeled)?;
        if input.len() != sub.inputs.len() {
            return Err(AbstractionError::Mismatch(format!(
                "input index has {} entries, subsystem {sigma} has {} input components",
                input.len(),
                sub.inputs.len()
            )));
        }
        let mut states = self.safe_set().clone();
        for (k, c) in sub.modeled.iter().enumerate() {
            let (lo, hi) = hull.interval(k);
            states.set_interval(c, lo, hi);
        }
        let mut inputs = self.model.input_domain().clone();
        for (k, j) in sub.inputs.iter().enumerate() {
            let v = *self.inputs.values(j).get(input[k] as usize).ok_or(
                AbstractionError::InvalidInput {
                    id: input[k] as u64,
                    count: self.inputs.values(j).len() as u64,
                },
            )?;
            inputs.set_interval(j, v, v);
        }
        let mut out = IntervalBox::zeros(self.model.state_dim());
        self.model.reach_into(&states, &inputs, &mut out);
        Ok(out)
    }

    /// Builds the abstraction of subsystem `sigma`.
    pub fn build_subsystem(&self, sigma: usize) -> Result<SubsystemAbstraction, AbstractionError> {
        let sub = self.subsystem(sigma)?.clone();
        let cell_shape = Shape::try_new(self.grid.extents(&sub.modeled)).ok_or(
            AbstractionError::TooLarge {
                sigma,
                what: "cell set",
                size: u128::MAX,
            },
        )?;
        let input_shape = self.input_shape(sigma);
        let k = sub.modeled.len();
        if k > MAX_INLINE {
            return Err(AbstractionError::TooLarge {
                sigma,
                what: "modeled set",
                size: k as u128,
            });
        }
        let pairs = cell_shape.size() as u128 * input_shape.size() as u128;
        if pairs > u32::MAX as u128 || pairs * 2 * k as u128 > isize::MAX as u128 / 2 {
            return Err(AbstractionError::TooLarge {
                sigma,
                what: "pair table",
                size: pairs,
            });
        }
        if sub.modeled.iter().any(|c| self.grid.cells_per_component()[c] > u16::MAX as u32) {
            return Err(AbstractionError::TooLarge {
                sigma,
                what: "grid axis",
                size: self.grid.cells_per_component().iter().copied().max().unwrap_or(0) as u128,
            });
        }
        let n_inputs = input_shape.size() as usize;
        let n_cells = cell_shape.size() as usize;
        let mut bounds = vec![0u16; n_cells * n_inputs * 2 * k];
        let mut flags = vec![0u8; n_cells * n_inputs];

        let row = n_inputs * 2 * k;
        bounds
            .par_chunks_mut(row.max(1))
            .zip(flags.par_chunks_mut(n_inputs))
            .enumerate()
            .for_each_init(
                || Workspace::new(self, &sub, &cell_shape, &input_shape),
                |ws, (cell_id, (brow, frow))| {
                    ws.fill_cell(self, &sub, cell_id as u64);
                    for input_id in 0..n_inputs {
                        ws.fill_input(self, &sub, input_id as u64);
                        self.model.reach_into(&ws.states, &ws.inputs, &mut ws.reach);
                        let (f, b) = classify(self, &sub, &ws.reach);
                        frow[input_id] = f;
                        if let Some((lower, upper)) = b {
                            let slot = &mut brow[input_id * 2 * k..(input_id + 1) * 2 * k];
                            slot[..k].copy_from_slice(&lower[..k]);
                            slot[k..].copy_from_slice(&upper[..k]);
                        }
                    }
                },
            );

        let abs = SubsystemAbstraction {
            sigma,
            modeled: sub.modeled.clone(),
            controlled: sub.controlled.clone(),
            inputs: sub.inputs.clone(),
            cell_shape,
            input_shape,
            bounds,
            flags,
            reach_calls: pairs as u64,
        };
        debug_assert!(abs.check_nonempty().is_ok());
        Ok(abs)
    }

    /// Builds every subsystem in order.
    pub fn build_all(&self) -> Result<Vec<SubsystemAbstraction>, AbstractionError> {
        (0..self.decomposition.len())
            .map(|s| self.build_subsystem(s))
            .collect()
    }
}

/// Reusable per-worker buffers for the build loop.
struct Workspace {
    states: IntervalBox,
    inputs: IntervalBox,
    reach: IntervalBox,
    cell: Vec<u32>,
    input: Vec<u32>,
    cell_shape: Shape,
    input_shape: Shape,
}

impl Workspace {
    fn new(p: &Problem, sub: &SubsystemIndices, cell_shape: &Shape, input_shape: &Shape) -> Self {
        Self {
            states: p.safe_set().clone(),
            inputs: p.model.input_domain().clone(),
            reach: IntervalBox::zeros(p.model.state_dim()),
            cell: vec![0; sub.modeled.len()],
            input: vec![0; sub.inputs.len()],
            cell_shape: cell_shape.clone(),
            input_shape: input_shape.clone(),
        }
    }

    fn fill_cell(&mut self, p: &Problem, sub: &SubsystemIndices, cell_id: u64) {
        let mut id = cell_id;
        self.cell_shape.unflat_into(&mut id, &mut self.cell);
        for (k, c) in sub.modeled.iter().enumerate() {
            let i = self.cell[k];
            self.states
                .set_interval(c, p.grid.boundary(c, i), p.grid.boundary(c, i + 1));
        }
    }

    fn fill_input(&mut self, p: &Problem, sub: &SubsystemIndices, input_id: u64) {
        let mut id = input_id;
        self.input_shape.unflat_into(&mut id, &mut self.input);
        for (k, j) in sub.inputs.iter().enumerate() {
            let v = p.inputs.values(j)[self.input[k] as usize];
            self.inputs.set_interval(j, v, v);
        }
    }
}

const OUT: u8 = 1;
const NO_CELLS: u8 = 2;

type Bounds = ([u16; MAX_INLINE], [u16; MAX_INLINE]);
const MAX_INLINE: usize = 64;

/// Flags and cell range of one reach box; the range is `None` when the
/// modeled projection misses the safe set.
fn classify(p: &Problem, sub: &SubsystemIndices, reach: &IntervalBox) -> (u8, Option<Bounds>) {
    let safe = p.safe_set();
    let mut flags = 0u8;
    for c in sub.controlled.iter() {
        let (lo, hi) = reach.interval(c);
        let (a, b) = safe.interval(c);
        if !(lo >= a && hi <= b) {
            flags |= OUT;
            break;
        }
    }
    let mut lower = [0u16; MAX_INLINE];
    let mut upper = [0u16; MAX_INLINE];
    for (k, c) in sub.modeled.iter().enumerate() {
        let (lo, hi) = reach.interval(c);
        match p.grid.axis_range(c, lo, hi) {
            Some((l, u)) => {
                lower[k] = l as u16;
                upper[k] = u as u16;
            }
            None => return (OUT | NO_CELLS, None),
        }
    }
    (flags, Some((lower, upper)))
}

/// Transition relation of one subsystem. Successor cells of each
/// (cell, input) pair form an axis-aligned range and are stored as its
/// lower and upper corner; a separate flag records the `Out` successor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubsystemAbstraction {
    pub(crate) sigma: usize,
    pub(crate) modeled: ComponentSet,
    pub(crate) controlled: ComponentSet,
    pub(crate) inputs: ComponentSet,
    pub(crate) cell_shape: Shape,
    pub(crate) input_shape: Shape,
    pub(crate) bounds: Vec<u16>,
    pub(crate) flags: Vec<u8>,
    pub(crate) reach_calls: u64,
}

impl SubsystemAbstraction {
    pub fn sigma(&self) -> usize {
        self.sigma
    }

    pub fn modeled(&self) -> &ComponentSet {
        &self.modeled
    }

    pub fn controlled(&self) -> &ComponentSet {
        &self.controlled
    }

    pub fn input_components(&self) -> &ComponentSet {
        &self.inputs
    }

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

    pub fn n_pairs(&self) -> u64 {
        self.n_cells() * self.n_inputs()
    }

    pub fn reach_calls(&self) -> u64 {
        self.reach_calls
    }

    #[inline]
    pub fn pair_id(&self, cell_id: u64, input_id: u64) -> u64 {
        cell_id * self.n_inputs() + input_id
    }

    #[inline]
    pub fn has_out(&self, pair: u64) -> bool {
        self.flags[pair as usize] & OUT != 0
    }

    /// Raw corners of the successor range; `None` if no cell is reached.
    #[inline]
    pub fn range_slices(&self, pair: u64) -> Option<(&[u16], &[u16])> {
        if self.flags[pair as usize] & NO_CELLS != 0 {
            return None;
        }
        let k = self.modeled.len();
        let s = &self.bounds[pair as usize * 2 * k..(pair as usize + 1) * 2 * k];
        Some((&s[..k], &s[k..]))
    }

    pub fn successor_range(&self, pair: u64) -> Option<CellRange> {
        self.range_slices(pair).map(|(l, u)| CellRange {
            lower: l.iter().map(|&x| x as u32).collect(),
            upper: u.iter().map(|&x| x as u32).collect(),
        })
    }

    /// Expanded successor set, cells in row-major order followed by `Out`.
    pub fn successors(&self, cell: &CellIndex, input: &[u32]) -> Vec<AbstractState> {
        let pair = self.pair_id(self.cell_shape.flat(&cell.0), self.input_shape.flat(input));
        let mut out: Vec<AbstractState> = self
            .successor_range(pair)
            .map(|r| r.cells().map(AbstractState::Cell).collect())
            .unwrap_or_default();
        if self.has_out(pair) {
            out.push(AbstractState::Out);
        }
        out
    }

    /// Number of stored transitions, counting each successor cell and each
    /// `Out` edge once.
    pub fn transitions(&self) -> u64 {
        (0..self.n_pairs())
            .map(|p| {
                self.successor_range(p).map_or(0, |r| r.len()) + self.has_out(p) as u64
            })
            .sum()
    }

    /// Checks that every pair has a successor and that the cell range is
    /// empty exactly when the modeled projection misses the safe set.
    pub fn check_nonempty(&self) -> Result<(), u64> {
        for p in 0..self.n_pairs() {
            let f = self.flags[p as usize];
            if f & NO_CELLS != 0 && f & OUT == 0 {
                return Err(p);
            }
        }
        Ok(())
    }

    /// Overrides the `Out` flag of a pair.
    pub fn set_out(&mut self, pair: u64, out: bool) {
        let f = &mut self.flags[pair as usize];
        if out {
            *f |= OUT;
        } else {
            *f &= !OUT;
        }
    }

    /// Overrides the successor range of a pair.
    pub fn set_range(&mut self, pair: u64, range: Option<&CellRange>) {
        let k = self.modeled.len();
        let f = &mut self.flags[pair as usize];
        match range {
            None => *f |= NO_CELLS,
            Some(r) => {
                *f &= !NO_CELLS;
                let s = &mut self.bounds[pair as usize * 2 * k..(pair as usize + 1) * 2 * k];
                for i in 0..k {
                    s[i] = r.lower[i] as u16;
                    s[k + i] = r.upper[i] as u16;
                }
            }
        }
    }

    pub(crate) fn raw_flags(&self) -> &[u8] {
        &self.flags
    }

    pub(crate) fn raw_bounds(&self) -> &[u16] {
        &self.bounds
    }
}
