//! Maximal safety controllers of subsystem abstractions, their composition
//! and exact counting of the composed domain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::SubsystemAbstraction;
use crate::decomposition::Decomposition;
use crate::geometry::{CellIndex, ComponentSet, Shape};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixpointMethod {
    /// Predecessor lists and a queue of dead cells.
    Worklist,
    /// Repeated passes over all pairs, testing each successor range against
    /// a summed-area table of dead cells. Needs no predecessor lists.
    Sweep,
    /// Sweep while it is cheaper than building predecessor lists, then
    /// finish with the worklist. Keeps sweeping when the lists would be too
    /// large to store.
    #[default]
    Auto,
}

/// Above this many predecessor entries `Auto` never builds the lists.
pub const AUTO_SWEEP_THRESHOLD: u64 = 256 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FixpointStats {
    /// `Auto` when a sweep was finished by the worklist.
    pub method: Option<FixpointMethod>,
    /// Predecessor entries visited (worklist) plus pair checks (sweep).
    pub edge_visits: u64,
    pub predecessor_entries: u64,
    pub rounds: u64,
}

/// Allowed inputs per cell of one subsystem, one bitset per cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SafetyController {
    pub(crate) sigma: usize,
    pub(crate) modeled: ComponentSet,
    pub(crate) inputs: ComponentSet,
    pub(crate) cell_shape: Shape,
    pub(crate) input_shape: Shape,
    pub(crate) words: usize,
    pub(crate) bits: Vec<u64>,
    #[serde(skip)]
    pub(crate) stats: FixpointStats,
}

impl SafetyController {
    /// Controller allowing nothing.
    pub fn empty_like(abs: &SubsystemAbstraction) -> Self {
        let words = (abs.n_inputs() as usize).div_ceil(64);
        Self {
            sigma: abs.sigma(),
            modeled: abs.modeled().clone(),
            inputs: abs.input_components().clone(),
            cell_shape: abs.cell_shape().clone(),
            input_shape: abs.input_shape().clone(),
            words,
            bits: vec![0; words * abs.n_cells() as usize],
            stats: FixpointStats::default(),
        }
    }

    pub fn sigma(&self) -> usize {
        self.sigma
    }

    pub fn modeled(&self) -> &ComponentSet {
        &self.modeled
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

    pub fn stats(&self) -> &FixpointStats {
        &self.stats
    }

    #[inline]
    fn row(&self, cell_id: u64) -> &[u64] {
        let w = self.words;
        &self.bits[cell_id as usize * w..(cell_id as usize + 1) * w]
    }

    #[inline]
    pub fn is_allowed(&self, cell_id: u64, input_id: u64) -> bool {
        self.row(cell_id)[(input_id / 64) as usize] >> (input_id % 64) & 1 == 1
    }

    pub fn allow(&mut self, cell_id: u64, input_id: u64) {
        self.bits[cell_id as usize * self.words + (input_id / 64) as usize] |= 1 << (input_id % 64);
    }

    pub fn disallow(&mut self, cell_id: u64, input_id: u64) {
        self.bits[cell_id as usize * self.words + (input_id / 64) as usize] &=
            !(1 << (input_id % 64));
    }

    #[inline]
    pub fn in_domain(&self, cell_id: u64) -> bool {
        self.row(cell_id).iter().any(|&w| w != 0)
    }

    pub fn allowed_count(&self, cell_id: u64) -> u64 {
        self.row(cell_id).iter().map(|w| w.count_ones() as u64).sum()
    }

    pub fn allowed(&self, cell_id: u64) -> impl Iterator<Item = u64> + '_ {
        let n = self.n_inputs();
        (0..n).filter(move |&u| self.is_allowed(cell_id, u))
    }

    pub fn domain_size(&self) -> u64 {
        (0..self.n_cells()).filter(|&c| self.in_domain(c)).count() as u64
    }

    pub fn is_domain_complete(&self) -> bool {
        (0..self.n_cells()).all(|c| self.in_domain(c))
    }

    pub fn is_domain_empty(&self) -> bool {
        self.bits.iter().all(|&w| w == 0)
    }

    pub(crate) fn raw_bits(&self) -> &[u64] {
        &self.bits
    }
}

/// Calls `f` with the flat id of every cell in the inclusive range.
#[inline]
pub(crate) fn for_each_in_range(lower: &[u16], upper: &[u16], strides: &[u64], mut f: impl FnMut(u64)) {
    let k = lower.len();
    if k == 0 {
        f(0);
        return;
    }
    let mut idx = [0u16; 64];
    idx[..k].copy_from_slice(lower);
    let mut id: u64 = lower.iter().zip(strides).map(|(&l, &s)| l as u64 * s).sum();
    loop {
        f(id);
        let mut a = k;
        loop {
            if a == 0 {
                return;
            }
            a -= 1;
            if idx[a] < upper[a] {
                idx[a] += 1;
                id += strides[a];
                break;
            }
            id -= (idx[a] - lower[a]) as u64 * strides[a];
            idx[a] = lower[a];
        }
    }
}

/// Controller allowing exactly the pairs without an `Out` successor.
fn initial(abs: &SubsystemAbstraction) -> (SafetyController, Vec<u32>) {
    let mut c = SafetyController::empty_like(abs);
    let ni = abs.n_inputs();
    let mut count = vec![0u32; abs.n_cells() as usize];
    for cell in 0..abs.n_cells() {
        for u in 0..ni {
            if !abs.has_out(abs.pair_id(cell, u)) {
                c.allow(cell, u);
                count[cell as usize] += 1;
            }
        }
    }
    (c, count)
}

/// Number of predecessor entries the worklist method would store.
pub fn predecessor_entries(abs: &SubsystemAbstraction) -> u64 {
    (0..abs.n_pairs())
        .into_par_iter()
        .map(|p| {
            if abs.has_out(p) {
                0
            } else {
                abs.range_slices(p)
                    .map_or(0, |(l, u)| l.iter().zip(u).map(|(&a, &b)| (b - a + 1) as u64).product())
            }
        })
        .sum()
}

/// The maximal safety controller: the greatest set of (cell, input) pairs
/// whose successors are all cells that keep at least one allowed input.
pub fn maximal_safety(abs: &SubsystemAbstraction, method: FixpointMethod) -> SafetyController {
    let (mut ctrl, mut count) = initial(abs);
    let k = abs.modeled().len();
    let mut stats = FixpointStats::default();
    let sweepable = k <= MAX_SWEEP_RANK;
    match method {
        FixpointMethod::Sweep if sweepable => {
            sweep(abs, &mut ctrl, &mut count, None, &mut stats);
        }
        FixpointMethod::Auto if sweepable => {
            // Sweep while it stays cheaper than building predecessor lists;
            // too many predecessor entries to store means sweeping regardless.
            let entries = predecessor_entries(abs);
            let budget = if entries > AUTO_SWEEP_THRESHOLD {
                None
            } else {
                Some(2 * entries)
            };
            let done = sweep(abs, &mut ctrl, &mut count, budget, &mut stats);
            if !done {
                worklist(abs, &mut ctrl, &mut count, &mut stats);
            }
        }
        _ => worklist(abs, &mut ctrl, &mut count, &mut stats),
    }
    ctrl.stats = stats;
    ctrl
}

const MAX_SWEEP_RANK: usize = 16;

fn worklist(
    abs: &SubsystemAbstraction,
    ctrl: &mut SafetyController,
    count: &mut [u32],
    stats: &mut FixpointStats,
) {
    let n_cells = abs.n_cells() as usize;
    let ni = abs.n_inputs();
    let strides = abs.cell_shape().strides().to_vec();

    // Only pairs still allowed can lose their input.
    let live = |p: u64| ctrl.is_allowed(p / ni, p % ni);
    let mut offsets = vec![0u64; n_cells + 1];
    for p in 0..abs.n_pairs() {
        if !live(p) {
            continue;
        }
        if let Some((l, u)) = abs.range_slices(p) {
            for_each_in_range(l, u, &strides, |s| offsets[s as usize + 1] += 1);
        }
    }
    for i in 0..n_cells {
        offsets[i + 1] += offsets[i];
    }
    let total = offsets[n_cells];
    let mut fill = offsets.clone();
    let mut preds = vec![0u32; total as usize];
    for p in 0..abs.n_pairs() {
        if !live(p) {
            continue;
        }
        if let Some((l, u)) = abs.range_slices(p) {
            for_each_in_range(l, u, &strides, |s| {
                let slot = &mut fill[s as usize];
                preds[*slot as usize] = p as u32;
                *slot += 1;
            });
        }
    }
    drop(fill);

    let mut queue: Vec<u32> = (0..n_cells as u32).filter(|&c| count[c as usize] == 0).collect();
    let mut visits = 0u64;
    while let Some(dead) = queue.pop() {
        let d = dead as usize;
        for &p in &preds[offsets[d] as usize..offsets[d + 1] as usize] {
            visits += 1;
            let (cell, u) = (p as u64 / ni, p as u64 % ni);
            if ctrl.is_allowed(cell, u) {
                ctrl.disallow(cell, u);
                count[cell as usize] -= 1;
                if count[cell as usize] == 0 {
                    queue.push(cell as u32);
                }
            }
        }
    }
    stats.method = Some(match stats.method {
        Some(FixpointMethod::Sweep) => FixpointMethod::Auto,
        _ => FixpointMethod::Worklist,
    });
    stats.edge_visits += visits;
    stats.predecessor_entries = total;
    stats.rounds += 1;
}

/// Summed-area table over a padded shape (`extent + 1` per axis, zero on
/// the leading face).
struct DeadTable {
    padded: Shape,
    sums: Vec<u32>,
}

impl DeadTable {
    fn new(shape: &Shape) -> Self {
        let padded = Shape::new(shape.extents().iter().map(|e| e + 1).collect());
        Self {
            sums: vec![0; padded.size() as usize],
            padded,
        }
    }

    fn rebuild(&mut self, shape: &Shape, dead: impl Fn(u64) -> bool) {
        self.sums.iter_mut().for_each(|v| *v = 0);
        let k = shape.rank();
        let mut idx = vec![0u32; k];
        for id in 0..shape.size() {
            if dead(id) {
                let mut i = id;
                shape.unflat_into(&mut i, &mut idx);
                let off: u64 = idx
                    .iter()
                    .zip(self.padded.strides())
                    .map(|(&x, &s)| (x as u64 + 1) * s)
                    .sum();
                self.sums[off as usize] = 1;
            }
        }
        // Prefix sums along each axis in turn.
        let size = self.padded.size() as usize;
        for a in 0..k {
            let stride = self.padded.strides()[a] as usize;
            let ext = self.padded.extents()[a] as usize;
            for off in 0..size {
                if !(off / stride).is_multiple_of(ext) {
                    self.sums[off] += self.sums[off - stride];
                }
            }
        }
    }

    /// Number of dead cells in the inclusive range.
    fn count(&self, lower: &[u16], upper: &[u16]) -> i64 {
        let k = lower.len();
        let strides = self.padded.strides();
        let mut total = 0i64;
        for mask in 0u32..(1 << k) {
            let mut off = 0u64;
            let mut neg = false;
            for a in 0..k {
                if mask >> a & 1 == 1 {
                    off += lower[a] as u64 * strides[a];
                    neg = !neg;
                } else {
                    off += (upper[a] as u64 + 1) * strides[a];
                }
            }
            let v = self.sums[off as usize] as i64;
            total += if neg { -v } else { v };
        }
        total
    }
}

/// Rounds of range checks against the current dead cells until nothing
/// changes. With a budget (in table lookups) it may stop early and return
/// false; the controller is then still a sound over-set of the fixed point.
fn sweep(
    abs: &SubsystemAbstraction,
    ctrl: &mut SafetyController,
    count: &mut [u32],
    budget: Option<u64>,
    stats: &mut FixpointStats,
) -> bool {
    let shape = abs.cell_shape().clone();
    let ni = abs.n_inputs();
    let lookups = 1u64 << abs.modeled().len();
    let mut table = DeadTable::new(&shape);
    stats.method = Some(FixpointMethod::Sweep);
    let mut spent = 0u64;
    loop {
        if budget.is_some_and(|b| spent > b) {
            return false;
        }
        stats.rounds += 1;
        table.rebuild(&shape, |c| count[c as usize] == 0);
        spent += shape.size() * shape.rank() as u64;
        let mut changed = false;
        for cell in 0..abs.n_cells() {
            if count[cell as usize] == 0 {
                continue;
            }
            for u in 0..ni {
                if !ctrl.is_allowed(cell, u) {
                    continue;
                }
                stats.edge_visits += 1;
                spent += lookups;
                let p = abs.pair_id(cell, u);
                let hits = abs.range_slices(p).map_or(0, |(l, h)| table.count(l, h));
                if hits > 0 {
                    ctrl.disallow(cell, u);
                    count[cell as usize] -= 1;
                    changed = true;
                }
            }
        }
        if !changed {
            return true;
        }
    }
}

/// Synthesizes every subsystem, in parallel.
pub fn synthesize_all(abs: &[SubsystemAbstraction], method: FixpointMethod) -> Vec<SafetyController> {
    abs.par_iter().map(|a| maximal_safety(a, method)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ComposeError {
    #[error("{0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountStrategy {
    /// Scan every cell.
    Enumerate,
    /// Transfer-matrix product over contiguous windows of a ring or path.
    Chain,
    /// Decide only the complete and the empty case.
    Bounds,
    /// Enumerate below the cap, otherwise bounds, otherwise chain.
    #[default]
    Auto,
}

impl std::str::FromStr for CountStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "enumerate" => Ok(Self::Enumerate),
            "chain" => Ok(Self::Chain),
            "bounds" => Ok(Self::Bounds),
            "auto" => Ok(Self::Auto),
            _ => Err(format!("unknown counting strategy {s:?}")),
        }
    }
}

impl std::fmt::Display for CountStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Enumerate => "enumerate",
            Self::Chain => "chain",
            Self::Bounds => "bounds",
            Self::Auto => "auto",
        })
    }
}

pub const DEFAULT_COUNT_CAP: u128 = 100_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CountError {
    #[error("uncountable with strategy {strategy}: {reason}")]
    Uncountable {
        strategy: CountStrategy,
        reason: String,
    },
    #[error("domain count overflows u128")]
    Overflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainCount {
    pub count: u128,
    pub strategy: CountStrategy,
}

/// The global controller: a cell's allowed global inputs are those whose
/// block on each subsystem's inputs is allowed by that subsystem at the
/// projected cell. Never materialized.
#[derive(Debug, Clone)]
pub struct ComposedController {
    decomposition: Decomposition,
    extents: Vec<u32>,
    controllers: Vec<SafetyController>,
    /// Per subsystem, the local stride of every global component (0 when unmodeled).
    lift: Vec<Vec<u64>>,
}

impl ComposedController {
    pub fn new(
        decomposition: Decomposition,
        extents: Vec<u32>,
        controllers: Vec<SafetyController>,
    ) -> Result<Self, ComposeError> {
        if controllers.len() != decomposition.len() {
            return Err(ComposeError::Mismatch(format!(
                "{} controllers for {} subsystems",
                controllers.len(),
                decomposition.len()
            )));
        }
        if extents.len() != decomposition.state_dim() {
            return Err(ComposeError::Mismatch("grid dimension differs from decomposition".into()));
        }
        let mut lift = Vec::with_capacity(controllers.len());
        for (s, (c, sub)) in controllers.iter().zip(decomposition.subsystems()).enumerate() {
            if c.sigma != s || c.modeled != sub.modeled || c.inputs != sub.inputs {
                return Err(ComposeError::Mismatch(format!(
                    "controller {s} was synthesized for different index sets"
                )));
            }
            if c.cell_shape.extents() != sub.modeled.iter().map(|i| extents[i]).collect::<Vec<_>>() {
                return Err(ComposeError::Mismatch(format!(
                    "controller {s} was synthesized on a different grid"
                )));
            }
            let mut l = vec![0u64; extents.len()];
            for (k, i) in sub.modeled.iter().enumerate() {
                l[i] = c.cell_shape.strides()[k];
            }
            lift.push(l);
        }
        Ok(Self {
            decomposition,
            extents,
            controllers,
            lift,
        })
    }

    pub fn decomposition(&self) -> &Decomposition {
        &self.decomposition
    }

    pub fn controllers(&self) -> &[SafetyController] {
        &self.controllers
    }

    pub fn controllers_mut(&mut self) -> &mut [SafetyController] {
        &mut self.controllers
    }

    pub fn extents(&self) -> &[u32] {
        &self.extents
    }

    pub fn total_cells(&self) -> u128 {
        self.extents.iter().map(|&e| e as u128).product()
    }

    /// Flat id of the projection of a global cell onto subsystem `sigma`.
    #[inline]
    pub fn local_cell(&self, sigma: usize, cell: &[u32]) -> u64 {
        cell.iter().zip(&self.lift[sigma]).map(|(&i, &s)| i as u64 * s).sum()
    }

    /// Flat id of the block of a global input seen by subsystem `sigma`.
    pub fn local_input(&self, sigma: usize, input: &[u32]) -> u64 {
        let c = &self.controllers[sigma];
        c.inputs
            .iter()
            .zip(c.input_shape.strides())
            .map(|(j, &s)| input[j] as u64 * s)
            .sum()
    }

    /// Allowed local input ids per subsystem; the global allowed set is their
    /// product over the input blocks.
    pub fn composed_allowed(&self, cell: &CellIndex) -> Vec<Vec<u64>> {
        self.controllers
            .iter()
            .enumerate()
            .map(|(s, c)| c.allowed(self.local_cell(s, &cell.0)).collect())
            .collect()
    }

    pub fn in_domain(&self, cell: &[u32]) -> bool {
        self.controllers
            .iter()
            .enumerate()
            .all(|(s, c)| c.in_domain(self.local_cell(s, cell)))
    }

    pub fn allows(&self, cell: &[u32], input: &[u32]) -> bool {
        self.controllers.iter().enumerate().all(|(s, c)| {
            c.is_allowed(self.local_cell(s, cell), self.local_input(s, input))
        })
    }

    /// Number of global inputs allowed at a cell.
    pub fn allowed_count(&self, cell: &[u32]) -> u128 {
        self.controllers
            .iter()
            .enumerate()
            .map(|(s, c)| c.allowed_count(self.local_cell(s, cell)) as u128)
            .product()
    }

    /// Exact number of cells in the composed domain.
    pub fn domain_count(&self, strategy: CountStrategy, cap: u128) -> Result<DomainCount, CountError> {
        let total = self.total_cells();
        let done = |count, strategy| Ok(DomainCount { count, strategy });
        match strategy {
            CountStrategy::Enumerate => {
                if total > cap {
                    return Err(CountError::Uncountable {
                        strategy,
                        reason: format!("{total} cells exceed the enumeration cap {cap}"),
                    });
                }
                done(self.enumerate(), strategy)
            }
            CountStrategy::Bounds => match self.bounds() {
                Some(c) => done(c, strategy),
                None => Err(CountError::Uncountable {
                    strategy,
                    reason: "local domains are neither all complete nor any empty".into(),
                }),
            },
            CountStrategy::Chain => done(self.chain(cap)?, strategy),
            CountStrategy::Auto => {
                if total <= cap {
                    return done(self.enumerate(), CountStrategy::Enumerate);
                }
                if let Some(c) = self.bounds() {
                    return done(c, CountStrategy::Bounds);
                }
                match self.chain(cap) {
                    Ok(c) => done(c, CountStrategy::Chain),
                    Err(CountError::Uncountable { reason, .. }) => Err(CountError::Uncountable {
                        strategy,
                        reason: format!(
                            "{total} cells exceed the cap {cap}, domains are partial and {reason}"
                        ),
                    }),
                    Err(e) => Err(e),
                }
            }
        }
    }

    fn bounds(&self) -> Option<u128> {
        if self.controllers.iter().any(|c| c.is_domain_empty()) {
            Some(0)
        } else if self.controllers.iter().all(|c| c.is_domain_complete()) {
            Some(self.total_cells())
        } else {
            None
        }
    }

    fn enumerate(&self) -> u128 {
        let shape = Shape::new(self.extents.clone());
        let total = shape.size();
        const BLOCK: u64 = 1 << 14;
        let blocks = total.div_ceil(BLOCK);
        (0..blocks)
            .into_par_iter()
            .map(|b| {
                let start = b * BLOCK;
                let end = (start + BLOCK).min(total);
                let mut idx = shape.unflat(start);
                let mut n = 0u128;
                for _ in start..end {
                    if self.in_domain(&idx) {
                        n += 1;
                    }
                    crate::geometry::next_index(&mut idx, &self.extents);
                }
                n
            })
            .sum()
    }

    /// Transfer-matrix count for decompositions whose modeled sets are
    /// contiguous (cyclic) windows of the component order.
    fn chain(&self, cap: u128) -> Result<u128, CountError> {
        let fail = |reason: String| CountError::Uncountable {
            strategy: CountStrategy::Chain,
            reason,
        };
        let n = self.extents.len();
        // (start, width) of each window.
        let mut windows = Vec::with_capacity(self.controllers.len());
        for (s, c) in self.controllers.iter().enumerate() {
            let m = &c.modeled;
            let w = m.len();
            let start = if w == n {
                0
            } else {
                let starts: Vec<usize> = m.iter().filter(|&i| !m.contains((i + n - 1) % n)).collect();
                if starts.len() != 1 {
                    return Err(fail(format!("modeled set of subsystem {s} is not a contiguous window")));
                }
                starts[0]
            };
            windows.push((start, w));
        }
        let width = windows.iter().map(|w| w.1).max().unwrap_or(1);
        let r = width - 1;
        let ext: Vec<u128> = self.extents.iter().map(|&e| e as u128).collect();
        let prod = |a: usize, b: usize| -> u128 { if a >= b { 1 } else { ext[a..b].iter().product() } };
        let prefix_size = prod(0, r);
        let mut work: u128 = 0;
        for t in r..n {
            work = work.saturating_add(prod(t + 1 - r, t + 1).saturating_mul(ext[t]));
        }
        let work = work.saturating_mul(prefix_size);
        if prefix_size > cap || work > cap.saturating_mul(100) {
            return Err(fail(format!(
                "window width {width} needs about {work} steps, above 100 x cap"
            )));
        }

        // Window checks as (position, local stride) lists, grouped by the
        // position that closes them.
        let mut closing: Vec<Vec<(usize, Vec<(usize, u64)>)>> = vec![Vec::new(); n];
        let mut wrapping: Vec<(usize, Vec<(usize, u64)>)> = Vec::new();
        for (s, &(start, w)) in windows.iter().enumerate() {
            let terms: Vec<(usize, u64)> = (0..w)
                .map(|o| {
                    let pos = (start + o) % n;
                    (pos, self.lift[s][pos])
                })
                .collect();
            if start + w - 1 < n {
                closing[start + w - 1].push((s, terms));
            } else {
                wrapping.push((s, terms));
            }
        }
        let ok = |s: usize, terms: &[(usize, u64)], value: &dyn Fn(usize) -> u32| {
            let id: u64 = terms.iter().map(|&(p, st)| value(p) as u64 * st).sum();
            self.controllers[s].in_domain(id)
        };

        let mut total: u128 = 0;
        let mut prefix = vec![0u32; r];
        'prefix: loop {
            let value = |p: usize| prefix[p];
            let prefix_ok = (0..r).all(|e| closing[e].iter().all(|(s, t)| ok(*s, t, &value)));
            if prefix_ok {
                // dp over the values of the last r positions
                let mut dp: Vec<u128> = vec![0; prefix_size as usize];
                let first: u64 = prefix
                    .iter()
                    .enumerate()
                    .map(|(p, &v)| v as u64 * prod(p + 1, r) as u64)
                    .sum();
                dp[first as usize] = 1;
                let mut buf = vec![0u32; r + 1];
                for t in r..n {
                    let lo = t - r;
                    let rest = prod(lo + 1, t) as u64;
                    let mut next: Vec<u128> = vec![0; prod(lo + 1, t + 1) as usize];
                    for (state, &cnt) in dp.iter().enumerate() {
                        if cnt == 0 {
                            continue;
                        }
                        let mut id = state as u64;
                        for p in (lo..t).rev() {
                            buf[p - lo] = (id % ext[p] as u64) as u32;
                            id /= ext[p] as u64;
                        }
                        for v in 0..self.extents[t] {
                            buf[r] = v;
                            let value = |p: usize| buf[p - lo];
                            if closing[t].iter().all(|(s, tm)| ok(*s, tm, &value)) {
                                let ns = if r == 0 {
                                    0
                                } else {
                                    (state as u64 % rest) * ext[t] as u64 + v as u64
                                };
                                let slot = &mut next[ns as usize];
                                *slot = slot.checked_add(cnt).ok_or(CountError::Overflow)?;
                            }
                        }
                    }
                    dp = next;
                }
                let lo = n - r;
                for (state, &cnt) in dp.iter().enumerate() {
                    if cnt == 0 {
                        continue;
                    }
                    let mut id = state as u64;
                    for p in (lo..n).rev() {
                        buf[p - lo] = (id % ext[p] as u64) as u32;
                        id /= ext[p] as u64;
                    }
                    let value = |p: usize| if p >= lo { buf[p - lo] } else { prefix[p] };
                    if wrapping.iter().all(|(s, tm)| ok(*s, tm, &value)) {
                        total = total.checked_add(cnt).ok_or(CountError::Overflow)?;
                    }
                }
            }
            if !crate::geometry::next_index(&mut prefix, &self.extents[..r]) {
                break 'prefix;
            }
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::{InputDiscretization, Problem};
    use crate::decomposition::DecompositionSpec;
    use crate::dynamics::{Dynamics, ThermalRing, ThermalRingParams};
    use crate::geometry::{IntervalBox, UniformGrid};
    use proptest::prelude::*;
    use std::collections::BTreeSet;
    use std::sync::Arc;

    const CASE1: [(f64, f64); 4] = [(17.0, 22.0), (19.0, 22.0), (20.0, 23.0), (20.0, 22.0)];

    fn thermal(n: usize, safe: &[(f64, f64)], lambda: u32, lambda_u: usize, spec: DecompositionSpec) -> Problem {
        let model = Arc::new(ThermalRing::new(ThermalRingParams::standard(n)).unwrap());
        let grid = UniformGrid::uniform(IntervalBox::from_intervals(safe).unwrap(), lambda).unwrap();
        let inputs = InputDiscretization::uniform(model.input_domain(), &vec![lambda_u; n]).unwrap();
        Problem::new(model, grid, inputs, spec.validate(n, n).unwrap()).unwrap()
    }

    fn compose(p: &Problem, method: FixpointMethod) -> ComposedController {
        let abs = p.build_all().unwrap();
        let ctrl = synthesize_all(&abs, method);
        ComposedController::new(
            p.decomposition().clone(),
            p.grid().cells_per_component().to_vec(),
            ctrl,
        )
        .unwrap()
    }

    /// Greatest fixed point by plain iteration over explicit successor sets.
    fn brute_force(abs: &SubsystemAbstraction) -> BTreeSet<(u64, u64)> {
        let mut allowed: BTreeSet<(u64, u64)> = BTreeSet::new();
        for c in 0..abs.n_cells() {
            for u in 0..abs.n_inputs() {
                if !abs.has_out(abs.pair_id(c, u)) {
                    allowed.insert((c, u));
                }
            }
        }
        loop {
            let alive: BTreeSet<u64> = allowed.iter().map(|p| p.0).collect();
            let next: BTreeSet<(u64, u64)> = allowed
                .iter()
                .copied()
                .filter(|&(c, u)| {
                    let cell = CellIndex(abs.cell_shape().unflat(c));
                    abs.successors(&cell, &abs.input_shape().unflat(u))
                        .iter()
                        .all(|s| s.cell().is_some_and(|s| alive.contains(&abs.cell_shape().flat(&s.0))))
                })
                .collect();
            if next == allowed {
                return allowed;
            }
            allowed = next;
        }
    }

    fn as_set(c: &SafetyController) -> BTreeSet<(u64, u64)> {
        (0..c.n_cells())
            .flat_map(|cell| c.allowed(cell).map(move |u| (cell, u)))
            .collect()
    }

    #[test]
    fn case1_coarse_counts() {
        let p = thermal(4, &CASE1, 5, 3, DecompositionSpec::centralized(4, 4));
        let cc = compose(&p, FixpointMethod::Worklist);
        assert_eq!(cc.domain_count(CountStrategy::Enumerate, DEFAULT_COUNT_CAP).unwrap().count, 525);
        for spec in [DecompositionSpec::ring_overlap(4).unwrap(), DecompositionSpec::disjoint(4)] {
            let cc = compose(&p.with_decomposition(spec.validate(4, 4).unwrap()).unwrap(), FixpointMethod::Auto);
            assert_eq!(cc.domain_count(CountStrategy::Auto, DEFAULT_COUNT_CAP).unwrap().count, 0);
        }
    }

    #[test]
    fn sweep_matches_worklist() {
        for (lambda, spec) in [
            (5, DecompositionSpec::centralized(4, 4)),
            (10, DecompositionSpec::ring_overlap(4).unwrap()),
            (10, DecompositionSpec::disjoint(4)),
        ] {
            let p = thermal(4, &CASE1, lambda, 3, spec);
            for a in p.build_all().unwrap() {
                let w = maximal_safety(&a, FixpointMethod::Worklist);
                let s = maximal_safety(&a, FixpointMethod::Sweep);
                assert_eq!(w.bits, s.bits);
                assert!(s.stats().rounds >= 1);
            }
        }
    }

    #[test]
    fn interrupted_sweep_finishes_with_worklist() {
        let p = thermal(4, &CASE1, 10, 3, DecompositionSpec::centralized(4, 4));
        let a = p.build_subsystem(0).unwrap();
        let reference = maximal_safety(&a, FixpointMethod::Worklist);
        let (mut ctrl, mut count) = initial(&a);
        let mut stats = FixpointStats::default();
        assert!(!sweep(&a, &mut ctrl, &mut count, Some(0), &mut stats));
        worklist(&a, &mut ctrl, &mut count, &mut stats);
        assert_eq!(ctrl.bits, reference.bits);
        assert_eq!(stats.method, Some(FixpointMethod::Auto));
        assert_eq!(maximal_safety(&a, FixpointMethod::Auto).bits, reference.bits);
    }

    #[test]
    fn worklist_matches_brute_force() {
        let safe = [(17.0, 22.0), (19.0, 22.0), (20.0, 23.0)];
        for spec in [
            DecompositionSpec::centralized(3, 3),
            DecompositionSpec::ring_overlap(3).unwrap(),
            DecompositionSpec::disjoint(3),
        ] {
            let p = thermal(3, &safe, 4, 2, spec);
            for a in p.build_all().unwrap() {
                assert!(a.n_pairs() <= 2000);
                assert_eq!(as_set(&maximal_safety(&a, FixpointMethod::Worklist)), brute_force(&a));
            }
        }
    }

    #[test]
    fn all_out_gives_empty_controller() {
        let p = thermal(4, &CASE1, 5, 3, DecompositionSpec::disjoint(4));
        let mut a = p.build_subsystem(0).unwrap();
        for pair in 0..a.n_pairs() {
            a.set_out(pair, true);
        }
        let c = maximal_safety(&a, FixpointMethod::Worklist);
        assert!(c.is_domain_empty());
        assert_eq!(c.stats().edge_visits, 0);
    }

    #[test]
    fn controller_is_closed() {
        let p = thermal(4, &CASE1, 10, 3, DecompositionSpec::ring_overlap(4).unwrap());
        for a in p.build_all().unwrap() {
            let c = maximal_safety(&a, FixpointMethod::Auto);
            for cell in 0..c.n_cells() {
                for u in c.allowed(cell) {
                    let pair = a.pair_id(cell, u);
                    assert!(!a.has_out(pair));
                    let (l, h) = a.range_slices(pair).unwrap();
                    for_each_in_range(l, h, a.cell_shape().strides(), |s| assert!(c.in_domain(s)));
                }
            }
        }
    }

    #[test]
    fn composed_allowed_factors() {
        let p = thermal(4, &CASE1, 10, 3, DecompositionSpec::ring_overlap(4).unwrap());
        let cc = compose(&p, FixpointMethod::Auto);
        let mut seen_inside = false;
        let mut seen_outside = false;
        for id in 0..10_000u64 {
            let cell = CellIndex(Shape::new(vec![10; 4]).unflat(id));
            let f = cc.composed_allowed(&cell);
            let product: u128 = f.iter().map(|x| x.len() as u128).product();
            assert_eq!(product, cc.allowed_count(&cell.0));
            assert_eq!(product > 0, cc.in_domain(&cell.0));
            if product > 0 {
                seen_inside = true;
                let input: Vec<u32> = f.iter().map(|x| x[0] as u32).collect();
                assert!(cc.allows(&cell.0, &input));
            } else {
                seen_outside = true;
            }
        }
        assert!(seen_inside && seen_outside);
    }

    #[test]
    fn strategies_agree_on_case1() {
        let p = thermal(4, &CASE1, 10, 3, DecompositionSpec::ring_overlap(4).unwrap());
        let cc = compose(&p, FixpointMethod::Auto);
        let e = cc.domain_count(CountStrategy::Enumerate, DEFAULT_COUNT_CAP).unwrap();
        let c = cc.domain_count(CountStrategy::Chain, DEFAULT_COUNT_CAP).unwrap();
        assert_eq!(e.count, 8710);
        assert_eq!(c.count, 8710);
        assert!(cc.domain_count(CountStrategy::Bounds, DEFAULT_COUNT_CAP).is_err());
        assert!(matches!(
            cc.domain_count(CountStrategy::Auto, 100),
            Err(CountError::Uncountable { strategy: CountStrategy::Auto, .. })
        ));
        assert!(cc.domain_count(CountStrategy::Enumerate, 100).is_err());
    }

    #[test]
    fn auto_falls_back_to_chain() {
        let p = thermal(4, &CASE1, 10, 3, DecompositionSpec::ring_overlap(4).unwrap());
        let cc = compose(&p, FixpointMethod::Auto);
        let r = cc.domain_count(CountStrategy::Auto, 5000).unwrap();
        assert_eq!(r, DomainCount { count: 8710, strategy: CountStrategy::Chain });
    }

    /// Ring composed controller with random local domains.
    fn random_ring(n: usize, lambda: u32, width: usize, seeds: &[u64]) -> ComposedController {
        let spec = DecompositionSpec {
            subsystems: (0..n)
                .map(|s| crate::decomposition::SubsystemSpec {
                    controlled: vec![s],
                    modeled: (0..width).map(|o| (s + n - width / 2 + o) % n).collect(),
                    inputs: vec![s],
                })
                .collect(),
        };
        let d = spec.validate(n, n).unwrap();
        let controllers = d
            .subsystems()
            .iter()
            .enumerate()
            .map(|(s, sub)| {
                let cell_shape = Shape::new(vec![lambda; sub.modeled.len()]);
                let mut c = SafetyController {
                    sigma: s,
                    modeled: sub.modeled.clone(),
                    inputs: sub.inputs.clone(),
                    input_shape: Shape::new(vec![1]),
                    words: 1,
                    bits: vec![0; cell_shape.size() as usize],
                    cell_shape,
                    stats: FixpointStats::default(),
                };
                let mut x = seeds[s % seeds.len()].wrapping_mul(6364136223846793005).wrapping_add(s as u64);
                for cell in 0..c.n_cells() {
                    x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    if !(x >> 33).is_multiple_of(4) {
                        c.allow(cell, 0);
                    }
                }
                c
            })
            .collect();
        ComposedController::new(d, vec![lambda; n], controllers).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn chain_equals_enumerate(
            n in 3usize..=6,
            lambda in 2u32..=4,
            width in 1usize..=3,
            seeds in proptest::collection::vec(any::<u64>(), 1..4),
        ) {
            let cc = random_ring(n, lambda, width, &seeds);
            let e = cc.domain_count(CountStrategy::Enumerate, DEFAULT_COUNT_CAP).unwrap();
            let c = cc.domain_count(CountStrategy::Chain, DEFAULT_COUNT_CAP).unwrap();
            prop_assert_eq!(e.count, c.count);
        }
    }

    #[test]
    fn chain_rejects_scattered_windows() {
        let spec = DecompositionSpec {
            subsystems: vec![
                crate::decomposition::SubsystemSpec { controlled: vec![0], modeled: vec![0, 2], inputs: vec![0] },
                crate::decomposition::SubsystemSpec { controlled: vec![1], modeled: vec![1], inputs: vec![1] },
                crate::decomposition::SubsystemSpec { controlled: vec![2], modeled: vec![2], inputs: vec![2] },
                crate::decomposition::SubsystemSpec { controlled: vec![3], modeled: vec![3], inputs: vec![3] },
                crate::decomposition::SubsystemSpec { controlled: vec![4], modeled: vec![4], inputs: vec![4] },
            ],
        };
        let p = thermal(5, &[(17.0, 22.0); 5], 3, 2, spec);
        let cc = compose(&p, FixpointMethod::Auto);
        assert!(matches!(
            cc.domain_count(CountStrategy::Chain, DEFAULT_COUNT_CAP),
            Err(CountError::Uncountable { strategy: CountStrategy::Chain, .. })
        ));
    }

    #[test]
    fn range_iteration_matches_cells() {
        let shape = Shape::new(vec![4, 3, 5]);
        let mut got = Vec::new();
        for_each_in_range(&[1, 0, 2], &[2, 2, 3], shape.strides(), |id| got.push(id));
        let r = crate::geometry::CellRange { lower: vec![1, 0, 2], upper: vec![2, 2, 3] };
        let want: Vec<u64> = r.cells().map(|c| shape.flat(&c.0)).collect();
        assert_eq!(got, want);
    }
}
