//! Brute-force reference implementations shared by the integration tests.
//! Nothing here calls the library's reach hull, cell lookup, composition
//! or fixpoint code.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::sync::Arc;

use symctl::abstraction::{InputDiscretization, Problem, SubsystemAbstraction};
use symctl::decomposition::DecompositionSpec;
use symctl::dynamics::{Dynamics, ThermalRing, ThermalRingParams};
use symctl::geometry::{IntervalBox, UniformGrid};
use symctl::synthesis::{synthesize_all, ComposedController, FixpointMethod};

pub fn thermal(safe: &[(f64, f64)], lambda: u32, lambda_u: usize, spec: DecompositionSpec) -> Problem {
    let n = safe.len();
    let model = Arc::new(ThermalRing::new(ThermalRingParams::standard(n)).unwrap());
    let grid = UniformGrid::uniform(IntervalBox::from_intervals(safe).unwrap(), lambda).unwrap();
    let inputs = InputDiscretization::uniform(model.input_domain(), &vec![lambda_u; n]).unwrap();
    Problem::new(model, grid, inputs, spec.validate(n, n).unwrap()).unwrap()
}

pub fn specs(n: usize) -> [DecompositionSpec; 3] {
    [
        DecompositionSpec::centralized(n, n),
        DecompositionSpec::ring_overlap(n).unwrap(),
        DecompositionSpec::disjoint(n),
    ]
}

pub fn controller(p: &Problem, abs: &[SubsystemAbstraction]) -> ComposedController {
    ComposedController::new(
        p.decomposition().clone(),
        p.grid().cells_per_component().to_vec(),
        synthesize_all(abs, FixpointMethod::Auto),
    )
    .unwrap()
}

/// Mixed-radix enumeration, first axis most significant.
pub fn multi_indices(extents: &[u32]) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    for &e in extents {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..e).map(move |i| {
                    let mut v = prefix.clone();
                    v.push(i);
                    v
                })
            })
            .collect();
    }
    out
}

fn flat(extents: &[u32], index: &[u32]) -> u64 {
    index.iter().zip(extents).fold(0u64, |acc, (&i, &e)| acc * e as u64 + i as u64)
}

/// Successor set of one subsystem pair: per modeled component the list of
/// cells met, or `None` when some component meets no cell; and the Out flag.
#[derive(Debug, Clone, PartialEq)]
pub struct OraclePair {
    pub cells: Option<Vec<(u32, u32)>>,
    pub out: bool,
}

/// Cells `k` whose half-open box `[b_k, b_{k+1})` (closed for the last one)
/// meets the closed interval `[lo, hi]`, by linear scan.
pub fn meeting_cells(grid: &UniformGrid, c: usize, lo: f64, hi: f64) -> Vec<u32> {
    let n = grid.cells_per_component()[c];
    (0..n)
        .filter(|&k| {
            let a = grid.boundary(c, k);
            let b = grid.boundary(c, k + 1);
            let below_top = if k + 1 == n { lo <= b } else { lo < b };
            below_top && hi >= a
        })
        .collect()
}

/// Variables each output may depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    /// Every state and input.
    Dense,
    /// Room `i` depends on rooms `i-1`, `i`, `i+1` and heater `i`.
    Ring,
}

impl Support {
    fn of(self, i: usize, n: usize, p: usize) -> (Vec<usize>, Vec<usize>) {
        match self {
            Support::Dense => ((0..n).collect(), (0..p).collect()),
            Support::Ring => {
                let mut s = vec![(i + n - 1) % n, i, (i + 1) % n];
                s.sort_unstable();
                s.dedup();
                (s, vec![i])
            }
        }
    }
}

/// Hull of `step` over every corner of the state and input boxes, restricted
/// per output to the corners of its support.
pub fn corner_hull(model: &dyn Dynamics, states: &[(f64, f64)], inputs: &[(f64, f64)], support: Support) -> Vec<(f64, f64)> {
    let n = states.len();
    let p = inputs.len();
    let mut hull = vec![(f64::INFINITY, f64::NEG_INFINITY); n];
    let outputs: Vec<usize> = match support {
        Support::Dense => vec![0],
        Support::Ring => (0..n).collect(),
    };
    for i in outputs {
        let (sx, su) = support.of(i, n, p);
        let mut x: Vec<f64> = states.iter().map(|s| s.0).collect();
        let mut u: Vec<f64> = inputs.iter().map(|s| s.0).collect();
        let m = sx.len() + su.len();
        for mask in 0u64..(1 << m) {
            for (k, &c) in sx.iter().enumerate() {
                x[c] = if mask >> k & 1 == 1 { states[c].1 } else { states[c].0 };
            }
            for (k, &j) in su.iter().enumerate() {
                u[j] = if mask >> (sx.len() + k) & 1 == 1 { inputs[j].1 } else { inputs[j].0 };
            }
            let next = model.step(&x, &u).unwrap();
            let targets: Vec<usize> = match support {
                Support::Dense => (0..n).collect(),
                Support::Ring => vec![i],
            };
            for t in targets {
                hull[t].0 = hull[t].0.min(next[t]);
                hull[t].1 = hull[t].1.max(next[t]);
            }
        }
    }
    hull
}

/// Reference successors of subsystem `sigma` at a local cell and input.
pub fn oracle_pair(p: &Problem, sigma: usize, cell: &[u32], input: &[u32], support: Support) -> OraclePair {
    let sub = p.decomposition().subsystem(sigma);
    let grid = p.grid();
    let safe = p.safe_set();
    let n = grid.dim();
    let mut states: Vec<(f64, f64)> = (0..n).map(|i| safe.interval(i)).collect();
    for (k, c) in sub.modeled.iter().enumerate() {
        states[c] = (grid.boundary(c, cell[k]), grid.boundary(c, cell[k] + 1));
    }
    let domain = p.model().input_domain();
    let mut inputs: Vec<(f64, f64)> = (0..domain.dim()).map(|j| domain.interval(j)).collect();
    for (k, j) in sub.inputs.iter().enumerate() {
        let v = p.inputs().values(j)[input[k] as usize];
        inputs[j] = (v, v);
    }
    let hull = corner_hull(p.model().as_ref(), &states, &inputs, support);

    let mut out = sub.controlled.iter().any(|c| {
        let (a, b) = safe.interval(c);
        hull[c].0 < a || hull[c].1 > b
    });
    let mut ranges = Vec::new();
    for c in sub.modeled.iter() {
        let met = meeting_cells(grid, c, hull[c].0, hull[c].1);
        match (met.first(), met.last()) {
            (Some(&l), Some(&u)) => {
                assert_eq!(met.len() as u32, u - l + 1);
                ranges.push((l, u));
            }
            _ => {
                out = true;
                return OraclePair { cells: None, out };
            }
        }
    }
    OraclePair {
        cells: Some(ranges),
        out,
    }
}

/// Every pair of the reference abstraction, in (cell, input) row-major order.
pub fn oracle_subsystem(p: &Problem, sigma: usize) -> Vec<OraclePair> {
    oracle_subsystem_with(p, sigma, Support::Dense)
}

pub fn oracle_subsystem_with(p: &Problem, sigma: usize, support: Support) -> Vec<OraclePair> {
    let cs = p.cell_shape(sigma);
    let is = p.input_shape(sigma);
    let inputs = multi_indices(is.extents());
    multi_indices(cs.extents())
        .iter()
        .flat_map(|c| inputs.iter().map(move |u| oracle_pair(p, sigma, c, u, support)))
        .collect()
}

/// First pair where the builder and the oracle disagree.
pub fn compare_subsystem(p: &Problem, abs: &SubsystemAbstraction) -> Result<u64, String> {
    compare_subsystem_with(p, abs, Support::Dense)
}

pub fn compare_subsystem_with(p: &Problem, abs: &SubsystemAbstraction, support: Support) -> Result<u64, String> {
    let reference = oracle_subsystem_with(p, abs.sigma(), support);
    if reference.len() as u64 != abs.n_pairs() {
        return Err(format!("{} pairs, oracle has {}", abs.n_pairs(), reference.len()));
    }
    for (pair, r) in reference.iter().enumerate() {
        let got = OraclePair {
            cells: abs
                .successor_range(pair as u64)
                .map(|r| r.lower.into_iter().zip(r.upper).collect()),
            out: abs.has_out(pair as u64),
        };
        if &got != r {
            return Err(format!("subsystem {} pair {pair}: got {got:?}, oracle {r:?}", abs.sigma()));
        }
    }
    Ok(reference.len() as u64)
}

/// Composed successors by enumeration: a global cell is a successor when
/// each subsystem lists its projection; Out when any subsystem has Out.
pub fn oracle_composed(p: &Problem, per_subsystem: &[Vec<OraclePair>], cell: &[u32], input: &[u32]) -> (BTreeSet<Vec<u32>>, bool) {
    let d = p.decomposition();
    let extents = p.grid().cells_per_component().to_vec();
    let counts = p.inputs().counts();
    let mut local = Vec::with_capacity(d.len());
    for (s, sub) in d.subsystems().iter().enumerate() {
        let lc: Vec<u32> = sub.modeled.iter().map(|c| cell[c]).collect();
        let lu: Vec<u32> = sub.inputs.iter().map(|j| input[j]).collect();
        let ce: Vec<u32> = sub.modeled.iter().map(|c| extents[c]).collect();
        let ie: Vec<u32> = sub.inputs.iter().map(|j| counts[j]).collect();
        let ni: u64 = ie.iter().map(|&e| e as u64).product();
        local.push(&per_subsystem[s][(flat(&ce, &lc) * ni + flat(&ie, &lu)) as usize]);
    }
    let out = local.iter().any(|r| r.out);
    let cells = multi_indices(&extents)
        .into_iter()
        .filter(|next| {
            d.subsystems().iter().zip(&local).all(|(sub, r)| match &r.cells {
                None => false,
                Some(ranges) => sub
                    .modeled
                    .iter()
                    .zip(ranges)
                    .all(|(c, &(l, u))| l <= next[c] && next[c] <= u),
            })
        })
        .collect();
    (cells, out)
}

/// Greatest fixed point by repeated full passes over explicit successor
/// sets. `succ(cell, input)` lists successor cell ids and the Out flag.
pub fn oracle_fixpoint(n_cells: u64, n_inputs: u64, succ: impl Fn(u64, u64) -> (Vec<u64>, bool)) -> Vec<Vec<bool>> {
    let table: Vec<Vec<(Vec<u64>, bool)>> = (0..n_cells)
        .map(|c| (0..n_inputs).map(|u| succ(c, u)).collect())
        .collect();
    let mut alive = vec![true; n_cells as usize];
    loop {
        let allowed: Vec<Vec<bool>> = table
            .iter()
            .map(|row| {
                row.iter()
                    .map(|(next, out)| !out && !next.is_empty() && next.iter().all(|&n| alive[n as usize]))
                    .collect()
            })
            .collect();
        let next_alive: Vec<bool> = allowed.iter().map(|r| r.iter().any(|&a| a)).collect();
        if next_alive == alive {
            return allowed;
        }
        alive = next_alive;
    }
}

/// Reference maximal controller of one subsystem.
pub fn oracle_subsystem_controller(p: &Problem, sigma: usize) -> Vec<Vec<bool>> {
    let reference = oracle_subsystem(p, sigma);
    let cs = p.cell_shape(sigma);
    let ni = p.input_shape(sigma).size();
    let ext = cs.extents().to_vec();
    oracle_fixpoint(cs.size(), ni, |c, u| {
        let r = &reference[(c * ni + u) as usize];
        let next = match &r.cells {
            None => Vec::new(),
            Some(ranges) => {
                let lo: Vec<u32> = ranges.iter().map(|r| r.0).collect();
                let span: Vec<u32> = ranges.iter().map(|r| r.1 - r.0 + 1).collect();
                multi_indices(&span)
                    .into_iter()
                    .map(|off| {
                        let idx: Vec<u32> = off.iter().zip(&lo).map(|(o, l)| o + l).collect();
                        flat(&ext, &idx)
                    })
                    .collect()
            }
        };
        (next, r.out)
    })
}

pub fn flat_index(extents: &[u32], index: &[u32]) -> u64 {
    flat(extents, index)
}
