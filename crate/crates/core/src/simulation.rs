//! Closed-loop simulation of the concrete system under a composed controller.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::Problem;
use crate::geometry::{AbstractState, CellIndex};
use crate::synthesis::ComposedController;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("initial state has {got} components, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("controller grid does not match the problem grid")]
    Mismatch,
    #[error("unknown policy `{0}` (expected lex-min, lex-max or uniform-random)")]
    UnknownPolicy(String),
}

/// How one input is picked from the allowed set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Policy {
    #[default]
    LexMin,
    LexMax,
    UniformRandom,
}

impl FromStr for Policy {
    type Err = SimulationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lex-min" => Ok(Self::LexMin),
            "lex-max" => Ok(Self::LexMax),
            "uniform-random" => Ok(Self::UniformRandom),
            _ => Err(SimulationError::UnknownPolicy(s.to_string())),
        }
    }
}

/// Allowed local input ids per subsystem at the cell containing `x`; every
/// factor is empty when `x` lies outside the grid.
pub fn refined_inputs(problem: &Problem, cc: &ComposedController, x: &[f64]) -> Vec<Vec<u64>> {
    match problem.grid().locate(x) {
        AbstractState::Cell(c) => cc.composed_allowed(&c),
        AbstractState::Out => vec![Vec::new(); cc.controllers().len()],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    /// `horizon + 1` states unless the run stopped early.
    pub states: Vec<Vec<f64>>,
    /// Input values applied after each state.
    pub inputs: Vec<Vec<f64>>,
    pub safe: bool,
    /// First step whose state is outside the safe set or has no allowed input.
    pub exit_step: Option<usize>,
}

impl Trajectory {
    pub fn to_csv(&self) -> String {
        let n = self.states.first().map_or(0, Vec::len);
        let p = self.inputs.first().map_or(0, Vec::len);
        let mut s = String::from("step");
        for i in 0..n {
            write!(s, ",x{i}").unwrap();
        }
        for j in 0..p {
            write!(s, ",u{j}").unwrap();
        }
        s.push('\n');
        for (t, x) in self.states.iter().enumerate() {
            write!(s, "{t}").unwrap();
            for v in x {
                write!(s, ",{v}").unwrap();
            }
            match self.inputs.get(t) {
                Some(u) => u.iter().for_each(|v| write!(s, ",{v}").unwrap()),
                None => (0..p).for_each(|_| s.push(',')),
            }
            s.push('\n');
        }
        s
    }
}

/// Runs `horizon` steps from `x0`, choosing each input from the refined
/// controller with `policy`.
pub fn run_closed_loop(
    problem: &Problem,
    cc: &ComposedController,
    x0: &[f64],
    horizon: usize,
    policy: Policy,
    seed: u64,
) -> Result<Trajectory, SimulationError> {
    let n = problem.grid().dim();
    if x0.len() != n {
        return Err(SimulationError::Dimension { expected: n, got: x0.len() });
    }
    if cc.extents() != problem.grid().cells_per_component() {
        return Err(SimulationError::Mismatch);
    }
    let safe = problem.safe_set();
    let values = problem.inputs().all();
    let model = problem.model();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut states = vec![x0.to_vec()];
    let mut inputs = Vec::new();
    let mut x = x0.to_vec();
    let mut next = vec![0.0; n];
    let mut ui = vec![0u32; values.len()];
    for t in 0..=horizon {
        let factors = refined_inputs(problem, cc, &x);
        if !safe.contains_point(&x) || factors.iter().any(Vec::is_empty) {
            return Ok(Trajectory {
                states,
                inputs,
                safe: false,
                exit_step: Some(t),
            });
        }
        if t == horizon {
            break;
        }
        for (c, f) in cc.controllers().iter().zip(&factors) {
            let id = match policy {
                Policy::LexMin => f[0],
                Policy::LexMax => f[f.len() - 1],
                Policy::UniformRandom => f[rng.gen_range(0..f.len())],
            };
            let local = c.input_shape().unflat(id);
            for (k, j) in c.input_components().iter().enumerate() {
                ui[j] = local[k];
            }
        }
        let u: Vec<f64> = ui.iter().enumerate().map(|(j, &k)| values[j][k as usize]).collect();
        model.step_into(&x, &u, &mut next);
        inputs.push(u);
        std::mem::swap(&mut x, &mut next);
        states.push(x.clone());
    }
    Ok(Trajectory {
        states,
        inputs,
        safe: true,
        exit_step: None,
    })
}

/// Independent runs from several initial states; run `i` uses seed `seed + i`.
pub fn run_batch(
    problem: &Problem,
    cc: &ComposedController,
    starts: &[Vec<f64>],
    horizon: usize,
    policy: Policy,
    seed: u64,
) -> Result<Vec<Trajectory>, SimulationError> {
    starts
        .par_iter()
        .enumerate()
        .map(|(i, x0)| run_closed_loop(problem, cc, x0, horizon, policy, seed.wrapping_add(i as u64)))
        .collect()
}

/// Centre of the cell `cell` of the problem grid.
pub fn cell_center(problem: &Problem, cell: &CellIndex) -> Vec<f64> {
    let g = problem.grid();
    cell.0
        .iter()
        .enumerate()
        .map(|(i, &k)| 0.5 * (g.boundary(i, k) + g.boundary(i, k + 1)))
        .collect()
}

/// Up to `count` domain cells drawn uniformly with `seed` (by rejection,
/// giving up after `100 * count` draws).
pub fn sample_domain_cells(cc: &ComposedController, count: usize, seed: u64) -> Vec<CellIndex> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let extents = cc.extents();
    for _ in 0..count.saturating_mul(100) {
        if out.len() == count {
            break;
        }
        let cell: Vec<u32> = extents.iter().map(|&e| rng.gen_range(0..e)).collect();
        if cc.in_domain(&cell) {
            out.push(CellIndex(cell));
        }
    }
    out
}
