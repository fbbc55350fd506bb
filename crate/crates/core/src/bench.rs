//! End-to-end pipeline runs with complexity counters, and the two thermal
//! building experiments.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abstraction::{AbstractionError, InputDiscretization, Problem, SubsystemAbstraction};
use crate::decomposition::{DecompositionError, DecompositionSpec};
use crate::dynamics::{Dynamics, DynamicsError, ThermalRing, ThermalRingParams};
use crate::geometry::{GeometryError, IntervalBox, UniformGrid};
use crate::synthesis::{
    maximal_safety, ComposeError, ComposedController, CountError, CountStrategy, DomainCount,
    FixpointMethod, DEFAULT_COUNT_CAP,
};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Decomposition(#[from] DecompositionError),
    #[error(transparent)]
    Abstraction(#[from] AbstractionError),
    #[error(transparent)]
    Compose(#[from] ComposeError),
}

/// Per-subsystem cost counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityCounters {
    pub sigma: usize,
    pub states: u64,
    pub inputs: u64,
    pub reach_calls: u64,
    pub transitions_stored: u64,
    pub fixpoint_edge_visits: u64,
    pub fixpoint_method: Option<FixpointMethod>,
    pub domain: u64,
    pub build_seconds: f64,
    pub synthesis_seconds: f64,
}

/// Reach calls a subsystem must make: one per (cell, input) pair.
pub fn expected_reach_calls(problem: &Problem, sigma: usize) -> u128 {
    let sub = problem.decomposition().subsystem(sigma);
    let lambda = problem.grid().cells_per_component();
    let counts = problem.inputs().counts();
    sub.modeled.iter().map(|i| lambda[i] as u128).product::<u128>()
        * sub.inputs.iter().map(|j| counts[j] as u128).product::<u128>()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub fixpoint: FixpointMethod,
    pub strategy: CountStrategy,
    pub cap: u128,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            fixpoint: FixpointMethod::Auto,
            strategy: CountStrategy::Auto,
            cap: DEFAULT_COUNT_CAP,
        }
    }
}

pub struct RunResult {
    pub abstractions: Vec<SubsystemAbstraction>,
    pub controller: ComposedController,
    pub counters: Vec<ComplexityCounters>,
    pub domain: Result<DomainCount, CountError>,
    pub build_seconds: f64,
    pub synthesis_seconds: f64,
    pub count_seconds: f64,
}

impl RunResult {
    /// Build plus synthesis wall time.
    pub fn seconds(&self) -> f64 {
        self.build_seconds + self.synthesis_seconds
    }
}

/// Builds every subsystem, synthesizes its maximal controller and counts the
/// composed domain.
pub fn run_problem(problem: &Problem, opts: &RunOptions) -> Result<RunResult, BenchError> {
    let start = Instant::now();
    let mut abstractions = Vec::with_capacity(problem.decomposition().len());
    let mut build_times = Vec::with_capacity(problem.decomposition().len());
    for s in 0..problem.decomposition().len() {
        let t = Instant::now();
        abstractions.push(problem.build_subsystem(s)?);
        build_times.push(t.elapsed().as_secs_f64());
    }
    let build_seconds = start.elapsed().as_secs_f64();
    run_with_abstractions(problem, abstractions, build_times, build_seconds, opts)
}

/// Like [`run_problem`] but with abstractions built earlier (for example
/// loaded from disk).
pub fn run_with_abstractions(
    problem: &Problem,
    abstractions: Vec<SubsystemAbstraction>,
    build_times: Vec<f64>,
    build_seconds: f64,
    opts: &RunOptions,
) -> Result<RunResult, BenchError> {
    let start = Instant::now();
    let timed: Vec<_> = abstractions
        .par_iter()
        .map(|a| {
            let t = Instant::now();
            let c = maximal_safety(a, opts.fixpoint);
            (c, t.elapsed().as_secs_f64())
        })
        .collect();
    let synthesis_seconds = start.elapsed().as_secs_f64();
    let (controllers, synth_times): (Vec<_>, Vec<_>) = timed.into_iter().unzip();

    let counters = abstractions
        .iter()
        .zip(&controllers)
        .enumerate()
        .map(|(s, (a, c))| ComplexityCounters {
            sigma: s,
            states: a.n_cells(),
            inputs: a.n_inputs(),
            reach_calls: a.reach_calls(),
            transitions_stored: a.transitions(),
            fixpoint_edge_visits: c.stats().edge_visits,
            fixpoint_method: c.stats().method,
            domain: c.domain_size(),
            build_seconds: build_times.get(s).copied().unwrap_or(0.0),
            synthesis_seconds: synth_times[s],
        })
        .collect();

    let controller = ComposedController::new(
        problem.decomposition().clone(),
        problem.grid().cells_per_component().to_vec(),
        controllers,
    )?;
    let t = Instant::now();
    let domain = controller.domain_count(opts.strategy, opts.cap);
    let count_seconds = t.elapsed().as_secs_f64();
    Ok(RunResult {
        abstractions,
        controller,
        counters,
        domain,
        build_seconds,
        synthesis_seconds,
        count_seconds,
    })
}

/// The three reference decompositions of a ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpecKind {
    Centralized,
    RingOverlap,
    Disjoint,
}

impl SpecKind {
    pub const ALL: [SpecKind; 3] = [SpecKind::Centralized, SpecKind::RingOverlap, SpecKind::Disjoint];

    pub fn name(self) -> &'static str {
        match self {
            SpecKind::Centralized => "centralized",
            SpecKind::RingOverlap => "ring-overlap",
            SpecKind::Disjoint => "disjoint",
        }
    }

    pub fn spec(self, n: usize) -> Result<DecompositionSpec, DecompositionError> {
        match self {
            SpecKind::Centralized => Ok(DecompositionSpec::centralized(n, n)),
            SpecKind::RingOverlap => DecompositionSpec::ring_overlap(n),
            SpecKind::Disjoint => Ok(DecompositionSpec::disjoint(n)),
        }
    }
}

impl std::str::FromStr for SpecKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        SpecKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown decomposition generator {s:?}"))
    }
}

/// Reference building with `n` rooms on a box safe set.
pub fn thermal_problem(
    safe: &[(f64, f64)],
    lambda_t: u32,
    lambda_u: usize,
    kind: SpecKind,
) -> Result<Problem, BenchError> {
    let n = safe.len();
    let params = ThermalRingParams::standard(n);
    let domain = IntervalBox::from_intervals(safe)?;
    params.check_safe_set(&domain)?;
    let model = Arc::new(ThermalRing::new(params)?);
    let grid = UniformGrid::uniform(domain, lambda_t)?;
    let inputs = InputDiscretization::uniform(model.input_domain(), &vec![lambda_u; n])?;
    let d = kind.spec(n)?.validate(n, n)?;
    Ok(Problem::new(model, grid, inputs, d)?)
}

pub const CASE1_SAFE: [(f64, f64); 4] = [(17.0, 22.0), (19.0, 22.0), (20.0, 23.0), (20.0, 22.0)];
pub const CASE1_RESOLUTIONS: [(u32, usize); 6] = [(5, 3), (5, 4), (10, 3), (10, 4), (20, 3), (20, 4)];

pub fn case1_problem(lambda_t: u32, lambda_u: usize, kind: SpecKind) -> Result<Problem, BenchError> {
    thermal_problem(&CASE1_SAFE, lambda_t, lambda_u, kind)
}

pub fn case2_problem(kind: SpecKind) -> Result<Problem, BenchError> {
    thermal_problem(&[(19.0, 21.0); 20], 10, 5, kind)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub case: u8,
    pub lambda_t: u32,
    pub lambda_u: usize,
    pub spec: SpecKind,
    pub cells: u128,
    /// `None` when skipped or uncountable.
    pub domain: Option<u128>,
    pub strategy: Option<CountStrategy>,
    pub status: String,
    pub reach_calls: u64,
    pub transitions_stored: u64,
    pub fixpoint_edge_visits: u64,
    pub build_seconds: f64,
    pub synthesis_seconds: f64,
    pub subsystems: Vec<ComplexityCounters>,
}

impl BenchRow {
    pub fn seconds(&self) -> f64 {
        self.build_seconds + self.synthesis_seconds
    }
}

fn row_from(case: u8, lambda_t: u32, lambda_u: usize, spec: SpecKind, p: &Problem, r: &RunResult) -> BenchRow {
    let (domain, strategy, status) = match &r.domain {
        Ok(d) => (Some(d.count), Some(d.strategy), "ok".to_string()),
        Err(e) => (None, None, e.to_string()),
    };
    BenchRow {
        case,
        lambda_t,
        lambda_u,
        spec,
        cells: p.grid().total_cells(),
        domain,
        strategy,
        status,
        reach_calls: r.counters.iter().map(|c| c.reach_calls).sum(),
        transitions_stored: r.counters.iter().map(|c| c.transitions_stored).sum(),
        fixpoint_edge_visits: r.counters.iter().map(|c| c.fixpoint_edge_visits).sum(),
        build_seconds: r.build_seconds,
        synthesis_seconds: r.synthesis_seconds,
        subsystems: r.counters.clone(),
    }
}

/// Runs every decomposition at every resolution. With a time budget, a
/// configuration is skipped when its pair count times the slowest per-pair
/// cost seen so far would exceed the remaining budget.
pub fn run_case1(
    resolutions: &[(u32, usize)],
    time_budget: Option<f64>,
    opts: &RunOptions,
) -> Result<Vec<BenchRow>, BenchError> {
    let start = Instant::now();
    let mut per_pair: f64 = 0.0;
    let mut rows = Vec::new();
    for &(lt, lu) in resolutions {
        for kind in SpecKind::ALL {
            let p = case1_problem(lt, lu, kind)?;
            let pairs: u128 = (0..p.decomposition().len())
                .map(|s| expected_reach_calls(&p, s))
                .sum();
            if let Some(budget) = time_budget {
                let remaining = budget - start.elapsed().as_secs_f64();
                let estimate = per_pair * pairs as f64;
                if per_pair > 0.0 && estimate > remaining {
                    rows.push(BenchRow {
                        case: 1,
                        lambda_t: lt,
                        lambda_u: lu,
                        spec: kind,
                        cells: p.grid().total_cells(),
                        domain: None,
                        strategy: None,
                        status: format!(
                            "skipped: estimated {estimate:.1} s exceeds remaining budget {remaining:.1} s"
                        ),
                        reach_calls: 0,
                        transitions_stored: 0,
                        fixpoint_edge_visits: 0,
                        build_seconds: 0.0,
                        synthesis_seconds: 0.0,
                        subsystems: Vec::new(),
                    });
                    continue;
                }
            }
            let r = run_problem(&p, opts)?;
            per_pair = per_pair.max(r.seconds() / pairs.max(1) as f64);
            rows.push(row_from(1, lt, lu, kind, &p, &r));
        }
    }
    Ok(rows)
}

/// The twenty-room building under the overlapping and the disjoint
/// decomposition.
pub fn run_case2(opts: &RunOptions) -> Result<Vec<BenchRow>, BenchError> {
    [SpecKind::RingOverlap, SpecKind::Disjoint]
        .into_iter()
        .map(|kind| {
            let p = case2_problem(kind)?;
            let r = run_problem(&p, opts)?;
            Ok(row_from(2, 10, 5, kind, &p, &r))
        })
        .collect()
}

pub const CSV_HEADER: &str = "case,lambda_t,lambda_u,spec,cells,domain,strategy,status,reach_calls,transitions_stored,fixpoint_edge_visits,build_seconds,synthesis_seconds,total_seconds";

/// Flat table with one line per configuration.
pub fn rows_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let strategy = r
            .strategy
            .map(|s| serde_json::to_value(s).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default())
            .unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},\"{}\",{},{},{},{:.6},{:.6},{:.6}",
            r.case,
            r.lambda_t,
            r.lambda_u,
            r.spec.name(),
            r.cells,
            r.domain.map(|d| d.to_string()).unwrap_or_default(),
            strategy,
            r.status.replace('"', "'"),
            r.reach_calls,
            r.transitions_stored,
            r.fixpoint_edge_visits,
            r.build_seconds,
            r.synthesis_seconds,
            r.seconds()
        );
    }
    out
}
