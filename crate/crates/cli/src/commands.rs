use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use symctl::abstraction::{Problem, SubsystemAbstraction};
use symctl::bench::{self, expected_reach_calls, BenchRow, rows_to_csv, RunOptions, RunResult, CASE1_RESOLUTIONS};
use symctl::persist::{self, PersistError};
use symctl::simulation::{cell_center, run_closed_loop, sample_domain_cells, Policy};
use symctl::synthesis::{ComposedController, CountStrategy, FixpointMethod};

use crate::config::RunConfig;
use crate::{CliError, Common};

pub fn load_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(s) = common.strategy {
        cfg.counting.strategy = s;
    }
    Ok(cfg)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn abstraction_path(dir: &Path, sigma: usize) -> PathBuf {
    dir.join(format!("abstraction_{sigma}.bin"))
}

pub fn controller_path(dir: &Path, sigma: usize) -> PathBuf {
    dir.join(format!("controller_{sigma}.bin"))
}

fn other(e: impl std::fmt::Display) -> CliError {
    CliError::Other(e.to_string())
}

pub struct Built {
    pub abstractions: Vec<SubsystemAbstraction>,
    pub build_times: Vec<f64>,
    pub build_seconds: f64,
    pub reused: Vec<bool>,
}

/// Builds every subsystem abstraction, or with `reuse` loads the ones saved
/// for the same configuration and saves the rest.
pub fn abstractions(problem: &Problem, dir: &Path, fingerprint: u64, reuse: bool) -> Result<Built, CliError> {
    let start = Instant::now();
    let m = problem.decomposition().len();
    let mut built = Built {
        abstractions: Vec::with_capacity(m),
        build_times: Vec::with_capacity(m),
        build_seconds: 0.0,
        reused: Vec::with_capacity(m),
    };
    for s in 0..m {
        let t = Instant::now();
        let path = abstraction_path(dir, s);
        let loaded = if reuse && path.exists() {
            match persist::read_abstraction(File::open(&path)?) {
                Ok((a, fp)) if fp == fingerprint && a.cell_shape() == &problem.cell_shape(s) => Some(a),
                Ok(_) => None,
                Err(e) => {
                    eprintln!("warning: ignoring {}: {e}", path.display());
                    None
                }
            }
        } else {
            None
        };
        built.reused.push(loaded.is_some());
        let a = match loaded {
            Some(a) => a,
            None => {
                let a = problem.build_subsystem(s).map_err(other)?;
                if reuse {
                    persist::write_abstraction(File::create(&path)?, &a, fingerprint).map_err(other)?;
                }
                a
            }
        };
        built.abstractions.push(a);
        built.build_times.push(t.elapsed().as_secs_f64());
    }
    built.build_seconds = start.elapsed().as_secs_f64();
    Ok(built)
}

/// Loads the controllers saved for `problem`.
pub fn load_controllers(problem: &Problem, dir: &Path, fingerprint: u64) -> Result<ComposedController, CliError> {
    let mut controllers = Vec::new();
    for s in 0..problem.decomposition().len() {
        let path = controller_path(dir, s);
        let file = File::open(&path).map_err(|e| CliError::MissingArtifact(format!("{}: {e}", path.display())))?;
        let (c, fp) = persist::read_controller(file).map_err(|e: PersistError| {
            CliError::MissingArtifact(format!("{}: {e}", path.display()))
        })?;
        let sub = problem.decomposition().subsystem(s);
        if fp != fingerprint
            || c.sigma() != s
            || c.modeled() != &sub.modeled
            || c.input_components() != &sub.inputs
            || c.cell_shape() != &problem.cell_shape(s)
            || c.input_shape() != &problem.input_shape(s)
        {
            return Err(CliError::MissingArtifact(format!(
                "{} was written for a different configuration",
                path.display()
            )));
        }
        controllers.push(c);
    }
    ComposedController::new(
        problem.decomposition().clone(),
        problem.grid().cells_per_component().to_vec(),
        controllers,
    )
    .map_err(|e| CliError::MissingArtifact(e.to_string()))
}

fn subsystem_rows(problem: &Problem, r: &RunResult) -> Vec<Value> {
    r.counters
        .iter()
        .map(|c| {
            let sub = problem.decomposition().subsystem(c.sigma);
            json!({
                "sigma": c.sigma,
                "controlled": sub.controlled,
                "modeled": sub.modeled,
                "inputs": sub.inputs,
                "states": c.states,
                "input_combinations": c.inputs,
                "transitions": c.transitions_stored,
                "domain_size": c.domain,
                "reach_calls": c.reach_calls,
                "expected_reach_calls": expected_reach_calls(problem, c.sigma).to_string(),
                "fixpoint_edge_visits": c.fixpoint_edge_visits,
                "fixpoint_method": c.fixpoint_method,
            })
        })
        .collect()
}

fn strategy_name(s: CountStrategy) -> Value {
    serde_json::to_value(s).unwrap_or(Value::Null)
}

pub fn synthesize(common: &Common, json_export: bool) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let problem = cfg.problem()?;
    let fingerprint = cfg.fingerprint();
    fs::create_dir_all(&common.out)?;
    write_json(&common.out.join("config.json"), &cfg)?;

    let built = abstractions(&problem, &common.out, fingerprint, common.reuse)?;
    let opts = RunOptions {
        fixpoint: FixpointMethod::Auto,
        strategy: cfg.counting.strategy,
        cap: cfg.counting.cap as u128,
    };
    let reused = built.reused.clone();
    let r = bench::run_with_abstractions(&problem, built.abstractions, built.build_times, built.build_seconds, &opts)
        .map_err(other)?;

    for (s, c) in r.controller.controllers().iter().enumerate() {
        persist::write_controller(File::create(controller_path(&common.out, s))?, c, fingerprint).map_err(other)?;
        if json_export {
            write_json(&common.out.join(format!("controller_{s}.json")), &persist::controller_to_json(c))?;
        }
    }

    let composed = match &r.domain {
        Ok(d) => json!({
            "cells": problem.grid().total_cells().to_string(),
            "domain_count": d.count.to_string(),
            "strategy": strategy_name(d.strategy),
        }),
        Err(e) => json!({
            "cells": problem.grid().total_cells().to_string(),
            "error": e.to_string(),
        }),
    };
    let report = json!({
        "artifact_version": env!("CARGO_PKG_VERSION"),
        "command": "synthesize",
        "config": cfg,
        "fingerprint": format!("{fingerprint:016x}"),
        "subsystems": subsystem_rows(&problem, &r),
        "composed": composed,
        "timings": {
            "build_seconds": r.build_seconds,
            "synthesis_seconds": r.synthesis_seconds,
            "count_seconds": r.count_seconds,
            "abstractions_reused": reused,
            "per_subsystem": r.counters.iter().map(|c| json!({
                "sigma": c.sigma,
                "build_seconds": c.build_seconds,
                "synthesis_seconds": c.synthesis_seconds,
            })).collect::<Vec<_>>(),
        },
    });
    write_json(&common.out.join("report.json"), &report)?;
    match r.domain {
        Ok(d) => {
            println!(
                "composed domain: {} of {} cells ({})",
                d.count,
                problem.grid().total_cells(),
                strategy_name(d.strategy).as_str().unwrap_or("")
            );
            Ok(())
        }
        Err(e) => Err(CliError::Counting(e)),
    }
}

pub fn simulate(common: &Common, x0: Option<Vec<f64>>, horizon: usize, policy: Policy) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let problem = cfg.problem()?;
    let cc = load_controllers(&problem, &common.out, cfg.fingerprint())?;
    let x0 = match x0 {
        Some(x) => {
            if x.len() != problem.grid().dim() {
                return Err(CliError::config(
                    "--x0",
                    format!("has {} components, expected {}", x.len(), problem.grid().dim()),
                ));
            }
            x
        }
        None => match sample_domain_cells(&cc, 1, cfg.seed).first() {
            Some(c) => cell_center(&problem, c),
            None => return Err(CliError::config("--x0", "controller domain is empty; give an initial state")),
        },
    };
    let t = run_closed_loop(&problem, &cc, &x0, horizon, policy, cfg.seed).map_err(other)?;
    fs::write(common.out.join("trajectory.csv"), t.to_csv())?;
    match t.exit_step {
        None => println!("safe for {horizon} steps"),
        Some(k) => println!("unsafe: left the safe set or the controller domain at step {k}"),
    }
    Ok(())
}

/// Non-timing fields of a benchmark row and its timings. Counts are
/// strings since they may exceed the JSON integer range.
fn bench_row(r: &BenchRow) -> (Value, Value) {
    let subsystems: Vec<Value> = r
        .subsystems
        .iter()
        .map(|c| {
            json!({
                "sigma": c.sigma,
                "states": c.states,
                "input_combinations": c.inputs,
                "reach_calls": c.reach_calls,
                "transitions": c.transitions_stored,
                "fixpoint_edge_visits": c.fixpoint_edge_visits,
                "fixpoint_method": c.fixpoint_method,
                "domain_size": c.domain,
            })
        })
        .collect();
    let row = json!({
        "case": r.case,
        "lambda_t": r.lambda_t,
        "lambda_u": r.lambda_u,
        "spec": r.spec,
        "cells": r.cells.to_string(),
        "domain_count": r.domain.map(|d| d.to_string()),
        "strategy": r.strategy.map(strategy_name),
        "status": r.status,
        "reach_calls": r.reach_calls,
        "transitions": r.transitions_stored,
        "fixpoint_edge_visits": r.fixpoint_edge_visits,
        "subsystems": subsystems,
    });
    let timings = json!({
        "build_seconds": r.build_seconds,
        "synthesis_seconds": r.synthesis_seconds,
        "subsystems": r.subsystems.iter().map(|c| json!({
            "sigma": c.sigma,
            "build_seconds": c.build_seconds,
            "synthesis_seconds": c.synthesis_seconds,
        })).collect::<Vec<_>>(),
    });
    (row, timings)
}

pub fn bench(case: u8, out: &Path, time_budget: Option<f64>, strategy: Option<CountStrategy>) -> Result<(), CliError> {
    let mut opts = RunOptions::default();
    if let Some(s) = strategy {
        opts.strategy = s;
    }
    let start = Instant::now();
    let rows = match case {
        1 => bench::run_case1(&CASE1_RESOLUTIONS, time_budget, &opts),
        _ => bench::run_case2(&opts),
    }
    .map_err(other)?;
    let total = start.elapsed().as_secs_f64();
    fs::create_dir_all(out)?;
    fs::write(out.join("tables.csv"), rows_to_csv(&rows))?;
    let (results, timings): (Vec<Value>, Vec<Value>) = rows
        .iter()
        .map(bench_row)
        .unzip();
    let report = json!({
        "artifact_version": env!("CARGO_PKG_VERSION"),
        "command": "bench",
        "case": case,
        "time_budget": time_budget,
        "strategy": strategy_name(opts.strategy),
        "rows": results,
        "timings": {"total_seconds": total, "rows": timings},
    });
    write_json(&out.join("report.json"), &report)?;
    for r in &rows {
        let domain = r.domain.map(|d| d.to_string()).unwrap_or_else(|| r.status.clone());
        println!(
            "case {} lambda_t={} lambda_u={} {:<12} domain {}",
            r.case,
            r.lambda_t,
            r.lambda_u,
            r.spec.name(),
            domain
        );
    }
    Ok(())
}
