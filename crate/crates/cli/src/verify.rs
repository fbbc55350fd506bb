//! The `verify` subcommand: property checks on the configured instance.

use std::fs;
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use symctl::abstraction::Problem;
use symctl::bench::SpecKind;
use symctl::composition::{
    check_closure, check_corollary1, check_lemma1, check_maximality, check_nonempty, check_refinement_pair,
    sample_refinement, CompositionError, Composer,
};
use symctl::decomposition::compare;
use symctl::simulation::{cell_center, run_batch, sample_domain_cells, Policy};
use symctl::synthesis::{synthesize_all, ComposedController, FixpointMethod};

use crate::commands::{abstractions, controller_path, load_config, load_controllers, write_json};
use crate::config::DecompositionConfig;
use crate::{CliError, Common};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
enum Status {
    Pass,
    Fail,
    Skipped,
}

#[derive(Debug, Serialize)]
struct Check {
    name: String,
    status: Status,
    detail: Value,
}

struct Suite {
    checks: Vec<Check>,
    timings: Vec<Value>,
}

impl Suite {
    fn record(&mut self, name: &str, f: impl FnOnce() -> (Status, Value)) {
        let t = Instant::now();
        let (status, detail) = f();
        let seconds = t.elapsed().as_secs_f64();
        let tag = match status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skipped => "SKIP",
        };
        println!("{tag} {name}");
        self.timings.push(json!({"name": name, "seconds": seconds}));
        self.checks.push(Check {
            name: name.to_string(),
            status,
            detail,
        });
    }
}

fn verdict(holds: bool) -> Status {
    if holds {
        Status::Pass
    } else {
        Status::Fail
    }
}

fn outcome<T: Serialize>(r: Result<T, CompositionError>, holds: impl Fn(&T) -> bool) -> (Status, Value) {
    match r {
        Ok(v) => (verdict(holds(&v)), serde_json::to_value(&v).unwrap_or(Value::Null)),
        Err(CompositionError::TooLarge { pairs, cap }) => (
            Status::Skipped,
            json!({"reason": format!("{pairs} pairs exceed the exhaustive cap {cap}")}),
        ),
        Err(e) => (Status::Fail, json!({"error": e.to_string()})),
    }
}

fn synthesize(problem: &Problem, abs: &[symctl::abstraction::SubsystemAbstraction]) -> Result<ComposedController, CliError> {
    ComposedController::new(
        problem.decomposition().clone(),
        problem.grid().cells_per_component().to_vec(),
        synthesize_all(abs, FixpointMethod::Auto),
    )
    .map_err(|e| CliError::Other(e.to_string()))
}

pub fn run(common: &Common) -> Result<(), CliError> {
    let cfg = load_config(common)?;
    let problem = cfg.problem()?;
    let fingerprint = cfg.fingerprint();
    let v = &cfg.verification;
    let cap = v.exhaustive_cap as u128;
    fs::create_dir_all(&common.out)?;
    let start = Instant::now();

    let built = abstractions(&problem, &common.out, fingerprint, common.reuse)?;
    let abs = built.abstractions;
    let from_files = controller_path(&common.out, 0).exists();
    let cc = if from_files {
        load_controllers(&problem, &common.out, fingerprint)?
    } else {
        synthesize(&problem, &abs)?
    };
    let composer = Composer::new(&problem, &abs).map_err(|e| CliError::Other(e.to_string()))?;
    let mut suite = Suite {
        checks: Vec::new(),
        timings: Vec::new(),
    };

    suite.record("subsystem successors nonempty", || {
        let bad: Vec<Value> = abs
            .iter()
            .filter_map(|a| a.check_nonempty().err().map(|pair| json!({"sigma": a.sigma(), "pair": pair})))
            .collect();
        (verdict(bad.is_empty()), json!({"counterexamples": bad}))
    });
    suite.record("composed successors nonempty", || {
        outcome(check_nonempty(&composer, cap), |r| r.holds)
    });
    suite.record("out successor iff a controlled projection leaves the safe set", || {
        outcome(check_lemma1(&composer, cap), |r| r.holds)
    });
    suite.record("sampled concrete transitions are abstract transitions", || {
        let r = sample_refinement(&composer, v.samples, cfg.seed);
        (verdict(r.holds()), serde_json::to_value(&r).unwrap_or(Value::Null))
    });
    suite.record("controller domain is closed", || {
        outcome(check_closure(&composer, &cc, cap), |r| r.holds)
    });
    suite.record("closed-loop trajectories stay safe", || {
        let cells = sample_domain_cells(&cc, v.trajectories, cfg.seed);
        if cells.is_empty() {
            return (Status::Pass, json!({"trajectories": 0, "reason": "controller domain is empty"}));
        }
        let starts: Vec<Vec<f64>> = cells.iter().map(|c| cell_center(&problem, c)).collect();
        match run_batch(&problem, &cc, &starts, v.horizon, Policy::UniformRandom, cfg.seed) {
            Ok(runs) => {
                let unsafe_runs: Vec<Value> = runs
                    .iter()
                    .zip(&starts)
                    .filter(|(t, _)| !t.safe)
                    .take(16)
                    .map(|(t, x0)| json!({"x0": x0, "exit_step": t.exit_step}))
                    .collect();
                (
                    verdict(unsafe_runs.is_empty()),
                    json!({"trajectories": runs.len(), "horizon": v.horizon, "unsafe": unsafe_runs}),
                )
            }
            Err(e) => (Status::Fail, json!({"error": e.to_string()})),
        }
    });
    suite.record("composed controller against the direct maximal controller", || {
        outcome(
            composer.build(cap).and_then(|m| check_maximality(&m, &cc)),
            |r| r.holds(),
        )
    });

    let others: Vec<DecompositionConfig> = v.compare_with.clone().unwrap_or_else(|| {
        SpecKind::ALL
            .iter()
            .map(|k| DecompositionConfig::Named(k.name().to_string()))
            .collect()
    });
    let own = problem.decomposition().to_spec();
    for other in &others {
        let label = match other {
            DecompositionConfig::Named(n) => n.clone(),
            DecompositionConfig::Explicit(_) => "explicit decomposition".to_string(),
        };
        let q = match cfg.problem_with(other, "verification.compare_with") {
            Ok(q) => q,
            Err(e) if v.compare_with.is_some() => return Err(e),
            Err(_) => continue,
        };
        if q.decomposition().to_spec() == own {
            continue;
        }
        let (fine_is_own, witness) = match compare(problem.decomposition(), q.decomposition()) {
            Ok(w) => (true, w),
            Err(_) => match compare(q.decomposition(), problem.decomposition()) {
                Ok(w) => (false, w),
                Err(e) => {
                    suite.record(&format!("refinement against {label}"), || {
                        (Status::Skipped, json!({"reason": format!("not comparable: {e}")}))
                    });
                    continue;
                }
            },
        };
        if composer.n_pairs() > cap {
            suite.record(&format!("refinement against {label}"), || {
                (Status::Skipped, json!({"reason": "instance exceeds the exhaustive cap"}))
            });
            continue;
        }
        let q_abs = q.build_all().map_err(|e| CliError::Other(e.to_string()))?;
        let q_cc = synthesize(&q, &q_abs)?;
        let q_composer = Composer::new(&q, &q_abs).map_err(|e| CliError::Other(e.to_string()))?;
        let (fine, coarse, fine_cc, coarse_cc) = if fine_is_own {
            (&composer, &q_composer, &cc, &q_cc)
        } else {
            (&q_composer, &composer, &q_cc, &cc)
        };
        let relation = if fine_is_own { "finer than" } else { "coarser than" };
        suite.record(&format!("transition inclusion, configured decomposition {relation} {label}"), || {
            outcome(check_refinement_pair(coarse, fine, &witness, cap), |r| r.holds)
        });
        suite.record(&format!("controller inclusion, configured decomposition {relation} {label}"), || {
            outcome(check_corollary1(fine_cc, coarse_cc, cap), |r| r.holds)
        });
    }

    let failed: Vec<&str> = suite
        .checks
        .iter()
        .filter(|c| c.status == Status::Fail)
        .map(|c| c.name.as_str())
        .collect();
    let report = json!({
        "artifact_version": env!("CARGO_PKG_VERSION"),
        "command": "verify",
        "config": cfg,
        "fingerprint": format!("{fingerprint:016x}"),
        "controllers": if from_files { "loaded" } else { "synthesized" },
        "checks": suite.checks,
        "passed": failed.is_empty(),
        "timings": {"total_seconds": start.elapsed().as_secs_f64(), "checks": suite.timings},
    });
    write_json(&common.out.join("verification.json"), &report)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Verification(failed.join(", ")))
    }
}
