//! Run configuration: a JSON document describing the model, safe set, grid,
//! input discretization, decomposition, counting and verification settings.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use symctl::abstraction::{InputDiscretization, Problem};
use symctl::bench::SpecKind;
use symctl::decomposition::{DecompositionSpec, SubsystemSpec};
use symctl::dynamics::{Dynamics, MonotoneModel, ThermalRing, ThermalRingParams};
use symctl::geometry::{IntervalBox, UniformGrid};
use symctl::synthesis::{CountStrategy, DEFAULT_COUNT_CAP};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// One `[lo, hi]` interval per state component.
    pub safe_set: Vec<[f64; 2]>,
    pub grid: PerComponent<u32>,
    pub inputs: InputsConfig,
    pub decomposition: DecompositionConfig,
    #[serde(default)]
    pub counting: CountingConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub verification: VerificationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// [`ThermalConfig`] or [`AffineConfig`] depending on `kind`.
    #[serde(default, skip_serializing_if = "Value::is_null")]
    pub params: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    ThermalRing,
    /// `x+ = A x + B u + c` with inputs in `input_domain`.
    GenericMonotone,
}

fn params<T: serde::de::DeserializeOwned>(v: &Value) -> Result<T, CliError> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "model.params".to_string() } else { format!("model.params.{path}") };
        CliError::config(&field, e.into_inner().to_string())
    })
}

/// Thermal ring parameters; omitted ones take the reference values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalConfig {
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub outside_temp: Option<f64>,
    pub heater_temp: Option<f64>,
    pub input_max: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineConfig {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub input_domain: Vec<[f64; 2]>,
}

/// A scalar broadcast to every component, or one value per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerComponent<T> {
    All(T),
    Each(Vec<T>),
}

impl<T: Copy> PerComponent<T> {
    fn expand(&self, n: usize, field: &str) -> Result<Vec<T>, CliError> {
        match self {
            PerComponent::All(v) => Ok(vec![*v; n]),
            PerComponent::Each(v) if v.len() == n => Ok(v.clone()),
            PerComponent::Each(v) => Err(CliError::config(field, format!("has {} entries, expected {n}", v.len()))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputsConfig {
    /// Evenly spaced values over the model's input domain.
    Count(PerComponent<usize>),
    /// Evenly spaced values over an explicit range.
    Uniform { count: PerComponent<usize>, range: [f64; 2] },
    Values { values: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DecompositionConfig {
    /// "centralized", "ring-overlap" or "disjoint".
    Named(String),
    Explicit(Vec<SubsystemSpec>),
}

impl DecompositionConfig {
    fn spec(&self, n: usize, p: usize, field: &str) -> Result<DecompositionSpec, CliError> {
        match self {
            DecompositionConfig::Named(name) => {
                let kind: SpecKind = name.parse().map_err(|e: String| CliError::config(field, e))?;
                let spec = match kind {
                    SpecKind::Centralized => Ok(DecompositionSpec::centralized(n, p)),
                    _ if n != p => Err(CliError::config(
                        field,
                        format!("generator {name:?} needs as many inputs as states ({p} != {n})"),
                    )),
                    _ => kind.spec(n).map_err(|e| CliError::config(field, e.to_string())),
                }?;
                Ok(spec)
            }
            DecompositionConfig::Explicit(subs) => Ok(DecompositionSpec {
                subsystems: subs.clone(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountingConfig {
    #[serde(default)]
    pub strategy: CountStrategy,
    #[serde(default = "default_cap")]
    pub cap: u64,
}

fn default_cap() -> u64 {
    DEFAULT_COUNT_CAP as u64
}

impl Default for CountingConfig {
    fn default() -> Self {
        Self {
            strategy: CountStrategy::Auto,
            cap: DEFAULT_COUNT_CAP as u64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationConfig {
    /// Pair limit for exhaustive checks and the materialized relation.
    pub exhaustive_cap: u64,
    pub samples: u64,
    pub trajectories: usize,
    pub horizon: usize,
    /// Decompositions to compare against; defaults to every applicable generator.
    pub compare_with: Option<Vec<DecompositionConfig>>,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            exhaustive_cap: symctl::composition::DEFAULT_COMPOSED_CAP as u64,
            samples: 100_000,
            trajectories: 100,
            horizon: 10_000,
            compare_with: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<document>".to_string() } else { path };
            CliError::config(&field, e.into_inner().to_string())
        })
    }

    pub fn state_dim(&self) -> usize {
        self.safe_set.len()
    }

    /// Digest of everything the abstractions depend on.
    pub fn fingerprint(&self) -> u64 {
        let key = serde_json::json!({
            "model": self.model,
            "safe_set": self.safe_set,
            "grid": self.grid,
            "inputs": self.inputs,
            "decomposition": self.decomposition,
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn model(&self) -> Result<Arc<dyn Dynamics>, CliError> {
        let n = self.state_dim();
        match self.model.kind {
            ModelKind::ThermalRing => {
                let t: ThermalConfig = match &self.model.params {
                    Value::Null => ThermalConfig::default(),
                    v => params(v)?,
                };
                let d = ThermalRingParams::standard(n);
                let params = ThermalRingParams {
                    rooms: n,
                    alpha: t.alpha.unwrap_or(d.alpha),
                    beta: t.beta.unwrap_or(d.beta),
                    gamma: t.gamma.unwrap_or(d.gamma),
                    outside_temp: t.outside_temp.unwrap_or(d.outside_temp),
                    heater_temp: t.heater_temp.unwrap_or(d.heater_temp),
                    input_max: t.input_max.unwrap_or(d.input_max),
                };
                params
                    .check_safe_set(&self.safe_box()?)
                    .map_err(|e| CliError::config("model.params", e.to_string()))?;
                Ok(Arc::new(ThermalRing::new(params).map_err(|e| CliError::config("model.params", e.to_string()))?))
            }
            ModelKind::GenericMonotone => {
                let a: AffineConfig = params(&self.model.params)?;
                if a.a.len() != n {
                    return Err(CliError::config("model.params.a", format!("has {} rows, expected {n}", a.a.len())));
                }
                if let Some(i) = a.a.iter().position(|r| r.len() != n) {
                    return Err(CliError::config(&format!("model.params.a[{i}]"), format!("expected {n} entries")));
                }
                let p = a.input_domain.len();
                if a.b.len() != n {
                    return Err(CliError::config("model.params.b", format!("has {} rows, expected {n}", a.b.len())));
                }
                if let Some(i) = a.b.iter().position(|r| r.len() != p) {
                    return Err(CliError::config(&format!("model.params.b[{i}]"), format!("expected {p} entries")));
                }
                let domain = interval_box(&a.input_domain, "model.params.input_domain")?;
                let m = MonotoneModel::affine(a.a.clone(), a.b.clone(), a.c.clone(), domain)
                    .map_err(|e| CliError::config("model.params", e.to_string()))?;
                Ok(Arc::new(m))
            }
        }
    }

    pub fn safe_box(&self) -> Result<IntervalBox, CliError> {
        interval_box(&self.safe_set, "safe_set")
    }

    /// Validates the configuration and builds the synthesis problem.
    pub fn problem(&self) -> Result<Problem, CliError> {
        self.problem_with(&self.decomposition, "decomposition")
    }

    pub fn problem_with(&self, decomposition: &DecompositionConfig, field: &str) -> Result<Problem, CliError> {
        let n = self.state_dim();
        if n == 0 {
            return Err(CliError::config("safe_set", "must have at least one component"));
        }
        let model = self.model()?;
        let p = model.input_dim();
        let lambda = self.grid.expand(n, "grid")?;
        let grid = UniformGrid::new(self.safe_box()?, lambda).map_err(|e| CliError::config("grid", e.to_string()))?;
        let domain = model.input_domain();
        let inputs = match &self.inputs {
            InputsConfig::Count(c) => InputDiscretization::uniform(domain, &c.expand(p, "inputs")?),
            InputsConfig::Uniform { count, range } => {
                let r = interval_box(&vec![*range; p], "inputs.range")?;
                InputDiscretization::uniform(&r, &count.expand(p, "inputs.count")?)
                    .and_then(|d| InputDiscretization::new(d.all().to_vec(), domain))
            }
            InputsConfig::Values { values } => InputDiscretization::new(values.clone(), domain),
        }
        .map_err(|e| CliError::config("inputs", e.to_string()))?;
        let d = decomposition
            .spec(n, p, field)?
            .validate(n, p)
            .map_err(|e| CliError::config(field, e.to_string()))?;
        Problem::new(model, grid, inputs, d).map_err(|e| CliError::config("<document>", e.to_string()))
    }
}

fn interval_box(intervals: &[[f64; 2]], field: &str) -> Result<IntervalBox, CliError> {
    let pairs: Vec<(f64, f64)> = intervals.iter().map(|&[a, b]| (a, b)).collect();
    IntervalBox::from_intervals(&pairs).map_err(|e| CliError::config(field, e.to_string()))
}
