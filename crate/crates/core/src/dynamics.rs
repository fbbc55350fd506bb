//! System models: a deterministic sample map and a sound interval
//! over-approximation of the reachable set from a state box under an input
//! box.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::IntervalBox;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("{what} has dimension {actual}, model expects {expected}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("thermal ring needs at least 3 rooms, got {0}")]
    TooFewRooms(usize),
    #[error("invalid model parameter: {0}")]
    Parameter(String),
}

/// A discrete-time model `x+ = F(x, u)` with a set-valued over-approximation.
///
/// `reach_into` must satisfy, for all `x` in `states` and `u` in
/// `inputs ∩ input_domain`, `step(x, u) ∈ out`; and it must grow
/// monotonically with both argument boxes.
pub trait Dynamics: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn input_domain(&self) -> &IntervalBox;

    /// Evaluates the sample map without dimension checks.
    fn step_into(&self, x: &[f64], u: &[f64], next: &mut [f64]);

    /// Writes the over-approximation into `out` (dimension `state_dim`)
    /// without dimension checks.
    fn reach_into(&self, states: &IntervalBox, inputs: &IntervalBox, out: &mut IntervalBox);

    fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        check_dim("state", self.state_dim(), x.len())?;
        check_dim("input", self.input_dim(), u.len())?;
        let mut next = vec![0.0; self.state_dim()];
        self.step_into(x, u, &mut next);
        Ok(next)
    }

    fn reach_over(
        &self,
        states: &IntervalBox,
        inputs: &IntervalBox,
    ) -> Result<IntervalBox, DynamicsError> {
        check_dim("state box", self.state_dim(), states.dim())?;
        check_dim("input box", self.input_dim(), inputs.dim())?;
        let mut out = IntervalBox::zeros(self.state_dim());
        self.reach_into(states, inputs, &mut out);
        Ok(out)
    }
}

fn check_dim(what: &'static str, expected: usize, actual: usize) -> Result<(), DynamicsError> {
    if expected == actual {
        Ok(())
    } else {
        Err(DynamicsError::Dimension {
            what,
            expected,
            actual,
        })
    }
}

/// Parameters of the circular building model: room `i` exchanges heat with
/// rooms `i-1` and `i+1` (wrapping around), with the outside and with its
/// heater.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThermalRingParams {
    pub rooms: usize,
    /// Conduction between neighbouring rooms.
    pub alpha: f64,
    /// Conduction to the outside.
    pub beta: f64,
    /// Conduction from the heater.
    pub gamma: f64,
    /// Outside temperature (°C).
    pub outside_temp: f64,
    /// Heater temperature (°C).
    pub heater_temp: f64,
    /// Upper bound of every heater input; inputs range over `[0, input_max]`.
    pub input_max: f64,
}

impl ThermalRingParams {
    /// The reference building: α = 0.45, β = 0.045, γ = 0.09, T_e = -1 °C,
    /// T_h = 50 °C, u ∈ [0, 0.6].
    pub fn standard(rooms: usize) -> Self {
        Self {
            rooms,
            alpha: 0.45,
            beta: 0.045,
            gamma: 0.09,
            outside_temp: -1.0,
            heater_temp: 50.0,
            input_max: 0.6,
        }
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.rooms < 3 {
            return Err(DynamicsError::TooFewRooms(self.rooms));
        }
        let finite = [
            self.alpha,
            self.beta,
            self.gamma,
            self.outside_temp,
            self.heater_temp,
            self.input_max,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(DynamicsError::Parameter(
                "all parameters must be finite".into(),
            ));
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("input_max", self.input_max),
        ] {
            if v < 0.0 {
                return Err(DynamicsError::Parameter(format!("{name} = {v} must be >= 0")));
            }
        }
        let self_coeff = 1.0 - 2.0 * self.alpha - self.beta - self.gamma * self.input_max;
        if self_coeff < 0.0 {
            return Err(DynamicsError::Parameter(format!(
                "1 - 2*alpha - beta - gamma*input_max = {self_coeff} must be >= 0"
            )));
        }
        Ok(())
    }

    /// The heater must be hotter than any safe temperature so that more
    /// heating never cools a room.
    pub fn check_safe_set(&self, safe: &IntervalBox) -> Result<(), DynamicsError> {
        check_dim("safe set", self.rooms, safe.dim())?;
        for (i, &hi) in safe.upper().iter().enumerate() {
            if self.heater_temp <= hi {
                return Err(DynamicsError::Parameter(format!(
                    "heater_temp = {} must exceed the safe upper bound {} of room {}",
                    self.heater_temp, hi, i
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ThermalRing {
    params: ThermalRingParams,
    self_coeff: f64,
    input_domain: IntervalBox,
}

impl ThermalRing {
    pub fn new(params: ThermalRingParams) -> Result<Self, DynamicsError> {
        params.validate()?;
        let input_domain = IntervalBox::new(
            vec![0.0; params.rooms],
            vec![params.input_max; params.rooms],
        )
        .map_err(|e| DynamicsError::Parameter(e.to_string()))?;
        Ok(Self {
            self_coeff: 1.0 - 2.0 * params.alpha - params.beta,
            params,
            input_domain,
        })
    }

    pub fn params(&self) -> &ThermalRingParams {
        &self.params
    }

    // The evaluation order is fixed. Some cell/input pairs map exactly onto a
    // safe-set boundary and the rounding of this expression decides whether
    // they count as contained.
    #[inline]
    fn update(&self, own: f64, next: f64, prev: f64, u: f64) -> f64 {
        let p = &self.params;
        self.self_coeff * own
            + p.alpha * next
            + p.alpha * prev
            + p.beta * p.outside_temp
            + p.gamma * (p.heater_temp - own) * u
    }

    #[inline]
    fn neighbours(&self, i: usize) -> (usize, usize) {
        let n = self.params.rooms;
        ((i + 1) % n, (i + n - 1) % n)
    }
}

impl Dynamics for ThermalRing {
    fn state_dim(&self) -> usize {
        self.params.rooms
    }

    fn input_dim(&self) -> usize {
        self.params.rooms
    }

    fn input_domain(&self) -> &IntervalBox {
        &self.input_domain
    }

    fn step_into(&self, x: &[f64], u: &[f64], next: &mut [f64]) {
        for i in 0..self.params.rooms {
            let (nx, pv) = self.neighbours(i);
            next[i] = self.update(x[i], x[nx], x[pv], u[i]);
        }
    }

    /// Exact interval hull. The update is increasing in both neighbours and
    /// bilinear in the room's own temperature and input, so the extremes sit
    /// at neighbour bounds and at one of the four (own, input) corners.
    fn reach_into(&self, states: &IntervalBox, inputs: &IntervalBox, out: &mut IntervalBox) {
        let (slo, shi) = (states.lower(), states.upper());
        let (ulo, uhi) = (inputs.lower(), inputs.upper());
        let (olo, ohi) = out.bounds_mut();
        for i in 0..self.params.rooms {
            let (nx, pv) = self.neighbours(i);
            let lo = [
                self.update(slo[i], slo[nx], slo[pv], ulo[i]),
                self.update(slo[i], slo[nx], slo[pv], uhi[i]),
                self.update(shi[i], slo[nx], slo[pv], ulo[i]),
                self.update(shi[i], slo[nx], slo[pv], uhi[i]),
            ];
            let hi = [
                self.update(shi[i], shi[nx], shi[pv], uhi[i]),
                self.update(shi[i], shi[nx], shi[pv], ulo[i]),
                self.update(slo[i], shi[nx], shi[pv], uhi[i]),
                self.update(slo[i], shi[nx], shi[pv], ulo[i]),
            ];
            olo[i] = lo.into_iter().fold(f64::INFINITY, f64::min);
            ohi[i] = hi.into_iter().fold(f64::NEG_INFINITY, f64::max);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Monotonicity {
    Increasing,
    Decreasing,
    Independent,
}

impl Monotonicity {
    fn of_coefficient(c: f64) -> Self {
        if c > 0.0 {
            Monotonicity::Increasing
        } else if c < 0.0 {
            Monotonicity::Decreasing
        } else {
            Monotonicity::Independent
        }
    }
}

type StepFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

/// Componentwise monotone model: output `i` is monotone in every state and
/// input argument with the declared direction, so its extremes over a box are
/// attained at a single corner.
#[derive(Clone)]
pub struct MonotoneModel {
    state_dim: usize,
    input_dim: usize,
    input_domain: IntervalBox,
    state_signs: Vec<Vec<Monotonicity>>,
    input_signs: Vec<Vec<Monotonicity>>,
    step: Arc<StepFn>,
}

impl fmt::Debug for MonotoneModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MonotoneModel")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("input_domain", &self.input_domain)
            .field("state_signs", &self.state_signs)
            .field("input_signs", &self.input_signs)
            .finish_non_exhaustive()
    }
}

impl MonotoneModel {
    /// `state_signs[i][j]` is the direction of output `i` in state `j`;
    /// `input_signs[i][j]` likewise for input `j`.
    pub fn new(
        input_domain: IntervalBox,
        state_signs: Vec<Vec<Monotonicity>>,
        input_signs: Vec<Vec<Monotonicity>>,
        step: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Result<Self, DynamicsError> {
        let n = state_signs.len();
        let p = input_domain.dim();
        if n == 0 {
            return Err(DynamicsError::Parameter("state dimension must be positive".into()));
        }
        if let Some(row) = state_signs.iter().find(|r| r.len() != n) {
            return Err(DynamicsError::Dimension {
                what: "state sign row",
                expected: n,
                actual: row.len(),
            });
        }
        check_dim("input sign rows", n, input_signs.len())?;
        if let Some(row) = input_signs.iter().find(|r| r.len() != p) {
            return Err(DynamicsError::Dimension {
                what: "input sign row",
                expected: p,
                actual: row.len(),
            });
        }
        Ok(Self {
            state_dim: n,
            input_dim: p,
            input_domain,
            state_signs,
            input_signs,
            step: Arc::new(step),
        })
    }

    /// `x+ = A x + B u + c`, with monotonicity read off the coefficient signs.
    pub fn affine(
        a: Vec<Vec<f64>>,
        b: Vec<Vec<f64>>,
        c: Vec<f64>,
        input_domain: IntervalBox,
    ) -> Result<Self, DynamicsError> {
        let n = a.len();
        check_dim("offset", n, c.len())?;
        check_dim("input matrix rows", n, b.len())?;
        let state_signs = a
            .iter()
            .map(|row| row.iter().map(|&v| Monotonicity::of_coefficient(v)).collect())
            .collect();
        let input_signs = b
            .iter()
            .map(|row| row.iter().map(|&v| Monotonicity::of_coefficient(v)).collect())
            .collect();
        let step = move |x: &[f64], u: &[f64], next: &mut [f64]| {
            for i in 0..a.len() {
                let mut v = c[i];
                for (aij, xj) in a[i].iter().zip(x) {
                    v += aij * xj;
                }
                for (bij, uj) in b[i].iter().zip(u) {
                    v += bij * uj;
                }
                next[i] = v;
            }
        };
        Self::new(input_domain, state_signs, input_signs, step)
    }
}

fn corner(lo: &[f64], hi: &[f64], signs: &[Monotonicity], upper: bool, out: &mut Vec<f64>) {
    out.clear();
    out.extend(signs.iter().enumerate().map(|(j, s)| match (s, upper) {
        (Monotonicity::Decreasing, false) | (Monotonicity::Increasing, true) => hi[j],
        (Monotonicity::Decreasing, true) | (Monotonicity::Increasing, false) => lo[j],
        (Monotonicity::Independent, _) => lo[j],
    }));
}

impl Dynamics for MonotoneModel {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn input_domain(&self) -> &IntervalBox {
        &self.input_domain
    }

    fn step_into(&self, x: &[f64], u: &[f64], next: &mut [f64]) {
        (self.step)(x, u, next)
    }

    fn reach_into(&self, states: &IntervalBox, inputs: &IntervalBox, out: &mut IntervalBox) {
        let mut xc = Vec::with_capacity(self.state_dim);
        let mut uc = Vec::with_capacity(self.input_dim);
        let mut image = vec![0.0; self.state_dim];
        for i in 0..self.state_dim {
            corner(states.lower(), states.upper(), &self.state_signs[i], false, &mut xc);
            corner(inputs.lower(), inputs.upper(), &self.input_signs[i], false, &mut uc);
            (self.step)(&xc, &uc, &mut image);
            let lo = image[i];
            corner(states.lower(), states.upper(), &self.state_signs[i], true, &mut xc);
            corner(inputs.lower(), inputs.upper(), &self.input_signs[i], true, &mut uc);
            (self.step)(&xc, &uc, &mut image);
            let hi = image[i];
            out.set_interval(i, lo.min(hi), lo.max(hi));
        }
    }
}
