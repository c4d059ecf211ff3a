//! Constructive fixed-point synthesis of null controls for the semilinear
//! equation `∂_t z - Δz + f(z) = χ_ω χ_E u`.
//!
//! The nonlinearity is rewritten as `f(z) = a(z) z` with the bounded quotient
//! `a(r) = f(r)/r` (`f'(0)` at zero). Given a guess `ξ`, the linear problem with
//! potential `a(ξ)` is controlled by penalized HUM, and its controlled state
//! becomes the next guess. The loop stops when successive states agree.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heat::{grid_norm, semilinear_forward_solve, space_time_norm, FieldLayout, PotentialField, SpaceTimeField};
use crate::hum::{solve_penalized_hum, ControlSystem, HumConfig};

/// Below this fraction of the level's sup norm the quotient switches to `f'(0)`.
pub const QUOTIENT_THRESHOLD: f64 = 1e-12;

/// Globally Lipschitz nonlinearities with `f(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "lowercase")]
pub enum Nonlinearity {
    Zero,
    /// `f(s) = c s`.
    Linear(f64),
    /// `f(s) = L sin s`.
    Sin(f64),
    /// `f(s) = L tanh s`.
    Tanh(f64),
}

impl Nonlinearity {
    pub fn eval(&self, s: f64) -> f64 {
        match *self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::Linear(c) => c * s,
            Nonlinearity::Sin(l) => l * s.sin(),
            Nonlinearity::Tanh(l) => l * s.tanh(),
        }
    }

    pub fn derivative_at_zero(&self) -> f64 {
        match *self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::Linear(c) => c,
            Nonlinearity::Sin(l) | Nonlinearity::Tanh(l) => l,
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::Linear(c) => c.abs(),
            Nonlinearity::Sin(l) | Nonlinearity::Tanh(l) => l.abs(),
        }
    }

    /// `f(s)/s` away from zero.
    pub fn quotient(&self, s: f64) -> f64 {
        match *self {
            Nonlinearity::Zero => 0.0,
            Nonlinearity::Linear(c) => c,
            _ => self.eval(s) / s,
        }
    }

    /// Quotient potential of one grid vector, with the small-value switch.
    pub fn quotient_level(&self, level: &[f64]) -> Vec<f64> {
        let sup = level.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let cut = QUOTIENT_THRESHOLD * sup;
        level
            .iter()
            .map(|&s| {
                if s.abs() <= cut || s == 0.0 {
                    self.derivative_at_zero()
                } else {
                    self.quotient(s)
                }
            })
            .collect()
    }

    /// Parses the catalog names `zero`, `linear c`, `sin L`, `tanh L`.
    pub fn from_name(name: &str, param: Option<f64>) -> Result<Self> {
        let mut parts = name.split_whitespace();
        let kind = parts.next().unwrap_or("");
        let inline = parts.next().map(|p| {
            p.parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("nonlinearity parameter `{p}` is not a number")))
        });
        let value = match (inline, param) {
            (Some(v), _) => Some(v?),
            (None, p) => p,
        };
        let need = |v: Option<f64>| {
            v.ok_or_else(|| Error::InvalidConfig(format!("nonlinearity `{kind}` needs a parameter")))
        };
        let f = match kind {
            "zero" => Nonlinearity::Zero,
            "linear" => Nonlinearity::Linear(need(value)?),
            "sin" => Nonlinearity::Sin(need(value)?),
            "tanh" => Nonlinearity::Tanh(need(value)?),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown nonlinearity `{other}` (expected zero, linear, sin, tanh)"
                )))
            }
        };
        if !f.lipschitz().is_finite() {
            return Err(Error::InvalidConfig("nonlinearity parameter must be finite".into()));
        }
        Ok(f)
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, Nonlinearity::Zero)
    }
}

/// Quotient potential of a state trajectory: step `k` uses level `k`.
pub fn quotient_potential(state: &SpaceTimeField, f: &Nonlinearity) -> PotentialField {
    let nodes = state.nodes();
    let steps = state.steps();
    let mut values = Vec::with_capacity(nodes * steps);
    for k in 0..steps {
        values.extend(f.quotient_level(state.row(k)));
    }
    PotentialField::from_values(nodes, steps, values).expect("shape follows the state")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FixedPointConfig {
    /// Relative change of successive states in the space-time norm.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-6,
            max_iterations: 50,
        }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "fixed_point.tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "fixed_point.max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    pub control: SpaceTimeField,
    /// Final linearized state `ξ*`.
    pub state: SpaceTimeField,
    pub iterations: usize,
    pub converged: bool,
    /// `‖ξ^{k+1} - ξ^k‖ / ‖ξ^k‖` per iteration.
    pub residuals: Vec<f64>,
    /// Cost `‖u_k‖ / ‖z0‖` of every inner HUM solve.
    pub kappas: Vec<f64>,
    /// Outer CG iterations of every inner HUM solve.
    pub cg_iterations: Vec<usize>,
    /// Final ratio of the last linearized solve.
    pub linear_final_ratio: f64,
    /// `‖z(T)‖ / ‖z0‖` for the control plugged into the semilinear dynamics.
    pub verified_final_ratio: f64,
    /// Discrete `L²(H¹)` and time-difference norms of each iterate, divided by `‖z0‖`.
    pub regularity: Vec<(f64, f64)>,
}

impl FixedPointResult {
    pub fn max_kappa(&self) -> f64 {
        self.kappas.iter().copied().fold(0.0, f64::max)
    }
}

fn regularity(state: &SpaceTimeField, sys: &ControlSystem, z0_norm: f64) -> (f64, f64) {
    let lap = sys.propagator().laplacian();
    let vol = lap.cell_volume();
    let tau = state.tau();
    let mut grad = 0.0;
    let mut dt = 0.0;
    let mut buf = vec![0.0; state.nodes()];
    for k in 0..state.steps() {
        let next = state.row(k + 1);
        lap.apply(next, &mut buf);
        grad += crate::heat::dot(next, &buf) * vol * tau;
        let diff: f64 = next.iter().zip(state.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
        dt += diff * vol / tau;
    }
    let scale = if z0_norm > 0.0 { z0_norm } else { 1.0 };
    (grad.sqrt() / scale, dt.sqrt() / scale)
}

fn relative_change(next: &SpaceTimeField, prev: &SpaceTimeField) -> f64 {
    let mut diff = next.clone();
    for r in 0..diff.rows() {
        let p = prev.row(r);
        for (d, q) in diff.row_mut(r).iter_mut().zip(p) {
            *d -= q;
        }
    }
    let base = space_time_norm(prev, None, None);
    let d = space_time_norm(&diff, None, None);
    if base > 0.0 {
        d / base
    } else if d == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Picard iteration on `ξ ↦ controlled state of the linear problem with potential a(ξ)`.
///
/// `sys` provides the grid, mask, time steps and solver settings; its own
/// potential is ignored. Non-convergence is reported through
/// [`FixedPointResult::converged`] together with the last iterate.
pub fn fixed_point_solve(
    sys: &ControlSystem,
    z0: &[f64],
    f: &Nonlinearity,
    hum: &HumConfig,
    cfg: &FixedPointConfig,
) -> Result<FixedPointResult> {
    cfg.validate()?;
    let lap = sys.propagator().laplacian().clone();
    let steps = sys.steps();
    let horizon = sys.horizon();
    let solve_cfg = *sys.solve_config();
    let z0_norm = grid_norm(z0, lap.cell_volume());

    let mut xi = semilinear_forward_solve(&lap, f, z0, None, &solve_cfg, horizon, steps)?;
    let mut residuals = Vec::new();
    let mut kappas = Vec::new();
    let mut cg_iterations = Vec::new();
    let mut regularity_log = vec![regularity(&xi, sys, z0_norm)];
    let mut converged = false;
    let mut control = SpaceTimeField::zeros(FieldLayout::Steps, z0.len(), steps, horizon / steps as f64, lap.cell_volume());
    let mut linear_final_ratio = f64::NAN;
    let mut iterations = 0;

    while iterations < cfg.max_iterations {
        iterations += 1;
        let potential = quotient_potential(&xi, f);
        let linear = sys.with_potential(&potential)?;
        let res = solve_penalized_hum(&linear, z0, hum)?;
        kappas.push(res.kappa);
        cg_iterations.push(res.iterations);
        linear_final_ratio = res.final_ratio;
        let next = linear.controlled_state(z0, Some(&res.control))?;
        control = res.control;
        let change = relative_change(&next, &xi);
        residuals.push(change);
        regularity_log.push(regularity(&next, sys, z0_norm));
        xi = next;
        // with f = 0 the potential does not depend on the guess
        if change <= cfg.tolerance || f.is_zero() {
            converged = true;
            break;
        }
        if !change.is_finite() {
            break;
        }
    }

    let verified_final_ratio = verify_null(sys, &control, z0, f)?;
    Ok(FixedPointResult {
        control,
        state: xi,
        iterations,
        converged,
        residuals,
        kappas,
        cg_iterations,
        linear_final_ratio,
        verified_final_ratio,
        regularity: regularity_log,
    })
}

/// Runs the semilinear dynamics with control `u` and returns `‖z(T)‖ / ‖z0‖`
/// (zero when `z0 = 0`).
pub fn verify_null(sys: &ControlSystem, control: &SpaceTimeField, z0: &[f64], f: &Nonlinearity) -> Result<f64> {
    let lap = sys.propagator().laplacian();
    let vol = lap.cell_volume();
    let z0_norm = grid_norm(z0, vol);
    if z0_norm == 0.0 {
        return Ok(0.0);
    }
    let source = sys.control_source(control);
    let z = semilinear_forward_solve(lap, f, z0, Some(&source), sys.solve_config(), sys.horizon(), sys.steps())?;
    Ok(grid_norm(z.last(), vol) / z0_norm)
}
