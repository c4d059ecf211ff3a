//! Structural evaluation of the observability constant chain: the one-time
//! interpolation bound, the Young-inequality constants `K̃1..K̃3` and the
//! telescoping sum along a geometric time sequence at a density point.
//!
//! None of the constants here are predictive. They are shaped like the
//! theoretical bound so measured costs can be compared against that shape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time_measure::{choose_density_anchor, TimeSet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundConstants {
    /// Interpolation exponent `θ ∈ (0, 1)`.
    pub theta: f64,
    /// Constant `C₃` of the one-time interpolation inequality.
    pub c3: f64,
    /// Universal constant `C` of the local interpolation inequality.
    pub c: f64,
    /// Additive constant `C̃` in the exponent.
    pub c_tilde: f64,
}

impl Default for BoundConstants {
    fn default() -> Self {
        Self { theta: 0.5, c3: 1.0, c: 1.0, c_tilde: 0.0 }
    }
}

impl BoundConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(Error::InvalidConfig(format!("bound.theta must lie in (0, 1), got {}", self.theta)));
        }
        if !(self.c3 > 0.0) {
            return Err(Error::InvalidConfig(format!("bound.c3 must be positive, got {}", self.c3)));
        }
        if !(self.c > 0.0) {
            return Err(Error::InvalidConfig(format!("bound.c must be positive, got {}", self.c)));
        }
        if !(self.c_tilde >= 0.0 && self.c_tilde.is_finite()) {
            return Err(Error::InvalidConfig(format!("bound.c_tilde must be nonnegative, got {}", self.c_tilde)));
        }
        Ok(())
    }
}

/// `α = θ/(1-θ)` and `κ = sqrt((α+2)/(α+1))`.
pub fn kappa_alpha(theta: f64) -> Result<(f64, f64)> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(Error::InvalidConfig(format!("theta must lie in (0, 1), got {theta}")));
    }
    let alpha = theta / (1.0 - theta);
    Ok((alpha, ((alpha + 2.0) / (alpha + 1.0)).sqrt()))
}

/// `exp(C₃ (1/T + T + T‖a‖ + ‖a‖^{2/3}))`.
pub fn interpolation_bound(horizon: f64, a_norm: f64, c3: f64) -> Result<f64> {
    if !(horizon > 0.0) || !(a_norm >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "interpolation bound needs T > 0 and a_norm >= 0, got T={horizon}, a_norm={a_norm}"
        )));
    }
    Ok((c3 * (1.0 / horizon + horizon + horizon * a_norm + a_norm.powf(2.0 / 3.0))).exp())
}

/// Exponent `[1+2C(1+1/R²)](1+4/T+‖a‖^{2/3}) + 2T‖a‖` of the local
/// interpolation inequality, without the non-explicit `C₁`, `C₂` parts.
pub fn local_interpolation_exponent(consts: &BoundConstants, big_r: f64, horizon: f64, a_norm: f64) -> f64 {
    (1.0 + 2.0 * consts.c * (1.0 + 1.0 / (big_r * big_r))) * (1.0 + 4.0 / horizon + a_norm.powf(2.0 / 3.0))
        + 2.0 * horizon * a_norm
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssembledConstant {
    pub l: f64,
    pub l1: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub d: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
    /// Terms summed before truncation.
    pub terms: usize,
    /// Natural log of the telescoping sum.
    pub log_series: f64,
    /// Natural log of the constant; finite even when `constant` overflows.
    pub log_constant: f64,
    pub constant: f64,
}

/// `ln(e^x + e^y)`.
fn log_add(x: f64, y: f64) -> f64 {
    let (hi, lo) = if x >= y { (x, y) } else { (y, x) };
    if lo == f64::NEG_INFINITY {
        hi
    } else {
        hi + (lo - hi).exp().ln_1p()
    }
}

/// Assembles the constant multiplying `∫_E ∫_ω |φ|²` in the observability
/// inequality:
///
/// `e^{C̃} e^{2T‖a‖} (3/κ) (K̃3/K̃2) / S`, where
/// `S = Σ_{m≥1} [e^{-(2+α) d κ^{2m}} - e^{-(2+α) d κ^{2m+2}}]`
/// and `d = 2K̃2 / [κ (l1 - l)(κ - 1)]` with `(l, l1)` the density anchor of `E`.
///
/// The sum is accumulated in log space and truncated once a term drops below
/// `1e-300` of the partial sum.
pub fn assemble_observability_constant(
    time_set: &TimeSet,
    a_norm: f64,
    consts: &BoundConstants,
) -> Result<AssembledConstant> {
    consts.validate()?;
    if !(a_norm >= 0.0 && a_norm.is_finite()) {
        return Err(Error::InvalidConfig(format!("a_norm must be finite and nonnegative, got {a_norm}")));
    }
    let horizon = time_set.horizon();
    let (l, l1) = choose_density_anchor(time_set)?;
    let (alpha, kappa) = kappa_alpha(consts.theta)?;
    let one_minus = 1.0 - consts.theta;
    let log_k1 = consts.c3 * (horizon + horizon * a_norm + a_norm.powf(2.0 / 3.0)) / one_minus;
    let k2 = consts.c3 / one_minus;
    let log_k3 = 2.0 * horizon * a_norm * (1.0 + alpha) + log_k1;
    let d = 2.0 * k2 / (kappa * (l1 - l) * (kappa - 1.0));

    let rate = (2.0 + alpha) * d;
    let cutoff = 1e-300f64.ln();
    let mut log_series = f64::NEG_INFINITY;
    let mut terms = 0;
    let mut power = kappa * kappa;
    loop {
        let x = rate * power;
        let log_term = -x + (-(-x * (kappa * kappa - 1.0)).exp_m1()).ln();
        if terms > 0 && log_term - log_series < cutoff {
            break;
        }
        log_series = log_add(log_series, log_term);
        terms += 1;
        power *= kappa * kappa;
        if !power.is_finite() {
            break;
        }
    }

    let log_constant = consts.c_tilde + 2.0 * horizon * a_norm + (3.0 / kappa).ln() + log_k3 - k2.ln() - log_series;
    Ok(AssembledConstant {
        l,
        l1,
        alpha,
        kappa,
        d,
        k1: log_k1.exp(),
        k2,
        k3: log_k3.exp(),
        terms,
        log_series,
        log_constant,
        constant: log_constant.exp(),
    })
}
