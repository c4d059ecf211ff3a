//! Quantitative unique-continuation diagnostics: the Gaussian-weighted
//! frequency function and its almost-monotonicity, and the empirical
//! exponents of the local and global interpolation inequalities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heat::{FieldLayout, PotentialField, SpaceTimeField};
use crate::lattice::{NodeMask, SpatialGrid};

/// Calibration constant of the monotonicity tolerance `c (h + τ) / λ`.
///
/// Frozen after one run on the caloric eigenfunction of `(0, 1)` with
/// `λ = 0.1` at `h = 1/32 .. 1/256`, `τ = 0.128 h`. There the derivative sits
/// below the bound at every level by at least 8, so the tolerance only comes
/// into play for rougher data.
pub const FREQUENCY_TOL_CONSTANT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrequencyParams {
    pub center: [f64; 2],
    pub radius: f64,
    /// Offset `λ` of the backward heat kernel.
    pub lambda: f64,
    pub horizon: f64,
}

impl FrequencyParams {
    pub fn validate(&self, grid: &SpatialGrid) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::InvalidConfig(format!("frequency.lambda must be positive, got {}", self.lambda)));
        }
        if !(self.radius > 0.0) {
            return Err(Error::InvalidConfig(format!("frequency.radius must be positive, got {}", self.radius)));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidConfig(format!("frequency.horizon must be positive, got {}", self.horizon)));
        }
        if ball_mask(grid, self.center, self.radius).count() == 0 {
            return Err(Error::InvalidConfig("frequency ball contains no grid node".into()));
        }
        Ok(())
    }

    /// `G_λ(x, t)`.
    pub fn weight(&self, dim: usize, x: [f64; 2], t: f64) -> f64 {
        let s = self.horizon - t + self.lambda;
        let d2: f64 = (0..dim).map(|a| (x[a] - self.center[a]).powi(2)).sum();
        s.powf(-(dim as f64) / 2.0) * (-d2 / (4.0 * s)).exp()
    }
}

/// Nodes in the closed ball `|x - x0| ≤ r` (up to rounding).
pub fn ball_mask(grid: &SpatialGrid, x0: [f64; 2], r: f64) -> NodeMask {
    let dim = grid.dim();
    let slack = 1e-12 * r * r;
    NodeMask::from_bools(
        (0..grid.len())
            .map(|j| {
                let p = grid.point(j);
                (0..dim).map(|a| (p[a] - x0[a]).powi(2)).sum::<f64>() <= r * r + slack
            })
            .collect(),
    )
}

/// Nodes in the closed cube `max_a |x_a - x0_a| ≤ r`.
pub fn cube_mask(grid: &SpatialGrid, x0: [f64; 2], r: f64) -> NodeMask {
    let dim = grid.dim();
    let slack = 1e-12 * r.max(grid.h());
    NodeMask::from_bools(
        (0..grid.len())
            .map(|j| {
                let p = grid.point(j);
                (0..dim).all(|a| (p[a] - x0[a]).abs() <= r + slack)
            })
            .collect(),
    )
}

/// Squared centered-difference gradient at `node`, zero beyond the boundary.
fn grad_sq(grid: &SpatialGrid, u: &[f64], node: usize) -> f64 {
    let g = grid.global_index(node);
    let h2 = 2.0 * grid.h();
    let mut acc = 0.0;
    for a in 0..grid.dim() {
        let mut plus = g;
        let mut minus = g;
        plus[a] += 1;
        minus[a] -= 1;
        let up = grid.index_of(plus).map_or(0.0, |i| u[i]);
        let um = grid.index_of(minus).map_or(0.0, |i| u[i]);
        acc += ((up - um) / h2).powi(2);
    }
    acc
}

struct WeightedIntegrals {
    gradient: f64,
    mass: f64,
    source: f64,
}

fn weighted_integrals(
    grid: &SpatialGrid,
    ball: &NodeMask,
    u: &[f64],
    potential: Option<&[f64]>,
    p: &FrequencyParams,
    t: f64,
) -> WeightedIntegrals {
    let vol = grid.cell_volume();
    let mut out = WeightedIntegrals { gradient: 0.0, mass: 0.0, source: 0.0 };
    for j in 0..grid.len() {
        if !ball.is_marked(j) {
            continue;
        }
        let w = p.weight(grid.dim(), grid.point(j), t) * vol;
        out.gradient += grad_sq(grid, u, j) * w;
        out.mass += u[j] * u[j] * w;
        if let Some(a) = potential {
            out.source += (a[j] * u[j]).powi(2) * w;
        }
    }
    out
}

fn level_time(u: &SpaceTimeField, level: usize) -> f64 {
    level as f64 * u.tau()
}

fn check_levels(grid: &SpatialGrid, u: &SpaceTimeField) -> Result<()> {
    if u.layout() != FieldLayout::Levels || u.nodes() != grid.len() {
        return Err(Error::Shape("frequency diagnostics need solution levels on the given grid".into()));
    }
    Ok(())
}

/// `N_{λ,r}(t_k) = ∫|∇u|² G_λ / ∫|u|² G_λ` over `B_r(x0) ∩ Ω`.
pub fn frequency_function(grid: &SpatialGrid, u: &SpaceTimeField, p: &FrequencyParams, level: usize) -> Result<f64> {
    check_levels(grid, u)?;
    p.validate(grid)?;
    let ball = ball_mask(grid, p.center, p.radius);
    let w = weighted_integrals(grid, &ball, u.row(level), None, p, level_time(u, level));
    if w.mass > 0.0 {
        Ok(w.gradient / w.mass)
    } else {
        Err(Error::FrequencyUndefined { level })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyLevel {
    pub level: usize,
    pub time: f64,
    pub frequency: f64,
    /// `(N_{k+1} - N_k) / τ`.
    pub derivative: f64,
    /// `N_k / (T - t_k + λ)` plus the source quotient.
    pub bound: f64,
    /// `max(0, derivative - bound)`.
    pub violation: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub levels: Vec<FrequencyLevel>,
    /// Levels at which the frequency is undefined.
    pub undefined: Vec<usize>,
    pub tolerance: f64,
    pub max_violation: f64,
}

impl MonotonicityReport {
    pub fn holds(&self) -> bool {
        self.levels.iter().all(|l| l.pass)
    }
}

/// Tolerance `c (h + τ) / λ`.
pub fn monotonicity_tolerance(h: f64, tau: f64, lambda: f64) -> f64 {
    FREQUENCY_TOL_CONSTANT * (h + tau) / lambda
}

/// Checks `dN/dt ≤ N/(T - t + λ) + ∫|a u|² G / ∫|u|² G` level by level with
/// a forward difference in time. Pairs touching an undefined level are skipped.
pub fn frequency_monotonicity_check(
    grid: &SpatialGrid,
    u: &SpaceTimeField,
    potential: Option<&PotentialField>,
    p: &FrequencyParams,
) -> Result<MonotonicityReport> {
    check_levels(grid, u)?;
    p.validate(grid)?;
    let ball = ball_mask(grid, p.center, p.radius);
    let tau = u.tau();
    let tolerance = monotonicity_tolerance(grid.h(), tau, p.lambda);
    let steps = u.steps();
    let mut values = Vec::with_capacity(steps + 1);
    let mut undefined = Vec::new();
    for level in 0..=steps {
        let a = potential.map(|pot| pot.step(level.min(steps.saturating_sub(1))));
        let w = weighted_integrals(grid, &ball, u.row(level), a.as_deref(), p, level_time(u, level));
        if w.mass > 0.0 {
            values.push(Some((w.gradient / w.mass, w.source / w.mass)));
        } else {
            undefined.push(level);
            values.push(None);
        }
    }
    let mut levels = Vec::new();
    let mut max_violation: f64 = 0.0;
    for k in 0..steps {
        let (Some((nk, sk)), Some((nk1, _))) = (values[k], values[k + 1]) else {
            continue;
        };
        let t = level_time(u, k);
        let derivative = (nk1 - nk) / tau;
        let bound = nk / (p.horizon - t + p.lambda) + sk;
        let violation = (derivative - bound).max(0.0);
        max_violation = max_violation.max(violation);
        levels.push(FrequencyLevel {
            level: k,
            time: t,
            frequency: nk,
            derivative,
            bound,
            violation,
            pass: violation <= tolerance,
        });
    }
    Ok(MonotonicityReport { levels, undefined, tolerance, max_violation })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterpolationReport {
    /// `∫_{B_R ∩ Ω} |φ(T)|²`.
    pub lhs: f64,
    /// `∫_{T/2}^{T} ∫_{Q_{2R0} ∩ Ω} |φ|²`.
    pub mid: f64,
    /// `∫_{B_r ∩ Ω} |φ(T)|²`.
    pub small: f64,
    /// Exponent solving `lhs = mid^γ (2 small)^{1-γ}`.
    pub gamma: Option<f64>,
    /// The small ball already covers the large one.
    pub degenerate: bool,
    pub r: f64,
    pub big_r: f64,
    pub delta: f64,
    pub r0: f64,
}

/// Local interpolation integrals around `x0` for a solution trajectory.
pub fn interpolation_report(
    grid: &SpatialGrid,
    phi: &SpaceTimeField,
    x0: [f64; 2],
    r: f64,
    big_r: f64,
    delta: f64,
) -> Result<InterpolationReport> {
    check_levels(grid, phi)?;
    if !(r > 0.0 && r <= big_r) {
        return Err(Error::InvalidConfig(format!("interpolation radii need 0 < r <= R, got r={r}, R={big_r}")));
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::InvalidConfig(format!("interpolation delta must lie in (0, 1], got {delta}")));
    }
    let vol = grid.cell_volume();
    let fin = phi.last();
    let masked = |mask: &NodeMask, v: &[f64]| -> f64 {
        v.iter()
            .enumerate()
            .filter(|(j, _)| mask.is_marked(*j))
            .map(|(_, x)| x * x)
            .sum::<f64>()
            * vol
    };
    let r0 = (1.0 + 2.0 * delta) * big_r;
    let lhs = masked(&ball_mask(grid, x0, big_r), fin);
    let small = masked(&ball_mask(grid, x0, r), fin);
    let cube = cube_mask(grid, x0, 2.0 * r0);
    let horizon = phi.tau() * phi.steps() as f64;
    let mut mid = 0.0;
    for level in 1..=phi.steps() {
        if level_time(phi, level) > 0.5 * horizon {
            mid += phi.tau() * masked(&cube, phi.row(level));
        }
    }
    let degenerate = small * 2.0 >= lhs;
    let gamma = (mid > 0.0 && small > 0.0 && lhs > 0.0 && mid != 2.0 * small)
        .then(|| (lhs / (2.0 * small)).ln() / (mid / (2.0 * small)).ln());
    Ok(InterpolationReport { lhs, mid, small, gamma, degenerate, r, big_r, delta, r0 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GlobalInterpolationReport {
    /// `∫_Ω |φ(T)|²`.
    pub final_energy: f64,
    /// `∫_Ω |φ_0|²`.
    pub initial_energy: f64,
    /// `∫_{ω ∩ Ω} |φ(T)|²`.
    pub observed_final: f64,
    /// Exponent solving `final = initial^θ observed^{1-θ}`.
    pub theta: Option<f64>,
}

/// One-time global interpolation integrals for a solution trajectory.
pub fn global_interpolation_report(
    grid: &SpatialGrid,
    phi: &SpaceTimeField,
    mask: &NodeMask,
) -> Result<GlobalInterpolationReport> {
    check_levels(grid, phi)?;
    let vol = grid.cell_volume();
    let energy = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() * vol;
    let final_energy = energy(phi.last());
    let initial_energy = energy(phi.row(0));
    let observed_final = phi
        .last()
        .iter()
        .enumerate()
        .filter(|(j, _)| mask.is_marked(*j))
        .map(|(_, x)| x * x)
        .sum::<f64>()
        * vol;
    let theta = (final_energy > 0.0 && observed_final > 0.0 && initial_energy != observed_final)
        .then(|| (final_energy / observed_final).ln() / (initial_energy / observed_final).ln());
    Ok(GlobalInterpolationReport { final_energy, initial_energy, observed_final, theta })
}
