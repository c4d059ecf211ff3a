//! Penalized HUM null controls and observability-constant estimates for
//! `∂_t z - Δz + a z = χ_{ω∩Ω} χ_E u` on one box domain.
//!
//! With `F` the free evolution to time `T` and `Λ` the controllability
//! Gramian (adjoint solve, restriction to `ω × E`, forward solve from zero),
//! the penalized problem is `(Λ + εI) p = -F z0`. The control is the
//! restricted adjoint `u = χ_ω χ_E ψ(p)` and the controlled final state is
//! exactly `z(T) = -ε p`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heat::{
    dot, grid_norm, space_time_norm, FieldLayout, LinearSolveConfig, PotentialField, Propagator,
    SpaceTimeField,
};
use crate::heat::assemble_laplacian;
use crate::lattice::{control_mask, NodeMask, SpatialGrid};
use crate::time_measure::{active_step_mask, TimeSet};

/// A linear controlled heat problem on one grid.
#[derive(Debug, Clone)]
pub struct ControlSystem {
    grid: SpatialGrid,
    mask: NodeMask,
    active: Vec<bool>,
    potential: PotentialField,
    solve_cfg: LinearSolveConfig,
    horizon: f64,
    propagator: Propagator,
}

impl ControlSystem {
    /// Control set `ω ∩ Ω` from the lattice balls, time set from `E`.
    pub fn new(
        grid: SpatialGrid,
        time_set: &TimeSet,
        potential: PotentialField,
        solve_cfg: &LinearSolveConfig,
        steps: usize,
    ) -> Result<Self> {
        let mask = control_mask(&grid);
        Self::with_mask(grid, mask, time_set, potential, solve_cfg, steps)
    }

    pub fn with_mask(
        grid: SpatialGrid,
        mask: NodeMask,
        time_set: &TimeSet,
        potential: PotentialField,
        solve_cfg: &LinearSolveConfig,
        steps: usize,
    ) -> Result<Self> {
        if mask.len() != grid.len() {
            return Err(Error::Shape(format!(
                "mask has {} nodes, grid has {}",
                mask.len(),
                grid.len()
            )));
        }
        let horizon = time_set.horizon();
        let lap = assemble_laplacian(&grid);
        let propagator = Propagator::new(&lap, &potential, solve_cfg, horizon, steps)?;
        Ok(Self {
            active: active_step_mask(time_set, steps),
            grid,
            mask,
            potential,
            solve_cfg: *solve_cfg,
            horizon,
            propagator,
        })
    }

    /// Same geometry and time grid with a different potential.
    pub fn with_potential(&self, potential: &PotentialField) -> Result<Self> {
        let propagator = Propagator::new(
            self.propagator.laplacian(),
            potential,
            &self.solve_cfg,
            self.horizon,
            self.steps(),
        )?;
        Ok(Self {
            grid: self.grid.clone(),
            mask: self.mask.clone(),
            active: self.active.clone(),
            potential: potential.clone(),
            solve_cfg: self.solve_cfg,
            horizon: self.horizon,
            propagator,
        })
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    pub fn mask(&self) -> &NodeMask {
        &self.mask
    }

    pub fn active_steps(&self) -> &[bool] {
        &self.active
    }

    pub fn potential(&self) -> &PotentialField {
        &self.potential
    }

    pub fn propagator(&self) -> &Propagator {
        &self.propagator
    }

    pub fn solve_config(&self) -> &LinearSolveConfig {
        &self.solve_cfg
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.propagator.steps()
    }

    pub fn nodes(&self) -> usize {
        self.grid.len()
    }

    pub fn cell_volume(&self) -> f64 {
        self.grid.cell_volume()
    }

    /// True when some node is controlled during some active step.
    pub fn is_observable_geometry(&self) -> bool {
        self.mask.count() > 0 && self.active.iter().any(|&a| a)
    }

    fn check_geometry(&self) -> Result<()> {
        if self.mask.count() == 0 {
            return Err(Error::Unobservable("control set ω ∩ Ω contains no grid node".into()));
        }
        if !self.active.iter().any(|&a| a) {
            return Err(Error::Unobservable("time set E activates no time step".into()));
        }
        Ok(())
    }

    /// `χ_ω χ_E v`, written with exact zeros off the support.
    pub fn restrict(&self, v: &SpaceTimeField) -> SpaceTimeField {
        let mut out = SpaceTimeField::zeros(
            FieldLayout::Steps,
            self.nodes(),
            self.steps(),
            self.propagator.tau(),
            self.cell_volume(),
        );
        for k in 0..self.steps() {
            if !self.active[k] {
                continue;
            }
            let src = v.step_value(k);
            for (j, o) in out.row_mut(k).iter_mut().enumerate() {
                if self.mask.is_marked(j) {
                    *o = src[j];
                }
            }
        }
        out
    }

    /// The source term `χ_ω χ_E u` fed to the state equation.
    pub fn control_source(&self, control: &SpaceTimeField) -> SpaceTimeField {
        self.restrict(control)
    }

    /// Control generated by adjoint final data `p`.
    pub fn control_from_adjoint(&self, p: &[f64]) -> Result<SpaceTimeField> {
        let adj = self.propagator.backward(p)?;
        Ok(self.restrict(&adj.step_values))
    }

    /// State trajectory driven by `control` (free evolution when `None`).
    pub fn controlled_state(&self, z0: &[f64], control: Option<&SpaceTimeField>) -> Result<SpaceTimeField> {
        match control {
            Some(u) => self.propagator.forward(z0, Some(&self.control_source(u))),
            None => self.propagator.forward(z0, None),
        }
    }
}

/// `Λ p`: forward response at `T`, from rest, to the control generated by `p`.
pub fn gramian_apply(sys: &ControlSystem, p: &[f64]) -> Result<Vec<f64>> {
    let u = sys.control_from_adjoint(p)?;
    let zero = vec![0.0; sys.nodes()];
    Ok(sys.propagator.forward(&zero, Some(&u))?.last().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HumConfig {
    /// Penalty ε on the final state.
    pub penalty: f64,
    /// Relative residual tolerance of the outer conjugate gradient.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for HumConfig {
    fn default() -> Self {
        Self {
            penalty: 1e-8,
            tolerance: 1e-10,
            max_iterations: 5000,
        }
    }
}

impl HumConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty > 0.0 && self.penalty <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "hum.penalty must lie in (0, 1], got {}",
                self.penalty
            )));
        }
        if !(self.tolerance > 0.0 && self.tolerance <= 1e-8) {
            return Err(Error::InvalidConfig(format!(
                "hum.tolerance must lie in (0, 1e-8], got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig("hum.max_iterations must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HumResult {
    /// Minimizer over adjoint final data.
    pub p_hat: Vec<f64>,
    pub control: SpaceTimeField,
    /// `‖u‖ / ‖z0‖`.
    pub kappa: f64,
    /// `‖z(T)‖ / ‖z0‖` from a fresh controlled solve.
    pub final_ratio: f64,
    pub final_state: Vec<f64>,
    pub iterations: usize,
    /// Relative residual of the normal equations at exit.
    pub residual: f64,
    /// `‖z(T) + ε p̂‖ / ‖z0‖`.
    pub identity_residual: f64,
}

/// Solves `(Λ + εI) p = -F z0` by conjugate gradient and extracts the control.
pub fn solve_penalized_hum(sys: &ControlSystem, z0: &[f64], cfg: &HumConfig) -> Result<HumResult> {
    cfg.validate()?;
    sys.check_geometry()?;
    let n = sys.nodes();
    if z0.len() != n {
        return Err(Error::Shape(format!("initial state has {} entries, grid has {n}", z0.len())));
    }
    let vol = sys.cell_volume();
    let z0_norm = grid_norm(z0, vol);
    if z0_norm == 0.0 {
        let control = SpaceTimeField::zeros(FieldLayout::Steps, n, sys.steps(), sys.propagator.tau(), vol);
        return Ok(HumResult {
            p_hat: vec![0.0; n],
            control,
            kappa: 0.0,
            final_ratio: 0.0,
            final_state: vec![0.0; n],
            iterations: 0,
            residual: 0.0,
            identity_residual: 0.0,
        });
    }

    let free = sys.propagator.forward(z0, None)?;
    let b: Vec<f64> = free.last().iter().map(|v| -v).collect();
    let b_norm = dot(&b, &b).sqrt();
    let eps = cfg.penalty;

    let mut p = vec![0.0; n];
    let mut r = b.clone();
    let mut d = r.clone();
    let mut rr = dot(&r, &r);
    let mut iterations = 0;
    let mut residual = if b_norm > 0.0 { rr.sqrt() / b_norm } else { 0.0 };
    while residual > cfg.tolerance {
        if iterations == cfg.max_iterations {
            return Err(Error::OuterSolve { iterations, residual });
        }
        let mut ad = gramian_apply(sys, &d)?;
        for (a, x) in ad.iter_mut().zip(&d) {
            *a += eps * x;
        }
        let alpha = rr / dot(&d, &ad);
        for j in 0..n {
            p[j] += alpha * d[j];
            r[j] -= alpha * ad[j];
        }
        let rr_new = dot(&r, &r);
        d.iter_mut().zip(&r).for_each(|(dj, rj)| *dj = rj + rr_new / rr * *dj);
        rr = rr_new;
        iterations += 1;
        residual = rr.sqrt() / b_norm;
    }

    let control = sys.control_from_adjoint(&p)?;
    let z = sys.propagator.forward(z0, Some(&control))?;
    let final_state = z.last().to_vec();
    let gap: Vec<f64> = final_state.iter().zip(&p).map(|(z, p)| z + eps * p).collect();
    Ok(HumResult {
        kappa: space_time_norm(&control, None, None) / z0_norm,
        final_ratio: grid_norm(&final_state, vol) / z0_norm,
        identity_residual: grid_norm(&gap, vol) / z0_norm,
        p_hat: p,
        control,
        final_state,
        iterations,
        residual,
    })
}

/// How the observability constant is probed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbePolicy {
    /// Power iterations on the generalized eigenproblem; zero keeps the fixed probes only.
    pub power_iterations: usize,
    pub seed: u64,
    pub inner_tolerance: f64,
    pub inner_max_iterations: usize,
}

impl Default for ProbePolicy {
    fn default() -> Self {
        Self {
            power_iterations: 20,
            seed: 0,
            inner_tolerance: 1e-12,
            inner_max_iterations: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObservabilityEstimate {
    /// Largest observed `‖φ(T)‖² / ∫_E ∫_ω |φ|²`.
    pub constant: f64,
    pub best_probe: String,
    pub probes: Vec<(String, f64)>,
}

/// Final energy and observed energy of the free solution from `phi0`.
fn observation_pair(sys: &ControlSystem, phi0: &[f64]) -> Result<(f64, f64)> {
    let traj = sys.propagator.forward(phi0, None)?;
    let fin = grid_norm(traj.last(), sys.cell_volume());
    let obs = space_time_norm(&traj, Some(&sys.mask), Some(&sys.active));
    Ok((fin * fin, obs * obs))
}

/// `O x = Σ_k τ 1_E(k) Φ_{k+1}^T χ_ω Φ_{k+1} x` (plain dot-product convention).
fn observed_gramian(sys: &ControlSystem, x: &[f64]) -> Result<Vec<f64>> {
    let prop = &sys.propagator;
    let traj = prop.forward(x, None)?;
    let steps = sys.steps();
    let tau = prop.tau();
    let mut lam = vec![0.0; sys.nodes()];
    let mut buf = vec![0.0; sys.nodes()];
    for level in (1..=steps).rev() {
        if sys.active[level - 1] {
            let z = traj.row(level);
            for (j, l) in lam.iter_mut().enumerate() {
                if sys.mask.is_marked(j) {
                    *l += tau * z[j];
                }
            }
        }
        prop.adjoint_step(level - 1, &lam, &mut buf)?;
        std::mem::swap(&mut lam, &mut buf);
    }
    Ok(lam)
}

/// `P x = F^T F x`.
fn final_gramian(sys: &ControlSystem, x: &[f64]) -> Result<Vec<f64>> {
    let prop = &sys.propagator;
    let traj = prop.forward(x, None)?;
    Ok(prop.backward(traj.last())?.levels.row(0).to_vec())
}

fn cg_solve<F>(apply: F, b: &[f64], tol: f64, max_it: usize) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let n = b.len();
    let b_norm = dot(b, b).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok(x);
    }
    let mut r = b.to_vec();
    let mut d = r.clone();
    let mut rr = dot(&r, &r);
    for _ in 0..max_it {
        let ad = apply(&d)?;
        let dad = dot(&d, &ad);
        if dad <= 0.0 {
            break;
        }
        let alpha = rr / dad;
        for j in 0..n {
            x[j] += alpha * d[j];
            r[j] -= alpha * ad[j];
        }
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= tol * b_norm {
            break;
        }
        d.iter_mut().zip(&r).for_each(|(dj, rj)| *dj = rj + rr_new / rr * *dj);
        rr = rr_new;
    }
    Ok(x)
}

/// Deterministic probe family: constant, centered bump, first four box eigenmodes.
pub fn probe_family(grid: &SpatialGrid) -> Vec<(String, Vec<f64>)> {
    use std::f64::consts::PI;
    let dim = grid.dim();
    let ext = grid.domain().extent(grid.spec());
    let lo: Vec<f64> = (0..dim)
        .map(|a| grid.domain().lo()[a] as f64 * grid.spec().cell_side())
        .collect();
    let center = grid.domain_center();
    let mut out = vec![("constant".to_string(), vec![1.0; grid.len()])];
    out.push((
        "bump".to_string(),
        grid.sample(|p| {
            let mut s = 0.0;
            for a in 0..dim {
                let u = (p[a] - center[a]) / (0.5 * ext[a]);
                s += u * u;
            }
            if s < 1.0 {
                (1.0 - s).powi(2)
            } else {
                0.0
            }
        }),
    ));
    let modes: Vec<Vec<usize>> = if dim == 1 {
        (1..=4).map(|k| vec![k]).collect()
    } else {
        vec![vec![1, 1], vec![2, 1], vec![1, 2], vec![2, 2]]
    };
    for k in modes {
        let name = format!(
            "mode-{}",
            k.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("-")
        );
        let v = grid.sample(|p| {
            (0..dim)
                .map(|a| (k[a] as f64 * PI * (p[a] - lo[a]) / ext[a]).sin())
                .product()
        });
        out.push((name, v));
    }
    out
}

/// Lower estimate of `sup ‖φ(T)‖² / ∫_E ∫_{ω∩Ω} |φ|²` over free solutions.
///
/// The fixed probe family is evaluated first; power iteration on
/// `O^{-1} P` (inner conjugate gradient on the observed Gramian `O`) then
/// refines the best probe. Every reported value is the quotient of an actual
/// probe, so the estimate never exceeds the true constant.
pub fn estimate_observability_constant(sys: &ControlSystem, policy: &ProbePolicy) -> Result<ObservabilityEstimate> {
    sys.check_geometry()?;
    let mut probes = Vec::new();
    let mut best = (f64::NEG_INFINITY, String::new(), Vec::new());
    for (name, v) in probe_family(&sys.grid) {
        if grid_norm(&v, 1.0) == 0.0 {
            continue;
        }
        let (fin, obs) = observation_pair(sys, &v)?;
        if obs == 0.0 {
            return Err(Error::Unobservable(format!("probe `{name}` is invisible on ω × E")));
        }
        let q = fin / obs;
        probes.push((name.clone(), q));
        if q > best.0 {
            best = (q, name, v);
        }
    }

    if policy.power_iterations > 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
        rng.set_stream(1);
        let scale = grid_norm(&best.2, 1.0) / (sys.nodes() as f64).sqrt();
        let mut x: Vec<f64> = best
            .2
            .iter()
            .map(|v| v + 1e-3 * scale * rng.gen_range(-1.0..1.0))
            .collect();
        for it in 0..policy.power_iterations {
            let px = final_gramian(sys, &x)?;
            let y = cg_solve(
                |v| observed_gramian(sys, v),
                &px,
                policy.inner_tolerance,
                policy.inner_max_iterations,
            )?;
            let norm = dot(&y, &y).sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                break;
            }
            x = y.iter().map(|v| v / norm).collect();
            let (fin, obs) = observation_pair(sys, &x)?;
            if obs <= 0.0 {
                continue;
            }
            let q = fin / obs;
            let name = format!("power-{}", it + 1);
            probes.push((name.clone(), q));
            if q > best.0 {
                best = (q, name, x.clone());
            }
        }
    }

    Ok(ObservabilityEstimate {
        constant: best.0,
        best_probe: best.1,
        probes,
    })
}
