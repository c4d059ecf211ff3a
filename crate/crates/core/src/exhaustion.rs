//! Experiment drivers on nested, centered boxes: control cost sweeps, the
//! exhaustion convergence of forward solutions, and the check that controls
//! computed on small boxes steer the problem on the largest one.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heat::{
    assemble_laplacian, grid_norm, semilinear_forward_solve, space_time_norm, FieldLayout, LinearSolveConfig,
    PotentialField, SpaceTimeField,
};
use crate::hum::{solve_penalized_hum, ControlSystem, HumConfig};
use crate::lattice::{control_mask, BoxDomain, LatticeSpec, NodeMask, SpatialGrid};
use crate::semilinear::{fixed_point_solve, verify_null, FixedPointConfig, Nonlinearity};
use crate::time_measure::TimeSet;
use crate::uc::{ball_mask, global_interpolation_report};

/// Named, compactly supported initial data centered at the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialRecipe {
    /// `(1 - |x|²/ρ²)²` with `ρ` one lattice cell side.
    Bump,
    /// Same profile with half the radius.
    NarrowBump,
    /// `x₁/ρ` times the bump: odd in the first coordinate.
    Dipole,
}

impl InitialRecipe {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "bump" => Ok(Self::Bump),
            "narrow-bump" => Ok(Self::NarrowBump),
            "dipole" => Ok(Self::Dipole),
            other => Err(Error::InvalidConfig(format!(
                "unknown z0 recipe `{other}` (expected bump, narrow-bump, dipole)"
            ))),
        }
    }

    /// Support radius in physical units.
    pub fn radius(&self, spec: &LatticeSpec) -> f64 {
        match self {
            Self::NarrowBump => 0.5 * spec.cell_side(),
            _ => spec.cell_side(),
        }
    }

    pub fn eval(&self, spec: &LatticeSpec, x: [f64; 2]) -> f64 {
        let rho = self.radius(spec);
        let s: f64 = (0..spec.dim()).map(|a| (x[a] / rho).powi(2)).sum();
        if s >= 1.0 {
            return 0.0;
        }
        let bump = (1.0 - s).powi(2);
        match self {
            Self::Dipole => x[0] / rho * bump,
            _ => bump,
        }
    }

    pub fn sample(&self, grid: &SpatialGrid) -> Vec<f64> {
        let spec = *grid.spec();
        grid.sample(|p| self.eval(&spec, p))
    }

    /// True when the closed support lies in the closure of `domain`.
    pub fn fits(&self, spec: &LatticeSpec, domain: &BoxDomain) -> bool {
        let rho = self.radius(spec);
        let side = spec.cell_side();
        (0..spec.dim()).all(|a| {
            domain.lo()[a] as f64 * side <= -rho + 1e-12 && (domain.hi()[a] + 1) as f64 * side >= rho - 1e-12
        })
    }
}

/// Source terms for the exhaustion study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceRecipe {
    None,
    /// The `z0` profile switched on during `E`.
    GatedBump,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub spec: LatticeSpec,
    /// Grid cells per lattice cell side, shared by every box.
    pub m: usize,
    /// Cubes per axis, strictly increasing.
    pub sizes: Vec<usize>,
    pub time_set: TimeSet,
    pub steps: usize,
    pub z0: InitialRecipe,
    pub nonlinearity: Nonlinearity,
    pub hum: HumConfig,
    pub fixed_point: FixedPointConfig,
    pub solve: LinearSolveConfig,
    /// Radius of the comparison ball `B_M` around the origin.
    pub comparison_radius: f64,
    /// Index into `sizes` of the reference box.
    pub reference: usize,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::InvalidConfig("domain.sizes must not be empty".into()));
        }
        if self.sizes.windows(2).any(|w| w[1] <= w[0]) || self.sizes[0] == 0 {
            return Err(Error::InvalidConfig("domain.sizes must be positive and strictly increasing".into()));
        }
        if self.reference >= self.sizes.len() {
            return Err(Error::InvalidConfig(format!(
                "domain.reference {} is out of range for {} sizes",
                self.reference,
                self.sizes.len()
            )));
        }
        if self.m < 2 {
            return Err(Error::InvalidConfig("lattice.m must be at least 2".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidConfig("time.steps must be positive".into()));
        }
        let smallest = BoxDomain::centered(self.spec.dim(), self.sizes[0])?;
        if !self.z0.fits(&self.spec, &smallest) {
            return Err(Error::InvalidConfig(format!(
                "z0 recipe is not supported inside the smallest box (n = {})",
                self.sizes[0]
            )));
        }
        if !(self.comparison_radius > 0.0) {
            return Err(Error::InvalidConfig("exhaustion.comparison_radius must be positive".into()));
        }
        let side = self.spec.cell_side();
        let radius = self.comparison_radius;
        let inside = (0..self.spec.dim())
            .all(|a| smallest.lo()[a] as f64 * side <= -radius && (smallest.hi()[a] + 1) as f64 * side >= radius);
        if !inside {
            return Err(Error::InvalidConfig("exhaustion.comparison_radius exceeds the smallest box".into()));
        }
        let tau = self.time_set.horizon() / self.steps as f64;
        if tau * self.nonlinearity.lipschitz() >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "time.steps too small: tau * L = {} must stay below 1",
                tau * self.nonlinearity.lipschitz()
            )));
        }
        self.hum.validate()?;
        self.fixed_point.validate()?;
        self.solve.validate()
    }

    pub fn grid(&self, n: usize) -> Result<SpatialGrid> {
        SpatialGrid::new(self.spec, BoxDomain::centered(self.spec.dim(), n)?, self.m)
    }

    pub fn system(&self, n: usize) -> Result<ControlSystem> {
        self.system_with(n, None)
    }

    fn system_with(&self, n: usize, potential: Option<f64>) -> Result<ControlSystem> {
        let grid = self.grid(n)?;
        let pot = match potential {
            Some(a) => PotentialField::constant(a, grid.len(), self.steps),
            None => PotentialField::zero(grid.len(), self.steps),
        };
        ControlSystem::new(grid, &self.time_set, pot, &self.solve, self.steps)
    }

    fn horizon(&self) -> f64 {
        self.time_set.horizon()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Ok,
    NotConverged,
    Unobservable,
    Failed,
}

impl RunStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Ok => "ok",
            Self::NotConverged => "not-converged",
            Self::Unobservable => "unobservable",
            Self::Failed => "failed",
        }
    }

    fn of_error(e: &Error) -> Self {
        match e {
            Error::Unobservable(_) => Self::Unobservable,
            _ => Self::Failed,
        }
    }
}

/// One solve of the sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct CostRecord {
    pub n: usize,
    pub extent: f64,
    pub nodes: usize,
    /// Cost of the final control.
    pub kappa: f64,
    /// Cost at every fixed-point iteration (one entry for linear runs).
    pub inner_kappas: Vec<f64>,
    /// `‖z(T)‖/‖z0‖` under the true dynamics.
    pub final_ratio: f64,
    pub fp_iters: usize,
    pub cg_iters: usize,
    pub wall_ms: f64,
    pub status: RunStatus,
    pub message: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostCurve {
    pub records: Vec<CostRecord>,
}

impl CostCurve {
    pub fn record(&self, n: usize) -> Option<&CostRecord> {
        self.records.iter().find(|r| r.n == n)
    }

    pub fn max_inner_kappa(&self) -> f64 {
        self.records
            .iter()
            .flat_map(|r| r.inner_kappas.iter().copied())
            .fold(0.0, f64::max)
    }
}

/// Control and cost on one box.
pub struct BoxControl {
    pub system: ControlSystem,
    pub z0: Vec<f64>,
    pub control: SpaceTimeField,
    pub record: CostRecord,
}

/// Solves the control problem on the box with `n` cubes per axis.
pub fn control_on_box(cfg: &SweepConfig, n: usize) -> Result<BoxControl> {
    let start = Instant::now();
    let system = cfg.system(n)?;
    let z0 = cfg.z0.sample(system.grid());
    let extent = n as f64 * cfg.spec.cell_side();
    let nodes = system.nodes();
    let (control, kappa, inner_kappas, final_ratio, fp_iters, cg_iters, status) = if cfg.nonlinearity.is_zero() {
        let res = solve_penalized_hum(&system, &z0, &cfg.hum)?;
        (res.control, res.kappa, vec![res.kappa], res.final_ratio, 0, res.iterations, RunStatus::Ok)
    } else {
        let fp = fixed_point_solve(&system, &z0, &cfg.nonlinearity, &cfg.hum, &cfg.fixed_point)?;
        let status = if fp.converged { RunStatus::Ok } else { RunStatus::NotConverged };
        let kappa = fp.kappas.last().copied().unwrap_or(0.0);
        (
            fp.control,
            kappa,
            fp.kappas,
            fp.verified_final_ratio,
            fp.iterations,
            fp.cg_iterations.iter().sum(),
            status,
        )
    };
    let record = CostRecord {
        n,
        extent,
        nodes,
        kappa,
        inner_kappas,
        final_ratio,
        fp_iters,
        cg_iters,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
        status,
        message: None,
    };
    Ok(BoxControl { system, z0, control, record })
}

fn failed_record(cfg: &SweepConfig, n: usize, e: &Error) -> CostRecord {
    let nodes = cfg.grid(n).map(|g| g.len()).unwrap_or(0);
    CostRecord {
        n,
        extent: n as f64 * cfg.spec.cell_side(),
        nodes,
        kappa: f64::NAN,
        inner_kappas: Vec::new(),
        final_ratio: f64::NAN,
        fp_iters: 0,
        cg_iters: 0,
        wall_ms: 0.0,
        status: RunStatus::of_error(e),
        message: Some(e.to_string()),
    }
}

/// Control cost for every box size; failures are recorded and the sweep goes on.
pub fn cost_sweep(cfg: &SweepConfig) -> Result<CostCurve> {
    cfg.validate()?;
    let records = cfg
        .sizes
        .par_iter()
        .map(|&n| match control_on_box(cfg, n) {
            Ok(b) => b.record,
            Err(e) => failed_record(cfg, n, &e),
        })
        .collect();
    Ok(CostCurve { records })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PotentialPoint {
    pub amplitude: f64,
    pub kappa: f64,
    pub final_ratio: f64,
    pub iterations: usize,
}

/// Linear cost with constant potential `a ≡ A` on the box with `n` cubes.
pub fn potential_sweep(cfg: &SweepConfig, n: usize, amplitudes: &[f64]) -> Result<Vec<PotentialPoint>> {
    cfg.hum.validate()?;
    amplitudes
        .par_iter()
        .map(|&a| {
            let sys = cfg.system_with(n, Some(a))?;
            let z0 = cfg.z0.sample(sys.grid());
            let res = solve_penalized_hum(&sys, &z0, &cfg.hum)?;
            Ok(PotentialPoint { amplitude: a, kappa: res.kappa, final_ratio: res.final_ratio, iterations: res.iterations })
        })
        .collect()
}

/// Per-size diagnostics of the exhaustion study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub extent: f64,
    pub nodes: usize,
    /// `‖y_n - y_ref‖` on `B_M × (0, T)`.
    pub error: Option<f64>,
    /// `‖y(T)‖/‖y0‖` on the reference box under the control from box `n`.
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub reference: usize,
    pub y0_norm: f64,
    pub rows: Vec<ConvergenceRow>,
}

impl ConvergenceReport {
    pub fn errors(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.error).collect()
    }

    pub fn residuals(&self) -> Vec<f64> {
        self.rows.iter().filter_map(|r| r.residual).collect()
    }
}

fn source_field(cfg: &SweepConfig, grid: &SpatialGrid, g: SourceRecipe) -> Option<SpaceTimeField> {
    match g {
        SourceRecipe::None => None,
        SourceRecipe::GatedBump => {
            let profile = cfg.z0.sample(grid);
            let active = crate::time_measure::active_step_mask(&cfg.time_set, cfg.steps);
            let mut s = SpaceTimeField::zeros_on(FieldLayout::Steps, grid, cfg.steps, cfg.horizon());
            for (k, on) in active.iter().enumerate() {
                if *on {
                    s.row_mut(k).copy_from_slice(&profile);
                }
            }
            Some(s)
        }
    }
}

/// Restricts a space-time field on `from` to the nodes of `to` (zero outside `from`).
fn transfer_field(to: &SpatialGrid, from: &SpatialGrid, field: &SpaceTimeField) -> SpaceTimeField {
    let mut out = SpaceTimeField::zeros(field.layout(), to.len(), field.steps(), field.tau(), to.cell_volume());
    for r in 0..field.rows() {
        let v = to.transfer_from(from, field.row(r));
        out.row_mut(r).copy_from_slice(&v);
    }
    out
}

/// Uncontrolled solutions on every box, compared with the reference box on `B_M`.
pub fn wellposedness_sweep(cfg: &SweepConfig, g: SourceRecipe) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let solve = |n: usize| -> Result<(SpatialGrid, SpaceTimeField)> {
        let grid = cfg.grid(n)?;
        let lap = assemble_laplacian(&grid);
        let y0 = cfg.z0.sample(&grid);
        let src = source_field(cfg, &grid, g);
        let y = semilinear_forward_solve(&lap, &cfg.nonlinearity, &y0, src.as_ref(), &cfg.solve, cfg.horizon(), cfg.steps)?;
        Ok((grid, y))
    };
    let solutions: Vec<(SpatialGrid, SpaceTimeField)> = cfg.sizes.par_iter().map(|&n| solve(n)).collect::<Result<_>>()?;
    let (ref_grid, ref_sol) = &solutions[cfg.reference];
    let y0_norm = grid_norm(&cfg.z0.sample(ref_grid), ref_grid.cell_volume());
    let ball = ball_mask(ref_grid, [0.0, 0.0], cfg.comparison_radius);
    let rows = cfg
        .sizes
        .iter()
        .zip(&solutions)
        .map(|(&n, (grid, sol))| {
            let on_ref = transfer_field(ref_grid, grid, sol);
            let mut diff = on_ref;
            for r in 0..diff.rows() {
                for (d, y) in diff.row_mut(r).iter_mut().zip(ref_sol.row(r)) {
                    *d -= y;
                }
            }
            ConvergenceRow {
                n,
                extent: n as f64 * cfg.spec.cell_side(),
                nodes: grid.len(),
                error: Some(space_time_norm(&diff, Some(&ball), None)),
                residual: None,
            }
        })
        .collect();
    Ok(ConvergenceReport { reference: cfg.sizes[cfg.reference], y0_norm, rows })
}

/// Applies each box's control, extended by zero, on the reference box.
pub fn limit_control_check(cfg: &SweepConfig) -> Result<ConvergenceReport> {
    cfg.validate()?;
    let reference = cfg.sizes[cfg.reference];
    for &n in &cfg.sizes {
        if n != reference && 2 * n > reference {
            return Err(Error::InvalidConfig(format!(
                "reference box ({reference} cubes) must be at least twice every tested box, {n} is too large"
            )));
        }
    }
    let ref_sys = cfg.system(reference)?;
    let ref_z0 = cfg.z0.sample(ref_sys.grid());
    let y0_norm = grid_norm(&ref_z0, ref_sys.cell_volume());
    let rows = cfg
        .sizes
        .par_iter()
        .map(|&n| -> Result<ConvergenceRow> {
            let b = control_on_box(cfg, n)?;
            let residual = if n == reference {
                b.record.final_ratio
            } else {
                let u = transfer_field(ref_sys.grid(), b.system.grid(), &b.control);
                verify_null(&ref_sys, &u, &ref_z0, &cfg.nonlinearity)?
            };
            Ok(ConvergenceRow {
                n,
                extent: b.record.extent,
                nodes: b.record.nodes,
                error: None,
                residual: Some(residual),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConvergenceReport { reference, y0_norm, rows })
}

/// Empirical global interpolation exponent of the free solution from `z0` on each box.
pub fn interpolation_sweep(cfg: &SweepConfig) -> Result<Vec<(usize, Option<f64>)>> {
    cfg.validate()?;
    cfg.sizes
        .par_iter()
        .map(|&n| {
            let grid = cfg.grid(n)?;
            let lap = assemble_laplacian(&grid);
            let z0 = cfg.z0.sample(&grid);
            let pot = PotentialField::zero(grid.len(), cfg.steps);
            let phi = crate::heat::forward_solve(&lap, &pot, &z0, None, &cfg.solve, cfg.horizon(), cfg.steps)?;
            let mask: NodeMask = control_mask(&grid);
            Ok((n, global_interpolation_report(&grid, &phi, &mask)?.theta))
        })
        .collect()
}
