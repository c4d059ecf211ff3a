//! Finite-difference heat operator with a bounded potential and its
//! one-step time integrators.
//!
//! Every step of the linear solver has the form
//!
//! ```text
//! (I + θτ B_k) z^{k+1} = (I - (1-θ)τ B_k) z^k + τ s^k,    B_k = -Δ_h + diag(a_k)
//! ```
//!
//! with `θ = 1` (backward Euler) or `θ = 1/2` (Crank–Nicolson). The adjoint
//! solver applies the transposes of exactly these per-step matrices in
//! reverse order, so `<F z0, p> = <z0, F* p>` holds to rounding error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{NodeMask, SpatialGrid};
use crate::semilinear::Nonlinearity;

/// Time integrator of the θ-family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum TimeScheme {
    BackwardEuler,
    #[default]
    CrankNicolson,
}

impl TimeScheme {
    /// Implicitness weight θ.
    pub fn theta(self) -> f64 {
        match self {
            TimeScheme::BackwardEuler => 1.0,
            TimeScheme::CrankNicolson => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    /// Banded (tridiagonal) factorization; 1D only.
    Direct,
    /// Conjugate gradient with diagonal preconditioning.
    ConjugateGradient,
}

/// How each implicit step is solved and which integrator is used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearSolveConfig {
    /// `None` picks the direct solver in 1D and conjugate gradient in 2D.
    pub method: Option<SolverMethod>,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub scheme: TimeScheme,
}

impl Default for LinearSolveConfig {
    fn default() -> Self {
        Self {
            method: None,
            tolerance: 1e-10,
            max_iterations: 10_000,
            scheme: TimeScheme::default(),
        }
    }
}

impl LinearSolveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tolerance > 0.0 && self.tolerance <= 1e-4) {
            return Err(Error::InvalidConfig(format!(
                "solver.tolerance must lie in (0, 1e-4], got {}",
                self.tolerance
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidConfig(
                "solver.max_iterations must be positive".into(),
            ));
        }
        Ok(())
    }

    fn resolved_method(&self, dim: usize) -> SolverMethod {
        self.method.unwrap_or(if dim == 1 {
            SolverMethod::Direct
        } else {
            SolverMethod::ConjugateGradient
        })
    }
}

/// `-Δ_h` on the interior nodes of a box grid, Dirichlet rows eliminated.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteLaplacian {
    shape: Vec<usize>,
    h: f64,
    inv_h2: f64,
}

pub fn assemble_laplacian(grid: &SpatialGrid) -> DiscreteLaplacian {
    DiscreteLaplacian {
        shape: grid.shape().to_vec(),
        h: grid.h(),
        inv_h2: 1.0 / (grid.h() * grid.h()),
    }
}

impl DiscreteLaplacian {
    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Quadrature weight `h^N`.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim() as i32)
    }

    pub fn diagonal(&self) -> f64 {
        2.0 * self.dim() as f64 * self.inv_h2
    }

    pub fn off_diagonal(&self) -> f64 {
        -self.inv_h2
    }

    /// Neighbor indices of `node` inside the grid.
    fn neighbors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        let n0 = self.shape[0];
        let (i0, i1) = (node % n0, node / n0);
        let n1 = if self.dim() == 2 { self.shape[1] } else { 1 };
        let cand = [
            (i0 > 0).then(|| node - 1),
            (i0 + 1 < n0).then(|| node + 1),
            (self.dim() == 2 && i1 > 0).then(|| node - n0),
            (self.dim() == 2 && i1 + 1 < n1).then(|| node + n0),
        ];
        cand.into_iter().flatten()
    }

    /// `out = -Δ_h x`.
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        let d = self.diagonal();
        let o = self.off_diagonal();
        for (j, oj) in out.iter_mut().enumerate() {
            let mut acc = d * x[j];
            for k in self.neighbors(j) {
                acc += o * x[k];
            }
            *oj = acc;
        }
    }

    /// Nonzero entries `(row, col, value)` in row-major order.
    pub fn entries(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for j in 0..self.len() {
            let mut row: Vec<(usize, usize, f64)> = self
                .neighbors(j)
                .map(|k| (j, k, self.off_diagonal()))
                .collect();
            row.push((j, j, self.diagonal()));
            row.sort_by_key(|e| e.1);
            out.extend(row);
        }
        out
    }
}

/// Bounded potential `a(x_j, t_{k+1/2})`, one value per node and time step.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialField {
    nodes: usize,
    steps: usize,
    values: PotentialValues,
    sup_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
enum PotentialValues {
    Uniform(f64),
    Varying(Vec<f64>),
}

impl PotentialField {
    pub fn zero(nodes: usize, steps: usize) -> Self {
        Self::constant(0.0, nodes, steps)
    }

    pub fn constant(value: f64, nodes: usize, steps: usize) -> Self {
        Self {
            nodes,
            steps,
            values: PotentialValues::Uniform(value),
            sup_norm: value.abs(),
        }
    }

    /// Values laid out step-major: `values[k * nodes + j]`.
    pub fn from_values(nodes: usize, steps: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != nodes * steps {
            return Err(Error::Shape(format!(
                "potential has {} values, expected {nodes} x {steps}",
                values.len()
            )));
        }
        let sup_norm = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(Self {
            nodes,
            steps,
            values: PotentialValues::Varying(values),
            sup_norm,
        })
    }

    /// Samples `a(x, t)` at every node and at step midpoints `t = (k + 1/2) τ`.
    pub fn from_fn<F: Fn([f64; 2], f64) -> f64>(
        grid: &SpatialGrid,
        steps: usize,
        horizon: f64,
        f: F,
    ) -> Self {
        let tau = horizon / steps as f64;
        let mut values = Vec::with_capacity(grid.len() * steps);
        for k in 0..steps {
            let t = (k as f64 + 0.5) * tau;
            values.extend((0..grid.len()).map(|j| f(grid.point(j), t)));
        }
        Self::from_values(grid.len(), steps, values).expect("shape is consistent by construction")
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sup_norm(&self) -> f64 {
        self.sup_norm
    }

    pub fn value(&self, step: usize, node: usize) -> f64 {
        match &self.values {
            PotentialValues::Uniform(v) => *v,
            PotentialValues::Varying(v) => v[step * self.nodes + node],
        }
    }

    pub fn is_stationary(&self) -> bool {
        matches!(self.values, PotentialValues::Uniform(_))
    }

    /// Potential values of one step.
    pub fn step(&self, step: usize) -> Vec<f64> {
        (0..self.nodes).map(|j| self.value(step, j)).collect()
    }
}

/// Layout of a [`SpaceTimeField`]: states live on the `K + 1` time levels,
/// sources and controls on the `K` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldLayout {
    Levels,
    Steps,
}

/// Grid vectors over time, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    nodes: usize,
    steps: usize,
    layout: FieldLayout,
    tau: f64,
    cell_volume: f64,
    data: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(layout: FieldLayout, nodes: usize, steps: usize, tau: f64, cell_volume: f64) -> Self {
        let rows = match layout {
            FieldLayout::Levels => steps + 1,
            FieldLayout::Steps => steps,
        };
        Self {
            nodes,
            steps,
            layout,
            tau,
            cell_volume,
            data: vec![0.0; rows * nodes],
        }
    }

    /// Zero field shaped for `grid` with `steps` steps over `(0, horizon)`.
    pub fn zeros_on(layout: FieldLayout, grid: &SpatialGrid, steps: usize, horizon: f64) -> Self {
        Self::zeros(layout, grid.len(), steps, horizon / steps as f64, grid.cell_volume())
    }

    pub fn layout(&self) -> FieldLayout {
        self.layout
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of stored rows (`K + 1` levels or `K` steps).
    pub fn rows(&self) -> usize {
        self.data.len() / self.nodes.max(1)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.nodes..(r + 1) * self.nodes]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.nodes..(r + 1) * self.nodes]
    }

    /// Value attributed to step `k`: the row itself for step fields, the
    /// end-of-step level `k + 1` for level fields.
    pub fn step_value(&self, k: usize) -> &[f64] {
        match self.layout {
            FieldLayout::Levels => self.row(k + 1),
            FieldLayout::Steps => self.row(k),
        }
    }

    /// Final level of a level field.
    pub fn last(&self) -> &[f64] {
        self.row(self.rows() - 1)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().for_each(|v| *v *= c);
    }
}

/// Discrete `L²(ω × E)`-type norm `sqrt(Σ_k Σ_j w_j s_k |v_jk|² h^N τ)`.
/// Missing masks mean all ones.
pub fn space_time_norm(
    field: &SpaceTimeField,
    mask: Option<&NodeMask>,
    steps: Option<&[bool]>,
) -> f64 {
    let mut acc = 0.0;
    for k in 0..field.steps() {
        if let Some(s) = steps {
            if !s[k] {
                continue;
            }
        }
        let v = field.step_value(k);
        acc += match mask {
            Some(m) => v
                .iter()
                .enumerate()
                .filter(|(j, _)| m.is_marked(*j))
                .map(|(_, x)| x * x)
                .sum::<f64>(),
            None => v.iter().map(|x| x * x).sum::<f64>(),
        };
    }
    (acc * field.cell_volume() * field.tau()).sqrt()
}

/// `L²(Ω)` norm of a grid vector with quadrature weight `cell_volume`.
pub fn grid_norm(v: &[f64], cell_volume: f64) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() * cell_volume).sqrt()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Factored symmetric tridiagonal matrix with constant off-diagonal.
#[derive(Debug, Clone)]
struct Tridiagonal {
    off: f64,
    upper: Vec<f64>,
    inv_denom: Vec<f64>,
}

impl Tridiagonal {
    fn factor(diag: &[f64], off: f64) -> Self {
        let n = diag.len();
        let mut upper = vec![0.0; n];
        let mut inv_denom = vec![0.0; n];
        let mut prev_upper = 0.0;
        for j in 0..n {
            let denom = diag[j] - off * prev_upper;
            inv_denom[j] = 1.0 / denom;
            upper[j] = off * inv_denom[j];
            prev_upper = upper[j];
        }
        Self {
            off,
            upper,
            inv_denom,
        }
    }

    fn solve(&self, b: &mut [f64]) {
        let n = b.len();
        if n == 0 {
            return;
        }
        b[0] *= self.inv_denom[0];
        for j in 1..n {
            b[j] = (b[j] - self.off * b[j - 1]) * self.inv_denom[j];
        }
        for j in (0..n - 1).rev() {
            b[j] -= self.upper[j] * b[j + 1];
        }
    }
}

/// The matrices `I ± c τ B_k` of one time step.
#[derive(Debug, Clone)]
struct StepOperator {
    potential: Vec<f64>,
    factor: Option<Tridiagonal>,
}

/// Per-step operators of a linear problem, shared by the forward and adjoint solvers.
#[derive(Debug, Clone)]
pub struct Propagator {
    laplacian: DiscreteLaplacian,
    tau: f64,
    theta: f64,
    method: SolverMethod,
    cfg: LinearSolveConfig,
    steps: usize,
    /// One operator when the potential is stationary, otherwise one per step.
    ops: Vec<StepOperator>,
}

impl Propagator {
    pub fn new(
        laplacian: &DiscreteLaplacian,
        potential: &PotentialField,
        cfg: &LinearSolveConfig,
        horizon: f64,
        steps: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if steps == 0 {
            return Err(Error::InvalidConfig("time step count must be positive".into()));
        }
        if potential.nodes() != laplacian.len() || potential.steps() != steps {
            return Err(Error::Shape(format!(
                "potential is {} x {}, problem is {} nodes x {steps} steps",
                potential.nodes(),
                potential.steps(),
                laplacian.len()
            )));
        }
        let method = cfg.resolved_method(laplacian.dim());
        if method == SolverMethod::Direct && laplacian.dim() != 1 {
            return Err(Error::InvalidConfig(
                "direct banded solver is only available in 1D".into(),
            ));
        }
        let tau = horizon / steps as f64;
        let theta = cfg.scheme.theta();
        let mut prop = Self {
            laplacian: laplacian.clone(),
            tau,
            theta,
            method,
            cfg: *cfg,
            steps,
            ops: Vec::new(),
        };
        let distinct = if potential.is_stationary() { 1 } else { steps };
        prop.ops = (0..distinct)
            .map(|k| prop.step_operator(potential.step(k)))
            .collect();
        Ok(prop)
    }

    fn step_operator(&self, potential: Vec<f64>) -> StepOperator {
        let factor = (self.method == SolverMethod::Direct).then(|| {
            let c = self.theta * self.tau;
            let d = self.laplacian.diagonal();
            let diag: Vec<f64> = potential.iter().map(|a| 1.0 + c * (d + a)).collect();
            Tridiagonal::factor(&diag, c * self.laplacian.off_diagonal())
        });
        StepOperator { potential, factor }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn nodes(&self) -> usize {
        self.laplacian.len()
    }

    pub fn laplacian(&self) -> &DiscreteLaplacian {
        &self.laplacian
    }

    fn op(&self, k: usize) -> &StepOperator {
        if self.ops.len() == 1 {
            &self.ops[0]
        } else {
            &self.ops[k]
        }
    }

    /// `out = (I + c τ B_k) x` where `c` may be negative.
    fn apply_shifted(&self, op: &StepOperator, c: f64, x: &[f64], out: &mut [f64]) {
        self.laplacian.apply(x, out);
        let ct = c * self.tau;
        for j in 0..x.len() {
            out[j] = x[j] + ct * (out[j] + op.potential[j] * x[j]);
        }
    }

    /// In place: `b <- (I + θτ B_k)^{-1} b`.
    fn solve_implicit(&self, op: &StepOperator, b: &mut [f64]) -> Result<()> {
        match &op.factor {
            Some(f) => {
                f.solve(b);
                Ok(())
            }
            None => self.pcg(op, b),
        }
    }

    /// Diagonally preconditioned conjugate gradient on `I + θτ B_k`.
    fn pcg(&self, op: &StepOperator, b: &mut [f64]) -> Result<()> {
        let n = b.len();
        let c = self.theta * self.tau;
        let d = self.laplacian.diagonal();
        let inv_diag: Vec<f64> = op.potential.iter().map(|a| 1.0 / (1.0 + c * (d + a))).collect();
        let b_norm = dot(b, b).sqrt();
        if b_norm == 0.0 {
            return Ok(());
        }
        let mut x = vec![0.0; n];
        let mut r = b.to_vec();
        let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
        let mut p = z.clone();
        let mut ap = vec![0.0; n];
        let mut rz = dot(&r, &z);
        let tol = self.cfg.tolerance * b_norm;
        let mut res = b_norm;
        for _ in 0..self.cfg.max_iterations {
            self.apply_shifted(op, self.theta, &p, &mut ap);
            let alpha = rz / dot(&p, &ap);
            for j in 0..n {
                x[j] += alpha * p[j];
                r[j] -= alpha * ap[j];
            }
            res = dot(&r, &r).sqrt();
            if res <= tol {
                b.copy_from_slice(&x);
                return Ok(());
            }
            for j in 0..n {
                z[j] = r[j] * inv_diag[j];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for j in 0..n {
                p[j] = z[j] + beta * p[j];
            }
        }
        Err(Error::LinearSolve {
            iterations: self.cfg.max_iterations,
            residual: res / b_norm,
        })
    }

    /// One forward step: `next = (I+θτB_k)^{-1} ((I-(1-θ)τB_k) cur + τ src)`.
    fn forward_step(&self, k: usize, cur: &[f64], src: Option<&[f64]>, next: &mut [f64]) -> Result<()> {
        let op = self.op(k);
        if self.theta < 1.0 {
            self.apply_shifted(op, -(1.0 - self.theta), cur, next);
        } else {
            next.copy_from_slice(cur);
        }
        if let Some(s) = src {
            for (n, s) in next.iter_mut().zip(s) {
                *n += self.tau * s;
            }
        }
        self.solve_implicit(op, next)
    }

    /// Transpose of one source-free step: `out = (I-(1-θ)τB_k)(I+θτB_k)^{-1} next`.
    pub(crate) fn adjoint_step(&self, k: usize, next: &[f64], out: &mut [f64]) -> Result<()> {
        let op = self.op(k);
        let mut psi = next.to_vec();
        self.solve_implicit(op, &mut psi)?;
        if self.theta < 1.0 {
            self.apply_shifted(op, -(1.0 - self.theta), &psi, out);
        } else {
            out.copy_from_slice(&psi);
        }
        Ok(())
    }

    /// Solution levels `z^0..z^K` from `z0` with optional step source.
    pub fn forward(&self, z0: &[f64], source: Option<&SpaceTimeField>) -> Result<SpaceTimeField> {
        let n = self.nodes();
        if z0.len() != n {
            return Err(Error::Shape(format!("initial state has {} entries, grid has {n}", z0.len())));
        }
        if let Some(s) = source {
            check_source(s, n, self.steps)?;
        }
        let vol = self.laplacian.cell_volume();
        let mut out = SpaceTimeField::zeros(FieldLayout::Levels, n, self.steps, self.tau, vol);
        out.row_mut(0).copy_from_slice(z0);
        let mut next = vec![0.0; n];
        for k in 0..self.steps {
            let src = source.map(|s| s.step_value(k));
            self.forward_step(k, out.row(k), src, &mut next)?;
            out.row_mut(k + 1).copy_from_slice(&next);
        }
        Ok(out)
    }

    /// Transpose of the forward map.
    ///
    /// Returns the adjoint levels `φ^K = pT, φ^k = (I-(1-θ)τB_k)(I+θτB_k)^{-1} φ^{k+1}`
    /// and the step values `ψ^k = (I+θτB_k)^{-1} φ^{k+1}` that pair with a source:
    /// `<z^K, pT> = <z^0, φ^0> + τ Σ_k <s^k, ψ^k>`.
    pub fn backward(&self, p_final: &[f64]) -> Result<AdjointSolution> {
        let n = self.nodes();
        if p_final.len() != n {
            return Err(Error::Shape(format!(
                "final adjoint data has {} entries, grid has {n}",
                p_final.len()
            )));
        }
        let vol = self.laplacian.cell_volume();
        let mut levels = SpaceTimeField::zeros(FieldLayout::Levels, n, self.steps, self.tau, vol);
        let mut step_values = SpaceTimeField::zeros(FieldLayout::Steps, n, self.steps, self.tau, vol);
        levels.row_mut(self.steps).copy_from_slice(p_final);
        let mut psi = vec![0.0; n];
        let mut prev = vec![0.0; n];
        for k in (0..self.steps).rev() {
            let op = self.op(k);
            psi.copy_from_slice(levels.row(k + 1));
            self.solve_implicit(op, &mut psi)?;
            step_values.row_mut(k).copy_from_slice(&psi);
            if self.theta < 1.0 {
                self.apply_shifted(op, -(1.0 - self.theta), &psi, &mut prev);
                levels.row_mut(k).copy_from_slice(&prev);
            } else {
                levels.row_mut(k).copy_from_slice(&psi);
            }
        }
        Ok(AdjointSolution { levels, step_values })
    }
}

fn check_source(s: &SpaceTimeField, nodes: usize, steps: usize) -> Result<()> {
    if s.nodes() != nodes || s.steps() != steps {
        return Err(Error::Shape(format!(
            "source is {} nodes x {} steps, problem is {nodes} x {steps}",
            s.nodes(),
            s.steps()
        )));
    }
    Ok(())
}

/// Output of the adjoint solver.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointSolution {
    /// `φ^0..φ^K`.
    pub levels: SpaceTimeField,
    /// `ψ^0..ψ^{K-1}`, the values that multiply step sources and controls.
    pub step_values: SpaceTimeField,
}

/// Forward linear solve; see [`Propagator::forward`].
pub fn forward_solve(
    laplacian: &DiscreteLaplacian,
    potential: &PotentialField,
    z0: &[f64],
    source: Option<&SpaceTimeField>,
    cfg: &LinearSolveConfig,
    horizon: f64,
    steps: usize,
) -> Result<SpaceTimeField> {
    let prop = Propagator::new(laplacian, potential, cfg, horizon, steps)?;
    prop.forward(z0, source)
}

/// Adjoint solve; see [`Propagator::backward`].
pub fn backward_adjoint_solve(
    laplacian: &DiscreteLaplacian,
    potential: &PotentialField,
    p_final: &[f64],
    cfg: &LinearSolveConfig,
    horizon: f64,
    steps: usize,
) -> Result<AdjointSolution> {
    let prop = Propagator::new(laplacian, potential, cfg, horizon, steps)?;
    prop.backward(p_final)
}

/// Semilinear forward solve of `∂_t z - Δz + f(z) = source`.
///
/// Each step freezes the quotient potential `a_k = f(z^k)/z^k` (so that
/// `a_k z^k = f(z^k)` exactly) and then takes one linear θ-step with it.
/// With this splitting the controlled linear problem with potential
/// `a(ξ)` and the semilinear problem coincide step by step when `ξ = z`.
pub fn semilinear_forward_solve(
    laplacian: &DiscreteLaplacian,
    f: &Nonlinearity,
    z0: &[f64],
    source: Option<&SpaceTimeField>,
    cfg: &LinearSolveConfig,
    horizon: f64,
    steps: usize,
) -> Result<SpaceTimeField> {
    cfg.validate()?;
    let tau = horizon / steps as f64;
    let guard = tau * f.lipschitz();
    if guard >= 1.0 {
        return Err(Error::Stability(guard));
    }
    let n = laplacian.len();
    if z0.len() != n {
        return Err(Error::Shape(format!("initial state has {} entries, grid has {n}", z0.len())));
    }
    if let Some(s) = source {
        check_source(s, n, steps)?;
    }
    let mut out = SpaceTimeField::zeros(FieldLayout::Levels, n, steps, tau, laplacian.cell_volume());
    out.row_mut(0).copy_from_slice(z0);
    let mut next = vec![0.0; n];
    for k in 0..steps {
        let a = f.quotient_level(out.row(k));
        let one_step = PotentialField::from_values(n, 1, a)?;
        let prop = Propagator::new(laplacian, &one_step, cfg, tau, 1)?;
        let src = source.map(|s| s.step_value(k));
        prop.forward_step(0, out.row(k), src, &mut next)?;
        out.row_mut(k + 1).copy_from_slice(&next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{BoxDomain, LatticeSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    /// Unit interval as one lattice cell with `m` grid cells.
    fn unit_grid(m: usize) -> SpatialGrid {
        let spec = LatticeSpec::new(1, 0.2, 0.5).unwrap();
        SpatialGrid::new(spec, BoxDomain::new(vec![0], vec![0]).unwrap(), m).unwrap()
    }

    fn unit_square(m: usize) -> SpatialGrid {
        let spec = LatticeSpec::new(2, 0.2, 0.5).unwrap();
        SpatialGrid::new(spec, BoxDomain::new(vec![0, 0], vec![0, 0]).unwrap(), m).unwrap()
    }

    #[test]
    fn one_dimensional_stencil_values() {
        let lap = assemble_laplacian(&unit_grid(4));
        let e = lap.entries();
        let row1: Vec<f64> = e.iter().filter(|t| t.0 == 1).map(|t| t.2).collect();
        assert_eq!(row1, vec![-16.0, 32.0, -16.0]);
        let mut out = vec![0.0; 3];
        lap.apply(&[1.0, 1.0, 1.0], &mut out);
        assert_eq!(out, vec![16.0, 0.0, 16.0]);
    }

    #[test]
    fn two_dimensional_stencil_matches_dense_assembly_and_eigenpair() {
        let grid = unit_square(4);
        let lap = assemble_laplacian(&grid);
        let n = grid.len();
        assert_eq!(n, 9);
        let h = grid.h();
        // dense oracle from coordinates alone
        let mut dense = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let (pi, pj) = (grid.point(i), grid.point(j));
                let dist = ((pi[0] - pj[0]).abs() + (pi[1] - pj[1]).abs()) / h;
                if i == j {
                    dense[i][j] = 4.0 / (h * h);
                } else if (dist - 1.0).abs() < 1e-9 {
                    dense[i][j] = -1.0 / (h * h);
                }
            }
        }
        let v = grid.sample(|p| (PI * p[0]).sin() * (PI * p[1]).sin());
        let mut out = vec![0.0; n];
        lap.apply(&v, &mut out);
        let lambda = 2.0 * (2.0 - 2.0 * (PI * h).cos()) / (h * h);
        for i in 0..n {
            let dense_row: f64 = (0..n).map(|j| dense[i][j] * v[j]).sum();
            assert!((dense_row - out[i]).abs() < 1e-10);
            assert!((out[i] - lambda * v[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn laplacian_converges_at_second_order() {
        let err = |m: usize| {
            let grid = unit_grid(m);
            let lap = assemble_laplacian(&grid);
            // smooth bump supported in (0.1, 0.9)
            let f = |x: f64| {
                let s = (x - 0.5) / 0.4;
                if s.abs() < 1.0 { (1.0 - s * s).powi(4) } else { 0.0 }
            };
            let lap_f = |x: f64| {
                let s = (x - 0.5) / 0.4;
                if s.abs() < 1.0 {
                    let u = 1.0 - s * s;
                    -(8.0 * u.powi(3) * (-1.0) + 48.0 * s * s * u.powi(2)) / 0.16
                } else {
                    0.0
                }
            };
            let v = grid.sample(|p| f(p[0]));
            let mut out = vec![0.0; v.len()];
            lap.apply(&v, &mut out);
            (0..v.len())
                .map(|j| (out[j] - lap_f(grid.point(j)[0])).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(64), err(128));
        assert!(e1 / e2 > 3.5, "ratio {}", e1 / e2);
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let grid = unit_grid(16);
        let lap = assemble_laplacian(&grid);
        let pot = PotentialField::constant(2.0, grid.len(), 10);
        let cfg = LinearSolveConfig::default();
        let z = forward_solve(&lap, &pot, &vec![0.0; grid.len()], None, &cfg, 1.0, 10).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
        let adj = backward_adjoint_solve(&lap, &pot, &vec![0.0; grid.len()], &cfg, 1.0, 10).unwrap();
        assert!(adj.levels.as_slice().iter().all(|&v| v == 0.0));
    }

    fn eigen_error(m: usize, steps: usize, c: f64, scheme: TimeScheme) -> f64 {
        let grid = unit_grid(m);
        let lap = assemble_laplacian(&grid);
        let pot = PotentialField::constant(c, grid.len(), steps);
        let cfg = LinearSolveConfig { scheme, ..Default::default() };
        let z0 = grid.sample(|p| (PI * p[0]).sin());
        let z = forward_solve(&lap, &pot, &z0, None, &cfg, 0.1, steps).unwrap();
        let amp = (-(PI * PI + c) * 0.1).exp();
        let exact: Vec<f64> = z0.iter().map(|v| amp * v).collect();
        let diff: Vec<f64> = z.last().iter().zip(&exact).map(|(a, b)| a - b).collect();
        grid_norm(&diff, grid.cell_volume()) / grid_norm(&exact, grid.cell_volume())
    }

    #[test]
    fn eigenfunction_decay_with_constant_potential() {
        assert!(eigen_error(128, 100, 0.0, TimeScheme::CrankNicolson) < 1e-3);
        assert!(eigen_error(128, 100, 3.0, TimeScheme::CrankNicolson) < 1e-3);
        // backward Euler is first order in time: about 5e-3 at this step
        let be = eigen_error(128, 100, 0.0, TimeScheme::BackwardEuler);
        assert!(be > 1e-3 && be < 1e-2, "{be}");
        assert!(eigen_error(128, 200, 0.0, TimeScheme::BackwardEuler) < 0.55 * be);
    }

    fn random_problem(seed: u64, steps: usize) -> (SpatialGrid, DiscreteLaplacian, PotentialField) {
        let spec = LatticeSpec::new(1, 0.2, 0.5).unwrap();
        let grid = SpatialGrid::new(spec, BoxDomain::centered(1, 2).unwrap(), 33).unwrap();
        let lap = assemble_laplacian(&grid);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = (0..grid.len() * steps).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pot = PotentialField::from_values(grid.len(), steps, vals).unwrap();
        (grid, lap, pot)
    }

    #[test]
    fn adjoint_is_exact_transpose_with_source() {
        for scheme in [TimeScheme::CrankNicolson, TimeScheme::BackwardEuler] {
            let steps = 64;
            let (grid, lap, pot) = random_problem(7, steps);
            let n = grid.len();
            let cfg = LinearSolveConfig { scheme, ..Default::default() };
            let prop = Propagator::new(&lap, &pot, &cfg, 1.0, steps).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let z0: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut src = SpaceTimeField::zeros(FieldLayout::Steps, n, steps, prop.tau(), 1.0);
            for k in 0..steps {
                for v in src.row_mut(k) {
                    *v = rng.gen_range(-1.0..1.0);
                }
            }
            let z = prop.forward(&z0, Some(&src)).unwrap();
            let adj = prop.backward(&p).unwrap();
            let lhs = dot(z.last(), &p);
            let mut rhs = dot(&z0, adj.levels.row(0));
            for k in 0..steps {
                rhs += prop.tau() * dot(src.row(k), adj.step_values.row(k));
            }
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn zero_potential_backward_equals_forward() {
        let grid = unit_grid(32);
        let lap = assemble_laplacian(&grid);
        let pot = PotentialField::zero(grid.len(), 20);
        let cfg = LinearSolveConfig::default();
        let p = grid.sample(|x| x[0] * (1.0 - x[0]) * (3.0 * x[0]).cos());
        let fwd = forward_solve(&lap, &pot, &p, None, &cfg, 0.5, 20).unwrap();
        let bwd = backward_adjoint_solve(&lap, &pot, &p, &cfg, 0.5, 20).unwrap();
        for k in 0..=20 {
            for (a, b) in fwd.row(k).iter().zip(bwd.levels.row(20 - k)) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn energy_decays_for_nonnegative_potential() {
        let (grid, lap, _) = random_problem(1, 40);
        let pot = PotentialField::from_fn(&grid, 40, 1.0, |x, t| 1.0 + (x[0] * 3.0 + t).sin());
        let z0 = grid.sample(|x| (1.0 - x[0] * x[0]) * (5.0 * x[0]).sin());
        let z = forward_solve(&lap, &pot, &z0, None, &LinearSolveConfig::default(), 1.0, 40).unwrap();
        for k in 0..40 {
            assert!(grid_norm(z.row(k + 1), 1.0) <= grid_norm(z.row(k), 1.0) * (1.0 + 1e-14));
        }
    }

    #[test]
    fn growth_bound_with_negative_potential() {
        let (grid, lap, _) = random_problem(1, 100);
        let a_inf = 2.0;
        let pot = PotentialField::constant(-a_inf, grid.len(), 100);
        let z0 = grid.sample(|x| (1.0 - x[0] * x[0]).max(0.0));
        let z = forward_solve(&lap, &pot, &z0, None, &LinearSolveConfig::default(), 1.0, 100).unwrap();
        let n0 = grid_norm(&z0, 1.0);
        for k in 0..=100 {
            let t = k as f64 * 0.01;
            assert!(grid_norm(z.row(k), 1.0) <= (a_inf * t).exp() * n0 * (1.0 + 0.01));
        }
    }

    #[test]
    fn space_time_norms() {
        let grid = unit_grid(64);
        let steps = 50;
        let mut f = SpaceTimeField::zeros_on(FieldLayout::Levels, &grid, steps, 2.0);
        for r in 0..=steps {
            f.row_mut(r).iter_mut().for_each(|v| *v = 1.0);
        }
        let full = space_time_norm(&f, None, None);
        assert!((full - (2.0f64 * 63.0 / 64.0).sqrt()).abs() < 1e-12);
        let zero = SpaceTimeField::zeros_on(FieldLayout::Levels, &grid, steps, 2.0);
        assert_eq!(space_time_norm(&zero, None, None), 0.0);
        let half = NodeMask::from_bools((0..grid.len()).map(|j| j % 2 == 0).collect());
        let ratio = space_time_norm(&f, Some(&half), None) / full;
        // 32 of 63 nodes
        assert!((ratio - (32.0f64 / 63.0).sqrt()).abs() < 1e-12);
        let first_half: Vec<bool> = (0..steps).map(|k| k < steps / 2).collect();
        let r2 = space_time_norm(&f, None, Some(&first_half)) / full;
        assert!((r2 - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn two_dimensional_cg_solve_is_consistent_with_adjoint() {
        let spec = LatticeSpec::new(2, 0.2, 0.5).unwrap();
        let grid = SpatialGrid::new(spec, BoxDomain::centered(2, 2).unwrap(), 6).unwrap();
        let lap = assemble_laplacian(&grid);
        let steps = 10;
        let pot = PotentialField::from_fn(&grid, steps, 1.0, |x, _| x[0].abs());
        let cfg = LinearSolveConfig::default();
        let prop = Propagator::new(&lap, &pot, &cfg, 1.0, steps).unwrap();
        let z0 = grid.sample(|x| (x[0] + 0.3 * x[1]).cos() * (1.0 - x[0] * x[0]) * (1.0 - x[1] * x[1]));
        let p = grid.sample(|x| (2.0 * x[1]).sin() + x[0]);
        let lhs = dot(prop.forward(&z0, None).unwrap().last(), &p);
        let rhs = dot(&z0, prop.backward(&p).unwrap().levels.row(0));
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }

    #[test]
    fn direct_solver_rejected_in_two_dimensions() {
        let grid = unit_square(4);
        let lap = assemble_laplacian(&grid);
        let cfg = LinearSolveConfig { method: Some(SolverMethod::Direct), ..Default::default() };
        let pot = PotentialField::zero(grid.len(), 4);
        assert!(Propagator::new(&lap, &pot, &cfg, 1.0, 4).is_err());
    }

    #[test]
    fn semilinear_matches_linear_for_linear_nonlinearities() {
        let grid = unit_grid(32);
        let lap = assemble_laplacian(&grid);
        let cfg = LinearSolveConfig::default();
        let z0 = grid.sample(|x| (PI * x[0]).sin() + 0.3 * (3.0 * PI * x[0]).sin());
        let steps = 40;
        let zero_pot = PotentialField::zero(grid.len(), steps);
        let lin = forward_solve(&lap, &zero_pot, &z0, None, &cfg, 1.0, steps).unwrap();
        let semi = semilinear_forward_solve(&lap, &Nonlinearity::Zero, &z0, None, &cfg, 1.0, steps).unwrap();
        assert_eq!(lin.as_slice(), semi.as_slice());

        let c = 2.5;
        let pot = PotentialField::constant(c, grid.len(), steps);
        let lin = forward_solve(&lap, &pot, &z0, None, &cfg, 1.0, steps).unwrap();
        let semi =
            semilinear_forward_solve(&lap, &Nonlinearity::Linear(c), &z0, None, &cfg, 1.0, steps).unwrap();
        for (a, b) in lin.as_slice().iter().zip(semi.as_slice()) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn semilinear_rejects_unstable_step() {
        let grid = unit_grid(8);
        let lap = assemble_laplacian(&grid);
        let z0 = vec![0.0; grid.len()];
        let err = semilinear_forward_solve(
            &lap,
            &Nonlinearity::Sin(20.0),
            &z0,
            None,
            &LinearSolveConfig::default(),
            1.0,
            10,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Stability(_)));
        let ok = semilinear_forward_solve(
            &lap,
            &Nonlinearity::Sin(1.0),
            &z0,
            None,
            &LinearSolveConfig::default(),
            1.0,
            10,
        )
        .unwrap();
        assert!(ok.as_slice().iter().all(|&v| v == 0.0));
    }
}
