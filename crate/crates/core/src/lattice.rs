//! Equidistributed control sets on a cubic lattice and the box domains built from it.
//!
//! Space is tiled by closed cubes of half-side `r2` centered at
//! `x_i = (2 i + 1) r2` (componentwise, `i` an integer multi-index). The
//! control set is the union of closed balls `B_{r1}(x_i)`. A [`BoxDomain`]
//! selects a rectangular block of cells; its interior is the open box that
//! the solvers work on, with homogeneous Dirichlet data on the boundary.
//!
//! Grid spacing is always `h = 2 r2 / m`, so every cell face is a grid line
//! and grids on nested boxes agree node for node.

use crate::error::{Error, Result};

/// Lattice parameters: dimension, inner ball radius and cube half-side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatticeSpec {
    dim: usize,
    r1: f64,
    r2: f64,
}

impl LatticeSpec {
    pub fn new(dim: usize, r1: f64, r2: f64) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::InvalidConfig(format!(
                "lattice.dim must be 1 or 2, got {dim}"
            )));
        }
        if !(r1 > 0.0 && r1.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "lattice.r1 must be positive, got {r1}"
            )));
        }
        if !(r1 < r2 && r2.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "(H1) requires r1 < r2, got r1 = {r1}, r2 = {r2}"
            )));
        }
        Ok(Self { dim, r1, r2 })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn r1(&self) -> f64 {
        self.r1
    }

    pub fn r2(&self) -> f64 {
        self.r2
    }

    /// Side length `2 r2` of one lattice cube.
    pub fn cell_side(&self) -> f64 {
        2.0 * self.r2
    }

    /// Same lattice with a different inner radius.
    pub fn with_r1(&self, r1: f64) -> Result<Self> {
        Self::new(self.dim, r1, self.r2)
    }
}

/// A rectangular block of lattice cells, `lo[d] ..= hi[d]` along each axis.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BoxDomain {
    lo: Vec<i64>,
    hi: Vec<i64>,
}

impl BoxDomain {
    pub fn new(lo: Vec<i64>, hi: Vec<i64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() || lo.len() > 2 {
            return Err(Error::InvalidConfig(format!(
                "box bounds must have matching length 1 or 2, got {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return Err(Error::InvalidConfig(format!(
                "box lower bound {lo:?} exceeds upper bound {hi:?}"
            )));
        }
        Ok(Self { lo, hi })
    }

    /// Box with `n` cells per axis, grown symmetrically about the origin:
    /// cells `-floor(n/2) ..= ceil(n/2) - 1`. Successive `n` give nested boxes.
    pub fn centered(dim: usize, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("box size must be at least 1".into()));
        }
        let lo = -((n / 2) as i64);
        let hi = lo + n as i64 - 1;
        Self::new(vec![lo; dim], vec![hi; dim])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[i64] {
        &self.lo
    }

    pub fn hi(&self) -> &[i64] {
        &self.hi
    }

    /// Number of cells along `axis`.
    pub fn cells(&self, axis: usize) -> usize {
        (self.hi[axis] - self.lo[axis] + 1) as usize
    }

    pub fn cell_count(&self) -> usize {
        (0..self.dim()).map(|a| self.cells(a)).product()
    }

    /// Physical side lengths `2 r2 (hi - lo + 1)`.
    pub fn extent(&self, spec: &LatticeSpec) -> Vec<f64> {
        (0..self.dim())
            .map(|a| spec.cell_side() * self.cells(a) as f64)
            .collect()
    }

    pub fn contains(&self, other: &BoxDomain) -> bool {
        self.dim() == other.dim()
            && (0..self.dim()).all(|a| self.lo[a] <= other.lo[a] && other.hi[a] <= self.hi[a])
    }
}

/// Cube centers `x_i` of every cell in the box, axis 0 varying fastest.
pub fn build_lattice_centers(spec: &LatticeSpec, domain: &BoxDomain) -> Vec<Vec<f64>> {
    let side = spec.cell_side();
    let center = |i: i64| (i as f64) * side + spec.r2;
    match domain.dim() {
        1 => (domain.lo[0]..=domain.hi[0]).map(|i| vec![center(i)]).collect(),
        _ => {
            let mut out = Vec::with_capacity(domain.cell_count());
            for j in domain.lo[1]..=domain.hi[1] {
                for i in domain.lo[0]..=domain.hi[0] {
                    out.push(vec![center(i), center(j)]);
                }
            }
            out
        }
    }
}

/// Finite-difference grid on the interior of a box domain.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    spec: LatticeSpec,
    domain: BoxDomain,
    m: usize,
    h: f64,
    shape: Vec<usize>,
    /// Global integer node index per axis; coordinate is `index * h`.
    global: Vec<[i64; 2]>,
}

impl SpatialGrid {
    pub fn new(spec: LatticeSpec, domain: BoxDomain, m: usize) -> Result<Self> {
        if m < 2 {
            return Err(Error::InvalidConfig(format!(
                "lattice.m (cells per cube side) must be at least 2, got {m}"
            )));
        }
        if domain.dim() != spec.dim() {
            return Err(Error::InvalidConfig(format!(
                "domain dimension {} does not match lattice dimension {}",
                domain.dim(),
                spec.dim()
            )));
        }
        let h = spec.cell_side() / m as f64;
        let mi = m as i64;
        let shape: Vec<usize> = (0..domain.dim()).map(|a| domain.cells(a) * m - 1).collect();
        let first: Vec<i64> = (0..domain.dim()).map(|a| domain.lo[a] * mi + 1).collect();
        let mut global = Vec::with_capacity(shape.iter().product());
        match domain.dim() {
            1 => {
                for i in 0..shape[0] {
                    global.push([first[0] + i as i64, 0]);
                }
            }
            _ => {
                for j in 0..shape[1] {
                    for i in 0..shape[0] {
                        global.push([first[0] + i as i64, first[1] + j as i64]);
                    }
                }
            }
        }
        Ok(Self {
            spec,
            domain,
            m,
            h,
            shape,
            global,
        })
    }

    pub fn spec(&self) -> &LatticeSpec {
        &self.spec
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    /// Interior node counts per axis.
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global.is_empty()
    }

    /// Quadrature weight `h^N` of one node.
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim() as i32)
    }

    pub fn global_index(&self, node: usize) -> [i64; 2] {
        self.global[node]
    }

    /// Coordinate of `node` along `axis`.
    pub fn coord(&self, node: usize, axis: usize) -> f64 {
        self.global[node][axis] as f64 * self.h
    }

    /// Physical coordinates of `node` (unused axes are zero).
    pub fn point(&self, node: usize) -> [f64; 2] {
        let g = self.global[node];
        [g[0] as f64 * self.h, g[1] as f64 * self.h]
    }

    /// Dense index of the node with global integer index `g`, if interior.
    pub fn index_of(&self, g: [i64; 2]) -> Option<usize> {
        let mi = self.m as i64;
        let mut idx = 0usize;
        let mut stride = 1usize;
        for a in 0..self.dim() {
            let local = g[a] - (self.domain.lo[a] * mi + 1);
            if local < 0 || local as usize >= self.shape[a] {
                return None;
            }
            idx += local as usize * stride;
            stride *= self.shape[a];
        }
        Some(idx)
    }

    /// Midpoint of the domain (the origin of the lattice for centered boxes).
    pub fn domain_center(&self) -> [f64; 2] {
        let side = self.spec.cell_side();
        let mut c = [0.0; 2];
        for (a, ca) in c.iter_mut().enumerate().take(self.dim()) {
            *ca = 0.5 * side * (self.domain.lo[a] + self.domain.hi[a] + 1) as f64;
        }
        c
    }

    /// Sample a function of position at every interior node.
    pub fn sample<F: Fn([f64; 2]) -> f64>(&self, f: F) -> Vec<f64> {
        (0..self.len()).map(|j| f(self.point(j))).collect()
    }

    /// Copy `values` (defined on `other`) onto this grid; nodes of this grid
    /// absent from `other` get zero. This is extension by zero when `other` is
    /// the smaller box and restriction when it is the larger one.
    pub fn transfer_from(&self, other: &SpatialGrid, values: &[f64]) -> Vec<f64> {
        (0..self.len())
            .map(|j| {
                other
                    .index_of(self.global[j])
                    .map(|i| values[i])
                    .unwrap_or(0.0)
            })
            .collect()
    }
}

/// Per-node 0/1 weights marking membership in the control set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeMask {
    marked: Vec<bool>,
}

impl NodeMask {
    pub fn from_bools(marked: Vec<bool>) -> Self {
        Self { marked }
    }

    /// Every node marked (control acting on the whole domain).
    pub fn full(len: usize) -> Self {
        Self {
            marked: vec![true; len],
        }
    }

    pub fn len(&self) -> usize {
        self.marked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marked.is_empty()
    }

    pub fn is_marked(&self, node: usize) -> bool {
        self.marked[node]
    }

    pub fn weight(&self, node: usize) -> f64 {
        if self.marked[node] {
            1.0
        } else {
            0.0
        }
    }

    pub fn count(&self) -> usize {
        self.marked.iter().filter(|&&m| m).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.marked
    }
}

/// Marks the nodes lying in some closed ball `B_{r1}(x_i)` with `x_i` a cube
/// center of the domain. A node at distance exactly `r1` counts as inside.
pub fn control_mask(grid: &SpatialGrid) -> NodeMask {
    let spec = grid.spec();
    let side = spec.cell_side();
    let r1 = spec.r1();
    // absorbs rounding in the squared distance so exact ties stay inside
    let tie = 1e-12 * spec.r2() * spec.r2();
    let domain = grid.domain();
    let marked = (0..grid.len())
        .map(|j| {
            let p = grid.point(j);
            let mut d2 = 0.0;
            for (a, &pa) in p.iter().enumerate().take(grid.dim()) {
                let cell = ((pa - spec.r2()) / side)
                    .round()
                    .clamp(domain.lo()[a] as f64, domain.hi()[a] as f64);
                let c = cell * side + spec.r2();
                d2 += (pa - c) * (pa - c);
            }
            d2 <= r1 * r1 + tie
        })
        .collect();
    NodeMask { marked }
}
