//! Time sets given as finite unions of open intervals, and the geometric
//! sequence of times accumulating at a density point used to sum the
//! interpolation inequality over `E`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A finite union of disjoint open intervals inside `(0, T)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSet {
    horizon: f64,
    intervals: Vec<(f64, f64)>,
}

impl TimeSet {
    /// Intervals must be sorted, pairwise disjoint, nondegenerate and inside `[0, T]`.
    /// An empty list is accepted and represents the null set.
    pub fn new(horizon: f64, intervals: Vec<(f64, f64)>) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "horizon T must be positive, got {horizon}"
            )));
        }
        for (j, &(a, b)) in intervals.iter().enumerate() {
            if !(0.0 <= a && a < b && b <= horizon) {
                return Err(Error::InvalidConfig(format!(
                    "time interval {j} = ({a}, {b}) must satisfy 0 <= a < b <= T = {horizon}"
                )));
            }
            if j > 0 && intervals[j - 1].1 > a {
                return Err(Error::InvalidConfig(format!(
                    "time intervals {} and {j} overlap or are unsorted",
                    j - 1
                )));
            }
        }
        Ok(Self { horizon, intervals })
    }

    /// The whole window `(0, T)`.
    pub fn full(horizon: f64) -> Result<Self> {
        Self::new(horizon, vec![(0.0, horizon)])
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn intervals(&self) -> &[(f64, f64)] {
        &self.intervals
    }

    pub fn contains(&self, t: f64) -> bool {
        self.intervals.iter().any(|&(a, b)| a < t && t < b)
    }
}

/// Lebesgue measure `|E|`.
pub fn measure(set: &TimeSet) -> f64 {
    set.intervals.iter().map(|(a, b)| b - a).sum()
}

/// `|E ∩ (a, b)|` by clipping every component.
pub fn intersect_measure(set: &TimeSet, a: f64, b: f64) -> f64 {
    set.intervals
        .iter()
        .map(|&(lo, hi)| {
            let left = lo.max(a);
            let right = hi.min(b);
            if right > left {
                right - left
            } else {
                0.0
            }
        })
        .sum()
}

/// Step `k` of `K` uniform steps is active iff its midpoint lies in `E`.
pub fn active_step_mask(set: &TimeSet, steps: usize) -> Vec<bool> {
    let tau = set.horizon / steps as f64;
    (0..steps)
        .map(|k| set.contains((k as f64 + 0.5) * tau))
        .collect()
}

/// Picks `l` as the left end of the longest component `(a, b)` (earliest on
/// ties, lengths compared to `1e-12 T`) and `l1 = a + 0.9 (b - a)`, so that `(l, l1)` lies inside `E`.
pub fn choose_density_anchor(set: &TimeSet) -> Result<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &(a, b) in &set.intervals {
        match best {
            Some((ba, bb)) if bb - ba >= (b - a) - 1e-12 * set.horizon => {}
            _ => best = Some((a, b)),
        }
    }
    let (a, b) = best.ok_or(Error::EmptyTimeSet)?;
    Ok((a, a + 0.9 * (b - a)))
}

/// One consecutive pair `(l_{m+1}, l_m)` of the sequence and its check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TelescopePair {
    /// Index `m` of the upper term.
    pub m: usize,
    pub upper: f64,
    pub lower: f64,
    pub gap: f64,
    /// `|E ∩ (l_{m+1}, l_m)|`.
    pub measure: f64,
    pub pass: bool,
}

/// Terms `l_m = l + ratio^{-(m-1)} (l1 - l)` for `m = 1..=M`, with the
/// measure condition `l_m - l_{m+1} <= 3 |E ∩ (l_{m+1}, l_m)|` evaluated per pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TelescopeSequence {
    pub anchor: f64,
    pub l1: f64,
    pub ratio: f64,
    pub terms: Vec<f64>,
    pub pairs: Vec<TelescopePair>,
}

impl TelescopeSequence {
    pub fn holds(&self) -> bool {
        self.pairs.iter().all(|p| p.pass)
    }

    /// Index `m` of the first violating pair.
    pub fn first_violation(&self) -> Option<usize> {
        self.pairs.iter().find(|p| !p.pass).map(|p| p.m)
    }

    /// Closed form `(ratio - 1)(l1 - l) / ratio^m` of the gap `l_m - l_{m+1}`.
    pub fn closed_form_gap(&self, m: usize) -> f64 {
        (self.ratio - 1.0) * (self.l1 - self.anchor) / self.ratio.powi(m as i32)
    }
}

pub fn build_telescope(
    set: &TimeSet,
    anchor: f64,
    l1: f64,
    ratio: f64,
    count: usize,
) -> Result<TelescopeSequence> {
    if !(anchor < l1 && l1 < set.horizon) {
        return Err(Error::InvalidConfig(format!(
            "telescope anchor requires l < l1 < T, got l = {anchor}, l1 = {l1}, T = {}",
            set.horizon
        )));
    }
    if !(ratio > 1.0 && ratio.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "telescope ratio must exceed 1, got {ratio}"
        )));
    }
    if count < 2 {
        return Err(Error::InvalidConfig(format!(
            "telescope needs at least 2 terms, got {count}"
        )));
    }
    // offsets from the anchor keep the gaps free of cancellation against `l`
    let offsets: Vec<f64> = (0..count)
        .map(|i| (l1 - anchor) / ratio.powi(i as i32))
        .collect();
    let shifted: Vec<(f64, f64)> = set
        .intervals
        .iter()
        .map(|&(a, b)| (a - anchor, b - anchor))
        .collect();
    let terms = offsets.iter().map(|o| anchor + o).collect();
    let pairs = offsets
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let (upper, lower) = (w[0], w[1]);
            let gap = upper - lower;
            let meas: f64 = shifted
                .iter()
                .map(|&(a, b)| (b.min(upper) - a.max(lower)).max(0.0))
                .sum();
            TelescopePair {
                m: i + 1,
                upper: anchor + upper,
                lower: anchor + lower,
                gap,
                measure: meas,
                pass: gap <= 3.0 * meas,
            }
        })
        .collect();
    Ok(TelescopeSequence {
        anchor,
        l1,
        ratio,
        terms,
        pairs,
    })
}
