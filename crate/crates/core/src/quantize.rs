//! Uniform hypercube quantization of the state space and finite action grids.
//!
//! The cube `K = center + [-N/2, N/2]^d` is split into `k` cells per axis,
//! giving `M = k^d` interior bins indexed `0..M`. Everything outside `K`
//! falls into the overflow bin with index `M`. Cells are closed below and
//! open above, except the last cell on each axis which also contains its
//! upper face, so the interior bins cover `K` exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sde::Interval;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateQuantizer {
    dim: usize,
    side: f64,
    bins_per_axis: usize,
    center: Vec<f64>,
    delta: f64,
    overflow_rep: Vec<f64>,
}

impl StateQuantizer {
    /// Centered cube of side `side` with `bins_per_axis` cells per axis.
    ///
    /// The overflow representative defaults to the center of the cube's
    /// upper face along the first axis, `center + (N/2)·e_1`.
    pub fn new(dim: usize, side: f64, bins_per_axis: usize, overflow_rep: Option<Vec<f64>>) -> Result<Self> {
        Self::with_center(vec![0.0; dim], side, bins_per_axis, overflow_rep)
    }

    /// Same partition translated to `center` (e.g. `[0, 2]` for a
    /// nonnegative population state is center 1, side 2).
    pub fn with_center(center: Vec<f64>, side: f64, bins_per_axis: usize, overflow_rep: Option<Vec<f64>>) -> Result<Self> {
        let dim = center.len();
        if dim == 0 {
            return Err(Error::invalid("quantizer dimension must be at least 1"));
        }
        if !(side > 0.0 && side.is_finite()) {
            return Err(Error::invalid(format!("quantizer side N must be positive, got {side}")));
        }
        if bins_per_axis == 0 {
            return Err(Error::invalid("quantizer bins per axis k must be at least 1"));
        }
        if center.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("quantizer center must be finite"));
        }
        let bins = (bins_per_axis as u128).checked_pow(dim as u32);
        if bins.map_or(true, |b| b >= u32::MAX as u128) {
            return Err(Error::invalid("quantizer has too many cells"));
        }
        let overflow_rep = match overflow_rep {
            Some(r) if r.len() != dim => {
                return Err(Error::invalid(format!(
                    "overflow representative has dimension {}, expected {dim}",
                    r.len()
                )))
            }
            Some(r) => r,
            None => {
                let mut r = center.clone();
                r[0] += side / 2.0;
                r
            }
        };
        Ok(Self {
            dim,
            side,
            bins_per_axis,
            delta: side / bins_per_axis as f64,
            center,
            overflow_rep,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Cube side `N`.
    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn bins_per_axis(&self) -> usize {
        self.bins_per_axis
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    /// Cell width `Δ = N / k`.
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Number of interior cells `M = k^d`.
    pub fn interior_bins(&self) -> usize {
        self.bins_per_axis.pow(self.dim as u32)
    }

    /// `M + 1`, counting the overflow bin.
    pub fn n_bins(&self) -> usize {
        self.interior_bins() + 1
    }

    pub fn overflow_index(&self) -> usize {
        self.interior_bins()
    }

    pub fn is_overflow(&self, bin: usize) -> bool {
        bin == self.overflow_index()
    }

    /// Lower corner of the cube along axis `i`.
    fn lo(&self, i: usize) -> f64 {
        self.center[i] - 0.5 * self.side
    }

    fn hi(&self, i: usize) -> f64 {
        self.center[i] + 0.5 * self.side
    }

    /// Per-axis cell indices of an interior bin; axis 0 is most significant.
    pub fn cell_coords(&self, bin: usize) -> Vec<usize> {
        let k = self.bins_per_axis;
        let mut coords = vec![0; self.dim];
        let mut rem = bin;
        for c in coords.iter_mut().rev() {
            *c = rem % k;
            rem /= k;
        }
        coords
    }

    /// Bounds of an interior cell along each axis.
    pub fn cell_bounds(&self, bin: usize) -> Option<Vec<Interval>> {
        if bin >= self.interior_bins() {
            return None;
        }
        Some(
            self.cell_coords(bin)
                .into_iter()
                .enumerate()
                .map(|(i, j)| {
                    let lo = self.lo(i) + j as f64 * self.delta;
                    Interval::new(lo, lo + self.delta)
                })
                .collect(),
        )
    }

    /// Cell center for interior bins, the configured point for the overflow bin.
    pub fn representative(&self, bin: usize) -> Vec<f64> {
        if bin >= self.interior_bins() {
            return self.overflow_rep.clone();
        }
        self.cell_coords(bin)
            .into_iter()
            .enumerate()
            .map(|(i, j)| self.lo(i) + (j as f64 + 0.5) * self.delta)
            .collect()
    }

    pub fn representatives(&self) -> Vec<Vec<f64>> {
        (0..self.n_bins()).map(|b| self.representative(b)).collect()
    }

    /// Index of the bin containing `x`. Total: non-finite input lands in the
    /// overflow bin.
    pub fn bin_of(&self, x: &[f64]) -> usize {
        debug_assert_eq!(x.len(), self.dim);
        let k = self.bins_per_axis;
        let mut bin = 0usize;
        for (i, &xi) in x.iter().enumerate() {
            let (lo, hi) = (self.lo(i), self.hi(i));
            if !(xi >= lo && xi <= hi) {
                return self.overflow_index();
            }
            let j = (((xi - lo) / self.delta).floor() as usize).min(k - 1);
            bin = bin * k + j;
        }
        bin
    }

    /// `φ_X(x)`: bin index and its representative.
    pub fn quantize(&self, x: &[f64]) -> (usize, Vec<f64>) {
        let b = self.bin_of(x);
        (b, self.representative(b))
    }

    /// Largest interior cell diameter, `Δ·√d`.
    pub fn uniform_loss(&self) -> f64 {
        self.delta * (self.dim as f64).sqrt()
    }

    /// Whether `x` lies in the cube `K`.
    pub fn contains(&self, x: &[f64]) -> bool {
        !self.is_overflow(self.bin_of(x))
    }
}

/// Shorthand for [`StateQuantizer::new`].
pub fn build_quantizer(d: usize, side: f64, k: usize, overflow_rep: Option<Vec<f64>>) -> Result<StateQuantizer> {
    StateQuantizer::new(d, side, k, overflow_rep)
}

/// Finite set of admissible actions `U_h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    points: Vec<Vec<f64>>,
    bounds: Vec<Interval>,
    per_axis: usize,
}

impl ActionGrid {
    /// Tensor grid with `n_u` evenly spaced values per axis, endpoints
    /// included when `n_u >= 2`, midpoint when `n_u == 1`.
    pub fn uniform(bounds: &[Interval], n_u: usize) -> Result<Self> {
        if n_u == 0 {
            return Err(Error::invalid("action grid size n_u must be at least 1"));
        }
        if bounds.is_empty() {
            return Err(Error::invalid("action box must have at least one axis"));
        }
        for b in bounds {
            if !(b.lo <= b.hi) || !b.lo.is_finite() || !b.hi.is_finite() {
                return Err(Error::invalid(format!("invalid action interval [{}, {}]", b.lo, b.hi)));
            }
            if n_u > 1 && b.lo == b.hi {
                return Err(Error::invalid("degenerate action interval cannot hold distinct points"));
            }
        }
        let axis_values: Vec<Vec<f64>> = bounds
            .iter()
            .map(|b| {
                if n_u == 1 {
                    vec![b.midpoint()]
                } else {
                    let step = b.width() / (n_u - 1) as f64;
                    (0..n_u)
                        .map(|j| if j == n_u - 1 { b.hi } else { b.lo + j as f64 * step })
                        .collect()
                }
            })
            .collect();
        let total = n_u.pow(bounds.len() as u32);
        let points = (0..total)
            .map(|mut idx| {
                let mut p = vec![0.0; bounds.len()];
                for (axis, v) in p.iter_mut().enumerate().rev() {
                    *v = axis_values[axis][idx % n_u];
                    idx /= n_u;
                }
                p
            })
            .collect();
        Ok(Self {
            points,
            bounds: bounds.to_vec(),
            per_axis: n_u,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i]
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn bounds(&self) -> &[Interval] {
        &self.bounds
    }

    pub fn per_axis(&self) -> usize {
        self.per_axis
    }
}

pub fn build_action_grid(bounds: &[Interval], n_u: usize) -> Result<ActionGrid> {
    ActionGrid::uniform(bounds, n_u)
}
