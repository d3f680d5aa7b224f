//! Discretized output domains with quadrature-backed L² inner products.
//!
//! A [`SpatialGrid`] owns the ordering of its points: every grid function in
//! this crate is a flat `&[f64]` indexed in that same order.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Quadrature points and positive weights over a compact set in ℝ¹ or ℝ².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    dim: usize,
    points: Vec<[f64; 2]>,
    weights: Vec<f64>,
    measure: f64,
}

impl SpatialGrid {
    /// Build a grid from explicit points and weights.
    ///
    /// Points must be pairwise distinct and weights strictly positive.
    pub fn from_parts(dim: usize, points: Vec<[f64; 2]>, weights: Vec<f64>) -> Result<Self> {
        if dim != 1 && dim != 2 {
            return Err(Error::invalid(format!("grid dimension must be 1 or 2, got {dim}")));
        }
        if points.is_empty() {
            return Err(Error::invalid("grid needs at least one point"));
        }
        if points.len() != weights.len() {
            return Err(Error::DimensionMismatch {
                expected: points.len(),
                got: weights.len(),
                context: "grid weights",
            });
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::invalid(format!("quadrature weight {w} is not strictly positive")));
        }
        let mut sorted: Vec<&[f64; 2]> = points.iter().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite grid coordinates"));
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("grid points must be pairwise distinct"));
        }
        let measure = weights.iter().sum();
        Ok(Self {
            dim,
            points,
            weights,
            measure,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Total measure of the domain, i.e. the sum of the weights.
    pub fn measure(&self) -> f64 {
        self.measure
    }

    /// First coordinate of every point (time or abscissa for 1-D grids).
    pub fn abscissae(&self) -> Vec<f64> {
        self.points.iter().map(|p| p[0]).collect()
    }

    fn check_len(&self, g: &[f64]) -> Result<()> {
        if g.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                got: g.len(),
                context: "grid function",
            });
        }
        Ok(())
    }

    /// Quadrature approximation of ∫ g.
    pub fn integrate(&self, g: &[f64]) -> Result<f64> {
        self.check_len(g)?;
        Ok(self.weights.iter().zip(g).map(|(w, v)| w * v).sum())
    }

    /// Weighted L² inner product ⟨f, g⟩.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> Result<f64> {
        self.check_len(f)?;
        self.check_len(g)?;
        Ok(self
            .weights
            .iter()
            .zip(f.iter().zip(g))
            .map(|(w, (a, b))| w * a * b)
            .sum())
    }

    pub fn norm(&self, g: &[f64]) -> Result<f64> {
        Ok(self.inner(g, g)?.sqrt())
    }

    /// Evaluate a function of the coordinates at every grid point.
    pub fn map<F: Fn(&[f64; 2]) -> f64>(&self, f: F) -> Vec<f64> {
        self.points.iter().map(f).collect()
    }
}

/// Composite trapezoid rule on `[a, b]` with `n` equally spaced nodes.
pub fn make_interval_grid(a: f64, b: f64, n: usize) -> Result<SpatialGrid> {
    if n < 2 {
        return Err(Error::invalid(format!("interval grid needs n >= 2, got {n}")));
    }
    if !(a < b) {
        return Err(Error::invalid(format!("interval grid needs a < b, got [{a}, {b}]")));
    }
    let h = (b - a) / (n - 1) as f64;
    let points = (0..n)
        .map(|k| {
            let x = if k == n - 1 { b } else { a + k as f64 * h };
            [x, 0.0]
        })
        .collect();
    let mut weights = vec![h; n];
    weights[0] = h / 2.0;
    weights[n - 1] = h / 2.0;
    SpatialGrid::from_parts(1, points, weights)
}

/// Composite Simpson rule on `[a, b]`; `n` must be odd (an even number of panels).
pub fn make_simpson_grid(a: f64, b: f64, n: usize) -> Result<SpatialGrid> {
    if n < 3 || n % 2 == 0 {
        return Err(Error::invalid(format!("Simpson grid needs odd n >= 3, got {n}")));
    }
    let trap = make_interval_grid(a, b, n)?;
    let h = (b - a) / (n - 1) as f64;
    let weights = (0..n)
        .map(|k| {
            if k == 0 || k == n - 1 {
                h / 3.0
            } else if k % 2 == 1 {
                4.0 * h / 3.0
            } else {
                2.0 * h / 3.0
            }
        })
        .collect();
    SpatialGrid::from_parts(1, trap.points().to_vec(), weights)
}

/// Midpoint rule on `[a, b]`: `n` cell centres with weight `(b - a) / n`.
///
/// Matches the unknown placement of cell-centred finite volumes.
pub fn make_midpoint_grid(a: f64, b: f64, n: usize) -> Result<SpatialGrid> {
    if n < 1 || !(a < b) {
        return Err(Error::invalid(format!("midpoint grid needs n >= 1 and a < b (n={n}, [{a}, {b}])")));
    }
    let h = (b - a) / n as f64;
    let points = (0..n).map(|k| [a + (k as f64 + 0.5) * h, 0.0]).collect();
    SpatialGrid::from_parts(1, points, vec![h; n])
}

/// Polar tensor grid on the annulus `r_in <= r <= r_out`.
///
/// Trapezoid in `r` (weights carry the Jacobian `r`) and the periodic
/// rectangle rule in the angle; points are ordered angle-major.
pub fn make_annulus_grid(r_in: f64, r_out: f64, nr: usize, nphi: usize) -> Result<SpatialGrid> {
    if !(0.0 <= r_in && r_in < r_out) || nr < 2 || nphi < 3 {
        return Err(Error::invalid(format!(
            "annulus grid needs 0 <= r_in < r_out, nr >= 2, nphi >= 3 (got {r_in}, {r_out}, {nr}, {nphi})"
        )));
    }
    let dr = (r_out - r_in) / (nr - 1) as f64;
    let dphi = 2.0 * PI / nphi as f64;
    let mut points = Vec::with_capacity(nr * nphi);
    let mut weights = Vec::with_capacity(nr * nphi);
    for k in 0..nphi {
        let phi = k as f64 * dphi;
        for i in 0..nr {
            let r = if i == nr - 1 { r_out } else { r_in + i as f64 * dr };
            let wr = if i == 0 || i == nr - 1 { dr / 2.0 } else { dr };
            if r == 0.0 {
                // The origin carries zero weight; skip it rather than duplicate it per angle.
                continue;
            }
            points.push([r * phi.cos(), r * phi.sin()]);
            weights.push(r * wr * dphi);
        }
    }
    SpatialGrid::from_parts(2, points, weights)
}
