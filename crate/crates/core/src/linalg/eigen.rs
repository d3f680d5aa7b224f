//! Symmetric eigensolvers: dense (all pairs) and block subspace iteration
//! (leading pairs).

use nalgebra::{DMatrix, SymmetricEigen};

use crate::distributions::{open_unit, sample_stream};
use crate::error::{Error, Result};

/// Eigenpairs sorted by descending eigenvalue; `vectors` column `i` pairs with `values[i]`.
#[derive(Debug, Clone)]
pub struct SortedEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

/// All eigenpairs of a dense symmetric matrix, largest first.
pub fn symmetric_eigen_desc(m: DMatrix<f64>) -> SortedEigen {
    let n = m.nrows();
    let eig = SymmetricEigen::new(m);
    let mut idx: Vec<usize> = (0..n).collect();
    // Stable on ties so the ordering is reproducible.
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, idx[c])]);
    SortedEigen { values, vectors }
}

/// Leading `k` eigenpairs of a symmetric positive semi-definite operator by
/// block subspace iteration with Rayleigh–Ritz extraction.
///
/// `apply_block(X)` must return `A X`. Works on `k + oversample` columns and
/// stops once every requested Ritz pair has residual `‖A u − λ u‖` below
/// `tol · λ₁`. Cost is dominated by the block products, which suits dense
/// kernels with slowly decaying spectra far better than a growing Krylov basis.
pub fn subspace_top<F>(n: usize, k: usize, tol: f64, seed: u64, max_passes: usize, mut apply_block: F) -> Result<SortedEigen>
where
    F: FnMut(&DMatrix<f64>) -> DMatrix<f64>,
{
    if k == 0 || k > n {
        return Err(Error::invalid(format!("subspace iteration: need 1 <= k <= n (k={k}, n={n})")));
    }
    let l = (2 * k + 20).min(n);
    let mut rng = sample_stream(seed, 0);
    let start = DMatrix::from_fn(n, l, |_, _| open_unit(&mut rng) - 0.5);
    let mut q = orthonormal_columns(start)?;
    let mut worst = f64::INFINITY;
    for pass in 0..max_passes {
        let aq = apply_block(&q);
        let mut b = q.tr_mul(&aq);
        b = (&b + b.transpose()) * 0.5;
        let ritz = symmetric_eigen_desc(b);
        let lam1 = ritz.values[0].abs().max(1e-300);
        let u = &q * &ritz.vectors;
        let au = &aq * &ritz.vectors;
        worst = (0..k)
            .map(|i| (au.column(i) - u.column(i) * ritz.values[i]).norm())
            .fold(0.0, f64::max)
            / lam1;
        log::debug!("subspace pass {pass}: worst relative residual {worst:.3e}");
        if worst <= tol || l == n {
            return Ok(SortedEigen {
                values: ritz.values[..k].to_vec(),
                vectors: u.columns(0, k).into_owned(),
            });
        }
        q = orthonormal_columns(au)?;
    }
    Err(Error::NotConverged {
        iterations: max_passes,
        residual: worst,
    })
}

/// Orthonormal basis for the column space of `y` (CholeskyQR applied twice,
/// falling back to Householder QR when the Gram matrix is too ill-conditioned).
fn orthonormal_columns(y: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol_qr = |y: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        let g = y.tr_mul(y);
        let l = g.cholesky()?.l();
        // Qᵀ = L⁻¹ Yᵀ
        let qt = l.solve_lower_triangular(&y.transpose())?;
        Some(qt.transpose())
    };
    if let Some(q) = chol_qr(&y).and_then(|q1| chol_qr(&q1)) {
        if q.iter().all(|v| v.is_finite()) {
            return Ok(q);
        }
    }
    let q = y.qr().q();
    if q.iter().all(|v| v.is_finite()) {
        Ok(q)
    } else {
        Err(Error::Degenerate("subspace iteration basis".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_matrix(n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, n, |i, j| (-((i as f64 - j as f64).abs()) / 7.0).exp() / n as f64)
    }

    #[test]
    fn dense_sorted_descending() {
        let e = symmetric_eigen_desc(test_matrix(40));
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        let m = test_matrix(40);
        let v0 = e.vectors.column(0);
        let r = &m * v0 - v0 * e.values[0];
        assert!(r.norm() < 1e-12);
    }



    #[test]
    fn subspace_matches_dense() {
        let n = 300;
        let m = test_matrix(n);
        let dense = symmetric_eigen_desc(m.clone());
        let e = subspace_top(n, 12, 1e-10, 3, 500, |x| &m * x).unwrap();
        for i in 0..12 {
            assert!((e.values[i] - dense.values[i]).abs() < 1e-12 * dense.values[0]);
            let c = e.vectors.column(i).dot(&dense.vectors.column(i)).abs();
            assert!((c - 1.0).abs() < 1e-8, "mode {i}: |cos| = {c}");
        }
    }

    #[test]
    fn subspace_handles_low_rank() {
        let n = 60;
        let v = DMatrix::from_fn(n, 2, |i, j| ((i + 1) as f64 * (j + 1) as f64 * 0.1).sin());
        let m = &v * v.transpose();
        let e = subspace_top(n, 2, 1e-10, 1, 50, |x| &m * x).unwrap();
        let dense = symmetric_eigen_desc(m);
        assert!((e.values[0] - dense.values[0]).abs() < 1e-10 * dense.values[0]);
        assert!((e.values[1] - dense.values[1]).abs() < 1e-10 * dense.values[0]);
    }
}
