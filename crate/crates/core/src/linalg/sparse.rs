//! Sparse symmetric systems: CSR storage, IC(0)-preconditioned conjugate
//! gradients and a sparse direct Cholesky factorisation (via faer) for
//! multi-right-hand-side use.

use faer::linalg::solvers::SolveCore;
use faer::sparse::linalg::solvers::{Llt, SymbolicLlt};
use faer::sparse::linalg::LltError;
use faer::sparse::{SparseColMatRef, SymbolicSparseColMatRef};
use faer::{Conj, MatMut, Side as FaerSide};

use crate::error::{Error, Result};

/// Symmetric matrix in compressed sparse row form, both triangles stored,
/// column indices sorted within each row.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Assemble from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (i, j, v) in triplets {
            debug_assert!(i < n && j < n);
            if last == Some((i, j)) {
                *vals.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            cols.push(j);
            vals.push(v);
            row_ptr[i + 1] += 1;
            last = Some((i, j));
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self { n, row_ptr, cols, vals }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Storage index of entry `(i, j)`, if it is in the pattern.
    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].binary_search(&j).ok().map(|k| r.start + k)
    }

    /// Same pattern, new values (in storage order).
    pub fn with_values(&self, vals: Vec<f64>) -> Self {
        assert_eq!(vals.len(), self.vals.len(), "value count must match the pattern");
        Self {
            vals,
            ..self.clone_pattern()
        }
    }

    fn clone_pattern(&self) -> Self {
        Self {
            n: self.n,
            row_ptr: self.row_ptr.clone(),
            cols: self.cols.clone(),
            vals: Vec::new(),
        }
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[r.clone()].iter().copied().zip(self.vals[r].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        match self.cols[r.clone()].binary_search(&j) {
            Ok(k) => self.vals[r.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate().take(self.n) {
            let mut s = 0.0;
            for k in self.row_ptr[i]..self.row_ptr[i + 1] {
                s += self.vals[k] * x[self.cols[k]];
            }
            *yi = s;
        }
    }

    /// Largest |value - transpose value| over the stored pattern.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                worst = worst.max((v - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Zero-fill incomplete Cholesky factor, lower triangle stored by rows.
#[derive(Debug, Clone)]
pub struct IncompleteCholesky {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl IncompleteCholesky {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let n = a.n();
        let mut row_ptr = vec![0usize; n + 1];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for i in 0..n {
            for (j, v) in a.row(i) {
                if j <= i {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_ptr[i + 1] = cols.len();
        }
        for i in 0..n {
            let (ri, re) = (row_ptr[i], row_ptr[i + 1]);
            for p in ri..re {
                let k = cols[p];
                // dot of rows i and k of L over common columns < k
                let mut s = 0.0;
                let (mut a_i, mut a_k) = (ri, row_ptr[k]);
                let k_end = row_ptr[k + 1];
                while a_i < p && a_k < k_end {
                    let (ci, ck) = (cols[a_i], cols[a_k]);
                    if ck >= k {
                        break;
                    }
                    match ci.cmp(&ck) {
                        std::cmp::Ordering::Less => a_i += 1,
                        std::cmp::Ordering::Greater => a_k += 1,
                        std::cmp::Ordering::Equal => {
                            s += vals[a_i] * vals[a_k];
                            a_i += 1;
                            a_k += 1;
                        }
                    }
                }
                if k == i {
                    let d = vals[p] - s;
                    if !(d > 0.0) {
                        return Err(Error::NotPositiveDefinite { row: i, pivot: d });
                    }
                    vals[p] = d.sqrt();
                } else {
                    let dk = vals[row_ptr[k + 1] - 1];
                    vals[p] = (vals[p] - s) / dk;
                }
            }
        }
        Ok(Self { n, row_ptr, cols, vals })
    }

    /// Solve `L Lᵀ z = r` in place.
    pub fn apply(&self, z: &mut [f64]) {
        for i in 0..self.n {
            let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let mut acc = z[i];
            for p in s..e - 1 {
                acc -= self.vals[p] * z[self.cols[p]];
            }
            z[i] = acc / self.vals[e - 1];
        }
        for i in (0..self.n).rev() {
            let (s, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
            z[i] /= self.vals[e - 1];
            let zi = z[i];
            for p in s..e - 1 {
                z[self.cols[p]] -= self.vals[p] * zi;
            }
        }
    }
}

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone, Copy)]
pub struct CgStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Dot product with four independent accumulators, so it vectorises.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a4, b4) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let tail: f64 = a4.remainder().iter().zip(b4.remainder()).map(|(x, y)| x * y).sum();
    let mut acc = [0.0f64; 4];
    for (x, y) in a4.zip(b4) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Preconditioned conjugate gradients from a zero initial guess; stops when
/// `‖r‖ / ‖b‖ <= tol`.
pub fn pcg(
    a: &CsrMatrix,
    b: &[f64],
    precond: &IncompleteCholesky,
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, CgStats)> {
    let n = a.n();
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: b.len(),
            context: "pcg right-hand side",
        });
    }
    let mut x = vec![0.0; n];
    let b_norm = dot(b, b).sqrt();
    if b_norm == 0.0 {
        return Ok((
            x,
            CgStats {
                iterations: 0,
                relative_residual: 0.0,
            },
        ));
    }
    let mut r = b.to_vec();
    let mut z = r.clone();
    precond.apply(&mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    let mut rel = 1.0;
    for it in 1..=max_iter {
        a.mul_vec(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = dot(&r, &r).sqrt() / b_norm;
        if rel <= tol {
            return Ok((
                x,
                CgStats {
                    iterations: it,
                    relative_residual: rel,
                },
            ));
        }
        z.copy_from_slice(&r);
        precond.apply(&mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::NotConverged {
        iterations: max_iter,
        residual: rel,
    })
}

/// Fill-reducing symbolic analysis of a sparsity pattern, shared by every
/// numeric factorisation with that pattern.
#[derive(Debug, Clone)]
pub struct CholeskyPattern {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    symbolic: SymbolicLlt<usize>,
}

impl CholeskyPattern {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        let sym = SymbolicSparseColMatRef::new_checked(a.n, a.n, &a.row_ptr, None, &a.cols);
        let symbolic = SymbolicLlt::try_new(sym, FaerSide::Lower)
            .map_err(|e| Error::invalid(format!("sparse Cholesky analysis failed: {e:?}")))?;
        Ok(Self {
            n: a.n,
            row_ptr: a.row_ptr.clone(),
            cols: a.cols.clone(),
            symbolic,
        })
    }

    /// Numeric factorisation `A = L Lᵀ`; `a` must share the analysed pattern.
    pub fn factor(&self, a: &CsrMatrix) -> Result<SparseCholesky> {
        if a.row_ptr != self.row_ptr || a.cols != self.cols {
            return Err(Error::invalid("matrix pattern differs from the analysed one"));
        }
        // Symmetric: the CSR arrays are also the CSC arrays.
        let sym = SymbolicSparseColMatRef::new_checked(self.n, self.n, &self.row_ptr, None, &self.cols);
        let llt = Llt::try_new_with_symbolic(self.symbolic.clone(), SparseColMatRef::new(sym, &a.vals), FaerSide::Lower)
            .map_err(|e| match e {
                LltError::Numeric(faer::linalg::cholesky::llt::factor::LltError::NonPositivePivot { index }) => {
                    Error::NotPositiveDefinite { row: index, pivot: f64::NAN }
                }
                other => Error::invalid(format!("sparse Cholesky failed: {other:?}")),
            })?;
        Ok(SparseCholesky { n: self.n, llt })
    }
}

/// Sparse Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SparseCholesky {
    n: usize,
    llt: Llt<usize, f64>,
}

impl SparseCholesky {
    pub fn new(a: &CsrMatrix) -> Result<Self> {
        CholeskyPattern::new(a)?.factor(a)
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: b.len(),
                context: "Cholesky solve right-hand side",
            });
        }
        let mut x = b.to_vec();
        self.llt
            .solve_in_place_with_conj(Conj::No, MatMut::from_column_major_slice_mut(&mut x, self.n, 1));
        Ok(x)
    }
}
