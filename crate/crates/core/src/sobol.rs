//! Pick-freeze estimates of pointwise and functional Sobol' indices.
//!
//! Two independent sample blocks `A`, `B` and, for each input `j`, the hybrid
//! `A_B^j` (column `j` from `B`, the rest from `A`):
//!
//! * total effect (Jansen): `D_j^tot = (1/2n) Σ (f(A) - f(A_B^j))²`
//! * first order (Saltelli 2010): `D_j = (1/n) Σ f(B) (f(A_B^j) - f(A))`
//!
//! The pointwise variance uses both blocks pooled, normalised by `2n - 1`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{derive_seed, ParameterSpace};
use crate::error::{Error, Result};
use crate::grid::SpatialGrid;
use crate::model::FunctionalModel;

/// Samples per parallel task; fixed so sums do not depend on the worker count.
const CHUNK: usize = 32;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SobolReport {
    pub n_samples: usize,
    /// Indices of the inputs that were analysed.
    pub inputs: Vec<usize>,
    /// `pointwise_total[r][k]` = S^tot of input `inputs[r]` at grid point `k` (raw).
    pub pointwise_total: Vec<Vec<f64>>,
    pub pointwise_total_stderr: Vec<Vec<f64>>,
    pub pointwise_first: Vec<Vec<f64>>,
    pub pointwise_variance: Vec<f64>,
    /// Functional indices (raw, unclamped).
    pub functional_first: Vec<f64>,
    pub functional_first_stderr: Vec<f64>,
    pub functional_total: Vec<f64>,
    pub functional_total_stderr: Vec<f64>,
}

impl SobolReport {
    pub fn functional_total_clamped(&self) -> Vec<f64> {
        self.functional_total.iter().map(|v| v.clamp(0.0, 1.0)).collect()
    }

    pub fn functional_first_clamped(&self) -> Vec<f64> {
        self.functional_first.iter().map(|v| v.clamp(0.0, 1.0)).collect()
    }
}

struct Partial {
    total: Vec<Vec<f64>>,
    total_sq: Vec<Vec<f64>>,
    first: Vec<Vec<f64>>,
    // per-sample integrated contributions: [sample][r]
    total_terms: Vec<Vec<f64>>,
    first_terms: Vec<Vec<f64>>,
    fa: Vec<Vec<f64>>,
    fb: Vec<Vec<f64>>,
}

/// Estimate Sobol' indices for the inputs listed in `inputs` (all when `None`)
/// with `n` base samples, i.e. `n (2 + |inputs|)` model evaluations.
pub fn estimate_sobol<M: FunctionalModel>(
    model: &M,
    space: &ParameterSpace,
    n: usize,
    seed: u64,
    inputs: Option<&[usize]>,
) -> Result<SobolReport> {
    if n < 2 {
        return Err(Error::invalid(format!("pick-freeze needs n >= 2, got {n}")));
    }
    if space.dim() != model.n_par() {
        return Err(Error::DimensionMismatch {
            expected: model.n_par(),
            got: space.dim(),
            context: "parameter space",
        });
    }
    let inputs: Vec<usize> = match inputs {
        Some(js) => js.to_vec(),
        None => (0..space.dim()).collect(),
    };
    if let Some(j) = inputs.iter().find(|&&j| j >= space.dim()) {
        return Err(Error::invalid(format!("input index {j} out of range")));
    }
    let grid = model.grid();
    let ng = grid.len();
    let nj = inputs.len();
    let seed_a = derive_seed(seed, 0xA);
    let seed_b = derive_seed(seed, 0xB);
    let eval = |theta: &[f64], m: usize| -> Result<Vec<f64>> {
        let v = model.evaluate(theta).map_err(|e| e.at_sample(m))?;
        if v.len() != ng {
            return Err(Error::DimensionMismatch {
                expected: ng,
                got: v.len(),
                context: "model output",
            });
        }
        Ok(v)
    };

    let n_chunks = n.div_ceil(CHUNK);
    let partials: Vec<Partial> = (0..n_chunks)
        .into_par_iter()
        .map(|c| -> Result<Partial> {
            let mut p = Partial {
                total: vec![vec![0.0; ng]; nj],
                total_sq: vec![vec![0.0; ng]; nj],
                first: vec![vec![0.0; ng]; nj],
                total_terms: Vec::new(),
                first_terms: Vec::new(),
                fa: Vec::new(),
                fb: Vec::new(),
            };
            for m in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let a = space.sample_row(seed_a, m as u64);
                let b = space.sample_row(seed_b, m as u64);
                let fa = eval(&a, m)?;
                let fb = eval(&b, m)?;
                let mut tt = Vec::with_capacity(nj);
                let mut ft = Vec::with_capacity(nj);
                for (r, &j) in inputs.iter().enumerate() {
                    let mut ab = a.clone();
                    ab[j] = b[j];
                    let fab = eval(&ab, m)?;
                    let mut t_int = 0.0;
                    let mut f_int = 0.0;
                    for k in 0..ng {
                        let d = fa[k] - fab[k];
                        let t = 0.5 * d * d;
                        let f = fb[k] * (fab[k] - fa[k]);
                        p.total[r][k] += t;
                        p.total_sq[r][k] += t * t;
                        p.first[r][k] += f;
                        let w = grid.weights()[k];
                        t_int += w * t;
                        f_int += w * f;
                    }
                    tt.push(t_int);
                    ft.push(f_int);
                }
                p.total_terms.push(tt);
                p.first_terms.push(ft);
                p.fa.push(fa);
                p.fb.push(fb);
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;

    let mut total = vec![vec![0.0; ng]; nj];
    let mut total_sq = vec![vec![0.0; ng]; nj];
    let mut first = vec![vec![0.0; ng]; nj];
    let mut total_terms = Vec::with_capacity(n);
    let mut first_terms = Vec::with_capacity(n);
    let mut all_rows: Vec<Vec<f64>> = Vec::with_capacity(2 * n);
    let mut b_rows = Vec::with_capacity(n);
    for p in partials {
        for r in 0..nj {
            for k in 0..ng {
                total[r][k] += p.total[r][k];
                total_sq[r][k] += p.total_sq[r][k];
                first[r][k] += p.first[r][k];
            }
        }
        total_terms.extend(p.total_terms);
        first_terms.extend(p.first_terms);
        all_rows.extend(p.fa);
        b_rows.extend(p.fb);
    }
    all_rows.extend(b_rows);

    let nf = n as f64;
    let variance = pooled_variance(&all_rows, ng);
    let int_var = grid.integrate(&variance)?;

    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    let mut pointwise_total = vec![vec![0.0; ng]; nj];
    let mut pointwise_total_stderr = vec![vec![0.0; ng]; nj];
    let mut pointwise_first = vec![vec![0.0; ng]; nj];
    for r in 0..nj {
        for k in 0..ng {
            let mean = total[r][k] / nf;
            let var_terms = ((total_sq[r][k] / nf - mean * mean) * nf / (nf - 1.0)).max(0.0);
            pointwise_total[r][k] = ratio(mean, variance[k]);
            pointwise_total_stderr[r][k] = ratio((var_terms / nf).sqrt(), variance[k]);
            pointwise_first[r][k] = ratio(first[r][k] / nf, variance[k]);
        }
    }
    let (functional_total, functional_total_stderr) = functional_from_terms(&total_terms, nj, int_var);
    let (functional_first, functional_first_stderr) = functional_from_terms(&first_terms, nj, int_var);
    Ok(SobolReport {
        n_samples: n,
        inputs,
        pointwise_total,
        pointwise_total_stderr,
        pointwise_first,
        pointwise_variance: variance,
        functional_first,
        functional_first_stderr,
        functional_total,
        functional_total_stderr,
    })
}

fn pooled_variance(rows: &[Vec<f64>], ng: usize) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; ng];
    for r in rows {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; ng];
    for r in rows {
        for ((v, x), m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    var.iter_mut().for_each(|v| *v /= n - 1.0);
    var
}

fn functional_from_terms(terms: &[Vec<f64>], nj: usize, int_var: f64) -> (Vec<f64>, Vec<f64>) {
    let n = terms.len() as f64;
    let mut est = vec![0.0; nj];
    let mut se = vec![0.0; nj];
    if int_var <= 0.0 {
        return (est, se);
    }
    for r in 0..nj {
        let mean = terms.iter().map(|t| t[r]).sum::<f64>() / n;
        let var = terms.iter().map(|t| (t[r] - mean).powi(2)).sum::<f64>() / (n - 1.0);
        est[r] = mean / int_var;
        se[r] = (var / n).sqrt() / int_var;
    }
    (est, se)
}

/// Pointwise total index `S_j^tot(f; ·)` of a single input.
pub fn pick_freeze_total<M: FunctionalModel>(
    model: &M,
    space: &ParameterSpace,
    j: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let rep = estimate_sobol(model, space, n, seed, Some(&[j]))?;
    Ok(rep.pointwise_total.into_iter().next().expect("one input"))
}

/// Variance-weighted average `∫ S(s) D(s) ds / ∫ D(s) ds` of a pointwise index.
pub fn functional_total(pointwise: &[f64], variance: &[f64], grid: &SpatialGrid) -> Result<f64> {
    if variance.iter().any(|v| *v < 0.0) {
        return Err(Error::invalid("pointwise variance must be nonnegative"));
    }
    let den = grid.integrate(variance)?;
    if !(den > 0.0) {
        return Err(Error::Degenerate("output variance vanishes on the whole domain".into()));
    }
    let weighted: Vec<f64> = pointwise.iter().zip(variance).map(|(s, d)| s * d).collect();
    Ok(grid.integrate(&weighted)? / den)
}
