//! Derivative-based sensitivity measures for scalar and functional outputs.
//!
//! For an output `f(s, θ)` the functional DGSM of input `j` is
//! `N_j = E[∫ (∂f/∂θ_j)² ds]`, and `α_j N_j / Tr(C)` bounds the functional
//! total Sobol' index, where `α_j` is the Poincaré constant of the marginal
//! and `C` the output covariance operator. With a KL expansion of rank
//! `N_qoi`, `N_j = Σ_i λ_i ν_j(f_i)` needs only the gradients of the KL
//! coefficients, so one forward and `N_qoi` adjoint solves per sample.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{derive_seed, ParameterSpace};
use crate::error::{Error, Result};
use crate::grid::SpatialGrid;
use crate::kle::{kle_from_samples, KLExpansion, ProcessEnsemble};
use crate::model::{ModeGradientModel, PointwiseGradientModel};

/// Number of contiguous batches used for batch-means standard errors.
pub const N_BATCHES: usize = 10;

/// Samples of `∂g_o/∂θ_j` for a set of outputs `o` (KL coefficients or grid points).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientEnsemble {
    n_outputs: usize,
    n_par: usize,
    /// Row-major `[sample][output][input]`.
    data: Vec<f64>,
}

impl GradientEnsemble {
    pub fn new(n_outputs: usize, n_par: usize) -> Self {
        Self {
            n_outputs,
            n_par,
            data: Vec::new(),
        }
    }

    /// Append one sample, given as `grad[o][j]`.
    pub fn push(&mut self, grad: &[Vec<f64>]) -> Result<()> {
        if grad.len() != self.n_outputs {
            return Err(Error::DimensionMismatch {
                expected: self.n_outputs,
                got: grad.len(),
                context: "gradient outputs",
            });
        }
        for row in grad {
            if row.len() != self.n_par {
                return Err(Error::DimensionMismatch {
                    expected: self.n_par,
                    got: row.len(),
                    context: "gradient inputs",
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("gradient contains a non-finite entry"));
            }
        }
        for row in grad {
            self.data.extend_from_slice(row);
        }
        Ok(())
    }

    /// Build from per-sample `grad[o][j]` blocks.
    pub fn from_samples(n_outputs: usize, n_par: usize, samples: &[Vec<Vec<f64>>]) -> Result<Self> {
        let mut e = Self::new(n_outputs, n_par);
        for s in samples {
            e.push(s)?;
        }
        Ok(e)
    }

    /// Pointwise ensemble from per-sample `grad[j][k]` blocks (input-major, as
    /// returned by [`PointwiseGradientModel`]).
    pub fn from_pointwise(n_points: usize, n_par: usize, samples: &[Vec<Vec<f64>>]) -> Result<Self> {
        let mut e = Self::new(n_points, n_par);
        for s in samples {
            if s.len() != n_par {
                return Err(Error::DimensionMismatch {
                    expected: n_par,
                    got: s.len(),
                    context: "pointwise gradient inputs",
                });
            }
            let t: Vec<Vec<f64>> = (0..n_points)
                .map(|k| s.iter().map(|g| g.get(k).copied().unwrap_or(f64::NAN)).collect())
                .collect();
            e.push(&t)?;
        }
        Ok(e)
    }

    pub fn n_samples(&self) -> usize {
        if self.n_outputs * self.n_par == 0 {
            0
        } else {
            self.data.len() / (self.n_outputs * self.n_par)
        }
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    pub fn n_par(&self) -> usize {
        self.n_par
    }

    pub fn get(&self, m: usize, o: usize, j: usize) -> f64 {
        self.data[(m * self.n_outputs + o) * self.n_par + j]
    }

    /// `∂g_o/∂θ_j` across all samples.
    pub fn column(&self, o: usize, j: usize) -> Vec<f64> {
        (0..self.n_samples()).map(|m| self.get(m, o, j)).collect()
    }

    /// `ν[o][j] = mean_m (∂g_o/∂θ_j)²`.
    pub fn nu_matrix(&self) -> Result<Vec<Vec<f64>>> {
        let n = self.n_samples();
        if n == 0 {
            return Err(Error::invalid("DGSM estimate needs at least one sample"));
        }
        let mut nu = vec![vec![0.0; self.n_par]; self.n_outputs];
        for m in 0..n {
            for (o, row) in nu.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    let g = self.get(m, o, j);
                    *v += g * g;
                }
            }
        }
        nu.iter_mut().flatten().for_each(|v| *v /= n as f64);
        Ok(nu)
    }
}

/// Monte Carlo DGSM `ν_j = (1/N) Σ_m (∂g/∂θ_j(θ^m))²` of a scalar output.
pub fn nu_scalar(derivatives: &[f64]) -> Result<f64> {
    if derivatives.is_empty() {
        return Err(Error::invalid("DGSM estimate needs at least one sample"));
    }
    Ok(derivatives.iter().map(|d| d * d).sum::<f64>() / derivatives.len() as f64)
}

/// `N_j = (1/N) Σ_m ∫ (∂f/∂θ_j(s, θ^m))² ds` from pointwise derivatives.
pub fn functional_dgsm_direct(grad: &GradientEnsemble, grid: &SpatialGrid) -> Result<Vec<f64>> {
    if grad.n_outputs() != grid.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: grad.n_outputs(),
            context: "pointwise gradient ensemble",
        });
    }
    let nu = grad.nu_matrix()?;
    Ok((0..grad.n_par())
        .map(|j| nu.iter().zip(grid.weights()).map(|(row, w)| w * row[j]).sum())
        .collect())
}

/// `N_j = Σ_i λ_i ν_j(f_i)` from KL-coefficient DGSMs (`nu_modes[i][j]`).
pub fn functional_dgsm_finite_rank(nu_modes: &[Vec<f64>], eigenvalues: &[f64]) -> Result<Vec<f64>> {
    if nu_modes.len() != eigenvalues.len() {
        return Err(Error::DimensionMismatch {
            expected: eigenvalues.len(),
            got: nu_modes.len(),
            context: "modal DGSM rows",
        });
    }
    if let Some(l) = eigenvalues.iter().find(|l| !(**l >= 0.0)) {
        return Err(Error::invalid(format!("eigenvalues must be nonnegative, got {l}")));
    }
    let n_par = nu_modes.first().map_or(0, Vec::len);
    let mut out = vec![0.0; n_par];
    for (row, lam) in nu_modes.iter().zip(eigenvalues) {
        if row.len() != n_par {
            return Err(Error::DimensionMismatch {
                expected: n_par,
                got: row.len(),
                context: "modal DGSM row",
            });
        }
        out.iter_mut().zip(row).for_each(|(o, v)| *o += lam * v);
    }
    Ok(out)
}

/// `B_j = α_j N_j / Tr(C)`.
pub fn dgsm_bound(functional_dgsm: &[f64], trace: f64, alphas: &[f64]) -> Result<Vec<f64>> {
    if !(trace > 0.0) {
        return Err(Error::Degenerate(format!("covariance trace must be positive, got {trace}")));
    }
    if alphas.len() != functional_dgsm.len() {
        return Err(Error::DimensionMismatch {
            expected: functional_dgsm.len(),
            got: alphas.len(),
            context: "Poincaré constants",
        });
    }
    Ok(functional_dgsm.iter().zip(alphas).map(|(n, a)| a * n / trace).collect())
}

/// Standard error of the mean of `terms` from `N_BATCHES` contiguous batch means
/// (fewer when there are fewer samples; NaN with fewer than two).
pub fn batch_means_stderr(terms: &[f64]) -> f64 {
    let nb = N_BATCHES.min(terms.len());
    if nb < 2 {
        return f64::NAN;
    }
    let n = terms.len();
    let means: Vec<f64> = (0..nb)
        .map(|b| {
            let (lo, hi) = (b * n / nb, (b + 1) * n / nb);
            terms[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    let mu = means.iter().sum::<f64>() / nb as f64;
    let var = means.iter().map(|m| (m - mu).powi(2)).sum::<f64>() / (nb - 1) as f64;
    (var / nb as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgsmReport {
    pub n_mc: usize,
    pub n_qoi: usize,
    pub threshold: f64,
    pub seed: u64,
    pub alphas: Vec<f64>,
    /// `ν_j(f_i)` rows per KL mode (empty on the direct pathway).
    pub nu_modes: Vec<Vec<f64>>,
    pub functional_dgsm: Vec<f64>,
    pub normalized: Vec<f64>,
    pub bounds: Vec<f64>,
    /// Batch-means standard error of `N_j`.
    pub stderr: Vec<f64>,
    pub important: Vec<bool>,
    pub trace: f64,
}

impl DgsmReport {
    /// Assemble a report from per-sample contributions `terms[m][j]` to `N_j`.
    pub fn from_terms(
        terms: &[Vec<f64>],
        nu_modes: Vec<Vec<f64>>,
        trace: f64,
        alphas: &[f64],
        threshold: f64,
        n_qoi: usize,
        seed: u64,
    ) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::invalid("DGSM estimate needs at least one sample"));
        }
        if !(threshold > 0.0 && threshold <= 1.0) {
            return Err(Error::invalid(format!("threshold must lie in (0, 1], got {threshold}")));
        }
        let n_par = alphas.len();
        let n = terms.len() as f64;
        let functional_dgsm: Vec<f64> = (0..n_par).map(|j| terms.iter().map(|t| t[j]).sum::<f64>() / n).collect();
        let stderr = (0..n_par)
            .map(|j| batch_means_stderr(&terms.iter().map(|t| t[j]).collect::<Vec<_>>()))
            .collect();
        let bounds = dgsm_bound(&functional_dgsm, trace, alphas)?;
        let total: f64 = functional_dgsm.iter().sum();
        let normalized = functional_dgsm
            .iter()
            .map(|v| if total > 0.0 { v / total } else { 0.0 })
            .collect();
        let important = bounds.iter().map(|b| *b >= threshold).collect();
        Ok(Self {
            n_mc: terms.len(),
            n_qoi,
            threshold,
            seed,
            alphas: alphas.to_vec(),
            nu_modes,
            functional_dgsm,
            normalized,
            bounds,
            stderr,
            important,
            trace,
        })
    }

    /// 0-based indices whose bound falls below the threshold.
    pub fn unimportant(&self) -> Vec<usize> {
        (0..self.important.len()).filter(|&j| !self.important[j]).collect()
    }

    /// 0-based indices ordered by decreasing bound (ties by index).
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.bounds.len()).collect();
        idx.sort_by(|&a, &b| self.bounds[b].total_cmp(&self.bounds[a]).then(a.cmp(&b)));
        idx
    }

    /// Standard error of the bound, `α_j se(N_j) / Tr`.
    pub fn bound_stderr(&self) -> Vec<f64> {
        self.stderr.iter().zip(&self.alphas).map(|(s, a)| a * s / self.trace).collect()
    }
}

/// Options for [`run_algorithm_1`].
#[derive(Debug, Clone, Copy)]
pub struct Algorithm1Options {
    pub n_mc: usize,
    pub n_qoi: usize,
    pub seed: u64,
    pub threshold: f64,
    /// Evaluate gradients on an independent sample instead of reusing the
    /// KLE sample (costs `N_MC` extra forward solves).
    pub fresh_gradient_samples: bool,
}

/// Everything produced by one pass of the finite-rank DGSM algorithm.
#[derive(Debug, Clone)]
pub struct Algorithm1Output {
    pub report: DgsmReport,
    pub kle: KLExpansion,
    /// Parameter samples the gradients were taken at.
    pub thetas: Vec<Vec<f64>>,
    /// KL-coefficient gradients `[sample][mode][input]`.
    pub gradients: GradientEnsemble,
}

/// Sample θ, solve forward, build the output KLE, take per-mode gradients at
/// every sample and combine them into `B_j = α_j Σ_i λ_i ν_j(f_i) / Σ_i λ_i`.
pub fn run_algorithm_1<M: ModeGradientModel>(
    model: &M,
    space: &ParameterSpace,
    opts: &Algorithm1Options,
) -> Result<Algorithm1Output> {
    if space.dim() != model.n_par() {
        return Err(Error::DimensionMismatch {
            expected: model.n_par(),
            got: space.dim(),
            context: "parameter space",
        });
    }
    if opts.n_mc < 2 {
        return Err(Error::invalid(format!("N_MC must be at least 2, got {}", opts.n_mc)));
    }
    let forward_all = |seed: u64| -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<M::State>)> {
        let thetas = space.sample(opts.n_mc, seed)?;
        let results: Vec<(Vec<f64>, M::State)> = thetas
            .par_iter()
            .enumerate()
            .map(|(m, th)| model.forward(th).map_err(|e| e.at_sample(m)))
            .collect::<Result<_>>()?;
        let (qoi, states) = results.into_iter().unzip();
        Ok((thetas, qoi, states))
    };
    let (thetas, qoi, states) = forward_all(opts.seed)?;
    let ensemble = ProcessEnsemble::new(model.grid().clone(), qoi)?;
    let kle = kle_from_samples(&ensemble, opts.n_qoi)?;
    let (thetas, states) = if opts.fresh_gradient_samples {
        let (t, _, s) = forward_all(derive_seed(opts.seed, 0x6772_6164))?;
        (t, s)
    } else {
        (thetas, states)
    };
    let grads: Vec<Vec<Vec<f64>>> = thetas
        .par_iter()
        .zip(states.par_iter())
        .enumerate()
        .map(|(m, (th, st))| model.mode_gradients(th, st, &kle).map_err(|e| e.at_sample(m)))
        .collect::<Result<_>>()?;
    let gradients = GradientEnsemble::from_samples(opts.n_qoi, model.n_par(), &grads)?;
    let nu_modes = gradients.nu_matrix()?;
    let terms: Vec<Vec<f64>> = grads
        .iter()
        .map(|g| {
            (0..model.n_par())
                .map(|j| g.iter().zip(&kle.eigenvalues).map(|(gi, l)| l * gi[j] * gi[j]).sum())
                .collect()
        })
        .collect();
    let trace = kle.retained_trace();
    let report = DgsmReport::from_terms(
        &terms,
        nu_modes,
        trace,
        &space.poincare_constants(),
        opts.threshold,
        opts.n_qoi,
        opts.seed,
    )?;
    Ok(Algorithm1Output {
        report,
        kle,
        thetas,
        gradients,
    })
}

/// Output of the direct (pointwise-derivative) pathway.
#[derive(Debug, Clone)]
pub struct DirectOutput {
    pub report: DgsmReport,
    /// Sampled process values, one row per sample.
    pub ensemble: ProcessEnsemble,
    /// `ν_j(f(s_k, ·))`, indexed `[k][j]`.
    pub pointwise_nu: Vec<Vec<f64>>,
}

/// DGSMs from pointwise derivatives: `N_j` by quadrature of `ν_j(f(s, ·))`,
/// trace from the sample covariance `∫ D̂(s) ds`.
pub fn run_direct<M: PointwiseGradientModel>(
    model: &M,
    space: &ParameterSpace,
    n_mc: usize,
    seed: u64,
    threshold: f64,
) -> Result<DirectOutput> {
    if space.dim() != model.n_par() {
        return Err(Error::DimensionMismatch {
            expected: model.n_par(),
            got: space.dim(),
            context: "parameter space",
        });
    }
    if n_mc < 2 {
        return Err(Error::invalid(format!("N_MC must be at least 2, got {n_mc}")));
    }
    let grid = model.grid();
    let n_par = model.n_par();
    let thetas = space.sample(n_mc, seed)?;
    // Per sample: output row, integrated squared derivatives, squared derivatives per point.
    let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> = thetas
        .par_iter()
        .enumerate()
        .map(|(m, th)| -> Result<_> {
            let (f, g) = model.evaluate_with_gradient(th).map_err(|e| e.at_sample(m))?;
            if g.len() != n_par || g.iter().any(|gj| gj.len() != grid.len()) {
                return Err(Error::DimensionMismatch {
                    expected: grid.len(),
                    got: g.first().map_or(0, Vec::len),
                    context: "pointwise gradient",
                }
                .at_sample(m));
            }
            if g.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid("gradient contains a non-finite entry").at_sample(m));
            }
            let sq: Vec<Vec<f64>> = g.iter().map(|gj| gj.iter().map(|v| v * v).collect()).collect();
            let terms = sq.iter().map(|s| grid.integrate(s)).collect::<Result<Vec<f64>>>()?;
            Ok((f, terms, sq))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(n_mc);
    let mut terms = Vec::with_capacity(n_mc);
    let mut pointwise_nu = vec![vec![0.0; n_par]; grid.len()];
    for (f, t, sq) in per_sample {
        for (j, s) in sq.iter().enumerate() {
            for (k, v) in s.iter().enumerate() {
                pointwise_nu[k][j] += v;
            }
        }
        rows.push(f);
        terms.push(t);
    }
    pointwise_nu.iter_mut().flatten().for_each(|v| *v /= n_mc as f64);
    let ensemble = ProcessEnsemble::new(grid.clone(), rows)?;
    let trace = grid.integrate(&ensemble.pointwise_variance())?;
    let report = DgsmReport::from_terms(&terms, Vec::new(), trace, &space.poincare_constants(), threshold, 0, seed)?;
    Ok(DirectOutput {
        report,
        ensemble,
        pointwise_nu,
    })
}

/// Cumulative functional DGSMs `N_j(f; [s_0, s_k])` over growing prefixes of a
/// 1-D grid, by the trapezoid rule on `ν_j(f(s, ·))` (`pointwise_nu[k][j]`).
pub fn cumulative_dgsm(pointwise_nu: &[Vec<f64>], abscissae: &[f64]) -> Vec<Vec<f64>> {
    let n_par = pointwise_nu.first().map_or(0, Vec::len);
    let mut acc = vec![0.0; n_par];
    let mut out = Vec::with_capacity(abscissae.len());
    out.push(acc.clone());
    for k in 1..abscissae.len() {
        let h = abscissae[k] - abscissae[k - 1];
        for j in 0..n_par {
            acc[j] += 0.5 * h * (pointwise_nu[k - 1][j] + pointwise_nu[k][j]);
        }
        out.push(acc.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Marginal;
    use crate::grid::make_interval_grid;
    use crate::model::{toy_process, PointwiseAdapter};
    use std::f64::consts::PI;

    fn cube(d: usize) -> ParameterSpace {
        ParameterSpace::iid(Marginal::uniform(-1.0, 1.0).unwrap(), d).unwrap()
    }

    #[test]
    fn scalar_dgsm_basics() {
        assert_eq!(nu_scalar(&[0.0; 10]).unwrap(), 0.0);
        assert_eq!(nu_scalar(&[1.0; 7]).unwrap(), 1.0);
        assert!(nu_scalar(&[]).is_err());
        // g = θ², ∂g = 2θ, E[4θ²] = 4/3
        let s = cube(1).sample(10_000, 8).unwrap();
        let d: Vec<f64> = s.iter().map(|r| 2.0 * r[0]).collect();
        let sq: Vec<f64> = d.iter().map(|x| x * x).collect();
        let mean = nu_scalar(&d).unwrap();
        let var = sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (sq.len() - 1) as f64;
        assert!((mean - 4.0 / 3.0).abs() < 3.0 * (var / sq.len() as f64).sqrt());
    }

    #[test]
    fn toy_direct_values_and_bounds() {
        let grid = make_interval_grid(0.0, 1.0, 2001).unwrap();
        let model = toy_process(grid);
        let out = run_direct(&model, &cube(2), 50, 1, 0.05).unwrap();
        let n = &out.report.functional_dgsm;
        assert!((n[0] - 0.5).abs() < 1e-6);
        assert!((n[1] - 1.0 / 12.0).abs() < 1e-6);
        let b = dgsm_bound(n, 7.0 / 36.0, &cube(2).poincare_constants()).unwrap();
        assert!((b[0] - 72.0 / (7.0 * PI * PI)).abs() < 1e-6);
        assert!((b[1] - 12.0 / (7.0 * PI * PI)).abs() < 1e-6);
        assert!((out.report.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn finite_rank_edge_cases() {
        assert_eq!(functional_dgsm_finite_rank(&[vec![0.7]], &[1.0]).unwrap(), vec![0.7]);
        let a = functional_dgsm_finite_rank(&[vec![0.3, 0.1], vec![0.2, 0.4]], &[2.0, 0.5]).unwrap();
        let b = functional_dgsm_finite_rank(&[vec![0.3, 0.1], vec![0.2, 0.4], vec![9.0, 9.0]], &[2.0, 0.5, 0.0])
            .unwrap();
        assert_eq!(a, b);
        assert!(functional_dgsm_finite_rank(&[vec![1.0]], &[-1.0]).is_err());
        assert!(dgsm_bound(&[1.0], 0.0, &[1.0]).is_err());
        assert_eq!(dgsm_bound(&[0.5, 2.0], 4.0, &[1.0, 1.0]).unwrap(), vec![0.125, 0.5]);
    }

    #[test]
    fn algorithm_1_matches_direct_on_toy() {
        let grid = make_interval_grid(0.0, 1.0, 201).unwrap();
        let model = toy_process(grid.clone());
        let opts = Algorithm1Options {
            n_mc: 400,
            n_qoi: 2,
            seed: 4,
            threshold: 0.05,
            fresh_gradient_samples: false,
        };
        let out = run_algorithm_1(&PointwiseAdapter(&model), &cube(2), &opts).unwrap();
        let direct = run_direct(&model, &cube(2), 400, 4, 0.05).unwrap();
        // The toy process has rank 2, so the two-mode expansion is exact.
        for j in 0..2 {
            let rel = (out.report.functional_dgsm[j] - direct.report.functional_dgsm[j]).abs()
                / direct.report.functional_dgsm[j];
            assert!(rel < 1e-10, "j={j} rel={rel}");
        }
        assert!((out.report.trace - direct.report.trace).abs() < 1e-10 * direct.report.trace);
        assert_eq!(out.report.important, vec![true, true]);
    }

    #[test]
    fn batch_stderr_behaviour() {
        assert!(batch_means_stderr(&[1.0]).is_nan());
        assert_eq!(batch_means_stderr(&[2.0; 100]), 0.0);
        let v: Vec<f64> = (0..1000).map(|k| (k % 7) as f64).collect();
        assert!(batch_means_stderr(&v) > 0.0);
    }

    #[test]
    fn cumulative_is_monotone() {
        let nu = vec![vec![0.0, 1.0], vec![2.0, 0.0], vec![1.0, 1.0]];
        let c = cumulative_dgsm(&nu, &[0.0, 1.0, 3.0]);
        assert_eq!(c[0], vec![0.0, 0.0]);
        assert_eq!(c[2], vec![1.0 + 3.0, 0.5 + 1.0]);
    }
}
