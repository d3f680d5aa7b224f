//! Reduced models obtained by freezing inputs, their mean-square error, and
//! density-based comparisons of reduced versus full outputs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distributions::{derive_seed, ParameterSpace};
use crate::error::{Error, Result};
use crate::grid::SpatialGrid;
use crate::model::FunctionalModel;

/// `f^{(η)}(s, θ_U) = f(s, θ_U, η)`: the inputs outside `retained` are frozen.
#[derive(Debug, Clone)]
pub struct ReducedModel<'a, M> {
    pub base: &'a M,
    retained: Vec<usize>,
    frozen: Vec<usize>,
    nominal: Vec<f64>,
}

impl<'a, M: FunctionalModel> ReducedModel<'a, M> {
    /// `retained` lists the free inputs (0-based); `nominal` holds the values of
    /// the complement in increasing index order.
    pub fn new(base: &'a M, retained: &[usize], nominal: Vec<f64>) -> Result<Self> {
        let n = base.n_par();
        let mut keep = vec![false; n];
        for &j in retained {
            if j >= n {
                return Err(Error::invalid(format!("retained index {j} out of range for {n} inputs")));
            }
            if keep[j] {
                return Err(Error::invalid(format!("retained index {j} listed twice")));
            }
            keep[j] = true;
        }
        if retained.is_empty() {
            return Err(Error::invalid("a reduced model must keep at least one input"));
        }
        let frozen: Vec<usize> = (0..n).filter(|&j| !keep[j]).collect();
        if nominal.len() != frozen.len() {
            return Err(Error::DimensionMismatch {
                expected: frozen.len(),
                got: nominal.len(),
                context: "nominal values of frozen inputs",
            });
        }
        let mut retained = retained.to_vec();
        retained.sort_unstable();
        Ok(Self {
            base,
            retained,
            frozen,
            nominal,
        })
    }

    /// Freeze the complement of `retained` at the nominal point of `space`
    /// (zero for centred normal inputs and for `[-1, 1]` uniforms).
    pub fn at_nominal(base: &'a M, retained: &[usize], space: &ParameterSpace) -> Result<Self> {
        let mean = space.nominal();
        if mean.len() != base.n_par() {
            return Err(Error::DimensionMismatch {
                expected: base.n_par(),
                got: mean.len(),
                context: "parameter space",
            });
        }
        let keep: Vec<bool> = (0..base.n_par()).map(|j| retained.contains(&j)).collect();
        let nominal = (0..base.n_par()).filter(|&j| !keep[j]).map(|j| mean[j]).collect();
        Self::new(base, retained, nominal)
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    pub fn frozen(&self) -> &[usize] {
        &self.frozen
    }

    pub fn nominal(&self) -> &[f64] {
        &self.nominal
    }

    /// Full input vector with the frozen coordinates of `theta` overwritten.
    pub fn freeze(&self, theta: &[f64]) -> Vec<f64> {
        let mut t = theta.to_vec();
        for (&j, &v) in self.frozen.iter().zip(&self.nominal) {
            t[j] = v;
        }
        t
    }

    /// Full input vector from the retained coordinates only.
    pub fn expand(&self, theta_u: &[f64]) -> Result<Vec<f64>> {
        if theta_u.len() != self.retained.len() {
            return Err(Error::DimensionMismatch {
                expected: self.retained.len(),
                got: theta_u.len(),
                context: "retained inputs",
            });
        }
        let mut t = vec![0.0; self.base.n_par()];
        for (&j, &v) in self.retained.iter().zip(theta_u) {
            t[j] = v;
        }
        for (&j, &v) in self.frozen.iter().zip(&self.nominal) {
            t[j] = v;
        }
        Ok(t)
    }

    /// Evaluate at a full-length input, ignoring its frozen coordinates.
    pub fn evaluate_full(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.base.evaluate(&self.freeze(theta))
    }
}

impl<M: FunctionalModel> FunctionalModel for ReducedModel<'_, M> {
    fn n_par(&self) -> usize {
        self.retained.len()
    }

    fn grid(&self) -> &SpatialGrid {
        self.base.grid()
    }

    fn evaluate(&self, theta_u: &[f64]) -> Result<Vec<f64>> {
        self.base.evaluate(&self.expand(theta_u)?)
    }
}

/// Monte Carlo estimate of `∫∫(f - f^{(η)})² / ∫∫ f²` on shared samples.
pub fn relative_mse<M: FunctionalModel>(
    full: &M,
    reduced: &ReducedModel<'_, M>,
    space: &ParameterSpace,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid(format!("relative MSE needs n >= 2, got {n}")));
    }
    if space.dim() != full.n_par() || reduced.base.n_par() != full.n_par() {
        return Err(Error::DimensionMismatch {
            expected: full.n_par(),
            got: space.dim(),
            context: "parameter space",
        });
    }
    if reduced.grid().len() != full.grid().len() {
        return Err(Error::DimensionMismatch {
            expected: full.grid().len(),
            got: reduced.grid().len(),
            context: "reduced model grid",
        });
    }
    let grid = full.grid();
    let terms: Vec<(f64, f64)> = (0..n as u64)
        .into_par_iter()
        .map(|m| -> Result<(f64, f64)> {
            let theta = space.sample_row(seed, m);
            let f = full.evaluate(&theta).map_err(|e| e.at_sample(m as usize))?;
            let g = reduced.evaluate_full(&theta).map_err(|e| e.at_sample(m as usize))?;
            let d: Vec<f64> = f.iter().zip(&g).map(|(a, b)| (a - b) * (a - b)).collect();
            let f2: Vec<f64> = f.iter().map(|a| a * a).collect();
            Ok((grid.integrate(&d)?, grid.integrate(&f2)?))
        })
        .collect::<Result<_>>()?;
    let (num, den) = terms.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    if den == 0.0 {
        return Err(Error::Degenerate("process is identically zero on the sample".into()));
    }
    Ok(num / den)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanSe {
    fn of(x: &[f64]) -> Self {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = if x.len() > 1 {
            x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            stderr: (var / n).sqrt(),
        }
    }
}

/// Nested Monte Carlo check of the averaged relative error against twice the
/// functional total index of the frozen group, and of the pointwise identity
/// `∫ err(f; η) μ(dη) = 2 D^tot_{U^c}(s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop22Check {
    pub n_outer: usize,
    pub n_inner: usize,
    /// Average of `ℰ(f; η)` over the outer samples of `η`.
    pub lhs: MeanSe,
    /// `2 𝔖^tot_{U^c}` from an independent group Jansen estimate.
    pub rhs: MeanSe,
    /// Un-normalised numerator: averaged `∫ err(f; η) ds` versus `2 ∫ D^tot ds`.
    pub numerator: MeanSe,
    pub twice_total_variance: MeanSe,
    /// Pointwise averaged `err(f; η)(s)` and `2 D^tot(s)`.
    pub pointwise_err: Vec<MeanSe>,
    pub pointwise_twice_dtot: Vec<MeanSe>,
    pub holds: bool,
}

impl Prop22Check {
    /// Whether the pointwise identity holds within `k` combined standard errors
    /// at every grid point.
    pub fn lemma_holds(&self, k: f64) -> bool {
        self.pointwise_err
            .iter()
            .zip(&self.pointwise_twice_dtot)
            .all(|(a, b)| (a.mean - b.mean).abs() <= k * a.stderr.hypot(b.stderr) + 1e-12)
    }

    pub fn numerator_holds(&self, k: f64) -> bool {
        (self.numerator.mean - self.twice_total_variance.mean).abs()
            <= k * self.numerator.stderr.hypot(self.twice_total_variance.stderr) + 1e-12
    }
}

/// `retained` is the set `U`; its complement is frozen at each outer sample.
pub fn check_prop_2_2<M: FunctionalModel>(
    model: &M,
    space: &ParameterSpace,
    retained: &[usize],
    n_outer: usize,
    n_inner: usize,
    seed: u64,
) -> Result<Prop22Check> {
    if n_outer < 2 || n_inner < 2 {
        return Err(Error::invalid("nested Monte Carlo needs n_outer, n_inner >= 2"));
    }
    if space.dim() != model.n_par() {
        return Err(Error::DimensionMismatch {
            expected: model.n_par(),
            got: space.dim(),
            context: "parameter space",
        });
    }
    let n_par = model.n_par();
    if let Some(&j) = retained.iter().find(|&&j| j >= n_par) {
        return Err(Error::invalid(format!("retained index {j} out of range")));
    }
    let frozen: Vec<usize> = (0..n_par).filter(|j| !retained.contains(j)).collect();
    let grid = model.grid();
    let n_s = grid.len();

    if frozen.is_empty() {
        let zero = MeanSe { mean: 0.0, stderr: 0.0 };
        return Ok(Prop22Check {
            n_outer,
            n_inner,
            lhs: zero.clone(),
            rhs: zero.clone(),
            numerator: zero.clone(),
            twice_total_variance: zero.clone(),
            pointwise_err: vec![zero.clone(); n_s],
            pointwise_twice_dtot: vec![zero; n_s],
            holds: true,
        });
    }

    let eta_seed = derive_seed(seed, 0x11);
    let inner_seed = derive_seed(seed, 0x12);
    // (per-point err, ∫err, ∫f²) for each outer η with its own inner sample set
    let outer: Vec<(Vec<f64>, f64, f64)> = (0..n_outer as u64)
        .into_par_iter()
        .map(|k| -> Result<(Vec<f64>, f64, f64)> {
            let eta = space.sample_row(eta_seed, k);
            let stream = derive_seed(inner_seed, k);
            let mut err = vec![0.0; n_s];
            let mut sq = vec![0.0; n_s];
            for m in 0..n_inner as u64 {
                let theta = space.sample_row(stream, m);
                let mut frozen_theta = theta.clone();
                for &j in &frozen {
                    frozen_theta[j] = eta[j];
                }
                let f = model.evaluate(&theta).map_err(|e| e.at_sample(m as usize))?;
                let g = model.evaluate(&frozen_theta).map_err(|e| e.at_sample(m as usize))?;
                for s in 0..n_s {
                    err[s] += (f[s] - g[s]).powi(2);
                    sq[s] += f[s] * f[s];
                }
            }
            let inv = 1.0 / n_inner as f64;
            err.iter_mut().for_each(|v| *v *= inv);
            sq.iter_mut().for_each(|v| *v *= inv);
            let num = grid.integrate(&err)?;
            let den = grid.integrate(&sq)?;
            Ok((err, num, den))
        })
        .collect::<Result<_>>()?;
    if outer.iter().any(|o| o.2 == 0.0) {
        return Err(Error::Degenerate("process is identically zero on an inner sample".into()));
    }
    let ratios: Vec<f64> = outer.iter().map(|o| o.1 / o.2).collect();
    let nums: Vec<f64> = outer.iter().map(|o| o.1).collect();
    let pointwise_err = (0..n_s)
        .map(|s| MeanSe::of(&outer.iter().map(|o| o.0[s]).collect::<Vec<_>>()))
        .collect();

    // Independent group Jansen estimate: 2 D^tot(s) = E (f(A) - f(A with U^c from B))².
    let n_j = n_outer * n_inner;
    let a_seed = derive_seed(seed, 0x13);
    let b_seed = derive_seed(seed, 0x14);
    let jansen: Vec<(Vec<f64>, Vec<f64>)> = (0..n_j as u64)
        .into_par_iter()
        .map(|m| -> Result<(Vec<f64>, Vec<f64>)> {
            let a = space.sample_row(a_seed, m);
            let b = space.sample_row(b_seed, m);
            let mut ab = a.clone();
            for &j in &frozen {
                ab[j] = b[j];
            }
            let fa = model.evaluate(&a).map_err(|e| e.at_sample(m as usize))?;
            let fab = model.evaluate(&ab).map_err(|e| e.at_sample(m as usize))?;
            Ok((fa.iter().zip(&fab).map(|(x, y)| (x - y).powi(2)).collect(), fa))
        })
        .collect::<Result<_>>()?;
    let pointwise_twice_dtot: Vec<MeanSe> = (0..n_s)
        .map(|s| MeanSe::of(&jansen.iter().map(|t| t.0[s]).collect::<Vec<_>>()))
        .collect();
    let per_sample_num: Vec<f64> = jansen
        .iter()
        .map(|t| grid.integrate(&t.0))
        .collect::<Result<_>>()?;
    let twice_total_variance = MeanSe::of(&per_sample_num);
    let mut variance = vec![0.0; n_s];
    for s in 0..n_s {
        let col: Vec<f64> = jansen.iter().map(|t| t.1[s]).collect();
        let mean = col.iter().sum::<f64>() / n_j as f64;
        variance[s] = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n_j as f64 - 1.0);
    }
    let total_var = grid.integrate(&variance)?;
    if total_var == 0.0 {
        return Err(Error::Degenerate("process has zero variance".into()));
    }
    let rhs = MeanSe {
        mean: twice_total_variance.mean / total_var,
        stderr: twice_total_variance.stderr / total_var,
    };
    let lhs = MeanSe::of(&ratios);
    let holds = lhs.mean <= rhs.mean + 3.0 * lhs.stderr.hypot(rhs.stderr);
    Ok(Prop22Check {
        n_outer,
        n_inner,
        lhs,
        rhs,
        numerator: MeanSe::of(&nums),
        twice_total_variance,
        pointwise_err,
        pointwise_twice_dtot,
        holds,
    })
}

fn quantile_sorted(x: &[f64], p: f64) -> f64 {
    let pos = p * (x.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    x[lo] + (pos - lo as f64) * (x[hi] - x[lo])
}

/// Silverman's rule-of-thumb bandwidth `1.06 min(std, IQR/1.34) n^{-1/5}`.
pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < 30 {
        return Err(Error::invalid(format!("density estimate needs >= 30 samples, got {}", samples.len())));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("density samples must be finite"));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let std = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(std > 0.0) {
        return Err(Error::Degenerate("samples have zero variance".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { std.min(iqr / 1.34) } else { std };
    Ok(1.06 * spread * n.powf(-0.2))
}

/// Gaussian kernel density estimate at `points`.
pub fn kde_pdf(samples: &[f64], points: &[f64]) -> Result<Vec<f64>> {
    let h = silverman_bandwidth(samples)?;
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    Ok(points
        .par_iter()
        .map(|&x| {
            norm * samples
                .iter()
                .map(|&s| {
                    let z = (x - s) / h;
                    (-0.5 * z * z).exp()
                })
                .sum::<f64>()
        })
        .collect())
}

/// Uniform evaluation grid covering every sample set plus four bandwidths.
pub fn common_pdf_grid(sets: &[&[f64]], n_points: usize) -> Result<Vec<f64>> {
    if n_points < 2 || sets.is_empty() {
        return Err(Error::invalid("PDF grid needs >= 2 points and one sample set"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut h = 0.0f64;
    for s in sets {
        h = h.max(silverman_bandwidth(s)?);
        for &v in s.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    lo -= 4.0 * h;
    hi += 4.0 * h;
    Ok((0..n_points)
        .map(|i| lo + (hi - lo) * i as f64 / (n_points - 1) as f64)
        .collect())
}

/// Trapezoid `∫ |p - q|` on a uniform grid.
pub fn l1_on_grid(points: &[f64], p: &[f64], q: &[f64]) -> f64 {
    let d: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).abs()).collect();
    points
        .windows(2)
        .zip(d.windows(2))
        .map(|(x, v)| 0.5 * (x[1] - x[0]) * (v[0] + v[1]))
        .sum()
}

/// L¹ distance between the KDEs of two sample sets on a shared 512-point grid.
pub fn l1_pdf_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let x = common_pdf_grid(&[a, b], PDF_GRID_POINTS)?;
    Ok(l1_on_grid(&x, &kde_pdf(a, &x)?, &kde_pdf(b, &x)?))
}

pub const PDF_GRID_POINTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RomMethod {
    Dgsm,
    Kl,
}

impl RomMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            RomMethod::Dgsm => "dgsm",
            RomMethod::Kl => "kl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RomRow {
    pub probe: usize,
    pub tier: usize,
    pub method: RomMethod,
    pub l1_distance: f64,
}

/// Samples at the probes: `[probe][sample]`.
pub type ProbeSamples = Vec<Vec<f64>>;

#[derive(Debug, Clone)]
pub struct RomComparison {
    pub rows: Vec<RomRow>,
    pub full: ProbeSamples,
    /// `(tier, method, samples)` in row order of the tiers.
    pub reduced: Vec<(usize, RomMethod, ProbeSamples)>,
}

fn probe_samples<F>(eval: &F, space: &ParameterSpace, keep: Option<&[bool]>, n: usize, seed: u64) -> Result<ProbeSamples>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let nominal = space.nominal();
    let rows: Vec<Vec<f64>> = (0..n as u64)
        .into_par_iter()
        .map(|m| {
            let mut theta = space.sample_row(seed, m);
            if let Some(k) = keep {
                for (j, t) in theta.iter_mut().enumerate() {
                    if !k[j] {
                        *t = nominal[j];
                    }
                }
            }
            eval(&theta).map_err(|e| e.at_sample(m as usize))
        })
        .collect::<Result<_>>()?;
    let n_probe = rows.first().map_or(0, Vec::len);
    Ok((0..n_probe).map(|p| rows.iter().map(|r| r[p]).collect()).collect())
}

/// Compare full-model probe densities with those of DGSM-ranked and KL-ordered
/// reduced models. `eval` maps a full input vector to probe values; reduced
/// models reuse the same input samples with the frozen coordinates set to the
/// nominal point, so differences reflect the reduction only.
pub fn rom_compare<F>(
    eval: &F,
    space: &ParameterSpace,
    dgsm_sets: &[Vec<usize>],
    kl_sets: &[Vec<usize>],
    n: usize,
    seed: u64,
) -> Result<RomComparison>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if dgsm_sets.len() != kl_sets.len() {
        return Err(Error::DimensionMismatch {
            expected: dgsm_sets.len(),
            got: kl_sets.len(),
            context: "ROM tiers",
        });
    }
    let d = space.dim();
    for (a, b) in dgsm_sets.iter().zip(kl_sets) {
        if a.len() != b.len() {
            return Err(Error::invalid(format!(
                "tier sizes differ: {} DGSM inputs vs {} KL inputs",
                a.len(),
                b.len()
            )));
        }
        if let Some(j) = a.iter().chain(b).find(|&&j| j >= d) {
            return Err(Error::invalid(format!("input index {j} out of range for {d} inputs")));
        }
    }
    let full = probe_samples(eval, space, None, n, seed)?;
    let mut reduced = Vec::new();
    let mut rows = Vec::new();
    for (a, b) in dgsm_sets.iter().zip(kl_sets) {
        let tier = a.len();
        for (method, set) in [(RomMethod::Dgsm, a), (RomMethod::Kl, b)] {
            let mut keep = vec![false; d];
            set.iter().for_each(|&j| keep[j] = true);
            let samples = probe_samples(eval, space, Some(&keep), n, seed)?;
            for (probe, (f, r)) in full.iter().zip(&samples).enumerate() {
                rows.push(RomRow {
                    probe,
                    tier,
                    method,
                    l1_distance: l1_pdf_distance(f, r)?,
                });
            }
            reduced.push((tier, method, samples));
        }
    }
    Ok(RomComparison { rows, full, reduced })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Marginal;
    use crate::grid::make_interval_grid;
    use crate::model::{toy_process, ClosureModel};

    fn toy() -> (impl FunctionalModel, ParameterSpace) {
        let grid = make_interval_grid(0.0, 1.0, 201).unwrap();
        (
            toy_process(grid),
            ParameterSpace::iid(Marginal::uniform(-1.0, 1.0).unwrap(), 2).unwrap(),
        )
    }

    #[test]
    fn nothing_frozen_is_exact() {
        let (m, sp) = toy();
        let r = ReducedModel::new(&m, &[0, 1], vec![]).unwrap();
        assert_eq!(relative_mse(&m, &r, &sp, 50, 1).unwrap(), 0.0);
    }

    #[test]
    fn inactive_parameter_gives_zero_error() {
        let grid = make_interval_grid(0.0, 1.0, 51).unwrap();
        let s = grid.abscissae();
        let m = ClosureModel::new(grid, 2, move |t: &[f64]| Ok(s.iter().map(|x| t[0] * x.cos()).collect()));
        let sp = ParameterSpace::iid(Marginal::uniform(-1.0, 1.0).unwrap(), 2).unwrap();
        let r = ReducedModel::at_nominal(&m, &[0], &sp).unwrap();
        assert_eq!(relative_mse(&m, &r, &sp, 100, 2).unwrap(), 0.0);
    }

    #[test]
    fn freezing_at_sampled_value_is_bit_identical() {
        let (m, sp) = toy();
        let theta = sp.sample_row(3, 0);
        let r = ReducedModel::new(&m, &[0], vec![theta[1]]).unwrap();
        assert_eq!(r.evaluate(&[theta[0]]).unwrap(), m.evaluate(&theta).unwrap());
    }

    #[test]
    fn relative_mse_matches_toy_value() {
        // freeze θ₂ at 0: numerator ∫ E(θ₂ s / 2)² = 1/36, denominator 7/36
        let (m, sp) = toy();
        let r = ReducedModel::at_nominal(&m, &[0], &sp).unwrap();
        let e = relative_mse(&m, &r, &sp, 20_000, 4).unwrap();
        assert!((e - 1.0 / 7.0).abs() < 0.01, "{e}");
    }

    #[test]
    fn relative_mse_is_scale_invariant() {
        let grid = make_interval_grid(0.0, 1.0, 41).unwrap();
        let s = grid.abscissae();
        let s2 = s.clone();
        let m1 = ClosureModel::new(grid.clone(), 2, move |t: &[f64]| {
            Ok(s.iter().map(|x| t[0] * x + t[1] * t[0] * x * x).collect())
        });
        let m2 = ClosureModel::new(grid, 2, move |t: &[f64]| {
            Ok(s2.iter().map(|x| 4.0 * (t[0] * x + t[1] * t[0] * x * x)).collect())
        });
        let sp = ParameterSpace::iid(Marginal::standard_normal(), 2).unwrap();
        let e1 = relative_mse(&m1, &ReducedModel::at_nominal(&m1, &[0], &sp).unwrap(), &sp, 500, 5).unwrap();
        let e2 = relative_mse(&m2, &ReducedModel::at_nominal(&m2, &[0], &sp).unwrap(), &sp, 500, 5).unwrap();
        assert!((e1 - e2).abs() < 1e-12 * e1);
    }

    #[test]
    fn reduced_model_rejects_bad_sets() {
        let (m, _) = toy();
        assert!(ReducedModel::new(&m, &[], vec![0.0, 0.0]).is_err());
        assert!(ReducedModel::new(&m, &[0], vec![]).is_err());
        assert!(ReducedModel::new(&m, &[2], vec![0.0, 0.0]).is_err());
    }

    #[test]
    fn prop_2_2_on_toy() {
        let (m, sp) = toy();
        let c = check_prop_2_2(&m, &sp, &[0], 64, 256, 9).unwrap();
        assert!(c.holds);
        assert!(c.lhs.mean <= 2.0 / 7.0 + 3.0 * c.lhs.stderr);
        assert!(c.numerator_holds(3.0));
        assert!(c.lemma_holds(3.0));
        let none = check_prop_2_2(&m, &sp, &[0, 1], 4, 4, 9).unwrap();
        assert_eq!(none.lhs.mean, 0.0);
        assert!(none.holds);
    }

    #[test]
    fn kde_normal_peak_and_mass() {
        let sp = ParameterSpace::iid(Marginal::standard_normal(), 1).unwrap();
        let x: Vec<f64> = sp.sample(6000, 11).unwrap().into_iter().map(|r| r[0]).collect();
        let peak = kde_pdf(&x, &[0.0]).unwrap()[0];
        let exact = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((peak - exact).abs() < 0.05 * exact, "{peak}");
        let g = common_pdf_grid(&[&x], 512).unwrap();
        let p = kde_pdf(&x, &g).unwrap();
        assert!(p.iter().all(|v| *v >= 0.0));
        let mass = l1_on_grid(&g, &p, &vec![0.0; p.len()]);
        assert!((mass - 1.0).abs() < 0.01);
        let shifted: Vec<f64> = x.iter().map(|v| v + 3.0).collect();
        let q = kde_pdf(&shifted, &[3.0]).unwrap()[0];
        assert!((q - peak).abs() < 1e-12);
    }

    #[test]
    fn kde_rejects_degenerate_input() {
        assert!(kde_pdf(&[1.0; 40], &[1.0]).is_err());
        assert!(kde_pdf(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn rom_compare_identical_sets() {
        let sp = ParameterSpace::iid(Marginal::standard_normal(), 4).unwrap();
        let eval = |t: &[f64]| Ok(vec![t[0] + 0.5 * t[1] + 0.1 * t[2] * t[3], t[1].exp() + t[2]]);
        let sets = vec![vec![0, 1], vec![0, 1, 2]];
        let c = rom_compare(&eval, &sp, &sets, &sets, 400, 3).unwrap();
        assert_eq!(c.rows.len(), 2 * 2 * 2);
        for pair in c.rows.chunks(4) {
            assert_eq!(pair[0].l1_distance, pair[2].l1_distance);
            assert_eq!(pair[1].l1_distance, pair[3].l1_distance);
        }
        assert!(rom_compare(&eval, &sp, &[vec![0]], &[vec![0, 1]], 40, 3).is_err());
    }
}
