//! Independent input marginals, reproducible sampling and Poincaré constants.
//!
//! Every Monte Carlo sample index owns its own ChaCha stream keyed by
//! `(seed, index)`, so a sample matrix does not depend on how many workers
//! generated it.

use std::f64::consts::PI;

use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Law of a single uncertain input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Marginal {
    Uniform { a: f64, b: f64 },
    /// Centred normal with variance `variance`.
    Normal { variance: f64 },
}

impl Marginal {
    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        let m = Marginal::Uniform { a, b };
        m.validate()?;
        Ok(m)
    }

    pub fn normal(variance: f64) -> Result<Self> {
        let m = Marginal::Normal { variance };
        m.validate()?;
        Ok(m)
    }

    pub fn standard_normal() -> Self {
        Marginal::Normal { variance: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Marginal::Uniform { a, b } if a < b && a.is_finite() && b.is_finite() => Ok(()),
            Marginal::Uniform { a, b } => Err(Error::invalid(format!("uniform marginal needs a < b, got ({a}, {b})"))),
            Marginal::Normal { variance } if variance > 0.0 && variance.is_finite() => Ok(()),
            Marginal::Normal { variance } => {
                Err(Error::invalid(format!("normal marginal needs positive variance, got {variance}")))
            }
        }
    }

    /// Inverse CDF at `u ∈ (0, 1)`.
    pub fn quantile(&self, u: f64) -> f64 {
        match *self {
            Marginal::Uniform { a, b } => a + (b - a) * u,
            Marginal::Normal { variance } => variance.sqrt() * standard_normal_quantile(u),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Marginal::Uniform { a, b } => 0.5 * (a + b),
            Marginal::Normal { .. } => 0.0,
        }
    }

    /// Poincaré constant used in the DGSM upper bound on total indices.
    pub fn poincare_constant(&self) -> f64 {
        match *self {
            Marginal::Uniform { a, b } => (b - a).powi(2) / (PI * PI),
            Marginal::Normal { variance } => variance,
        }
    }
}

/// Free-function form of [`Marginal::poincare_constant`].
pub fn poincare_constant(m: &Marginal) -> Result<f64> {
    m.validate()?;
    Ok(m.poincare_constant())
}

/// Product space of independent marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpace {
    marginals: Vec<Marginal>,
}

impl ParameterSpace {
    pub fn new(marginals: Vec<Marginal>) -> Result<Self> {
        if marginals.is_empty() {
            return Err(Error::invalid("parameter space needs at least one marginal"));
        }
        for m in &marginals {
            m.validate()?;
        }
        Ok(Self { marginals })
    }

    /// `n` i.i.d. copies of the same marginal.
    pub fn iid(m: Marginal, n: usize) -> Result<Self> {
        Self::new(vec![m; n])
    }

    pub fn dim(&self) -> usize {
        self.marginals.len()
    }

    pub fn marginals(&self) -> &[Marginal] {
        &self.marginals
    }

    pub fn poincare_constants(&self) -> Vec<f64> {
        self.marginals.iter().map(Marginal::poincare_constant).collect()
    }

    /// Nominal point: the centre of each marginal.
    pub fn nominal(&self) -> Vec<f64> {
        self.marginals.iter().map(Marginal::mean).collect()
    }

    /// Row `index` of the sample matrix for `seed`.
    pub fn sample_row(&self, seed: u64, index: u64) -> Vec<f64> {
        let mut rng = sample_stream(seed, index);
        self.marginals
            .iter()
            .map(|m| m.quantile(open_unit(&mut rng)))
            .collect()
    }

    /// `n × dim` sample matrix; row `m` depends only on `(seed, m)`.
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(Error::invalid("sample size must be positive"));
        }
        Ok((0..n as u64)
            .into_par_iter()
            .map(|m| self.sample_row(seed, m))
            .collect())
    }
}

/// Counter-based stream for one sample index.
pub fn sample_stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Deterministically derive an independent seed for a named sub-experiment.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform draw on the open interval (0, 1) with 53 random bits.
pub fn open_unit<R: RngCore>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal quantile, Wichura's AS241 (PPND16), relative accuracy ~1e-16.
pub fn standard_normal_quantile(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.0809287301226727 * r + 33430.575583588128105) * r + 67265.770927008700853) * r
                + 45921.953931549871457)
                * r
                + 13731.693765509461125)
                * r
                + 1971.5909503065514427)
                * r
                + 133.14166789178437745)
                * r
                + 3.387132872796366608)
            / (((((((5226.495278852545925 * r + 28729.085735721942674) * r + 39307.89580009271061) * r
                + 21213.794301586595867)
                * r
                + 5394.1960214247511077)
                * r
                + 687.1870074920579083)
                * r
                + 42.313330701600911252)
                * r
                + 1.0);
    }
    let tail = if q < 0.0 { p } else { 1.0 - p };
    if tail <= 0.0 {
        return if q < 0.0 { f64::NEG_INFINITY } else { f64::INFINITY };
    }
    let mut r = (-tail.ln()).sqrt();
    let value = if r <= 5.0 {
        r -= 1.6;
        (((((((7.7454501427834140764e-4 * r + 0.0227238449892691845833) * r + 0.24178072517745061177) * r
            + 1.27045825245236838258)
            * r
            + 3.64784832476320460504)
            * r
            + 5.7694972214606914055)
            * r
            + 4.6303378461565452959)
            * r
            + 1.42343711074968357734)
            / (((((((1.05075007164441684324e-9 * r + 5.475938084995344946e-4) * r + 0.0151986665636164571966)
                * r
                + 0.14810397642748007459)
                * r
                + 0.68976733498510000455)
                * r
                + 1.6763848301838038494)
                * r
                + 2.05319162663775882187)
                * r
                + 1.0)
    } else {
        r -= 5.0;
        (((((((2.01033439929228813265e-7 * r + 2.71155556874348757815e-5) * r + 0.0012426609473880784386) * r
            + 0.026532189526576123093)
            * r
            + 0.29656057182850489123)
            * r
            + 1.7848265399172913358)
            * r
            + 5.4637849111641143699)
            * r
            + 6.6579046435011037772)
            / (((((((2.04426310338993978564e-15 * r + 1.4215117583164458887e-7) * r + 1.8463183175100546818e-5)
                * r
                + 7.868691311456132591e-4)
                * r
                + 0.0148753612908506148525)
                * r
                + 0.13692988092273580531)
                * r
                + 0.59983220655588793769)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -value
    } else {
        value
    }
}
