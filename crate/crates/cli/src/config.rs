//! Experiment configuration files (TOML).
//!
//! Every table rejects unknown keys. `[experiment]` is required and must name
//! `kind` and `n_mc`; everything else has a default, and [`ExperimentConfig::resolve`]
//! fills those in so the effective settings can be echoed and recorded.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use dgsm_core::cholera::{CholeraParams, ParameterRanges, N_UNCERTAIN, PARAM_NAMES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExperimentKind {
    Toy,
    Cholera,
    Subsurface,
    Biotransport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub toy: Option<ToySection>,
    pub cholera: Option<CholeraSection>,
    pub subsurface: Option<SubsurfaceSection>,
    pub biotransport: Option<BiotransportSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    pub n_mc: usize,
    pub n_qoi: Option<usize>,
    pub seed: Option<u64>,
    pub threshold: Option<f64>,
    /// Base samples for a pick-freeze Sobol' report; 0 skips it.
    pub sobol_samples: Option<usize>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quadrature {
    Trapezoid,
    Simpson,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySection {
    pub grid_points: usize,
    pub quadrature: Quadrature,
}

impl Default for ToySection {
    fn default() -> Self {
        Self {
            grid_points: 2001,
            quadrature: Quadrature::Simpson,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CholeraSection {
    pub t_final: f64,
    pub n_times: usize,
    pub rtol: f64,
    pub atol: f64,
    /// Band `nominal·(1 ± relative_range)` for rates without an explicit range.
    pub relative_range: f64,
    /// Explicit `[a, b]` per rate name.
    pub ranges: BTreeMap<String, [f64; 2]>,
}

impl Default for CholeraSection {
    fn default() -> Self {
        Self {
            t_final: 150.0,
            n_times: 601,
            rtol: 1e-8,
            atol: 1e-10,
            relative_range: 0.1,
            ranges: BTreeMap::new(),
        }
    }
}

impl CholeraSection {
    pub fn parameter_ranges(&self) -> Result<ParameterRanges> {
        let mut r = ParameterRanges::relative(&CholeraParams::nominal(), self.relative_range)?;
        for (name, [a, b]) in &self.ranges {
            let k = PARAM_NAMES
                .iter()
                .position(|n| n == name)
                .with_context(|| format!("cholera.ranges: unknown rate {name:?} (expected one of {PARAM_NAMES:?})"))?;
            r.lower[k] = *a;
            r.upper[k] = *b;
        }
        r.validate()?;
        Ok(r)
    }

    /// Every range spelled out, for the effective-config echo.
    fn explicit(&self) -> Result<Self> {
        let r = self.parameter_ranges()?;
        let mut out = self.clone();
        out.ranges = (0..N_UNCERTAIN)
            .map(|k| (PARAM_NAMES[k].to_owned(), [r.lower[k], r.upper[k]]))
            .collect();
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubsurfaceSection {
    pub nx: usize,
    pub ny: usize,
    pub n_par: usize,
    pub sigma_a: f64,
    pub ell_x: f64,
    pub ell_y: f64,
    pub mollifier: f64,
    pub mean_log_kappa: f64,
}

impl Default for SubsurfaceSection {
    fn default() -> Self {
        let c = dgsm_core::elliptic::subsurface_config();
        Self {
            nx: c.nx,
            ny: c.ny,
            n_par: c.n_par,
            sigma_a: c.sigma_a,
            ell_x: c.ell_x,
            ell_y: c.ell_y,
            mollifier: c.mollifier,
            mean_log_kappa: c.mean_log_kappa,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiotransportSection {
    pub ell: f64,
    pub r_out: f64,
    pub nr: usize,
    pub nphi: usize,
    /// Mesh for the kernel eigenproblem (modes are Nyström-extended to nr × nphi).
    pub kle_nr: usize,
    pub kle_nphi: usize,
    pub n_par: usize,
    pub sigma_a2: f64,
    pub kappa: f64,
    pub eta: f64,
    pub q: f64,
    /// Run the DGSM- versus KL-ranked reduced-model comparison.
    pub rom: bool,
    pub pdf_samples: usize,
    pub tiers: Vec<usize>,
}

impl Default for BiotransportSection {
    fn default() -> Self {
        let c = dgsm_core::elliptic::biotransport_config(0.5, 3.0);
        Self {
            ell: c.ell,
            r_out: c.r_out,
            nr: c.nr,
            nphi: c.nphi,
            kle_nr: c.kle_nr,
            kle_nphi: c.kle_nphi,
            n_par: c.n_par,
            sigma_a2: c.sigma_a2,
            kappa: c.kappa_nominal,
            eta: c.eta,
            q: c.q,
            rom: false,
            pdf_samples: 6000,
            tiers: vec![7, 15, 30, 45],
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Fill in defaults for the selected experiment and check invariants.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let e = &self.experiment;
        let kind = e.kind;
        let others = [
            (ExperimentKind::Toy, self.toy.is_some(), "toy"),
            (ExperimentKind::Cholera, self.cholera.is_some(), "cholera"),
            (ExperimentKind::Subsurface, self.subsurface.is_some(), "subsurface"),
            (ExperimentKind::Biotransport, self.biotransport.is_some(), "biotransport"),
        ];
        for (k, present, name) in others {
            if present && k != kind {
                bail!("section [{name}] does not apply to experiment kind {kind:?}");
            }
        }
        let (n_qoi_default, threshold_default) = match kind {
            ExperimentKind::Toy => (2, 0.05),
            ExperimentKind::Cholera => (10, 0.05),
            ExperimentKind::Subsurface => (15, 0.01),
            ExperimentKind::Biotransport => (50, 0.025),
        };
        let experiment = ExperimentSection {
            kind,
            n_mc: e.n_mc,
            n_qoi: Some(e.n_qoi.unwrap_or(n_qoi_default)),
            seed: Some(e.seed.unwrap_or(1)),
            threshold: Some(e.threshold.unwrap_or(threshold_default)),
            sobol_samples: Some(e.sobol_samples.unwrap_or(0)),
            output_dir: e.output_dir.clone(),
        };
        let mut out = ExperimentConfig {
            experiment,
            toy: None,
            cholera: None,
            subsurface: None,
            biotransport: None,
        };
        match kind {
            ExperimentKind::Toy => out.toy = Some(self.toy.clone().unwrap_or_default()),
            ExperimentKind::Cholera => out.cholera = Some(self.cholera.clone().unwrap_or_default().explicit()?),
            ExperimentKind::Subsurface => out.subsurface = Some(self.subsurface.clone().unwrap_or_default()),
            ExperimentKind::Biotransport => out.biotransport = Some(self.biotransport.clone().unwrap_or_default()),
        }
        out.check()?;
        Ok(out)
    }

    fn check(&self) -> Result<()> {
        let e = &self.experiment;
        if e.n_mc < 2 {
            bail!("experiment.n_mc must be at least 2, got {}", e.n_mc);
        }
        let n_qoi = e.n_qoi.unwrap_or(1);
        if n_qoi == 0 {
            bail!("experiment.n_qoi must be positive");
        }
        let t = e.threshold.unwrap_or(1.0);
        if !(t > 0.0 && t <= 1.0) {
            bail!("experiment.threshold must lie in (0, 1], got {t}");
        }
        if let Some(s) = e.sobol_samples {
            if s == 1 {
                bail!("experiment.sobol_samples must be 0 (off) or at least 2");
            }
        }
        if let Some(t) = &self.toy {
            if t.grid_points < 3 {
                bail!("toy.grid_points must be at least 3");
            }
            if t.quadrature == Quadrature::Simpson && t.grid_points % 2 == 0 {
                bail!("toy.grid_points must be odd for Simpson quadrature, got {}", t.grid_points);
            }
        }
        if let Some(c) = &self.cholera {
            if !(c.t_final > 0.0) || c.n_times < 2 {
                bail!("cholera.t_final must be positive and cholera.n_times at least 2");
            }
            if !(c.rtol > 0.0 && c.atol > 0.0) {
                bail!("cholera.rtol and cholera.atol must be positive");
            }
            if !(0.0..1.0).contains(&c.relative_range) {
                bail!("cholera.relative_range must lie in [0, 1), got {}", c.relative_range);
            }
        }
        if let Some(s) = &self.subsurface {
            if s.nx == 0 || s.ny == 0 || s.n_par == 0 || s.n_par > s.nx * s.ny {
                bail!("subsurface: nx, ny positive and 1 <= n_par <= nx*ny required");
            }
            if !(s.sigma_a > 0.0 && s.ell_x > 0.0 && s.ell_y > 0.0 && s.mollifier > 0.0) {
                bail!("subsurface: sigma_a, ell_x, ell_y and mollifier must be positive");
            }
            if n_qoi > s.nx {
                bail!("experiment.n_qoi ({n_qoi}) exceeds the {} output points", s.nx);
            }
        }
        if let Some(b) = &self.biotransport {
            if b.nr == 0 || b.nphi < 3 || b.kle_nr == 0 || b.kle_nphi < 3 {
                bail!("biotransport: nr, kle_nr >= 1 and nphi, kle_nphi >= 3 required");
            }
            if b.n_par == 0 || b.n_par > b.kle_nr * b.kle_nphi {
                bail!("biotransport: 1 <= n_par <= kle_nr*kle_nphi required");
            }
            if !(b.ell > 0.0 && b.sigma_a2 > 0.0 && b.kappa > 0.0 && b.eta > 0.0 && b.q > 0.0) {
                bail!("biotransport: ell, sigma_a2, kappa, eta and q must be positive");
            }
            if !(b.r_out > 0.25 && b.r_out <= 5.0) {
                bail!("biotransport.r_out must lie in (R_needle, R_tumor] = (0.25, 5], got {}", b.r_out);
            }
            if b.rom {
                if b.pdf_samples < 30 {
                    bail!("biotransport.pdf_samples must be at least 30");
                }
                if b.tiers.is_empty() || b.tiers.iter().any(|&k| k == 0 || k > b.n_par) {
                    bail!("biotransport.tiers must be nonempty with 1 <= tier <= n_par");
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Resolved accessors (valid after [`resolve`](Self::resolve)).
    pub fn seed(&self) -> u64 {
        self.experiment.seed.unwrap_or(1)
    }

    pub fn n_qoi(&self) -> usize {
        self.experiment.n_qoi.unwrap_or(1)
    }

    pub fn threshold(&self) -> f64 {
        self.experiment.threshold.unwrap_or(0.05)
    }

    pub fn sobol_samples(&self) -> usize {
        self.experiment.sobol_samples.unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_n_mc_names_the_field() {
        let err = ExperimentConfig::from_toml("[experiment]\nkind = \"toy\"\n").unwrap_err();
        assert!(format!("{err:#}").contains("n_mc"), "{err:#}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml("[experiment]\nkind = \"toy\"\nn_mc = 10\nn_mcc = 3\n").unwrap_err();
        assert!(format!("{err:#}").contains("n_mcc"));
        let err = ExperimentConfig::from_toml("[experiment]\nkind = \"toy\"\nn_mc = 10\n[toy]\npoints = 3\n").unwrap_err();
        assert!(format!("{err:#}").contains("points"));
    }

    #[test]
    fn zero_threshold_rejected() {
        let c = ExperimentConfig::from_toml("[experiment]\nkind = \"toy\"\nn_mc = 10\nthreshold = 0.0\n").unwrap();
        assert!(format!("{:#}", c.resolve().unwrap_err()).contains("threshold"));
    }

    #[test]
    fn defaults_are_filled_in() {
        let c = ExperimentConfig::from_toml("[experiment]\nkind = \"cholera\"\nn_mc = 100\n")
            .unwrap()
            .resolve()
            .unwrap();
        assert_eq!(c.threshold(), 0.05);
        let ch = c.cholera.as_ref().unwrap();
        assert_eq!(ch.n_times, 601);
        assert_eq!(ch.ranges.len(), N_UNCERTAIN);
        // echo re-parses to the same effective config
        let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap().resolve().unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn explicit_cholera_ranges() {
        let c = ExperimentConfig::from_toml(
            "[experiment]\nkind = \"cholera\"\nn_mc = 10\n[cholera.ranges]\nbeta_L = [0.1, 0.3]\n",
        )
        .unwrap();
        let r = c.resolve().unwrap().cholera.unwrap().parameter_ranges().unwrap();
        assert_eq!((r.lower[0], r.upper[0]), (0.1, 0.3));
        let bad = ExperimentConfig::from_toml(
            "[experiment]\nkind = \"cholera\"\nn_mc = 10\n[cholera.ranges]\nbeta = [0.1, 0.3]\n",
        )
        .unwrap();
        assert!(bad.resolve().is_err());
    }

    #[test]
    fn section_must_match_kind() {
        let c = ExperimentConfig::from_toml("[experiment]\nkind = \"toy\"\nn_mc = 10\n[cholera]\nn_times = 5\n").unwrap();
        assert!(c.resolve().is_err());
    }
}
