//! Experiment drivers: build the model named by a resolved config, run the
//! DGSM pipeline and write the result tables.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use anyhow::{Context, Result};
use log::info;

use dgsm_core::cholera::{map_theta_to_params, solve_forward, CholeraModel, CholeraParams, N_UNCERTAIN};
use dgsm_core::distributions::derive_seed;
use dgsm_core::dgsm::{run_algorithm_1, run_direct, Algorithm1Options, DgsmReport};
use dgsm_core::elliptic::{biotransport_config, subsurface_config, BiotransportConfig, EllipticModel, SubsurfaceConfig};
use dgsm_core::io;
use dgsm_core::kle::{kle_from_samples, KLExpansion};
use dgsm_core::model::{toy_process, FunctionalModel};
use dgsm_core::ode::OdeOptions;
use dgsm_core::reduction::{common_pdf_grid, kde_pdf, rom_compare};
use dgsm_core::sobol::estimate_sobol;
use dgsm_core::{make_interval_grid, make_simpson_grid, Marginal, ParameterSpace};

use crate::config::{
    BiotransportSection, ExperimentConfig, ExperimentKind, Quadrature, SubsurfaceSection,
};

pub const DGSM_REPORT: &str = "dgsm_report.csv";
pub const SOBOL_REPORT: &str = "sobol_report.csv";
pub const KLE_SPECTRUM: &str = "kle_spectrum.csv";

/// Collects the names of written files, in order.
pub struct Artifacts<'a> {
    dir: &'a Path,
    pub files: Vec<String>,
}

impl<'a> Artifacts<'a> {
    fn new(dir: &'a Path) -> Self {
        Self { dir, files: Vec::new() }
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        self.files.push(name.to_owned());
        Ok(BufWriter::new(f))
    }

    fn dgsm(&mut self, report: &DgsmReport) -> Result<()> {
        io::write_dgsm_csv(self.create(DGSM_REPORT)?, report)?;
        let meta = io::DgsmMeta::from(report);
        let mut w = self.create("dgsm_meta.json")?;
        serde_json::to_writer_pretty(&mut w, &meta)?;
        Ok(())
    }

    fn spectrum(&mut self, name: &str, spectrum: &[f64], trace: f64) -> Result<()> {
        io::write_spectrum_csv(self.create(name)?, spectrum, trace)?;
        Ok(())
    }

    fn sobol<M: FunctionalModel>(&mut self, cfg: &ExperimentConfig, model: &M, space: &ParameterSpace) -> Result<()> {
        let n = cfg.sobol_samples();
        if n == 0 {
            return Ok(());
        }
        info!("pick-freeze Sobol' estimate with {n} base samples");
        let report = estimate_sobol(model, space, n, derive_seed(cfg.seed(), 0x50b0), None)?;
        io::write_sobol_csv(self.create(SOBOL_REPORT)?, &report)?;
        Ok(())
    }

    fn kle(&mut self, stem: &str, kle: &KLExpansion) -> Result<()> {
        io::save_kle(self.dir, stem, kle)?;
        for suffix in ["mean.csv", "eigenvalues.csv", "spectrum.csv", "modes.csv", io::KLE_MANIFEST] {
            self.files.push(format!("{stem}_{suffix}"));
        }
        Ok(())
    }
}

/// Run the experiment and return the names of the files written under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating output directory {}", out.display()))?;
    let mut art = Artifacts::new(out);
    match cfg.experiment.kind {
        ExperimentKind::Toy => run_toy(cfg, &mut art)?,
        ExperimentKind::Cholera => run_cholera(cfg, &mut art)?,
        ExperimentKind::Subsurface => run_subsurface(cfg, &mut art)?,
        ExperimentKind::Biotransport => run_biotransport(cfg, &mut art)?,
    }
    Ok(art.files)
}

fn run_toy(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let t = cfg.toy.clone().unwrap_or_default();
    let grid = match t.quadrature {
        Quadrature::Simpson => make_simpson_grid(0.0, 1.0, t.grid_points)?,
        Quadrature::Trapezoid => make_interval_grid(0.0, 1.0, t.grid_points)?,
    };
    let model = toy_process(grid);
    let space = ParameterSpace::iid(Marginal::uniform(-1.0, 1.0)?, 2)?;
    let out = run_direct(&model, &space, cfg.experiment.n_mc, cfg.seed(), cfg.threshold())?;
    art.dgsm(&out.report)?;
    let kle = kle_from_samples(&out.ensemble, cfg.n_qoi().min(2))?;
    art.spectrum(KLE_SPECTRUM, &kle.spectrum, kle.trace)?;
    art.sobol(cfg, &model, &space)
}

fn run_cholera(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let c = cfg.cholera.clone().unwrap_or_default();
    let opts = OdeOptions {
        rtol: c.rtol,
        atol: c.atol,
        ..OdeOptions::default()
    };
    let ranges = c.parameter_ranges()?;
    let model = CholeraModel::new(ranges, CholeraParams::nominal(), c.t_final, c.n_times, opts)?;
    let space = ParameterSpace::iid(Marginal::uniform(-1.0, 1.0)?, N_UNCERTAIN)?;

    let times = model.times();
    let mid = map_theta_to_params(&[0.0; N_UNCERTAIN], &ranges, &CholeraParams::nominal())?;
    let traj = solve_forward(&mid, &times, &opts)?;
    let col = |k: usize| traj.states.iter().map(|s| s[k]).collect::<Vec<f64>>();
    let cols = [times.clone(), col(0), col(1), col(2), col(3), col(4)];
    let refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    io::write_columns(art.create("trajectory.csv")?, &["t", "S", "I", "R", "B_H", "B_L"], &refs)?;

    info!("cholera DGSMs with N_MC = {}", cfg.experiment.n_mc);
    let out = run_direct(&model, &space, cfg.experiment.n_mc, cfg.seed(), cfg.threshold())?;
    art.dgsm(&out.report)?;
    let n_qoi = cfg.n_qoi().min(out.ensemble.n_samples()).min(model.grid().len());
    let kle = kle_from_samples(&out.ensemble, n_qoi)?;
    art.spectrum(KLE_SPECTRUM, &kle.spectrum, kle.trace)?;
    let mut names = vec!["t".to_owned(), "mean_I".to_owned()];
    let mut cols = vec![times, out.ensemble.mean()];
    for j in 0..N_UNCERTAIN {
        names.push(format!("nu_{}", j + 1));
        cols.push(out.pointwise_nu.iter().map(|r| r[j]).collect());
    }
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let col_refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    io::write_columns(art.create("dgsm_pointwise.csv")?, &name_refs, &col_refs)?;
    art.sobol(cfg, &model, &space)
}

pub fn subsurface_from_section(s: &SubsurfaceSection) -> SubsurfaceConfig {
    SubsurfaceConfig {
        nx: s.nx,
        ny: s.ny,
        n_par: s.n_par,
        sigma_a: s.sigma_a,
        ell_x: s.ell_x,
        ell_y: s.ell_y,
        mollifier: s.mollifier,
        mean_log_kappa: s.mean_log_kappa,
        ..subsurface_config()
    }
}

pub fn biotransport_from_section(b: &BiotransportSection) -> BiotransportConfig {
    BiotransportConfig {
        nr: b.nr,
        nphi: b.nphi,
        kle_nr: b.kle_nr,
        kle_nphi: b.kle_nphi,
        n_par: b.n_par,
        sigma_a2: b.sigma_a2,
        kappa_nominal: b.kappa,
        eta: b.eta,
        q: b.q,
        ..biotransport_config(b.ell, b.r_out)
    }
}

fn elliptic_common(cfg: &ExperimentConfig, art: &mut Artifacts, model: &EllipticModel) -> Result<(ParameterSpace, DgsmReport)> {
    let input = &model.input;
    art.spectrum("input_spectrum.csv", &input.spectrum, input.trace)?;
    let space = ParameterSpace::iid(Marginal::standard_normal(), input.n_par())?;
    let opts = Algorithm1Options {
        n_mc: cfg.experiment.n_mc,
        n_qoi: cfg.n_qoi(),
        seed: cfg.seed(),
        threshold: cfg.threshold(),
        fresh_gradient_samples: false,
    };
    info!("finite-rank DGSMs with N_MC = {}, N_qoi = {}", opts.n_mc, opts.n_qoi);
    let out = run_algorithm_1(model, &space, &opts)?;
    art.dgsm(&out.report)?;
    art.spectrum(KLE_SPECTRUM, &out.kle.spectrum, out.kle.trace)?;
    art.kle("qoi_kle", &out.kle)?;
    let p0 = model.pressure(&vec![0.0; input.n_par()])?;
    io::write_field_csv(art.create("pressure_nominal.csv")?, &model.problem.mesh.centers, &p0)?;
    Ok((space, out.report))
}

fn run_subsurface(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let s = cfg.subsurface.clone().unwrap_or_default();
    let model = subsurface_from_section(&s).build()?;
    let (space, _) = elliptic_common(cfg, art, &model)?;
    art.sobol(cfg, &model, &space)
}

fn run_biotransport(cfg: &ExperimentConfig, art: &mut Artifacts) -> Result<()> {
    let b = cfg.biotransport.clone().unwrap_or_default();
    let bc = biotransport_from_section(&b);
    let model = bc.build()?;
    let (space, report) = elliptic_common(cfg, art, &model)?;
    if b.rom {
        let probes = bc.probe_cells(&model.problem.mesh)?;
        let eval = |th: &[f64]| -> dgsm_core::Result<Vec<f64>> {
            let p = model.pressure(th)?;
            Ok(probes.iter().map(|&c| p[c]).collect())
        };
        let ranking = report.ranking();
        let dgsm_sets: Vec<Vec<usize>> = b.tiers.iter().map(|&k| ranking[..k].to_vec()).collect();
        let kl_sets: Vec<Vec<usize>> = b.tiers.iter().map(|&k| (0..k).collect()).collect();
        info!("reduced-model densities with {} samples per model", b.pdf_samples);
        let cmp = rom_compare(&eval, &space, &dgsm_sets, &kl_sets, b.pdf_samples, derive_seed(cfg.seed(), 0x0b0d))?;
        io::write_rom_csv(art.create("rom_comparison.csv")?, &cmp.rows)?;

        let mut stats = Vec::new();
        for (p, s) in cmp.full.iter().enumerate() {
            let n = s.len() as f64;
            let mean = s.iter().sum::<f64>() / n;
            let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            let x = model.problem.mesh.centers[probes[p]];
            stats.push(vec![
                (p + 1).to_string(),
                io::fmt_f64(x[0]),
                io::fmt_f64(x[1]),
                io::fmt_f64(mean),
                io::fmt_f64(sd),
                io::fmt_f64(sd / mean),
            ]);
        }
        io::write_table(art.create("probe_stats.csv")?, &["probe", "x", "y", "mean", "std", "rsd"], &stats)?;
        let names: Vec<String> = (1..=cmp.full.len()).map(|p| format!("P{p}")).collect();
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let col_refs: Vec<&[f64]> = cmp.full.iter().map(Vec::as_slice).collect();
        io::write_columns(art.create("probe_samples.csv")?, &name_refs, &col_refs)?;

        for (p, full) in cmp.full.iter().enumerate() {
            let mut sets: Vec<&[f64]> = vec![full.as_slice()];
            sets.extend(cmp.reduced.iter().map(|r| r.2[p].as_slice()));
            let x = common_pdf_grid(&sets, dgsm_core::reduction::PDF_GRID_POINTS)?;
            let mut names = vec!["x".to_owned(), "full".to_owned()];
            let mut cols = vec![x.clone(), kde_pdf(full, &x)?];
            for (tier, method, samples) in &cmp.reduced {
                names.push(format!("{}_{tier}", method.as_str()));
                cols.push(kde_pdf(&samples[p], &x)?);
            }
            let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
            let col_refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
            io::write_columns(art.create(&format!("pdf_probe{}.csv", p + 1))?, &name_refs, &col_refs)?;
        }
    }
    art.sobol(cfg, &model, &space)
}
