//! `dgsm`: run functional DGSM experiments from TOML configuration files.

mod config;
mod manifest;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "dgsm", version, about = "Derivative-based global sensitivity experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its result tables.
    Run(RunArgs),
    /// Check a configuration file and print the effective settings.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long)]
    jobs: Option<usize>,
    /// Output directory (overrides the config and DGSM_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed_override: Option<u64>,
    /// Validate the configuration and exit without running.
    #[arg(long)]
    validate_only: bool,
    /// Root for output directories when neither --out nor output_dir is given.
    #[arg(long, env = "DGSM_OUT_DIR", hide_env_values = true)]
    out_root: Option<PathBuf>,
}

enum Failure {
    Config(anyhow::Error),
    Run(anyhow::Error),
}

impl Failure {
    fn record(&self) -> serde_json::Value {
        let (stage, err) = match self {
            Failure::Config(e) => ("config", e),
            Failure::Run(e) => ("run", e),
        };
        serde_json::json!({
            "status": "error",
            "stage": stage,
            "message": format!("{err:#}"),
        })
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Run(_) => 1,
        }
    }
}

fn load(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed_override {
        cfg.experiment.seed = Some(s);
    }
    cfg.resolve()
}

fn output_dir(args: &RunArgs, cfg: &ExperimentConfig) -> PathBuf {
    if let Some(o) = &args.out {
        return o.clone();
    }
    if let Some(o) = &cfg.experiment.output_dir {
        return o.clone();
    }
    let stem = args
        .config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".into());
    args.out_root.clone().unwrap_or_else(|| PathBuf::from("dgsm_out")).join(stem)
}

fn print_effective(cfg: &ExperimentConfig) -> Result<()> {
    println!("# configuration is valid; effective settings:");
    print!("{}", cfg.to_toml()?);
    Ok(())
}

fn execute(args: &RunArgs) -> Result<(), (Failure, Option<PathBuf>)> {
    let cfg = load(&args.config, args.seed_override).map_err(|e| (Failure::Config(e), None))?;
    if args.validate_only {
        return print_effective(&cfg).map_err(|e| (Failure::Config(e), None));
    }
    let out = output_dir(args, &cfg);
    let start = Instant::now();
    let run = || -> Result<()> {
        if let Some(j) = args.jobs {
            rayon::ThreadPoolBuilder::new()
                .num_threads(j.max(1))
                .build_global()
                .context("configuring the worker pool")?;
        }
        let files = run::run_experiment(&cfg, &out)?;
        let m = manifest::Manifest::new(&args.config, &cfg, &out, &files, start.elapsed().as_secs_f64())?;
        m.write(&out.join(manifest::MANIFEST))?;
        log::info!("wrote {} files to {}", files.len() + 1, out.display());
        Ok(())
    };
    run().map_err(|e| (Failure::Run(e), Some(out.clone())))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => execute(args),
        Command::Validate { config } => load(config, None)
            .and_then(|c| print_effective(&c))
            .map_err(|e| (Failure::Config(e), None)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((failure, out)) => {
            let record = failure.record();
            eprintln!("{record}");
            if let Some(dir) = out {
                if std::fs::create_dir_all(&dir).is_ok() {
                    let _ = std::fs::write(dir.join("error.json"), format!("{record:#}\n"));
                }
            }
            ExitCode::from(failure.code())
        }
    }
}
