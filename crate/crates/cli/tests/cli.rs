use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dgsm_core::io::read_dgsm_csv;

fn dgsm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgsm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("failed to launch dgsm")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn run_ok(config: &str, out: &Path, extra: &[&str]) {
    let mut args = vec!["run", "--config", config, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = dgsm(&args);
    assert!(o.status.success(), "dgsm failed: {}", String::from_utf8_lossy(&o.stderr));
}

/// Every CSV in `dir`, by file name.
fn csv_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

const TOY: &str = r#"
[experiment]
kind = "toy"
n_mc = 20
seed = 4
"#;

const CHOLERA: &str = r#"
[experiment]
kind = "cholera"
n_mc = 12
n_qoi = 4
seed = 9
sobol_samples = 16

[cholera]
n_times = 151
"#;

const SUBSURFACE: &str = r#"
[experiment]
kind = "subsurface"
n_mc = 16
n_qoi = 4
seed = 3

[subsurface]
nx = 24
ny = 12
n_par = 20
"#;

const BIOTRANSPORT: &str = r#"
[experiment]
kind = "biotransport"
n_mc = 12
n_qoi = 4
threshold = 0.05
seed = 8

[biotransport]
nr = 12
nphi = 24
kle_nr = 8
kle_nphi = 16
n_par = 20
rom = true
pdf_samples = 120
tiers = [3, 6]
"#;

#[test]
fn toy_run_reproduces_hand_derived_dgsms() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let out = dir.path().join("out");
    run_ok(&cfg, &out, &[]);
    let rows = read_dgsm_csv(fs::File::open(out.join("dgsm_report.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!((rows[0].n_j - 0.5).abs() < 1e-10);
    assert!((rows[1].n_j - 1.0 / 12.0).abs() < 1e-10);
    // Tr is a sample estimate here, but it is shared: 𝔅₁/𝔅₂ = 𝔑₁/𝔑₂ = 6.
    assert!((rows[0].bound / rows[1].bound - 6.0).abs() < 1e-10);
    assert!(rows[0].important && rows[1].important);
}

#[test]
fn outputs_are_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("toy", TOY),
        ("cholera", CHOLERA),
        ("subsurface", SUBSURFACE),
        ("biotransport", BIOTRANSPORT),
    ] {
        let cfg = write_config(dir.path(), &format!("{name}.toml"), text);
        let runs: Vec<BTreeMap<String, Vec<u8>>> = [["--jobs", "1"], ["--jobs", "3"], ["--jobs", "1"]]
            .iter()
            .enumerate()
            .map(|(k, jobs)| {
                let out = dir.path().join(format!("{name}_{k}"));
                run_ok(&cfg, &out, jobs);
                csv_files(&out)
            })
            .collect();
        assert!(runs[0].contains_key("dgsm_report.csv"), "{name}: {:?}", runs[0].keys());
        for r in &runs[1..] {
            assert_eq!(runs[0].keys().collect::<Vec<_>>(), r.keys().collect::<Vec<_>>(), "{name}");
            for (file, bytes) in &runs[0] {
                assert!(bytes == &r[file], "{name}: {file} differs between runs");
            }
        }
    }
}

#[test]
fn manifest_hashes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let out = dir.path().join("out");
    run_ok(&cfg, &out, &["--seed-override", "77"]);
    let m: serde_json::Value = serde_json::from_slice(&fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 77);
    assert_eq!(m["config"]["experiment"]["seed"], 77);
    assert!(m["wall_time_seconds"].as_f64().unwrap() >= 0.0);
    let outputs = m["outputs"].as_array().unwrap();
    assert!(!outputs.is_empty());
    for o in outputs {
        let bytes = fs::read(out.join(o["file"].as_str().unwrap())).unwrap();
        assert_eq!(o["sha256"].as_str().unwrap(), git_sha256(&bytes));
    }
}

/// `git hash-object --object-format=sha256`, computed here rather than
/// through the binary's own helper.
fn git_sha256(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    format!("{:x}", h.finalize())
}

#[test]
fn seed_override_changes_monte_carlo_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cholera.toml", CHOLERA);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    run_ok(&cfg, &a, &[]);
    run_ok(&cfg, &b, &["--seed-override", "10"]);
    assert_ne!(csv_files(&a)["dgsm_report.csv"], csv_files(&b)["dgsm_report.csv"]);
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("unknown_key.toml", "[experiment]\nkind = \"toy\"\nn_mc = 5\nsamples = 3\n"),
        ("bad_threshold.toml", "[experiment]\nkind = \"toy\"\nn_mc = 5\nthreshold = 0.0\n"),
        ("zero_mc.toml", "[experiment]\nkind = \"cholera\"\nn_mc = 0\n"),
        ("bad_kind.toml", "[experiment]\nkind = \"weather\"\nn_mc = 5\n"),
        ("not_toml.toml", "this is not toml ["),
    ];
    for (name, text) in cases {
        let cfg = write_config(dir.path(), name, text);
        let out = dir.path().join(name.replace(".toml", ""));
        for args in [
            vec!["validate", "--config", cfg.as_str()],
            vec!["run", "--config", cfg.as_str(), "--out", out.to_str().unwrap()],
        ] {
            let o = dgsm(&args);
            assert_eq!(o.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&o.stderr));
            let stderr = String::from_utf8_lossy(&o.stderr);
            let line = stderr.lines().find(|l| l.starts_with('{')).expect("JSON error record");
            let rec: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(rec["status"], "error");
            assert_eq!(rec["stage"], "config");
        }
        assert!(!out.join("dgsm_report.csv").exists());
    }
    let missing = dgsm(&["validate", "--config", dir.path().join("nope.toml").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn validate_only_echoes_effective_settings() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bio.toml", BIOTRANSPORT);
    let out = dir.path().join("out");
    let o = dgsm(&["run", "--config", &cfg, "--validate-only", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("kle_nr = 8"));
    assert!(text.contains("kappa = 0.5"), "{text}");
    assert!(!out.exists());
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(&root).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|e| e == "toml") {
            let o = dgsm(&["validate", "--config", p.to_str().unwrap()]);
            assert!(o.status.success(), "{}: {}", p.display(), String::from_utf8_lossy(&o.stderr));
            n += 1;
        }
    }
    assert_eq!(n, 4);
}

#[test]
fn run_failures_write_an_error_record() {
    // valid config, but an output path that cannot be a directory
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toy.toml", TOY);
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = dgsm(&["run", "--config", &cfg, "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("\"stage\":\"run\""));
}
