//! Plain-text artifacts: report tables, KL expansions and field snapshots.
//!
//! Floats are written as `{:.16e}` (17 significant digits), so every table
//! parses back to bit-identical values.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dgsm::DgsmReport;
use crate::error::{Error, Result};
use crate::grid::SpatialGrid;
use crate::kle::{KLExpansion, ProcessEnsemble};
use crate::reduction::RomRow;
use crate::sobol::SobolReport;

pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("{what}: cannot parse {s:?} as a number")))
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("{what}: cannot parse {s:?} as an integer")))
}

fn parse_bool(s: &str, what: &str) -> Result<bool> {
    match s.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::Parse(format!("{what}: expected true/false, got {other:?}"))),
    }
}

/// Write a header and rows of already-formatted cells.
pub fn write_table<W: Write>(w: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(header).map_err(csv_err)?;
    for r in rows {
        if r.len() != header.len() {
            return Err(Error::DimensionMismatch {
                expected: header.len(),
                got: r.len(),
                context: "table row",
            });
        }
        out.write_record(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Read a table, checking the header; returns the data rows.
pub fn read_table<R: Read>(r: R, header: &[&str]) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::Reader::from_reader(r);
    let found: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if found != header {
        return Err(Error::Parse(format!("unexpected header {found:?}, expected {header:?}")));
    }
    rdr.records()
        .map(|rec| rec.map(|r| r.iter().map(str::to_owned).collect()).map_err(csv_err))
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

/// One row of the DGSM table (`j` is 1-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgsmRow {
    pub j: usize,
    pub n_j: f64,
    pub n_j_normalized: f64,
    pub bound: f64,
    pub stderr: f64,
    pub important: bool,
}

pub const DGSM_HEADER: [&str; 6] = ["j", "N_j", "N_j_normalized", "bound_Bj", "stderr", "important"];

pub fn dgsm_rows(report: &DgsmReport) -> Vec<DgsmRow> {
    (0..report.functional_dgsm.len())
        .map(|j| DgsmRow {
            j: j + 1,
            n_j: report.functional_dgsm[j],
            n_j_normalized: report.normalized[j],
            bound: report.bounds[j],
            stderr: report.stderr[j],
            important: report.important[j],
        })
        .collect()
}

pub fn write_dgsm_csv<W: Write>(w: W, report: &DgsmReport) -> Result<()> {
    let rows: Vec<Vec<String>> = dgsm_rows(report)
        .iter()
        .map(|r| {
            vec![
                r.j.to_string(),
                fmt_f64(r.n_j),
                fmt_f64(r.n_j_normalized),
                fmt_f64(r.bound),
                fmt_f64(r.stderr),
                r.important.to_string(),
            ]
        })
        .collect();
    write_table(w, &DGSM_HEADER, &rows)
}

pub fn read_dgsm_csv<R: Read>(r: R) -> Result<Vec<DgsmRow>> {
    read_table(r, &DGSM_HEADER)?
        .iter()
        .map(|c| {
            Ok(DgsmRow {
                j: parse_usize(&c[0], "j")?,
                n_j: parse_f64(&c[1], "N_j")?,
                n_j_normalized: parse_f64(&c[2], "N_j_normalized")?,
                bound: parse_f64(&c[3], "bound_Bj")?,
                stderr: parse_f64(&c[4], "stderr")?,
                important: parse_bool(&c[5], "important")?,
            })
        })
        .collect()
}

/// Run metadata stored next to the DGSM table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgsmMeta {
    pub n_mc: usize,
    pub n_qoi: usize,
    pub threshold: f64,
    pub seed: u64,
    pub trace: f64,
    pub alphas: Vec<f64>,
}

impl From<&DgsmReport> for DgsmMeta {
    fn from(r: &DgsmReport) -> Self {
        Self {
            n_mc: r.n_mc,
            n_qoi: r.n_qoi,
            threshold: r.threshold,
            seed: r.seed,
            trace: r.trace,
            alphas: r.alphas.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolRow {
    pub j: usize,
    pub s_func: f64,
    pub stot_func: f64,
    pub stderr: f64,
}

pub const SOBOL_HEADER: [&str; 4] = ["j", "S_func", "Stot_func", "stderr"];

pub fn sobol_rows(report: &SobolReport) -> Vec<SobolRow> {
    report
        .inputs
        .iter()
        .enumerate()
        .map(|(r, &j)| SobolRow {
            j: j + 1,
            s_func: report.functional_first[r],
            stot_func: report.functional_total[r],
            stderr: report.functional_total_stderr[r],
        })
        .collect()
}

pub fn write_sobol_csv<W: Write>(w: W, report: &SobolReport) -> Result<()> {
    let rows: Vec<Vec<String>> = sobol_rows(report)
        .iter()
        .map(|r| vec![r.j.to_string(), fmt_f64(r.s_func), fmt_f64(r.stot_func), fmt_f64(r.stderr)])
        .collect();
    write_table(w, &SOBOL_HEADER, &rows)
}

pub fn read_sobol_csv<R: Read>(r: R) -> Result<Vec<SobolRow>> {
    read_table(r, &SOBOL_HEADER)?
        .iter()
        .map(|c| {
            Ok(SobolRow {
                j: parse_usize(&c[0], "j")?,
                s_func: parse_f64(&c[1], "S_func")?,
                stot_func: parse_f64(&c[2], "Stot_func")?,
                stderr: parse_f64(&c[3], "stderr")?,
            })
        })
        .collect()
}

pub const SPECTRUM_HEADER: [&str; 3] = ["k", "eigenvalue", "cumulative_ratio"];

/// `(k, λ_k, r_k)` for a descending spectrum, `r_k = Σ_{i≤k} λ_i / trace`.
pub fn write_spectrum_csv<W: Write>(w: W, spectrum: &[f64], trace: f64) -> Result<()> {
    let mut acc = 0.0;
    let rows: Vec<Vec<String>> = spectrum
        .iter()
        .enumerate()
        .map(|(k, &l)| {
            acc += l;
            let r = if trace > 0.0 { acc / trace } else { 0.0 };
            vec![(k + 1).to_string(), fmt_f64(l), fmt_f64(r)]
        })
        .collect();
    write_table(w, &SPECTRUM_HEADER, &rows)
}

pub fn read_spectrum_csv<R: Read>(r: R) -> Result<Vec<(usize, f64, f64)>> {
    read_table(r, &SPECTRUM_HEADER)?
        .iter()
        .map(|c| Ok((parse_usize(&c[0], "k")?, parse_f64(&c[1], "eigenvalue")?, parse_f64(&c[2], "ratio")?)))
        .collect()
}

pub const ROM_HEADER: [&str; 4] = ["probe", "tier", "method", "L1_distance"];

pub fn write_rom_csv<W: Write>(w: W, rows: &[RomRow]) -> Result<()> {
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                (r.probe + 1).to_string(),
                r.tier.to_string(),
                r.method.as_str().to_owned(),
                fmt_f64(r.l1_distance),
            ]
        })
        .collect();
    write_table(w, &ROM_HEADER, &cells)
}

/// Columns `x, y, value` for a field on arbitrary points.
pub fn write_field_csv<W: Write>(w: W, points: &[[f64; 2]], values: &[f64]) -> Result<()> {
    if points.len() != values.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            got: values.len(),
            context: "field values",
        });
    }
    let rows: Vec<Vec<String>> = points
        .iter()
        .zip(values)
        .map(|(p, v)| vec![fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(*v)])
        .collect();
    write_table(w, &["x", "y", "value"], &rows)
}

pub fn read_field_csv<R: Read>(r: R) -> Result<(Vec<[f64; 2]>, Vec<f64>)> {
    let rows = read_table(r, &["x", "y", "value"])?;
    let mut pts = Vec::with_capacity(rows.len());
    let mut vals = Vec::with_capacity(rows.len());
    for c in &rows {
        pts.push([parse_f64(&c[0], "x")?, parse_f64(&c[1], "y")?]);
        vals.push(parse_f64(&c[2], "value")?);
    }
    Ok((pts, vals))
}

/// First column plus named numeric columns, e.g. a trajectory or PDF curves.
pub fn write_columns<W: Write>(w: W, names: &[&str], columns: &[&[f64]]) -> Result<()> {
    if names.len() != columns.len() || columns.is_empty() {
        return Err(Error::invalid("one name per column required"));
    }
    let n = columns[0].len();
    if columns.iter().any(|c| c.len() != n) {
        return Err(Error::invalid("columns must have equal length"));
    }
    let rows: Vec<Vec<String>> = (0..n).map(|i| columns.iter().map(|c| fmt_f64(c[i])).collect()).collect();
    write_table(w, names, &rows)
}

pub fn read_columns<R: Read>(r: R, names: &[&str]) -> Result<Vec<Vec<f64>>> {
    let rows = read_table(r, names)?;
    (0..names.len())
        .map(|k| rows.iter().map(|c| parse_f64(&c[k], names[k])).collect())
        .collect()
}

/// Small manifest describing a persisted KL expansion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KleManifest {
    pub grid_dim: usize,
    pub n_points: usize,
    pub n_modes: usize,
    pub trace: f64,
    pub files: KleFiles,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KleFiles {
    /// Grid points, weights and mean: `x, y, weight, mean`.
    pub mean: String,
    /// Retained eigenvalues.
    pub eigenvalues: String,
    /// Full solver spectrum.
    pub spectrum: String,
    /// One row per grid point, one column per mode.
    pub modes: String,
}

pub const KLE_MANIFEST: &str = "kle_manifest.json";

/// Persist `kle` under `dir` (created if needed) with file names prefixed by `stem`.
pub fn save_kle(dir: &Path, stem: &str, kle: &KLExpansion) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let files = KleFiles {
        mean: format!("{stem}_mean.csv"),
        eigenvalues: format!("{stem}_eigenvalues.csv"),
        spectrum: format!("{stem}_spectrum.csv"),
        modes: format!("{stem}_modes.csv"),
    };
    let g = &kle.grid;
    let xs: Vec<f64> = g.points().iter().map(|p| p[0]).collect();
    let ys: Vec<f64> = g.points().iter().map(|p| p[1]).collect();
    write_columns(
        create(&dir.join(&files.mean))?,
        &["x", "y", "weight", "mean"],
        &[&xs, &ys, g.weights(), &kle.mean],
    )?;
    write_columns(create(&dir.join(&files.eigenvalues))?, &["eigenvalue"], &[&kle.eigenvalues])?;
    write_columns(create(&dir.join(&files.spectrum))?, &["eigenvalue"], &[&kle.spectrum])?;
    let names: Vec<String> = (1..=kle.n_modes()).map(|i| format!("phi_{i}")).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let cols: Vec<&[f64]> = kle.modes.iter().map(Vec::as_slice).collect();
    if cols.is_empty() {
        write_table(create(&dir.join(&files.modes))?, &[], &[])?;
    } else {
        write_columns(create(&dir.join(&files.modes))?, &name_refs, &cols)?;
    }
    let manifest = KleManifest {
        grid_dim: g.dim(),
        n_points: g.len(),
        n_modes: kle.n_modes(),
        trace: kle.trace,
        files,
    };
    let path = dir.join(format!("{stem}_{KLE_MANIFEST}"));
    let mut w = create(&path)?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(path)
}

/// Load a KL expansion from its manifest path.
pub fn load_kle(manifest_path: &Path) -> Result<KLExpansion> {
    let manifest: KleManifest = serde_json::from_reader(open(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mean_cols = read_columns(open(&dir.join(&manifest.files.mean))?, &["x", "y", "weight", "mean"])?;
    let points: Vec<[f64; 2]> = mean_cols[0].iter().zip(&mean_cols[1]).map(|(x, y)| [*x, *y]).collect();
    if points.len() != manifest.n_points {
        return Err(Error::DimensionMismatch {
            expected: manifest.n_points,
            got: points.len(),
            context: "persisted KLE grid",
        });
    }
    let grid = SpatialGrid::from_parts(manifest.grid_dim, points, mean_cols[2].clone())?;
    let eigenvalues = read_columns(open(&dir.join(&manifest.files.eigenvalues))?, &["eigenvalue"])?.remove(0);
    let spectrum = read_columns(open(&dir.join(&manifest.files.spectrum))?, &["eigenvalue"])?.remove(0);
    let names: Vec<String> = (1..=manifest.n_modes).map(|i| format!("phi_{i}")).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let modes = if manifest.n_modes == 0 {
        Vec::new()
    } else {
        read_columns(open(&dir.join(&manifest.files.modes))?, &name_refs)?
    };
    if eigenvalues.len() != manifest.n_modes {
        return Err(Error::DimensionMismatch {
            expected: manifest.n_modes,
            got: eigenvalues.len(),
            context: "persisted eigenvalues",
        });
    }
    Ok(KLExpansion {
        grid,
        mean: mean_cols[3].clone(),
        eigenvalues,
        modes,
        trace: manifest.trace,
        spectrum,
    })
}

/// Ensemble rows as a matrix: one row per sample, one column per grid point.
pub fn write_ensemble_csv<W: Write>(w: W, ens: &ProcessEnsemble) -> Result<()> {
    let n = ens.grid().len();
    let header: Vec<String> = (1..=n).map(|k| format!("s_{k}")).collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows: Vec<Vec<String>> = ens.rows().iter().map(|r| r.iter().map(|v| fmt_f64(*v)).collect()).collect();
    write_table(w, &header_refs, &rows)
}

pub fn read_ensemble_csv<R: Read>(r: R, grid: SpatialGrid) -> Result<ProcessEnsemble> {
    let n = grid.len();
    let header: Vec<String> = (1..=n).map(|k| format!("s_{k}")).collect();
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = read_table(r, &header_refs)?
        .iter()
        .map(|c| c.iter().map(|v| parse_f64(v, "ensemble value")).collect())
        .collect::<Result<Vec<Vec<f64>>>>()?;
    ProcessEnsemble::new(grid, rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_interval_grid;

    #[test]
    fn float_format_round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE, 0.0, -0.0] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits(), "{s}");
        }
    }

    #[test]
    fn dgsm_table_round_trip() {
        let report = DgsmReport {
            n_mc: 10,
            n_qoi: 2,
            threshold: 0.05,
            seed: 3,
            alphas: vec![0.4, 0.4],
            nu_modes: vec![],
            functional_dgsm: vec![0.5, 1.0 / 12.0],
            normalized: vec![0.5 / (7.0 / 12.0), 1.0 / 7.0],
            bounds: vec![0.7, 0.1 / 3.0],
            stderr: vec![0.0, 1e-17],
            important: vec![true, false],
            trace: 7.0 / 36.0,
        };
        let mut buf = Vec::new();
        write_dgsm_csv(&mut buf, &report).unwrap();
        assert_eq!(read_dgsm_csv(buf.as_slice()).unwrap(), dgsm_rows(&report));
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("j,N_j,N_j_normalized,bound_Bj,stderr,important\n"));
    }

    #[test]
    fn wrong_header_is_rejected() {
        assert!(read_dgsm_csv("a,b\n1,2\n".as_bytes()).is_err());
        assert!(read_dgsm_csv("j,N_j,N_j_normalized,bound_Bj,stderr,important\n1,x,1,1,1,true\n".as_bytes()).is_err());
    }

    #[test]
    fn kle_round_trip() {
        let grid = make_interval_grid(0.0, 1.0, 7).unwrap();
        let kle = KLExpansion {
            grid: grid.clone(),
            mean: (0..7).map(|k| (k as f64).sin()).collect(),
            eigenvalues: vec![1.0 / 3.0, 0.1],
            modes: vec![
                (0..7).map(|k| (k as f64 / 7.0).sqrt()).collect(),
                (0..7).map(|k| -(k as f64) / 11.0).collect(),
            ],
            trace: 0.4333333333333333,
            spectrum: vec![1.0 / 3.0, 0.1, 1e-18],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = save_kle(dir.path(), "qoi", &kle).unwrap();
        let back = load_kle(&path).unwrap();
        assert_eq!(back.mean, kle.mean);
        assert_eq!(back.eigenvalues, kle.eigenvalues);
        assert_eq!(back.modes, kle.modes);
        assert_eq!(back.spectrum, kle.spectrum);
        assert_eq!(back.trace, kle.trace);
        assert_eq!(back.grid.points(), grid.points());
        assert_eq!(back.grid.weights(), grid.weights());
    }

    #[test]
    fn field_and_ensemble_round_trip() {
        let grid = make_interval_grid(0.0, 2.0, 4).unwrap();
        let vals = vec![1.0, -2.0 / 3.0, 1e-9, 4.0];
        let mut buf = Vec::new();
        write_field_csv(&mut buf, grid.points(), &vals).unwrap();
        let (p, v) = read_field_csv(buf.as_slice()).unwrap();
        assert_eq!(p, grid.points());
        assert_eq!(v, vals);
        let ens = ProcessEnsemble::new(grid.clone(), vec![vals.clone(), vec![0.1; 4]]).unwrap();
        let mut buf = Vec::new();
        write_ensemble_csv(&mut buf, &ens).unwrap();
        let back = read_ensemble_csv(buf.as_slice(), grid).unwrap();
        assert_eq!(back.rows(), ens.rows());
    }

    #[test]
    fn spectrum_ratios() {
        let mut buf = Vec::new();
        write_spectrum_csv(&mut buf, &[3.0, 1.0], 4.0).unwrap();
        let rows = read_spectrum_csv(buf.as_slice()).unwrap();
        assert_eq!(rows, vec![(1, 3.0, 0.75), (2, 1.0, 1.0)]);
    }
}
