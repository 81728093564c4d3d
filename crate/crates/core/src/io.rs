//! CSV and JSON artifacts.
//!
//! Floating-point values are written with 17 significant digits so that
//! every file round-trips bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::experiments::sweep::GridCell;
use crate::record::RunRecord;
use crate::reduced::{ReducedSample, SymmetryResidual};

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "NaN".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

pub fn parse_f64(s: &str) -> Result<f64, Error> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Config(format!("bad number '{s}': {e}")))
}

fn writer(path: &Path) -> Result<csv::Writer<fs::File>, Error> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    Ok(csv::Writer::from_path(path)?)
}

/// Writes a run record: one row per logged step.
pub fn write_record(path: &Path, record: &RunRecord) -> Result<(), Error> {
    let mut w = writer(path)?;
    w.write_record(record.header())?;
    for r in &record.rows {
        let mut f: Vec<String> = vec![
            fmt_f64(r.t),
            r.block.to_string(),
            r.phase.to_string(),
            r.task.clone(),
            fmt_f64(r.loss_task),
            fmt_f64(r.loss_batch),
            fmt_f64(r.loss_reg),
        ];
        f.extend(r.gates.iter().map(|&v| fmt_f64(v)));
        f.extend(r.alignment.iter().map(|&v| fmt_f64(v)));
        f.push(fmt_f64(r.total_alignment));
        f.extend(r.norms.iter().map(|&v| fmt_f64(v)));
        match r.spec {
            Some(s) => f.extend(s.iter().map(|&v| fmt_f64(v))),
            None => f.extend(std::iter::repeat(String::new()).take(3)),
        }
        w.write_record(&f)?;
    }
    w.flush()?;
    Ok(())
}

/// Column-wise view of a CSV file with a header row.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }

    pub fn f64_column(&self, name: &str) -> Result<Vec<f64>, Error> {
        let i = self
            .column(name)
            .ok_or_else(|| Error::Config(format!("missing column '{name}'")))?;
        self.rows
            .iter()
            .map(|r| if r[i].is_empty() { Ok(f64::NAN) } else { parse_f64(&r[i]) })
            .collect()
    }
}

pub fn read_table(path: &Path) -> Result<Table, Error> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(String::from).collect());
    }
    Ok(Table { header, rows })
}

/// `axis1, axis2, seed, total_alignment` (plus an abort flag).
pub fn write_grid(path: &Path, cells: &[GridCell]) -> Result<(), Error> {
    let mut w = writer(path)?;
    w.write_record(["axis1", "axis2", "seed", "total_alignment", "aborted"])?;
    for c in cells {
        w.write_record([
            fmt_f64(c.axis1),
            fmt_f64(c.axis2),
            c.seed.to_string(),
            fmt_f64(c.total_alignment),
            c.aborted.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid(path: &Path) -> Result<Vec<GridCell>, Error> {
    let t = read_table(path)?;
    let a1 = t.f64_column("axis1")?;
    let a2 = t.f64_column("axis2")?;
    let ta = t.f64_column("total_alignment")?;
    let si = t
        .column("seed")
        .ok_or_else(|| Error::Config("missing column 'seed'".into()))?;
    let ab = t.column("aborted");
    t.rows
        .iter()
        .enumerate()
        .map(|(k, r)| {
            Ok(GridCell {
                axis1: a1[k],
                axis2: a2[k],
                seed: r[si]
                    .parse()
                    .map_err(|e| Error::Config(format!("bad seed '{}': {e}", r[si])))?,
                total_alignment: ta[k],
                aborted: ab.map(|i| r[i] == "true").unwrap_or(false),
            })
        })
        .collect()
}

pub const TRAJECTORY_HEADER: [&str; 13] = [
    "t", "c1", "c2", "w11", "w12", "w21", "w22", "wbar", "cbar", "wbarbar", "eps1", "eps2", "ntk_rate",
];

/// Reduced-model trajectory. `w{p}{m}` is student `p`'s component on teacher `m`.
pub fn write_trajectory(path: &Path, samples: &[ReducedSample]) -> Result<(), Error> {
    let mut w = writer(path)?;
    w.write_record(TRAJECTORY_HEADER)?;
    for s in samples {
        let st = &s.state;
        let c = st.coords();
        let e = st.error();
        let vals = [
            s.t, st.c[0], st.c[1], st.w[0][0], st.w[0][1], st.w[1][0], st.w[1][1], c.wbar, c.cbar, c.wbarbar, e[0],
            e[1], s.ntk_rate,
        ];
        w.write_record(vals.iter().map(|&v| fmt_f64(v)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_symmetry(path: &Path, t: &[f64], res: &[SymmetryResidual]) -> Result<(), Error> {
    let mut w = writer(path)?;
    w.write_record(["t", "eps_sum", "wbar_gap"])?;
    for (t, r) in t.iter().zip(res) {
        w.write_record([fmt_f64(*t), fmt_f64(r.eps_sum), fmt_f64(r.wbar_gap)])?;
    }
    w.flush()?;
    Ok(())
}

/// A matrix as row-major CSV without header.
pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<(), Error> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for row in m.rows() {
        w.write_record(row.iter().map(|&v| fmt_f64(v)))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<Array2<f64>, Error> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut data = Vec::new();
    let mut ncols = None;
    let mut nrows = 0;
    for rec in r.records() {
        let rec = rec?;
        if *ncols.get_or_insert(rec.len()) != rec.len() {
            return Err(Error::Config(format!("ragged matrix in {}", path.display())));
        }
        for v in rec.iter() {
            data.push(parse_f64(v)?);
        }
        nrows += 1;
    }
    Array2::from_shape_vec((nrows, ncols.unwrap_or(0)), data).map_err(|e| Error::Config(e.to_string()))
}

/// Serialises any value as pretty JSON.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, Error> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Generic CSV with a header and float rows.
pub fn write_rows(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<(), Error> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(|&v| fmt_f64(v)))?;
    }
    w.flush()?;
    Ok(())
}

/// Run manifest: resolved configuration and provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub preset: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub version: String,
    pub wall_time_seconds: f64,
    pub files: Vec<String>,
}

/// One file a figure reads: a name pattern with at most one `*` and the
/// header columns it must carry (empty for headerless matrices).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FigureInput {
    pub pattern: &'static str,
    pub columns: &'static [&'static str],
}

const RUN_CORE: &[&str] = &["t", "block", "phase", "task", "loss_task", "total_alignment"];

/// Figure identifiers and the artifacts each one consumes.
pub const FIGURE_INPUTS: &[(&str, &[FigureInput])] = &[
    (
        "fig2",
        &[
            FigureInput {
                pattern: "run_*.csv",
                columns: &["t", "block", "loss_task", "c1", "c2", "align_1_1", "align_1_2", "align_2_1", "align_2_2", "total_alignment", "dW1", "dW2", "dc"],
            },
            FigureInput { pattern: "summary.json", columns: &[] },
        ],
    ),
    ("fig3e", &[FigureInput { pattern: "exact_tau_c_*.csv", columns: &["t", "cbar", "wbar", "wbar_exact", "loss"] }]),
    ("fig4", &[FigureInput { pattern: "grid.csv", columns: &["axis1", "axis2", "seed", "total_alignment"] }]),
    (
        "fig5",
        &[
            FigureInput { pattern: "run_*.csv", columns: RUN_CORE },
            FigureInput { pattern: "w2_*_sorted.csv", columns: &[] },
            FigureInput { pattern: "w2_*_unsorted.csv", columns: &[] },
        ],
    ),
    ("fig6", &[FigureInput { pattern: "run_*.csv", columns: &["t", "loss_task", "total_alignment", "grad_W1", "grad_W2"] }]),
    (
        "figA1",
        &[FigureInput {
            pattern: "full_vs_reduced_*.csv",
            columns: &["t", "loss_full", "loss_reduced", "c1_full", "c2_full", "c1_reduced", "c2_reduced"],
        }],
    ),
    ("figA3", &[FigureInput { pattern: "run_*.csv", columns: &["t", "block", "c1", "c2", "c3", "c4"] }]),
    ("figA5", &[FigureInput { pattern: "trajectory.csv", columns: &["t", "wbar", "cbar", "wbarbar", "ntk_rate"] }]),
    (
        "figA7",
        &[
            FigureInput { pattern: "trajectory.csv", columns: &["t", "wbar", "cbar", "eps1", "eps2"] },
            FigureInput { pattern: "symmetry.csv", columns: &["t", "eps_sum", "wbar_gap"] },
        ],
    ),
    ("figA8", &[FigureInput { pattern: "run_*.csv", columns: &["t", "block", "phase", "task", "loss_task", "c1", "c2", "c3"] }]),
    (
        "figA9",
        &[FigureInput {
            pattern: "overlap.csv",
            columns: &["similarity", "mean_total_alignment", "se_total_alignment", "mean_specialization", "se_specialization"],
        }],
    ),
    ("figA10", &[FigureInput { pattern: "block_end_loss.csv", columns: &["block", "mean_loss"] }]),
];

fn matches_pattern(name: &str, pattern: &str) -> bool {
    match pattern.split_once('*') {
        Some((pre, post)) => name.len() >= pre.len() + post.len() && name.starts_with(pre) && name.ends_with(post),
        None => name == pattern,
    }
}

/// Checks that `dir` holds everything figure `id` reads and returns the
/// matching files. A missing file is an I/O error naming the pattern; a
/// missing column is a configuration error naming file and column.
pub fn check_figure_inputs(id: &str, dir: &Path) -> Result<Vec<std::path::PathBuf>, Error> {
    let inputs = FIGURE_INPUTS
        .iter()
        .find(|(f, _)| *f == id)
        .map(|(_, i)| *i)
        .ok_or_else(|| Error::Config(format!("unknown figure '{id}'")))?;
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    let mut found = Vec::new();
    for input in inputs {
        let hits: Vec<&String> = names.iter().filter(|n| matches_pattern(n, input.pattern)).collect();
        if hits.is_empty() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{id}: no file matching '{}' in {}", input.pattern, dir.display()),
            )));
        }
        for name in hits {
            let path = dir.join(name);
            if !input.columns.is_empty() {
                let mut r = csv::Reader::from_path(&path)?;
                let header = r.headers()?.clone();
                for col in input.columns {
                    if !header.iter().any(|h| h == *col) {
                        return Err(Error::Config(format!("{id}: {name} is missing column '{col}'")));
                    }
                }
            }
            found.push(path);
        }
    }
    Ok(found)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789, f64::MIN_POSITIVE] {
            assert_eq!(parse_f64(&fmt_f64(v)).unwrap(), v);
        }
        assert!(parse_f64(&fmt_f64(f64::NAN)).unwrap().is_nan());
    }
}
