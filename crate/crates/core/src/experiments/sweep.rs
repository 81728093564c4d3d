//! Block-length grids at constant total training time.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::experiments::presets::{Preset, SweepAxis, Variant};
use crate::experiments::runner::run_curriculum;
use crate::metrics::mean_se;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    /// Block length.
    pub axis1: f64,
    /// Time-constant ratio or regularisation strength.
    pub axis2: f64,
    pub seed: u64,
    pub total_alignment: f64,
    pub aborted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub axis1: f64,
    pub axis2: f64,
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// Preset of one grid cell: block length `tau_b`, the number of blocks that
/// keeps the total time fixed, and the second axis applied.
pub fn cell_preset(base: &Preset, tau_b: f64, axis2: f64) -> Preset {
    let mut p = base.clone();
    p.tau_b = tau_b;
    p.n_blocks = ((base.sweep_total_time / tau_b).round() as usize).max(1);
    let steps = (p.n_blocks as f64 * (tau_b / p.dt).round()) as usize;
    p.stride = steps + 1;
    match base.sweep_axis {
        SweepAxis::Ratio => p.tau_w = axis2 * base.tau_c,
        SweepAxis::Lambda => {
            let [a, b, c] = base.lambda_scale;
            p.lambda_nonneg = a * axis2;
            p.lambda_norm_l1 = b * axis2;
            p.lambda_norm_l2 = c * axis2;
        }
    }
    p
}

/// Runs every `(block length, axis2, seed)` combination; results are in
/// row-major grid order with seeds innermost.
pub fn grid_sweep(base: &Preset, seeds: &[u64], workers: Option<usize>) -> Result<Vec<GridCell>, Error> {
    if base.grid_block_lengths.is_empty() || base.grid_axis2.is_empty() {
        return Err(Error::Config(format!("preset '{}' defines no grid", base.name)));
    }
    if !(base.sweep_total_time > 0.0) {
        return Err(Error::Config("sweep_total_time must be positive".into()));
    }
    let mut jobs = Vec::new();
    for &a1 in &base.grid_block_lengths {
        for &a2 in &base.grid_axis2 {
            for &s in seeds {
                jobs.push((a1, a2, s));
            }
        }
    }
    for &(a1, a2, _) in &jobs {
        cell_preset(base, a1, a2).validate()?;
    }
    let run = |&(a1, a2, seed): &(f64, f64, u64)| -> Result<GridCell, Error> {
        let out = run_curriculum(&cell_preset(base, a1, a2), Variant::Main, seed)?;
        let ta = out.record.last().map(|r| r.total_alignment).unwrap_or(f64::NAN);
        Ok(GridCell {
            axis1: a1,
            axis2: a2,
            seed,
            total_alignment: ta,
            aborted: out.record.abort.is_some(),
        })
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| jobs.par_iter().map(run).collect())
}

/// Mean ± standard error of total alignment per grid cell, in first-seen order.
pub fn summarize_grid(cells: &[GridCell]) -> Vec<CellStats> {
    let mut keys: Vec<(f64, f64)> = Vec::new();
    for c in cells {
        if !keys.iter().any(|&(a, b)| a == c.axis1 && b == c.axis2) {
            keys.push((c.axis1, c.axis2));
        }
    }
    keys.into_iter()
        .map(|(a1, a2)| {
            let v: Vec<f64> = cells
                .iter()
                .filter(|c| c.axis1 == a1 && c.axis2 == a2)
                .map(|c| c.total_alignment)
                .collect();
            let (mean, se) = mean_se(&v);
            CellStats {
                axis1: a1,
                axis2: a2,
                mean,
                se,
                n: v.len(),
            }
        })
        .collect()
}
