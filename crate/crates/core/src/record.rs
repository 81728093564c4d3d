//! Time series produced by a curriculum run.

use serde::{Deserialize, Serialize};

use crate::error::NumericalAbort;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub t: f64,
    pub block: usize,
    pub phase: usize,
    pub task: String,
    /// Expected task loss under the input distribution.
    pub loss_task: f64,
    /// Task loss on the batch used for the step.
    pub loss_batch: f64,
    pub loss_reg: f64,
    /// One value per path (per-path gates, row means of per-neuron gates,
    /// or emergent gates of a sorted two-layer network).
    pub gates: Vec<f64>,
    /// Pair alignment, row-major `P × M`.
    pub alignment: Vec<f64>,
    pub total_alignment: f64,
    /// Update or gradient norms, labelled by [`RunRecord::norm_labels`].
    pub norms: Vec<f64>,
    /// `(wbar, cbar, wbarbar)` of the row-basis projection when `P = M = 2`.
    pub spec: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockInfo {
    pub index: usize,
    pub phase: usize,
    pub phase_name: String,
    pub task: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub paths: usize,
    pub teachers: usize,
    pub norm_labels: Vec<String>,
    pub rows: Vec<RecordRow>,
    pub blocks: Vec<BlockInfo>,
    pub abort: Option<NumericalAbort>,
}

impl RunRecord {
    pub fn new(paths: usize, teachers: usize, norm_labels: Vec<String>) -> Self {
        Self {
            paths,
            teachers,
            norm_labels,
            rows: Vec::new(),
            blocks: Vec::new(),
            abort: None,
        }
    }

    pub fn last(&self) -> Option<&RecordRow> {
        self.rows.last()
    }

    /// Rows belonging to block `b`.
    pub fn block_rows(&self, b: usize) -> impl Iterator<Item = &RecordRow> {
        self.rows.iter().filter(move |r| r.block == b)
    }

    /// Last row of block `b`.
    pub fn block_end(&self, b: usize) -> Option<&RecordRow> {
        self.block_rows(b).last()
    }

    /// Alignment of student `p` with teacher `m` in a row.
    pub fn alignment(&self, row: &RecordRow, p: usize, m: usize) -> f64 {
        row.alignment[p * self.teachers + m]
    }

    pub fn header(&self) -> Vec<String> {
        let mut h: Vec<String> = ["t", "block", "phase", "task", "loss_task", "loss_batch", "loss_reg"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend((1..=self.paths).map(|p| format!("c{p}")));
        for p in 1..=self.paths {
            for m in 1..=self.teachers {
                h.push(format!("align_{p}_{m}"));
            }
        }
        h.push("total_alignment".into());
        h.extend(self.norm_labels.iter().cloned());
        h.extend(["wbar", "cbar", "wbarbar"].iter().map(|s| s.to_string()));
        h
    }
}
