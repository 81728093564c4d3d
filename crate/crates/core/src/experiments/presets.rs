//! Named hyperparameter sets.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::{GateMode, NormGroup, RegularizerConfig, WeightFlow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Architecture {
    /// Gated paths, see [`crate::model::GatedStudent`].
    #[default]
    Gated,
    /// Two-layer network, see [`crate::deep::TwoLayerNet`].
    TwoLayer,
    /// Two-dimensional reduced model.
    Reduced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CurriculumKind {
    /// Blocks cycle through the single teachers.
    #[default]
    Alternate,
    /// Single teachers for `train_blocks`, then sums of teacher pairs.
    TaskComposition,
    /// Single teachers for `train_blocks`, then row-interleaved teacher pairs.
    SubtaskComposition,
    /// Blocks cycle through sums of teacher pairs only.
    PairSums,
}

/// Second axis of a block-length grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Ratio `τ_w / τ_c` (gated) or `τ_W1 / τ_W2` (two-layer); the fast time
    /// constant stays at its preset value.
    #[default]
    Ratio,
    /// Overall regularisation strength `λ`, mapped onto the individual
    /// coefficients by `lambda_scale`.
    Lambda,
}

/// Which column of a preset table to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Main,
    Control,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Main => "main",
            Variant::Control => "control",
        }
    }
}

/// All settings of one experiment. Unused fields are ignored by experiments
/// that do not need them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Preset {
    pub name: String,
    pub architecture: Architecture,
    pub gate_mode: GateMode,
    pub paths: usize,
    pub teachers: usize,
    pub d_in: usize,
    /// Hidden width of the two-layer network.
    pub d_hid: usize,
    pub d_out: usize,
    pub lambda_nonneg: f64,
    pub lambda_norm_l1: f64,
    pub lambda_norm_l2: f64,
    pub lambda_w: f64,
    /// Weight (or first-layer) time constant.
    pub tau_w: f64,
    /// Gate (or second-layer) time constant.
    pub tau_c: f64,
    pub control_lambda_nonneg: f64,
    pub control_lambda_norm_l1: f64,
    pub control_lambda_norm_l2: f64,
    pub control_lambda_w: f64,
    pub control_tau_c: f64,
    pub norm_group: NormGroup,
    /// Row-scaled by default. Presets whose `τ_w / d_out` falls below `τ_c`
    /// use the plain flow, since row scaling would make their weights
    /// faster than their gates.
    pub weight_flow: WeightFlow,
    pub batch_size: usize,
    /// Use the population gradient instead of sampled batches.
    pub expectation: bool,
    pub seeds: usize,
    pub n_blocks: usize,
    pub tau_b: f64,
    pub dt: f64,
    pub sigma: f64,
    /// Row cosine between teachers.
    pub similarity: f64,
    pub curriculum: CurriculumKind,
    /// Blocks of single-teacher training before composite tasks start.
    pub train_blocks: usize,
    /// Log every `stride` integrator steps.
    pub stride: usize,
    pub threshold: f64,
    pub regime_cut: f64,
    pub sweep_axis: SweepAxis,
    pub grid_block_lengths: Vec<f64>,
    pub grid_axis2: Vec<f64>,
    /// Total simulated time of every grid cell.
    pub sweep_total_time: f64,
    /// `(λ_nonneg, λ_L1, λ_L2)` per unit of the swept `λ`.
    pub lambda_scale: [f64; 3],
    /// Gate time constant of the reduced model in the comparison with the
    /// full model; `0` derives it from the full model.
    pub tau_c_reduced: f64,
    /// Gate time constants of the exact-solution check.
    pub exact_tau_cs: Vec<f64>,
    /// Teacher similarities for the non-orthogonality sweep.
    pub similarities: Vec<f64>,
    /// Gate activity thresholds for counting active and decayed paths.
    pub active_threshold: f64,
    pub decayed_threshold: f64,
}

impl Default for Preset {
    fn default() -> Self {
        Self {
            name: "main".into(),
            architecture: Architecture::Gated,
            gate_mode: GateMode::PerPath,
            paths: 2,
            teachers: 2,
            d_in: 20,
            d_hid: 0,
            d_out: 10,
            lambda_nonneg: 0.091,
            lambda_norm_l1: 0.456,
            lambda_norm_l2: 0.0,
            lambda_w: 0.0,
            tau_w: 1.3,
            tau_c: 0.03,
            control_lambda_nonneg: 0.0,
            control_lambda_norm_l1: 0.0,
            control_lambda_norm_l2: 0.0,
            control_lambda_w: 0.0,
            control_tau_c: 1.3,
            norm_group: NormGroup::PerRow,
            weight_flow: WeightFlow::RowScaled,
            batch_size: 200,
            expectation: false,
            seeds: 10,
            n_blocks: 20,
            tau_b: 1.0,
            dt: 0.001,
            sigma: crate::model::DEFAULT_INIT_SIGMA,
            similarity: 0.0,
            curriculum: CurriculumKind::Alternate,
            train_blocks: 0,
            stride: 10,
            threshold: 0.1,
            regime_cut: crate::metrics::REGIME_CUT,
            sweep_axis: SweepAxis::Ratio,
            grid_block_lengths: Vec::new(),
            grid_axis2: Vec::new(),
            sweep_total_time: 0.0,
            lambda_scale: [0.0; 3],
            tau_c_reduced: 0.0,
            exact_tau_cs: Vec::new(),
            similarities: Vec::new(),
            active_threshold: 0.5,
            decayed_threshold: 0.1,
        }
    }
}

pub const PRESET_NAMES: &[&str] = &[
    "main",
    "task-switching",
    "task-composition",
    "subtask-composition",
    "reduced",
    "full-vs-reduced",
    "sweep-lr-block",
    "sweep-reg-block",
    "fc",
    "fc-sweep-lr-block",
    "fc-sweep-reg-block",
    "repr-cost",
    "blocklen",
    "nonortho",
    "nonortho-tasks",
    "fewshot",
    "rank-speed",
];

/// `n` log-spaced values from `lo` to `hi`.
pub fn logspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

/// `n` evenly spaced values from `lo` to `hi`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
        .collect()
}

/// Looks up a preset by name.
pub fn preset(name: &str) -> Result<Preset, Error> {
    let base = Preset::default();
    let p = match name {
        "main" => base,
        "task-switching" => Preset {
            lambda_nonneg: 0.18,
            lambda_norm_l1: 0.36,
            tau_w: 0.07,
            tau_c: 0.01,
            control_tau_c: 0.01,
            weight_flow: WeightFlow::Plain,
            n_blocks: 30,
            dt: 0.01,
            stride: 1,
            ..base
        },
        "task-composition" => Preset {
            paths: 3,
            teachers: 3,
            d_out: 6,
            lambda_nonneg: 0.5,
            lambda_norm_l1: 1.25,
            tau_w: 0.2,
            tau_c: 0.03,
            control_tau_c: 0.03,
            n_blocks: 30,
            curriculum: CurriculumKind::TaskComposition,
            train_blocks: 18,
            ..base
        },
        "subtask-composition" => Preset {
            gate_mode: GateMode::PerNeuron,
            paths: 3,
            teachers: 3,
            d_out: 6,
            lambda_nonneg: 0.023,
            lambda_norm_l1: 0.0,
            lambda_norm_l2: 0.011,
            tau_w: 0.2,
            tau_c: 0.005,
            control_tau_c: 0.005,
            n_blocks: 30,
            dt: 0.01,
            stride: 1,
            curriculum: CurriculumKind::SubtaskComposition,
            train_blocks: 18,
            ..base
        },
        "reduced" => Preset {
            architecture: Architecture::Reduced,
            d_in: 1,
            d_out: 2,
            lambda_nonneg: 0.091,
            lambda_norm_l1: 0.455,
            tau_w: 5.0,
            tau_c: 0.7,
            control_tau_c: 0.7,
            seeds: 1,
            n_blocks: 17,
            exact_tau_cs: vec![0.1, 0.18, 0.32, 0.56, 1.0],
            ..base
        },
        "full-vs-reduced" => Preset {
            lambda_nonneg: 0.091,
            lambda_norm_l1: 0.455,
            tau_w: 1.3,
            tau_c: 0.03,
            control_tau_c: 1.3,
            tau_c_reduced: 0.0,
            seeds: 1,
            expectation: true,
            ..base
        },
        "sweep-lr-block" | "sweep-reg-block" => Preset {
            lambda_nonneg: 0.5,
            lambda_norm_l1: 1.25,
            tau_w: 0.1,
            tau_c: 0.005,
            control_tau_c: 0.005,
            n_blocks: 7,
            expectation: true,
            stride: 100,
            sweep_axis: if name == "sweep-lr-block" {
                SweepAxis::Ratio
            } else {
                SweepAxis::Lambda
            },
            grid_block_lengths: logspace(0.01, 1.0, 8),
            grid_axis2: if name == "sweep-lr-block" {
                logspace(1.0, 100.0, 8)
            } else {
                linspace(0.0, 2.0, 8)
            },
            sweep_total_time: 8.0,
            lambda_scale: [5.0 / 3.0, 25.0 / 6.0, 0.0],
            ..base
        },
        "fc" => Preset {
            architecture: Architecture::TwoLayer,
            d_hid: 20,
            lambda_nonneg: 0.2,
            lambda_norm_l1: 0.0,
            lambda_norm_l2: 0.1,
            tau_w: 0.06,
            tau_c: 0.01,
            control_tau_c: 0.01,
            weight_flow: WeightFlow::Plain,
            n_blocks: 30,
            dt: 0.01,
            stride: 1,
            ..base
        },
        "fc-sweep-lr-block" | "fc-sweep-reg-block" => Preset {
            architecture: Architecture::TwoLayer,
            d_hid: 20,
            lambda_nonneg: 0.23,
            lambda_norm_l1: 0.0,
            lambda_norm_l2: 0.11,
            tau_w: 0.04,
            tau_c: 0.01,
            control_tau_c: 0.01,
            weight_flow: WeightFlow::Plain,
            n_blocks: 20,
            dt: 0.01,
            stride: 10,
            expectation: true,
            sweep_axis: if name == "fc-sweep-lr-block" {
                SweepAxis::Ratio
            } else {
                SweepAxis::Lambda
            },
            grid_block_lengths: logspace(0.1, 4.0, 8),
            grid_axis2: if name == "fc-sweep-lr-block" {
                logspace(1.0, 100.0, 8)
            } else {
                linspace(0.0, 2.0, 8)
            },
            sweep_total_time: 20.0,
            lambda_scale: [10.0 / 11.0, 0.0, 5.0 / 11.0],
            ..base
        },
        "repr-cost" => Preset {
            paths: 4,
            lambda_nonneg: 0.194,
            lambda_norm_l1: 0.968,
            lambda_w: 0.77,
            control_lambda_nonneg: 0.545,
            control_lambda_norm_l1: 2.727,
            control_lambda_w: 0.0,
            control_tau_c: 0.03,
            seeds: 1,
            ..base
        },
        "blocklen" => Preset {
            architecture: Architecture::Reduced,
            d_in: 1,
            d_out: 2,
            lambda_nonneg: 0.091,
            lambda_norm_l1: 0.455,
            tau_w: 5.0,
            tau_c: 0.7,
            control_tau_c: 0.7,
            seeds: 1,
            tau_b: 0.035,
            n_blocks: 8,
            dt: 1e-4,
            ..base
        },
        "nonortho" => Preset {
            lambda_nonneg: 0.0,
            lambda_norm_l1: 0.0,
            lambda_norm_l2: 0.5,
            tau_w: 0.016,
            tau_c: 0.016,
            control_tau_c: 0.016,
            weight_flow: WeightFlow::Plain,
            seeds: 1,
            n_blocks: 10,
            dt: 0.01,
            stride: 1,
            similarities: linspace(0.0, 0.9, 10),
            ..base
        },
        "nonortho-tasks" => Preset {
            paths: 3,
            teachers: 3,
            d_out: 6,
            lambda_nonneg: 0.33,
            lambda_norm_l1: 0.83,
            tau_w: 0.05,
            tau_c: 0.03,
            control_tau_c: 0.03,
            weight_flow: WeightFlow::Plain,
            n_blocks: 50,
            curriculum: CurriculumKind::PairSums,
            ..base
        },
        "fewshot" => Preset {
            lambda_nonneg: 0.091,
            lambda_norm_l1: 0.0,
            lambda_norm_l2: 0.455,
            tau_w: 1.0,
            tau_c: 0.01,
            control_tau_c: 0.01,
            batch_size: 1,
            seeds: 100,
            n_blocks: 6,
            dt: 0.02,
            stride: 1,
            ..base
        },
        "rank-speed" => Preset {
            d_in: 30,
            d_out: 30,
            lambda_nonneg: 0.091,
            lambda_norm_l1: 0.455,
            tau_w: 0.5,
            tau_c: 0.1,
            control_tau_c: 0.1,
            ..base
        },
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}' (known: {})",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(Preset {
        name: name.to_string(),
        ..p
    })
}

impl Preset {
    pub fn regularizer(&self, variant: Variant) -> RegularizerConfig {
        match variant {
            Variant::Main => RegularizerConfig {
                lambda_nonneg: self.lambda_nonneg,
                lambda_norm_l1: self.lambda_norm_l1,
                lambda_norm_l2: self.lambda_norm_l2,
                lambda_w: self.lambda_w,
                norm_group: self.norm_group,
            },
            Variant::Control => RegularizerConfig {
                lambda_nonneg: self.control_lambda_nonneg,
                lambda_norm_l1: self.control_lambda_norm_l1,
                lambda_norm_l2: self.control_lambda_norm_l2,
                lambda_w: self.control_lambda_w,
                norm_group: self.norm_group,
            },
        }
    }

    pub fn gate_tau(&self, variant: Variant) -> f64 {
        match variant {
            Variant::Main => self.tau_c,
            Variant::Control => self.control_tau_c,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.paths == 0 || self.teachers == 0 || self.d_in == 0 || self.d_out == 0 {
            return bad("dimensions must be positive".into());
        }
        for (k, v) in [
            ("tau_w", self.tau_w),
            ("tau_c", self.tau_c),
            ("control_tau_c", self.control_tau_c),
            ("tau_b", self.tau_b),
            ("dt", self.dt),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{k} must be positive, got {v}"));
            }
        }
        if self.dt > self.tau_b {
            return bad(format!("dt={} exceeds block length {}", self.dt, self.tau_b));
        }
        if !self.expectation && self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.architecture == Architecture::TwoLayer && self.d_hid != self.teachers * self.d_out {
            return bad(format!(
                "two-layer network needs d_hid = teachers·d_out = {}, got {}",
                self.teachers * self.d_out,
                self.d_hid
            ));
        }
        if matches!(
            self.curriculum,
            CurriculumKind::TaskComposition | CurriculumKind::SubtaskComposition
        ) && self.train_blocks > self.n_blocks
        {
            return bad("train_blocks exceeds n_blocks".into());
        }
        self.regularizer(Variant::Main)
            .validate()
            .and(self.regularizer(Variant::Control).validate())
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}
