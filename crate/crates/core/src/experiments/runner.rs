//! Integration of a gated student or two-layer network through a curriculum.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::{
    make_composite_tasks, sample_batch, BatchSpec, BlockSchedule, CompositionMode, SeedStreams, TaskSpec,
    TeacherSet,
};
use crate::deep::{sort_students, TwoLayerNet};
use crate::error::{Error, ModelError, NumericalAbort};
use crate::experiments::presets::{Architecture, CurriculumKind, Preset, Variant};
use crate::metrics::{pair_alignment, regime_label, time_to_threshold, total_alignment, AssignmentRule, BlockTiming, Regime};
use crate::model::{population_loss, Batch, GatedStudent, RegularizerConfig};
use crate::record::{BlockInfo, RecordRow, RunRecord};
use crate::reduced::project_full;

/// Second-layer matrices of a two-layer network at the end of a block.
#[derive(Debug, Clone, PartialEq)]
pub struct W2Snapshot {
    pub block: usize,
    pub unsorted: Array2<f64>,
    pub sorted: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FinalModel {
    Gated(GatedStudent),
    TwoLayer(TwoLayerNet),
}

impl FinalModel {
    /// Students used for alignment: the paths, or the sorted first-layer blocks.
    pub fn students(&self, teachers: &TeacherSet) -> Vec<Array2<f64>> {
        match self {
            FinalModel::Gated(s) => s.weights().to_vec(),
            FinalModel::TwoLayer(n) => sort_students(n, teachers)
                .map(|s| s.students())
                .unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub seed: u64,
    pub variant: Variant,
    pub teachers: TeacherSet,
    pub schedule: BlockSchedule,
    pub record: RunRecord,
    pub model: FinalModel,
    pub snapshots: Vec<W2Snapshot>,
}

/// Per-seed summary written next to the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub variant: String,
    pub final_total_alignment: f64,
    pub per_block_time_to_threshold: Vec<BlockTiming>,
    pub regime_label: Regime,
    pub final_loss: f64,
    pub aborted: Option<NumericalAbort>,
}

impl RunOutcome {
    pub fn summary(&self, threshold: f64, cut: f64) -> RunSummary {
        let last = self.record.last();
        let ta = last.map(|r| r.total_alignment).unwrap_or(f64::NAN);
        RunSummary {
            seed: self.seed,
            variant: self.variant.as_str().into(),
            final_total_alignment: ta,
            per_block_time_to_threshold: time_to_threshold(&self.record, threshold),
            regime_label: regime_label(ta, cut),
            final_loss: last.map(|r| r.loss_task).unwrap_or(f64::NAN),
            aborted: self.record.abort.clone(),
        }
    }
}

/// Teachers for a preset and seed.
pub fn make_teachers(preset: &Preset, seed: u64) -> Result<TeacherSet, Error> {
    let mut rng = SeedStreams::new(seed).teachers();
    Ok(TeacherSet::generate(
        preset.teachers,
        preset.d_in,
        preset.d_out,
        preset.similarity,
        &mut rng,
    )?)
}

/// Block schedule for a preset's curriculum.
pub fn make_schedule(preset: &Preset, teachers: &TeacherSet) -> Result<BlockSchedule, Error> {
    let singles = || -> Result<Vec<TaskSpec>, Error> {
        (0..teachers.len())
            .map(|m| TaskSpec::single(teachers, m).map_err(Error::from))
            .collect()
    };
    let s = match preset.curriculum {
        CurriculumKind::Alternate => BlockSchedule::cycling(singles()?, preset.n_blocks, preset.tau_b)?,
        CurriculumKind::TaskComposition | CurriculumKind::SubtaskComposition => {
            let mode = if preset.curriculum == CurriculumKind::TaskComposition {
                CompositionMode::Task
            } else {
                CompositionMode::Subtask
            };
            BlockSchedule::cycling(singles()?, preset.train_blocks, preset.tau_b)?.then(
                "new-tasks",
                make_composite_tasks(teachers, mode)?,
                preset.n_blocks - preset.train_blocks,
            )?
        }
        CurriculumKind::PairSums => BlockSchedule::cycling(
            make_composite_tasks(teachers, CompositionMode::Task)?,
            preset.n_blocks,
            preset.tau_b,
        )?,
    };
    Ok(s)
}

/// One integrable model.
trait Learner {
    fn step(&mut self, batch: &Batch, reg: &RegularizerConfig, dt: f64) -> Result<(f64, f64, Vec<f64>), ModelError>;
    fn observe(&self, teachers: &TeacherSet, target: &Array2<f64>) -> Observation;
    fn norm_labels(&self) -> Vec<String>;
    fn paths(&self) -> usize;
}

struct Observation {
    loss: f64,
    gates: Vec<f64>,
    alignment: Vec<f64>,
    total_alignment: f64,
    spec: Option<[f64; 3]>,
}

fn alignments(students: &[Array2<f64>], teachers: &TeacherSet) -> (Vec<f64>, f64) {
    let pa = pair_alignment(students, teachers.matrices());
    let ta = total_alignment(students, teachers.matrices(), AssignmentRule::Optimal);
    (pa.iter().copied().collect(), ta.value)
}

impl Learner for GatedStudent {
    fn step(&mut self, batch: &Batch, reg: &RegularizerConfig, dt: f64) -> Result<(f64, f64, Vec<f64>), ModelError> {
        let s = self.euler_step(batch, reg, dt)?;
        let mut norms = s.weight_update_norms;
        norms.push(s.gate_update_norm);
        Ok((s.loss_task, s.loss_reg, norms))
    }

    fn observe(&self, teachers: &TeacherSet, target: &Array2<f64>) -> Observation {
        let (alignment, total) = alignments(self.weights(), teachers);
        let spec = if self.paths() == 2 && teachers.len() == 2 {
            project_full(self, teachers, true).ok().map(|p| {
                let c = p.to_state(self.tau_w, self.tau_c, [0.0; 2]).coords();
                [c.wbar, c.cbar, c.wbarbar]
            })
        } else {
            None
        };
        Observation {
            loss: self.population_loss(target),
            gates: self.mean_gates(),
            alignment,
            total_alignment: total,
            spec,
        }
    }

    fn norm_labels(&self) -> Vec<String> {
        let mut v: Vec<String> = (1..=self.paths()).map(|p| format!("dW{p}")).collect();
        v.push("dc".into());
        v
    }

    fn paths(&self) -> usize {
        GatedStudent::paths(self)
    }
}

impl Learner for TwoLayerNet {
    fn step(&mut self, batch: &Batch, reg: &RegularizerConfig, dt: f64) -> Result<(f64, f64, Vec<f64>), ModelError> {
        let s = self.euler_step(batch, reg, dt)?;
        Ok((s.loss_task, s.loss_reg, vec![s.grad_norm_w1, s.grad_norm_w2]))
    }

    fn observe(&self, teachers: &TeacherSet, target: &Array2<f64>) -> Observation {
        let loss = population_loss(&self.effective_map(), target);
        match sort_students(self, teachers) {
            Ok(sorted) => {
                let (alignment, total) = alignments(&sorted.students(), teachers);
                Observation {
                    loss,
                    gates: sorted.emergent_gates(),
                    alignment,
                    total_alignment: total,
                    spec: None,
                }
            }
            Err(_) => Observation {
                loss,
                gates: Vec::new(),
                alignment: Vec::new(),
                total_alignment: f64::NAN,
                spec: None,
            },
        }
    }

    fn norm_labels(&self) -> Vec<String> {
        vec!["grad_W1".into(), "grad_W2".into()]
    }

    fn paths(&self) -> usize {
        self.d_hid() / self.d_out()
    }
}

fn batch_spec(preset: &Preset) -> BatchSpec {
    if preset.expectation {
        BatchSpec::Expectation
    } else {
        BatchSpec::Sampled(preset.batch_size)
    }
}

struct Integration {
    record: RunRecord,
    snapshots: Vec<W2Snapshot>,
}

fn integrate<L: Learner, R: Rng>(
    model: &mut L,
    preset: &Preset,
    reg: &RegularizerConfig,
    teachers: &TeacherSet,
    schedule: &BlockSchedule,
    rng: &mut R,
    mut on_block_end: impl FnMut(&L, usize) -> Option<W2Snapshot>,
) -> Integration {
    let spec = batch_spec(preset);
    let dt = preset.dt;
    let steps_per_block = (schedule.tau_b / dt).round().max(1.0) as usize;
    let stride = preset.stride.max(1);
    let mut record = RunRecord::new(model.paths(), teachers.len(), model.norm_labels());
    let mut snapshots = Vec::new();
    let n_blocks = schedule.n_blocks();
    'blocks: for b in 0..n_blocks {
        let active = schedule.block(b).expect("block index within schedule");
        let phase_name = schedule.phases[active.phase].name.clone();
        let label = active.task.label();
        record.blocks.push(BlockInfo {
            index: b,
            phase: active.phase,
            phase_name,
            task: label.clone(),
            start: (b * steps_per_block) as f64 * dt,
            end: ((b + 1) * steps_per_block) as f64 * dt,
        });
        let target = &active.task.target;
        for k in 0..steps_per_block {
            let step = b * steps_per_block + k;
            let t = step as f64 * dt;
            let batch = sample_batch(active.task, spec, rng);
            let obs = (step % stride == 0).then(|| model.observe(teachers, target));
            match model.step(&batch, reg, dt) {
                Ok((loss_batch, loss_reg, norms)) => {
                    if let Some(o) = obs {
                        record.rows.push(RecordRow {
                            t,
                            block: b,
                            phase: active.phase,
                            task: label.clone(),
                            loss_task: o.loss,
                            loss_batch,
                            loss_reg,
                            gates: o.gates,
                            alignment: o.alignment,
                            total_alignment: o.total_alignment,
                            norms,
                            spec: o.spec,
                        });
                    }
                }
                Err(e) => {
                    let param = match e {
                        ModelError::NonFinite(p) => p,
                        other => other.to_string(),
                    };
                    record.abort = Some(NumericalAbort { t, block: b, param });
                    break 'blocks;
                }
            }
        }
        if let Some(s) = on_block_end(model, b) {
            snapshots.push(s);
        }
    }
    if record.abort.is_none() && n_blocks > 0 {
        let last = schedule.block(n_blocks - 1).expect("last block");
        let o = model.observe(teachers, &last.task.target);
        record.rows.push(RecordRow {
            t: (n_blocks * steps_per_block) as f64 * dt,
            block: n_blocks - 1,
            phase: last.phase,
            task: last.task.label(),
            loss_task: o.loss,
            loss_batch: f64::NAN,
            loss_reg: f64::NAN,
            gates: o.gates,
            alignment: o.alignment,
            total_alignment: o.total_alignment,
            norms: vec![f64::NAN; record.norm_labels.len()],
            spec: o.spec,
        });
    }
    Integration { record, snapshots }
}

/// Runs one seed of a gated or two-layer preset.
pub fn run_curriculum(preset: &Preset, variant: Variant, seed: u64) -> Result<RunOutcome, Error> {
    preset.validate()?;
    let teachers = make_teachers(preset, seed)?;
    run_with_teachers(preset, variant, seed, teachers)
}

/// As [`run_curriculum`] with given teachers.
pub fn run_with_teachers(
    preset: &Preset,
    variant: Variant,
    seed: u64,
    teachers: TeacherSet,
) -> Result<RunOutcome, Error> {
    preset.validate()?;
    let schedule = make_schedule(preset, &teachers)?;
    let streams = SeedStreams::new(seed);
    let reg = preset.regularizer(variant);
    let tau_c = preset.gate_tau(variant);
    let mut batch_rng = streams.batches();
    let (record, model, snapshots) = match preset.architecture {
        Architecture::Gated => {
            let mut student = GatedStudent::init(
                preset.paths,
                preset.d_in,
                preset.d_out,
                preset.gate_mode,
                preset.sigma,
                preset.tau_w,
                tau_c,
                &mut streams.init(),
            )?
            .with_weight_flow(preset.weight_flow);
            let out = integrate(&mut student, preset, &reg, &teachers, &schedule, &mut batch_rng, |_, _| None);
            (out.record, FinalModel::Gated(student), out.snapshots)
        }
        Architecture::TwoLayer => {
            let mut net = TwoLayerNet::init(
                preset.d_in,
                preset.d_hid,
                preset.d_out,
                preset.sigma,
                preset.tau_w,
                tau_c,
                &mut streams.init(),
            )?;
            net.weight_flow = preset.weight_flow;
            let t = teachers.clone();
            let out = integrate(&mut net, preset, &reg, &teachers, &schedule, &mut batch_rng, |n, b| {
                sort_students(n, &t).ok().map(|s| W2Snapshot {
                    block: b,
                    unsorted: n.w2.clone(),
                    sorted: s.w2,
                })
            });
            (out.record, FinalModel::TwoLayer(net), out.snapshots)
        }
        Architecture::Reduced => {
            return Err(Error::Config(format!(
                "preset '{}' uses the reduced model; run it with the reduced-model commands",
                preset.name
            )))
        }
    };
    Ok(RunOutcome {
        seed,
        variant,
        teachers,
        schedule,
        record,
        model,
        snapshots,
    })
}
