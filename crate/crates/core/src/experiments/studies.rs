//! Individual studies built on the runners: reduced-model checks,
//! representation cost, composition, few-shot adaptation and teacher overlap.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::curriculum::{sample_batch, BatchSpec, SeedStreams};
use crate::error::{Error, NumericalAbort};
use crate::experiments::presets::{Preset, Variant};
use crate::experiments::runner::{make_schedule, make_teachers, run_curriculum, RunOutcome};
use crate::metrics::{
    assign, difference_specialization, linear_fit, mean_se, pair_alignment, rank_gate_speed, time_to_threshold,
    AssignmentRule,
};
use crate::model::{GatedStudent, RegularizerConfig};
use crate::reduced::{
    conserved_quantity, exact_wbar, ntk_descent_rate, project_full, reduced_step, simulate_reduced,
    teacher_target, ReducedIntegrator, ReducedSchedule, ReducedState,
};

fn pool(workers: Option<usize>) -> Result<rayon::ThreadPool, Error> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(e.to_string()))
}

/// Runs several seeds of a preset in parallel, in seed order.
pub fn run_seeds(
    preset: &Preset,
    variant: Variant,
    seeds: &[u64],
    workers: Option<usize>,
) -> Result<Vec<RunOutcome>, Error> {
    preset.validate()?;
    pool(workers)?.install(|| seeds.par_iter().map(|&s| run_curriculum(preset, variant, s)).collect())
}

// ---------------------------------------------------------------------------
// Full model versus reduced model

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FullReducedPoint {
    pub t: f64,
    pub block: usize,
    pub loss_full: f64,
    pub loss_reduced: f64,
    pub c_full: [f64; 2],
    pub c_reduced: [f64; 2],
    /// Out-of-span weight norm relative to the student norm.
    pub residual_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullReducedComparison {
    pub tau_c_reduced: f64,
    pub points: Vec<FullReducedPoint>,
    pub max_loss_gap: f64,
    pub max_gate_gap: f64,
    pub final_residual_fraction: f64,
    pub abort: Option<NumericalAbort>,
}

/// Integrates a two-path student and the reduced model started from its
/// row-basis projection side by side through the same alternating blocks.
///
/// The reduced model uses the student's weight time constant and
/// `tau_c_reduced`, or the student's gate time constant when that is zero.
pub fn full_vs_reduced(preset: &Preset, seed: u64) -> Result<FullReducedComparison, Error> {
    preset.validate()?;
    if preset.paths != 2 || preset.teachers != 2 {
        return Err(Error::Config("full-vs-reduced needs two paths and two teachers".into()));
    }
    let teachers = make_teachers(preset, seed)?;
    let schedule = make_schedule(preset, &teachers)?;
    let streams = SeedStreams::new(seed);
    let reg = preset.regularizer(Variant::Main);
    let mut student = GatedStudent::init(
        2,
        preset.d_in,
        preset.d_out,
        preset.gate_mode,
        preset.sigma,
        preset.tau_w,
        preset.tau_c,
        &mut streams.init(),
    )?
    .with_weight_flow(preset.weight_flow);
    let tau_c_red = if preset.tau_c_reduced > 0.0 {
        preset.tau_c_reduced
    } else {
        preset.tau_c
    };
    let mut reduced = project_full(&student, &teachers, false)?.to_state(preset.tau_w, tau_c_red, teacher_target(0));
    let spec = if preset.expectation {
        BatchSpec::Expectation
    } else {
        BatchSpec::Sampled(preset.batch_size)
    };
    let mut rng = streams.batches();
    let dt = preset.dt;
    let spb = (preset.tau_b / dt).round().max(1.0) as usize;
    let stride = preset.stride.max(1);
    let mut points = Vec::new();
    let mut abort = None;
    let mut push = |t: f64, block: usize, s: &GatedStudent, r: &ReducedState, target: &ndarray::Array2<f64>| {
        let proj = project_full(s, &teachers, true).expect("checked shapes");
        points.push(FullReducedPoint {
            t,
            block,
            loss_full: s.population_loss(target),
            loss_reduced: r.task_loss(),
            c_full: [s.gate(0, 0), s.gate(1, 0)],
            c_reduced: r.c,
            residual_fraction: proj.residual_norm / proj.student_norm.max(f64::MIN_POSITIVE),
        });
    };
    'outer: for b in 0..schedule.n_blocks() {
        let active = schedule.block(b).expect("block in range");
        let m = active.task.members()[0];
        reduced.target = teacher_target(m);
        for k in 0..spb {
            let step = b * spb + k;
            let t = step as f64 * dt;
            if step % stride == 0 {
                push(t, b, &student, &reduced, &active.task.target);
            }
            let batch = sample_batch(active.task, spec, &mut rng);
            if let Err(e) = student.euler_step(&batch, &reg, dt) {
                abort = Some(NumericalAbort {
                    t,
                    block: b,
                    param: e.to_string(),
                });
                break 'outer;
            }
            match reduced_step(&reduced, dt, &reg) {
                Ok(r) => reduced = r,
                Err(e) => {
                    abort = Some(NumericalAbort {
                        t,
                        block: b,
                        param: format!("reduced {e}"),
                    });
                    break 'outer;
                }
            }
        }
    }
    if abort.is_none() {
        let last = schedule.block(schedule.n_blocks() - 1).expect("non-empty");
        push(
            (schedule.n_blocks() * spb) as f64 * dt,
            last.block,
            &student,
            &reduced,
            &last.task.target,
        );
    }
    let max_loss_gap = points
        .iter()
        .map(|p| (p.loss_full - p.loss_reduced).abs())
        .fold(0.0, f64::max);
    let max_gate_gap = points
        .iter()
        .flat_map(|p| (0..2).map(move |i| (p.c_full[i] - p.c_reduced[i]).abs()))
        .fold(0.0, f64::max);
    let final_residual_fraction = points.last().map(|p| p.residual_fraction).unwrap_or(f64::NAN);
    Ok(FullReducedComparison {
        tau_c_reduced: tau_c_red,
        points,
        max_loss_gap,
        max_gate_gap,
        final_residual_fraction,
        abort,
    })
}

// ---------------------------------------------------------------------------
// Exact solution under symmetry

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactPoint {
    pub t: f64,
    pub cbar: f64,
    pub wbar: f64,
    /// `NaN` where the exact solution is undefined.
    pub wbar_exact: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactCheck {
    pub tau_c: f64,
    pub tau_w: f64,
    pub points: Vec<ExactPoint>,
    /// Largest `|wbar - wbar_exact(cbar)|` along the trajectory.
    pub max_deviation: f64,
    /// Time at which the task loss first fell below `1e-2`.
    pub time_to_1e2: Option<f64>,
    pub final_loss: f64,
}

/// Adaptation from teacher 1 to teacher 2 over one block, starting fully
/// specialised, compared against the exact solution.
pub fn exact_check(preset: &Preset, tau_c: f64) -> Result<ExactCheck, Error> {
    let start = ReducedState::specialized(preset.tau_w, tau_c, teacher_target(1));
    let sched = ReducedSchedule {
        tau_b: preset.tau_b,
        n_blocks: 1,
        dt: preset.dt,
        first_teacher: 1,
        stride: preset.stride,
    };
    let run = simulate_reduced(start, &sched, &preset.regularizer(Variant::Main), ReducedIntegrator::Free);
    if let Some(a) = run.abort {
        return Err(a.into());
    }
    let points: Vec<ExactPoint> = run
        .samples
        .iter()
        .map(|s| {
            let c = s.state.coords();
            ExactPoint {
                t: s.t,
                cbar: c.cbar,
                wbar: c.wbar,
                wbar_exact: exact_wbar(c.cbar, tau_c, preset.tau_w).unwrap_or(f64::NAN),
                loss: s.loss,
            }
        })
        .collect();
    let max_deviation = points
        .iter()
        .filter(|p| p.wbar_exact.is_finite())
        .map(|p| (p.wbar - p.wbar_exact).abs())
        .fold(0.0, f64::max);
    Ok(ExactCheck {
        tau_c,
        tau_w: preset.tau_w,
        time_to_1e2: points.iter().find(|p| p.loss < 1e-2).map(|p| p.t),
        final_loss: points.last().map(|p| p.loss).unwrap_or(f64::NAN),
        points,
        max_deviation,
    })
}

/// Largest per-block change of `τ_c cbar² - 2 τ_w wbar²` under the
/// symmetry-enforced integrator, over `n_blocks` alternating blocks starting
/// fully specialised.
pub fn conservation_drift(
    tau_w: f64,
    tau_c: f64,
    tau_b: f64,
    dt: f64,
    n_blocks: usize,
    reg: &RegularizerConfig,
    integrator: ReducedIntegrator,
) -> Result<Vec<f64>, Error> {
    let mut s = ReducedState::specialized(tau_w, tau_c, teacher_target(1));
    let spb = (tau_b / dt).round() as usize;
    let q = |s: &ReducedState| {
        let c = s.coords();
        conserved_quantity(c.cbar, c.wbar, tau_c, tau_w)
    };
    let mut drifts = Vec::with_capacity(n_blocks);
    for b in 0..n_blocks {
        s.target = teacher_target((1 + b) % 2);
        let q0 = q(&s);
        let mut worst: f64 = 0.0;
        for _ in 0..spb {
            s = integrator.step(&s, dt, reg)?;
            worst = worst.max((q(&s) - q0).abs());
        }
        drifts.push(worst);
    }
    Ok(drifts)
}

/// Central finite difference of `-dL/dt` along the unregularised flow
/// next to the closed-form kernel rate. Returns `(finite_difference, kernel)`.
pub fn ntk_check(state: &ReducedState, h: f64) -> Result<(f64, f64), Error> {
    let reg = RegularizerConfig::none();
    let fwd = reduced_step(state, h, &reg)?;
    let bwd = reduced_step(state, -h, &reg)?;
    let fd = (bwd.task_loss() - fwd.task_loss()) / (2.0 * h);
    Ok((fd, ntk_descent_rate(state)))
}

// ---------------------------------------------------------------------------
// Block length in the short-block regime

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockLengthResult {
    pub tau_b: f64,
    pub total_time: f64,
    /// Growth of `wbar` over `total_time` with blocks of `tau_b`.
    pub growth_short: f64,
    /// Growth with blocks of `2 tau_b`.
    pub growth_long: f64,
    pub ratio: f64,
}

/// Early-learning state: both students small and nearly equal, gates at ½.
pub fn early_state(tau_w: f64, tau_c: f64, scale: f64, asym: f64) -> ReducedState {
    ReducedState {
        w: [[scale + asym, scale], [scale, scale + asym]],
        c: [0.5, 0.5],
        tau_w,
        tau_c,
        target: teacher_target(0),
    }
}

/// Specialisation growth for blocks of `tau_b` against `2 tau_b` at equal
/// total time (`periods` cycles of the longer blocks).
pub fn blocklength_ratio(
    start: ReducedState,
    tau_b: f64,
    dt: f64,
    periods: usize,
    reg: &RegularizerConfig,
) -> Result<BlockLengthResult, Error> {
    let total = 4.0 * tau_b * periods as f64;
    let growth = |b: f64| -> Result<f64, Error> {
        let n = (total / b).round() as usize;
        let run = simulate_reduced(
            start,
            &ReducedSchedule {
                tau_b: b,
                n_blocks: n,
                dt,
                first_teacher: 0,
                stride: usize::MAX,
            },
            reg,
            ReducedIntegrator::Free,
        );
        if let Some(a) = run.abort {
            return Err(a.into());
        }
        Ok(run.final_state.coords().wbar - start.coords().wbar)
    };
    let short = growth(tau_b)?;
    let long = growth(2.0 * tau_b)?;
    Ok(BlockLengthResult {
        tau_b,
        total_time: total,
        growth_short: short,
        growth_long: long,
        ratio: long / short,
    })
}

// ---------------------------------------------------------------------------
// Representation cost with redundant paths

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathActivity {
    pub seed: u64,
    pub variant: String,
    /// Largest gate of each path over the final task cycle.
    pub max_gates: Vec<f64>,
    pub active: usize,
    pub decayed: usize,
}

/// Gate activity per path over the last `M` blocks of a run.
pub fn path_activity(out: &RunOutcome, active_threshold: f64, decayed_threshold: f64) -> PathActivity {
    let rec = &out.record;
    let n_blocks = rec.blocks.len();
    let first = n_blocks.saturating_sub(rec.teachers);
    let mut max_gates = vec![f64::NEG_INFINITY; rec.paths];
    for r in rec.rows.iter().filter(|r| r.block >= first) {
        for (m, g) in max_gates.iter_mut().zip(&r.gates) {
            *m = m.max(*g);
        }
    }
    PathActivity {
        seed: out.seed,
        variant: out.variant.as_str().into(),
        active: max_gates.iter().filter(|&&g| g > active_threshold).count(),
        decayed: max_gates.iter().filter(|&&g| g < decayed_threshold).count(),
        max_gates,
    }
}

// ---------------------------------------------------------------------------
// Compositional generalisation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionResult {
    pub seed: u64,
    pub variant: String,
    /// Time to threshold in the first composite block, `None` if never reached.
    pub first_composite_time: Option<f64>,
    /// For every composite block of the first cycle: its label and the gate of
    /// the student matched to the teacher left out of that task.
    pub excluded_gates: Vec<(String, f64)>,
}

/// Reads generalisation measures off a composition run.
pub fn composition_result(out: &RunOutcome, threshold: f64) -> CompositionResult {
    let rec = &out.record;
    let start = out.schedule.phase_start(1.min(out.schedule.phases.len() - 1));
    let timing = time_to_threshold(rec, threshold);
    let first_composite_time = timing
        .get(start)
        .and_then(|t| (!t.censored).then_some(t.time));
    let mut excluded_gates = Vec::new();
    let n_tasks = out.schedule.phases.last().map(|p| p.tasks.len()).unwrap_or(0);
    // student-teacher matching as of the end of training on single teachers
    let matching = start
        .checked_sub(1)
        .and_then(|b| rec.block_end(b))
        .map(|row| {
            let pa = ndarray::Array2::from_shape_vec((rec.paths, rec.teachers), row.alignment.clone())
                .expect("alignment shape");
            assign(&pa, AssignmentRule::Optimal)
        })
        .unwrap_or_default();
    for b in start..(start + n_tasks).min(rec.blocks.len()) {
        let Some(row) = rec.block_end(b) else { continue };
        let task = out.schedule.block(b).expect("block in range").task;
        let members = task.members();
        for m in 0..rec.teachers {
            if members.contains(&m) {
                continue;
            }
            if let Some(&(p, _)) = matching.iter().find(|&&(_, t)| t == m) {
                excluded_gates.push((task.label(), row.gates[p]));
            }
        }
    }
    CompositionResult {
        seed: out.seed,
        variant: out.variant.as_str().into(),
        first_composite_time,
        excluded_gates,
    }
}

// ---------------------------------------------------------------------------
// Few-shot adaptation

/// Seed-averaged task loss at the end of every block.
pub fn block_end_losses(runs: &[RunOutcome]) -> Vec<f64> {
    let n_blocks = runs.iter().map(|r| r.record.blocks.len()).min().unwrap_or(0);
    (0..n_blocks)
        .map(|b| {
            let v: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.record.block_end(b).map(|row| row.loss_task))
                .collect();
            mean_se(&v).0
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Teacher overlap

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverlapPoint {
    pub similarity: f64,
    pub mean_total_alignment: f64,
    pub se_total_alignment: f64,
    /// See [`difference_specialization`].
    pub mean_specialization: f64,
    pub se_specialization: f64,
}

/// Final total alignment and specialisation as a function of teacher row
/// cosine. Total alignment of unspecialised students grows with the
/// similarity, so the specialisation measure is the one to compare.
pub fn overlap_sweep(preset: &Preset, seeds: &[u64], workers: Option<usize>) -> Result<Vec<OverlapPoint>, Error> {
    let mut jobs = Vec::new();
    for &s in &preset.similarities {
        for &seed in seeds {
            jobs.push((s, seed));
        }
    }
    let results: Vec<(f64, f64, f64)> = pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|&(s, seed)| {
                let p = Preset {
                    similarity: s,
                    ..preset.clone()
                };
                let out = run_curriculum(&p, Variant::Main, seed)?;
                let students = out.model.students(&out.teachers);
                let spec = difference_specialization(&students, out.teachers.matrices(), AssignmentRule::Optimal);
                Ok((s, out.record.last().map(|r| r.total_alignment).unwrap_or(f64::NAN), spec))
            })
            .collect::<Result<_, Error>>()
    })?;
    Ok(preset
        .similarities
        .iter()
        .map(|&s| {
            let ta: Vec<f64> = results.iter().filter(|r| r.0 == s).map(|r| r.1).collect();
            let sp: Vec<f64> = results.iter().filter(|r| r.0 == s).map(|r| r.2).collect();
            let (mt, st) = mean_se(&ta);
            let (ms, ss) = mean_se(&sp);
            OverlapPoint {
                similarity: s,
                mean_total_alignment: mt,
                se_total_alignment: st,
                mean_specialization: ms,
                se_specialization: ss,
            }
        })
        .collect())
}

/// Final pair alignment of the students matched to the latent teachers.
pub fn matched_alignment(out: &RunOutcome) -> Vec<f64> {
    let students = out.model.students(&out.teachers);
    let pa = pair_alignment(&students, out.teachers.matrices());
    assign(&pa, AssignmentRule::Optimal)
        .into_iter()
        .map(|(p, m)| pa[[p, m]])
        .collect()
}

// ---------------------------------------------------------------------------
// Gate speed against teacher rank

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSpeed {
    pub ranks: Vec<usize>,
    pub speeds: Vec<f64>,
    pub slope: f64,
    pub r2: f64,
}

pub fn rank_speed(preset: &Preset) -> RankSpeed {
    let d = preset.d_in.min(preset.d_out);
    let ranks: Vec<usize> = (1..=d).collect();
    let v = rank_gate_speed(d, &ranks);
    let x: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
    let y: Vec<f64> = v.iter().map(|p| p.1).collect();
    let (slope, _, r2) = linear_fit(&x, &y);
    RankSpeed {
        ranks,
        speeds: y,
        slope,
        r2,
    }
}
