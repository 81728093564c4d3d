use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use flexgate::config::{echo_config, parse_config, CliInputs, ResolvedConfig, OUT_ENV};
use flexgate::error::{Error, ModelError, ReducedError};
use flexgate::experiments::studies::{
    block_end_losses, blocklength_ratio, composition_result, conservation_drift, early_state, exact_check,
    full_vs_reduced, matched_alignment, overlap_sweep, path_activity, rank_speed, run_seeds,
};
use flexgate::experiments::{grid_sweep, summarize_grid, Architecture, RunOutcome};
use flexgate::io::{check_figure_inputs, read_grid, FIGURE_INPUTS, read_json, write_grid, write_json, write_matrix, write_record, write_rows, write_symmetry, write_trajectory, Manifest};
use flexgate::reduced::{simulate_reduced, symmetry_residuals, ReducedIntegrator, ReducedSchedule};

/// Start of the reduced-model trajectory: students of this size on both
/// teachers, the first slightly ahead on its own teacher.
const REDUCED_START: (f64, f64) = (0.1, 0.01);

#[derive(Parser)]
#[command(name = "flexgate", version, about = "Flexible and forgetful learning in gated linear networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a gated student (or two-layer network) on a blocked curriculum.
    Run(Common),
    /// Block-length grid sweep, or the teacher-similarity sweep for presets
    /// that define similarities.
    Sweep(Common),
    /// Reduced two-dimensional model from a near-symmetric start.
    Reduced(Common),
    /// Reduced model against its exact solution and the conserved quantity.
    ExactCheck(Common),
    /// Two-layer network with regularised second layer.
    Deep(Common),
    /// Training on single tasks followed by composite tasks.
    Generalize(Common),
    /// Redundant paths with a weight cost.
    ReprCost(Common),
    /// Specialisation growth for short blocks against doubled blocks.
    Blocklen(Common),
    /// Few-shot adaptation with single-sample batches.
    Fewshot(Common),
    /// Gate speed as a function of teacher rank.
    RankSpeed(Common),
    /// Full model and reduced model side by side.
    FullVsReduced(Common),
    /// Print JSON summaries of a results directory.
    Report {
        /// Results directory written by another command.
        dir: PathBuf,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Named hyperparameter set.
    #[arg(long)]
    preset: Option<String>,
    /// TOML config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this seed only.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Run seeds 0..N.
    #[arg(long)]
    seeds: Option<u64>,
    /// Output directory (default: $FLEXGATE_OUT/<command>-<preset>, or results/...).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel workers (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Override a preset parameter, e.g. --set tau_c=0.05. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Use the preset's control (forgetful) column.
    #[arg(long)]
    control: bool,
}

impl Common {
    fn inputs(&self) -> CliInputs {
        CliInputs {
            preset: self.preset.clone(),
            config: self.config.clone(),
            seed: self.seed,
            seeds: self.seeds,
            out: self.out.clone(),
            workers: self.workers,
            set: self.set.clone(),
            control: self.control,
        }
    }
}

/// Outcome of a command that completed its writes.
enum Status {
    Ok,
    Aborted(usize),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) | Error::Csv(_) => 3,
        Error::Abort(_) | Error::Model(ModelError::NonFinite(_)) | Error::Reduced(ReducedError::NonFinite(_)) => 4,
        Error::Json(j) if j.is_io() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Aborted(n)) => {
            eprintln!("error: {n} run(s) stopped on a numerical abort; partial records were written");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn dispatch(cmd: Command) -> Result<Status, Error> {
    let (name, default, common) = match &cmd {
        Command::Report { dir } => return report(dir),
        Command::Run(c) => ("run", "main", c),
        Command::Sweep(c) => ("sweep", "sweep-lr-block", c),
        Command::Reduced(c) => ("reduced", "reduced", c),
        Command::ExactCheck(c) => ("exact-check", "reduced", c),
        Command::Deep(c) => ("deep", "fc", c),
        Command::Generalize(c) => ("generalize", "task-composition", c),
        Command::ReprCost(c) => ("repr-cost", "repr-cost", c),
        Command::Blocklen(c) => ("blocklen", "blocklen", c),
        Command::Fewshot(c) => ("fewshot", "fewshot", c),
        Command::RankSpeed(c) => ("rank-speed", "rank-speed", c),
        Command::FullVsReduced(c) => ("full-vs-reduced", "full-vs-reduced", c),
    };
    let env = std::env::var(OUT_ENV).ok();
    let cfg = parse_config(&common.inputs(), default, name, env.as_deref())?;
    std::fs::create_dir_all(&cfg.out)?;
    let mut w = Writer::new(name, &cfg);
    let status = match cmd {
        Command::Run(_) | Command::Deep(_) => cmd_run(&cfg, &mut w, |_| Value::Null)?,
        Command::Generalize(_) => {
            let th = cfg.preset.threshold;
            cmd_run(&cfg, &mut w, |o| json!({ "composition": composition_result(o, th) }))?
        }
        Command::ReprCost(_) => {
            let (a, d) = (cfg.preset.active_threshold, cfg.preset.decayed_threshold);
            cmd_run(&cfg, &mut w, |o| json!({ "activity": path_activity(o, a, d) }))?
        }
        Command::Fewshot(_) => cmd_fewshot(&cfg, &mut w)?,
        Command::Sweep(_) => cmd_sweep(&cfg, &mut w)?,
        Command::Reduced(_) => cmd_reduced(&cfg, &mut w)?,
        Command::ExactCheck(_) => cmd_exact(&cfg, &mut w)?,
        Command::Blocklen(_) => cmd_blocklen(&cfg, &mut w)?,
        Command::RankSpeed(_) => {
            let r = rank_speed(&cfg.preset);
            let rows: Vec<Vec<f64>> = r.ranks.iter().zip(&r.speeds).map(|(&k, &s)| vec![k as f64, s]).collect();
            write_rows(&w.path("rank_speed.csv"), &["rank", "speed"], &rows)?;
            w.json("summary.json", &json!({ "slope": r.slope, "r2": r.r2 }))?;
            Status::Ok
        }
        Command::FullVsReduced(_) => cmd_full_vs_reduced(&cfg, &mut w)?,
        Command::Report { .. } => unreachable!(),
    };
    w.finish()?;
    Ok(status)
}

/// Collects written files and writes the manifest last.
struct Writer {
    dir: PathBuf,
    command: String,
    files: Vec<String>,
    started: Instant,
    manifest_config: Value,
    preset: String,
    seeds: Vec<u64>,
    echo: String,
}

impl Writer {
    fn new(command: &str, cfg: &ResolvedConfig) -> Self {
        let mut config = serde_json::to_value(&cfg.preset).unwrap_or(Value::Null);
        if let Value::Object(m) = &mut config {
            m.insert("variant".into(), json!(cfg.variant.as_str()));
        }
        Self {
            dir: cfg.out.clone(),
            command: command.into(),
            files: Vec::new(),
            started: Instant::now(),
            manifest_config: config,
            preset: cfg.preset.name.clone(),
            seeds: cfg.seeds.clone(),
            echo: echo_config(cfg).unwrap_or_default(),
        }
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn json<T: serde::Serialize>(&mut self, name: &str, v: &T) -> Result<(), Error> {
        let p = self.path(name);
        write_json(&p, v)
    }

    fn finish(mut self) -> Result<(), Error> {
        let p = self.path("config.toml");
        std::fs::write(p, &self.echo)?;
        let m = Manifest {
            command: self.command.clone(),
            preset: self.preset.clone(),
            config: self.manifest_config.clone(),
            seeds: self.seeds.clone(),
            version: env!("CARGO_PKG_VERSION").into(),
            wall_time_seconds: self.started.elapsed().as_secs_f64(),
            files: self.files.clone(),
        };
        write_json(&self.dir.join("manifest.json"), &m)
    }
}

fn write_outcome(w: &mut Writer, o: &RunOutcome) -> Result<(), Error> {
    let s = o.seed;
    write_record(&w.path(&format!("run_{s}.csv")), &o.record)?;
    for (m, t) in o.teachers.matrices().iter().enumerate() {
        write_matrix(&w.path(&format!("teacher_{s}_{}.csv", m + 1)), t)?;
    }
    for snap in &o.snapshots {
        let b = snap.block;
        write_matrix(&w.path(&format!("w2_{s}_block{b}_unsorted.csv")), &snap.unsorted)?;
        write_matrix(&w.path(&format!("w2_{s}_block{b}_sorted.csv")), &snap.sorted)?;
    }
    let blocks: Vec<Vec<f64>> = o
        .record
        .blocks
        .iter()
        .map(|b| vec![b.index as f64, b.phase as f64, b.start, b.end])
        .collect();
    write_rows(&w.path(&format!("blocks_{s}.csv")), &["block", "phase", "start", "end"], &blocks)
}

fn cmd_run(cfg: &ResolvedConfig, w: &mut Writer, extra: impl Fn(&RunOutcome) -> Value) -> Result<Status, Error> {
    let p = &cfg.preset;
    if p.architecture == Architecture::Reduced {
        return Err(Error::Config(format!("preset '{}' is a reduced-model preset", p.name)));
    }
    let outs = run_seeds(p, cfg.variant, &cfg.seeds, cfg.workers)?;
    let mut summaries = Vec::new();
    let mut aborted = 0;
    for o in &outs {
        write_outcome(w, o)?;
        aborted += o.record.abort.is_some() as usize;
        let mut v = serde_json::to_value(o.summary(p.threshold, p.regime_cut))?;
        if let Value::Object(m) = &mut v {
            m.insert("matched_alignment".into(), json!(matched_alignment(o)));
            if let Value::Object(e) = extra(o) {
                m.extend(e);
            }
        }
        summaries.push(v);
    }
    w.json("summary.json", &summaries)?;
    Ok(if aborted > 0 { Status::Aborted(aborted) } else { Status::Ok })
}

fn cmd_fewshot(cfg: &ResolvedConfig, w: &mut Writer) -> Result<Status, Error> {
    let outs = run_seeds(&cfg.preset, cfg.variant, &cfg.seeds, cfg.workers)?;
    let finished: Vec<RunOutcome> = outs.iter().filter(|o| o.record.abort.is_none()).cloned().collect();
    let aborted: Vec<u64> = outs.iter().filter(|o| o.record.abort.is_some()).map(|o| o.seed).collect();
    let losses = block_end_losses(&finished);
    let rows: Vec<Vec<f64>> = losses.iter().enumerate().map(|(b, &l)| vec![b as f64, l]).collect();
    write_rows(&w.path("block_end_loss.csv"), &["block", "mean_loss"], &rows)?;
    for o in &outs {
        write_record(&w.path(&format!("run_{}.csv", o.seed)), &o.record)?;
    }
    w.json(
        "summary.json",
        &json!({ "seeds": outs.len(), "finished": finished.len(), "aborted_seeds": aborted, "block_end_loss": losses }),
    )?;
    // Diverging single-sample seeds are an outcome of this experiment, not a failure.
    Ok(Status::Ok)
}

fn cmd_sweep(cfg: &ResolvedConfig, w: &mut Writer) -> Result<Status, Error> {
    let p = &cfg.preset;
    if p.grid_block_lengths.is_empty() && !p.similarities.is_empty() {
        let pts = overlap_sweep(p, &cfg.seeds, cfg.workers)?;
        let rows: Vec<Vec<f64>> = pts
            .iter()
            .map(|q| {
                vec![
                    q.similarity,
                    q.mean_total_alignment,
                    q.se_total_alignment,
                    q.mean_specialization,
                    q.se_specialization,
                ]
            })
            .collect();
        write_rows(
            &w.path("overlap.csv"),
            &["similarity", "mean_total_alignment", "se_total_alignment", "mean_specialization", "se_specialization"],
            &rows,
        )?;
        return Ok(Status::Ok);
    }
    let cells = grid_sweep(p, &cfg.seeds, cfg.workers)?;
    write_grid(&w.path("grid.csv"), &cells)?;
    w.json("summary.json", &summarize_grid(&cells))?;
    Ok(Status::Ok)
}

fn reduced_preset(cfg: &ResolvedConfig) -> Result<(), Error> {
    if cfg.preset.architecture != Architecture::Reduced {
        return Err(Error::Config(format!("preset '{}' is not a reduced-model preset", cfg.preset.name)));
    }
    Ok(())
}

fn cmd_reduced(cfg: &ResolvedConfig, w: &mut Writer) -> Result<Status, Error> {
    reduced_preset(cfg)?;
    let p = &cfg.preset;
    let start = early_state(p.tau_w, p.gate_tau(cfg.variant), REDUCED_START.0, REDUCED_START.1);
    let sched = ReducedSchedule {
        tau_b: p.tau_b,
        n_blocks: p.n_blocks,
        dt: p.dt,
        first_teacher: 0,
        stride: p.stride,
    };
    let run = simulate_reduced(start, &sched, &p.regularizer(cfg.variant), ReducedIntegrator::Free);
    write_trajectory(&w.path("trajectory.csv"), &run.samples)?;
    let states: Vec<_> = run.samples.iter().map(|s| s.state).collect();
    let t: Vec<f64> = run.samples.iter().map(|s| s.t).collect();
    write_symmetry(&w.path("symmetry.csv"), &t, &symmetry_residuals(&states))?;
    let c = run.final_state.coords();
    w.json(
        "summary.json",
        &json!({ "final_wbar": c.wbar, "final_cbar": c.cbar, "final_loss": run.final_state.task_loss(), "aborted": run.abort }),
    )?;
    Ok(if run.abort.is_some() { Status::Aborted(1) } else { Status::Ok })
}

fn cmd_exact(cfg: &ResolvedConfig, w: &mut Writer) -> Result<Status, Error> {
    reduced_preset(cfg)?;
    let p = &cfg.preset;
    let reg = p.regularizer(cfg.variant);
    let mut summary = Vec::new();
    for &tc in &p.exact_tau_cs {
        let e = exact_check(p, tc)?;
        let rows: Vec<Vec<f64>> = e.points.iter().map(|q| vec![q.t, q.cbar, q.wbar, q.wbar_exact, q.loss]).collect();
        write_rows(
            &w.path(&format!("exact_tau_c_{}.csv", fmt_tau(tc))),
            &["t", "cbar", "wbar", "wbar_exact", "loss"],
            &rows,
        )?;
        let heun = conservation_drift(p.tau_w, tc, p.tau_b, p.dt, 4, &reg, ReducedIntegrator::SymmetricHeun)?;
        let euler = conservation_drift(p.tau_w, tc, p.tau_b, p.dt, 4, &reg, ReducedIntegrator::Symmetric)?;
        summary.push(json!({
            "tau_c": tc,
            "tau_w": e.tau_w,
            "max_deviation": e.max_deviation,
            "time_to_1e-2": e.time_to_1e2,
            "final_loss": e.final_loss,
            "conservation_drift_heun": heun,
            "conservation_drift_euler": euler,
        }));
    }
    w.json("summary.json", &summary)?;
    Ok(Status::Ok)
}

fn fmt_tau(v: f64) -> String {
    format!("{v}").replace('.', "p")
}

fn cmd_blocklen(cfg: &ResolvedConfig, w: &mut Writer) -> Result<Status, Error> {
    reduced_preset(cfg)?;
    let p = &cfg.preset;
    let start = early_state(p.tau_w, p.gate_tau(cfg.variant), REDUCED_START.0, REDUCED_START.1);
    let periods = (p.n_blocks / 4).max(1);
    let reg = p.regularizer(cfg.variant);
    let mut rows = Vec::new();
    for k in 0..4 {
        let tb = p.tau_b / f64::powi(2.0, k);
        let r = blocklength_ratio(start, tb, p.dt.min(tb / 10.0), periods, &reg)?;
        rows.push(vec![r.tau_b, r.total_time, r.growth_short, r.growth_long, r.ratio]);
    }
    write_rows(
        &w.path("blocklen.csv"),
        &["tau_b", "total_time", "growth_short", "growth_long", "ratio"],
        &rows,
    )?;
    Ok(Status::Ok)
}

fn cmd_full_vs_reduced(cfg: &ResolvedConfig, w: &mut Writer) -> Result<Status, Error> {
    let mut aborted = 0;
    let mut summary = Vec::new();
    for &seed in &cfg.seeds {
        let r = full_vs_reduced(&cfg.preset, seed)?;
        let rows: Vec<Vec<f64>> = r
            .points
            .iter()
            .map(|q| {
                vec![
                    q.t,
                    q.block as f64,
                    q.loss_full,
                    q.loss_reduced,
                    q.c_full[0],
                    q.c_full[1],
                    q.c_reduced[0],
                    q.c_reduced[1],
                    q.residual_fraction,
                ]
            })
            .collect();
        write_rows(
            &w.path(&format!("full_vs_reduced_{seed}.csv")),
            &["t", "block", "loss_full", "loss_reduced", "c1_full", "c2_full", "c1_reduced", "c2_reduced", "residual_fraction"],
            &rows,
        )?;
        aborted += r.abort.is_some() as usize;
        summary.push(json!({
            "seed": seed,
            "tau_c_reduced": r.tau_c_reduced,
            "max_loss_gap": r.max_loss_gap,
            "max_gate_gap": r.max_gate_gap,
            "final_residual_fraction": r.final_residual_fraction,
            "aborted": r.abort,
        }));
    }
    w.json("summary.json", &summary)?;
    Ok(if aborted > 0 { Status::Aborted(aborted) } else { Status::Ok })
}

fn report(dir: &Path) -> Result<Status, Error> {
    let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
    let mut out = json!({
        "command": manifest.command,
        "preset": manifest.preset,
        "seeds": manifest.seeds,
        "wall_time_seconds": manifest.wall_time_seconds,
    });
    let grid = dir.join("grid.csv");
    if grid.exists() {
        out["cells"] = serde_json::to_value(summarize_grid(&read_grid(&grid)?))?;
    }
    let summary = dir.join("summary.json");
    if summary.exists() {
        let v: Value = read_json(&summary)?;
        out["summary"] = v;
    }
    let figures: Vec<&str> = FIGURE_INPUTS
        .iter()
        .map(|(id, _)| *id)
        .filter(|id| check_figure_inputs(id, dir).is_ok())
        .collect();
    out["figures"] = json!(figures);
    let text = serde_json::to_string_pretty(&out)?;
    match writeln!(std::io::stdout(), "{text}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(Status::Ok),
    }
}
