use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flexgate::io::{read_grid, read_json, read_table, Manifest};

fn flexgate(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_flexgate"));
    c.args(args).env_remove("FLEXGATE_OUT");
    if let Some(p) = env_out {
        c.env("FLEXGATE_OUT", p);
    }
    c.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn run_ok(args: &[&str]) -> Output {
    let o = flexgate(args, None);
    assert_eq!(code(&o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
    o
}

#[test]
fn run_writes_record_manifest_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = out.to_str().unwrap();
    run_ok(&["run", "--preset", "main", "--seed", "0", "--out", o, "--set", "n_blocks=2"]);
    let t = read_table(&out.join("run_0.csv")).unwrap();
    for col in ["t", "block", "loss_task", "c1", "c2", "align_1_1", "align_2_2", "total_alignment", "wbar", "cbar"] {
        assert!(t.column(col).is_some(), "missing {col}");
    }
    let m: Manifest = read_json(&out.join("manifest.json")).unwrap();
    assert_eq!(m.command, "run");
    assert_eq!(m.preset, "main");
    assert_eq!(m.seeds, vec![0]);
    assert_eq!(m.config["n_blocks"], 2);
    assert_eq!(m.config["variant"], "main");
    assert!(m.files.contains(&"run_0.csv".to_string()));
    let s: serde_json::Value = read_json(&out.join("summary.json")).unwrap();
    let s0 = &s[0];
    assert!(s0["final_total_alignment"].is_number());
    assert_eq!(s0["per_block_time_to_threshold"].as_array().unwrap().len(), 2);
    assert!(s0["regime_label"].is_string());
    assert!(out.join("teacher_0_1.csv").exists());
}

#[test]
fn echoed_config_reproduces_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok(&[
        "run", "--seed", "3", "--out", a.to_str().unwrap(), "--set", "n_blocks=2", "--set", "tau_c=0.05", "--control",
    ]);
    let cfg = a.join("config.toml");
    run_ok(&["run", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()]);
    assert_eq!(fs::read(a.join("run_3.csv")).unwrap(), fs::read(b.join("run_3.csv")).unwrap());
    let m: Manifest = read_json(&b.join("manifest.json")).unwrap();
    assert_eq!(m.config["variant"], "control");
    assert_eq!(m.config["tau_c"], 0.05);
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "preset = \"main\"\nseeds = [1, 2]\n\n[params]\nn_blocks = 3\ntau_c = 0.05\n").unwrap();
    let out = dir.path().join("o");
    run_ok(&[
        "run", "--config", cfg.to_str().unwrap(), "--seed", "0", "--set", "n_blocks=1", "--out", out.to_str().unwrap(),
    ]);
    let m: Manifest = read_json(&out.join("manifest.json")).unwrap();
    assert_eq!(m.seeds, vec![0]);
    assert_eq!(m.config["n_blocks"], 1);
    assert_eq!(m.config["tau_c"], 0.05);
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = flexgate(&["run", "--seed", "0", "--set", "n_blocks=1"], Some(dir.path()));
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("run-main").join("run_0.csv").exists());
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = flexgate(&["run", "--preset", "nope", "--out", out], None);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown preset 'nope'"));
    let o = flexgate(&["run", "--set", "tau_x=1", "--out", out], None);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau_x"));
    assert_eq!(code(&flexgate(&["run", "--set", "n_blocks=abc", "--out", out], None)), 2);
    assert_eq!(code(&flexgate(&["run", "--set", "dt=-1", "--out", out], None)), 2);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "preset = \"main\"\nbogus = 1\n").unwrap();
    assert_eq!(code(&flexgate(&["run", "--config", bad.to_str().unwrap(), "--out", out], None)), 2);
    assert_eq!(code(&flexgate(&["reduced", "--preset", "main", "--out", out], None)), 2);
    assert_eq!(code(&flexgate(&["run", "--no-such-flag"], None)), 2);
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("file");
    fs::write(&file, "x").unwrap();
    let out = file.join("sub");
    let o = flexgate(&["run", "--seed", "0", "--set", "n_blocks=1", "--out", out.to_str().unwrap()], None);
    assert_eq!(code(&o), 3);
    assert_eq!(code(&flexgate(&["report", dir.path().join("missing").to_str().unwrap()], None)), 3);
}

#[test]
fn numerical_abort_exits_4_with_partial_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = flexgate(
        &[
            "run", "--seed", "0", "--out", out.to_str().unwrap(), "--set", "n_blocks=2", "--set", "dt=0.5", "--set",
            "tau_b=20", "--set", "tau_c=0.0001", "--set", "tau_w=0.001",
        ],
        None,
    );
    assert_eq!(code(&o), 4);
    let s: serde_json::Value = read_json(&out.join("summary.json")).unwrap();
    assert!(s[0]["aborted"]["param"].is_string());
    assert!(out.join("run_0.csv").exists());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn sweep_grid_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("s");
    run_ok(&[
        "sweep", "--preset", "sweep-lr-block", "--seeds", "2", "--out", out.to_str().unwrap(), "--workers", "1",
        "--set", "grid_block_lengths=0.5,1", "--set", "grid_axis2=1,20", "--set", "sweep_total_time=1",
    ]);
    let t = read_table(&out.join("grid.csv")).unwrap();
    assert_eq!(&t.header[..4], &["axis1", "axis2", "seed", "total_alignment"]);
    let cells = read_grid(&out.join("grid.csv")).unwrap();
    assert_eq!(cells.len(), 8);
    let o = run_ok(&["report", out.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let c = v["cells"].as_array().unwrap();
    assert_eq!(c.len(), 4);
    assert_eq!(c[0]["n"], 2);
    assert!(c[0]["mean"].is_number() && c[0]["se"].is_number());
}

#[test]
fn reduced_family_commands_write_their_tables() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    run_ok(&["reduced", "--out", d("r").to_str().unwrap(), "--set", "n_blocks=2"]);
    let t = read_table(&d("r").join("trajectory.csv")).unwrap();
    assert_eq!(t.header, flexgate::io::TRAJECTORY_HEADER);
    assert!(d("r").join("symmetry.csv").exists());

    run_ok(&["exact-check", "--out", d("e").to_str().unwrap(), "--set", "exact_tau_cs=0.1"]);
    let t = read_table(&d("e").join("exact_tau_c_0p1.csv")).unwrap();
    assert!(t.column("wbar_exact").is_some());

    run_ok(&["blocklen", "--out", d("b").to_str().unwrap(), "--set", "dt=0.001"]);
    assert_eq!(read_table(&d("b").join("blocklen.csv")).unwrap().rows.len(), 4);

    run_ok(&["rank-speed", "--out", d("k").to_str().unwrap(), "--set", "d_in=5", "--set", "d_out=5"]);
    assert_eq!(read_table(&d("k").join("rank_speed.csv")).unwrap().rows.len(), 5);

    run_ok(&["full-vs-reduced", "--out", d("f").to_str().unwrap(), "--set", "n_blocks=2", "--set", "stride=100"]);
    assert!(read_table(&d("f").join("full_vs_reduced_0.csv")).unwrap().column("loss_reduced").is_some());
}

#[test]
fn curriculum_family_commands_write_their_extras() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    run_ok(&["deep", "--seed", "0", "--out", d("d").to_str().unwrap(), "--set", "n_blocks=2", "--set", "stride=100"]);
    assert!(d("d").join("w2_0_block1_sorted.csv").exists());
    assert!(d("d").join("w2_0_block1_unsorted.csv").exists());

    run_ok(&[
        "generalize", "--seed", "0", "--out", d("g").to_str().unwrap(), "--set", "n_blocks=4", "--set", "train_blocks=3",
        "--set", "stride=100",
    ]);
    let s: serde_json::Value = read_json(&d("g").join("summary.json")).unwrap();
    assert!(s[0]["composition"]["excluded_gates"].is_array());

    run_ok(&["repr-cost", "--seed", "0", "--out", d("p").to_str().unwrap(), "--set", "n_blocks=2", "--set", "stride=100"]);
    let s: serde_json::Value = read_json(&d("p").join("summary.json")).unwrap();
    assert_eq!(s[0]["activity"]["max_gates"].as_array().unwrap().len(), 4);

    run_ok(&["fewshot", "--seeds", "3", "--out", d("s").to_str().unwrap(), "--set", "n_blocks=2"]);
    let s: serde_json::Value = read_json(&d("s").join("summary.json")).unwrap();
    assert_eq!(s["seeds"], 3);
    assert!(d("s").join("block_end_loss.csv").exists());

    run_ok(&[
        "sweep", "--preset", "nonortho", "--seeds", "1", "--out", d("n").to_str().unwrap(), "--set",
        "similarities=0,0.5", "--set", "n_blocks=2",
    ]);
    let t = read_table(&d("n").join("overlap.csv")).unwrap();
    assert_eq!(t.rows.len(), 2);
    assert!(t.column("mean_specialization").is_some());
}
