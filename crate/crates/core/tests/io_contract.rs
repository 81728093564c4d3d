use std::fs;

use flexgate::error::Error;
use flexgate::experiments::runner::RunSummary;
use flexgate::experiments::{preset, run_curriculum, GridCell, Variant};
use flexgate::io::{
    check_figure_inputs, fmt_f64, parse_f64, read_grid, read_json, read_matrix, read_table, write_grid, write_json,
    write_matrix, write_record, write_rows, write_trajectory, Manifest, FIGURE_INPUTS, TRAJECTORY_HEADER,
};
use flexgate::reduced::{simulate_reduced, teacher_target, ReducedIntegrator, ReducedSchedule, ReducedState};
use flexgate::model::RegularizerConfig;
use ndarray::Array2;
use proptest::prelude::*;

proptest! {
    #[test]
    fn floats_round_trip_bit_exactly(bits in any::<u64>()) {
        let v = f64::from_bits(bits);
        let back = parse_f64(&fmt_f64(v)).unwrap();
        if v.is_nan() {
            prop_assert!(back.is_nan());
        } else {
            prop_assert_eq!(back.to_bits(), v.to_bits());
        }
    }
}

#[test]
fn run_record_csv_has_documented_header_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = preset("main").unwrap();
    p.n_blocks = 2;
    p.stride = 100;
    let out = run_curriculum(&p, Variant::Main, 0).unwrap();
    let path = dir.path().join("run_0.csv");
    write_record(&path, &out.record).unwrap();
    let t = read_table(&path).unwrap();
    let expected = [
        "t", "block", "phase", "task", "loss_task", "loss_batch", "loss_reg", "c1", "c2", "align_1_1", "align_1_2",
        "align_2_1", "align_2_2", "total_alignment", "dW1", "dW2", "dc", "wbar", "cbar", "wbarbar",
    ];
    assert_eq!(t.header, expected);
    assert_eq!(t.rows.len(), out.record.rows.len());
    let loss = t.f64_column("loss_task").unwrap();
    for (a, r) in loss.iter().zip(&out.record.rows) {
        assert_eq!(a.to_bits(), r.loss_task.to_bits());
    }
    let ta = t.f64_column("total_alignment").unwrap();
    assert_eq!(ta.last().unwrap().to_bits(), out.record.last().unwrap().total_alignment.to_bits());
}

#[test]
fn missing_column_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.csv");
    write_rows(&path, &["a", "b"], &[vec![1.0, 2.0]]).unwrap();
    let t = read_table(&path).unwrap();
    let e = t.f64_column("c").unwrap_err();
    assert!(e.to_string().contains("missing column 'c'"), "{e}");

    let g = dir.path().join("grid.csv");
    write_rows(&g, &["axis1", "axis2", "seed"], &[vec![1.0, 2.0, 0.0]]).unwrap();
    let e = read_grid(&g).unwrap_err();
    assert!(e.to_string().contains("total_alignment"), "{e}");
}

#[test]
fn grid_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cells = vec![
        GridCell { axis1: 0.1, axis2: 1.0 / 3.0, seed: 0, total_alignment: 0.123456789012345678, aborted: false },
        GridCell { axis1: 10.0, axis2: 2.0, seed: 7, total_alignment: f64::NAN, aborted: true },
    ];
    let path = dir.path().join("grid.csv");
    write_grid(&path, &cells).unwrap();
    let back = read_grid(&path).unwrap();
    assert_eq!(back[0], cells[0]);
    assert_eq!(back[1].seed, 7);
    assert!(back[1].aborted && back[1].total_alignment.is_nan());
    let t = read_table(&path).unwrap();
    assert_eq!(&t.header[..4], &["axis1", "axis2", "seed", "total_alignment"]);
}

#[test]
fn matrix_and_json_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = Array2::from_shape_fn((3, 4), |(i, j)| (i as f64 + 1.0) / (j as f64 + 7.0));
    let path = dir.path().join("m.csv");
    write_matrix(&path, &m).unwrap();
    assert_eq!(read_matrix(&path).unwrap(), m);

    let mut p = preset("main").unwrap();
    p.n_blocks = 1;
    let s: RunSummary = run_curriculum(&p, Variant::Control, 2).unwrap().summary(0.1, 0.8);
    let jp = dir.path().join("summary.json");
    write_json(&jp, &s).unwrap();
    assert_eq!(read_json::<RunSummary>(&jp).unwrap(), s);
    let v: serde_json::Value = read_json(&jp).unwrap();
    for key in ["final_total_alignment", "per_block_time_to_threshold", "regime_label"] {
        assert!(v.get(key).is_some(), "{key}");
    }

    let man = Manifest {
        command: "run".into(),
        preset: "main".into(),
        config: serde_json::to_value(&p).unwrap(),
        seeds: vec![0, 1],
        version: "0".into(),
        wall_time_seconds: 0.5,
        files: vec!["run_0.csv".into()],
    };
    let mp = dir.path().join("manifest.json");
    write_json(&mp, &man).unwrap();
    assert_eq!(read_json::<Manifest>(&mp).unwrap(), man);
}

#[test]
fn trajectory_has_documented_header() {
    let dir = tempfile::tempdir().unwrap();
    let run = simulate_reduced(
        ReducedState::specialized(5.0, 0.7, teacher_target(0)),
        &ReducedSchedule { tau_b: 0.1, n_blocks: 2, dt: 0.01, first_teacher: 1, stride: 2 },
        &RegularizerConfig::none(),
        ReducedIntegrator::Free,
    );
    let path = dir.path().join("trajectory.csv");
    write_trajectory(&path, &run.samples).unwrap();
    let t = read_table(&path).unwrap();
    assert_eq!(t.header, TRAJECTORY_HEADER);
    assert_eq!(t.rows.len(), run.samples.len());
    let w = t.f64_column("wbar").unwrap();
    assert_eq!(w[3].to_bits(), run.samples[3].state.coords().wbar.to_bits());
}

#[test]
fn figure_inputs_report_missing_files_and_columns() {
    let dir = tempfile::tempdir().unwrap();
    let e = check_figure_inputs("fig4", dir.path()).unwrap_err();
    assert!(matches!(e, Error::Io(_)));
    assert!(e.to_string().contains("grid.csv"), "{e}");

    write_rows(&dir.path().join("grid.csv"), &["axis1", "axis2", "seed"], &[]).unwrap();
    let e = check_figure_inputs("fig4", dir.path()).unwrap_err();
    assert!(e.to_string().contains("grid.csv is missing column 'total_alignment'"), "{e}");

    fs::remove_file(dir.path().join("grid.csv")).unwrap();
    write_grid(&dir.path().join("grid.csv"), &[]).unwrap();
    assert_eq!(check_figure_inputs("fig4", dir.path()).unwrap().len(), 1);

    assert!(check_figure_inputs("fig99", dir.path()).is_err());
}

#[test]
fn run_outputs_satisfy_fig2() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = preset("main").unwrap();
    p.n_blocks = 1;
    p.stride = 100;
    let out = run_curriculum(&p, Variant::Main, 0).unwrap();
    write_record(&dir.path().join("run_0.csv"), &out.record).unwrap();
    write_json(&dir.path().join("summary.json"), &vec![out.summary(0.1, 0.8)]).unwrap();
    check_figure_inputs("fig2", dir.path()).unwrap();
    assert_eq!(FIGURE_INPUTS.len(), 12);
}
