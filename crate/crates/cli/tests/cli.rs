use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vbsf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vbsf"))
        .args(args)
        .output()
        .expect("failed to run vbsf")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth(dir: &Path) {
    let spec = dir.join("spec.json");
    fs::write(
        &spec,
        r#"{"m": 8, "t_total": 24, "true_rank": 2, "observe_fraction": 0.8}"#,
    )
    .unwrap();
    let out = vbsf(&[
        "synth",
        "--config",
        spec.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        dir.to_str().unwrap(),
    ]);
    ok(&out);
}

fn csv_shape(path: &Path) -> (usize, usize) {
    let text = fs::read_to_string(path).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    (rows.len(), rows[0].split(',').count())
}

#[test]
fn synth_writes_observed_and_truth() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    assert_eq!(csv_shape(&dir.path().join("observed.csv")), (8, 24));
    assert_eq!(csv_shape(&dir.path().join("truth.csv")), (8, 24));
    let observed = fs::read_to_string(dir.path().join("observed.csv")).unwrap();
    assert!(observed.contains(",,") || observed.lines().any(|l| l.starts_with(',') || l.ends_with(',')));
}

#[test]
fn impute_batch_and_online() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let input = dir.path().join("observed.csv");
    for (sub, extra) in [("batch", None), ("online", Some("--online"))] {
        let out_dir = dir.path().join(sub);
        let mut args = vec![
            "impute",
            "--input",
            input.to_str().unwrap(),
            "--rank",
            "3",
            "--window",
            "11",
            "--out",
            out_dir.to_str().unwrap(),
        ];
        args.extend(extra);
        ok(&vbsf(&args));
        assert_eq!(csv_shape(&out_dir.join("imputed.csv")), (8, 24));
        let report: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
        assert_eq!(report["rank"], 3);
    }
}

#[test]
fn fit_and_forecast_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let input = dir.path().join("observed.csv");
    let out = dir.path().join("fit");
    ok(&vbsf(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--window",
        "23",
        "--variant",
        "em",
        "--out",
        out.to_str().unwrap(),
    ]));
    let state = vbsf_core::snapshot::load(out.join("state.json")).unwrap();
    assert_eq!(state.cfg.variant, vbsf_core::Variant::Em);

    let out = dir.path().join("fc");
    ok(&vbsf(&[
        "forecast",
        "--input",
        input.to_str().unwrap(),
        "--window",
        "23",
        "--horizon",
        "3",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(csv_shape(&out.join("forecast.csv")), (8, 3));
}

#[test]
fn bench_report_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bench.json");
    fs::write(
        &cfg,
        r#"{
            "kind": "prediction",
            "data": {"source": "synthetic", "spec": {"m": 6, "t_total": 30, "true_rank": 2}},
            "model": {"rank": 3, "h": 7, "max_iters": 30},
            "horizons": [1, 2],
            "train_columns": 20,
            "pretrain_max_iters": 50
        }"#,
    )
    .unwrap();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        ok(&vbsf(&[
            "bench",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert!(out.join("timing.json").exists());
        let series = fs::read_to_string(out.join("mre_series.csv")).unwrap();
        assert!(series.starts_with("label,horizon,outlier_scale,seed,group,mre"));
        assert!(series.contains("vbsf_h2"));
        reports.push(fs::read(out.join("report.json")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn inject_outliers_writes_corrupted_copy() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = dir.path().join("inj");
    ok(&vbsf(&[
        "inject-outliers",
        "--input",
        dir.path().join("observed.csv").to_str().unwrap(),
        "--fraction",
        "0.1",
        "--out",
        out.to_str().unwrap(),
    ]));
    assert_eq!(csv_shape(&out.join("corrupted.csv")), (8, 24));
    let locs: Vec<(usize, usize)> =
        serde_json::from_str(&fs::read_to_string(out.join("outliers.json")).unwrap()).unwrap();
    assert!(!locs.is_empty());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let input = dir.path().join("observed.csv");
    let out = vbsf(&["impute", "--input", input.to_str().unwrap(), "--rank", "99"]);
    assert_eq!(out.status.code(), Some(2));

    let out = vbsf(&["fit", "--input", dir.path().join("missing.csv").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{").unwrap();
    let out = vbsf(&["bench", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));

    let out = vbsf(&["bench", "--variant", "xyz"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unreachable_server_fails() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let out = vbsf(&[
        "impute",
        "--server",
        "http://127.0.0.1:9",
        "--input",
        dir.path().join("observed.csv").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert_ne!(out.status.code(), Some(2));
}
