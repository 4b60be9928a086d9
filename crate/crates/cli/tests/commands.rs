use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use monotone_pwl::data::synthetic_target;
use monotone_pwl::model::{HiddenActivation, MlpModel, OutputActivation};

fn pwl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pwl"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pwl(args);
    assert!(
        out.status.success(),
        "pwl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_synthetic(dir: &Path, n: &str) -> std::path::PathBuf {
    let path = dir.join("data.csv");
    ok(&["generate", "--n", n, "--seed", "7", "--out", p(&path)]);
    path
}

#[test]
fn generate_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    ok(&["generate", "--n", "10000", "--seed", "7", "--out", p(&a)]);
    ok(&["generate", "--n", "10000", "--seed", "7", "--out", p(&b)]);
    let text = fs::read(&a).unwrap();
    assert_eq!(text, fs::read(&b).unwrap());
    assert_eq!(String::from_utf8(text).unwrap().lines().count(), 10_001);

    let out = pwl(&["generate", "--n", "0", "--out", p(&a)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn default_generate_has_ten_thousand_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.csv");
    ok(&["generate", "--out", p(&path)]);
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("x,y,target\n"));
    assert_eq!(text.lines().count(), 10_001);
}

#[test]
fn zero_weight_and_plain_flag_give_identical_models() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synthetic(dir.path(), "300");
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    let common = [
        "train",
        "--data",
        p(&data),
        "--epochs",
        "3",
        "--batch-size",
        "32",
        "--seed",
        "3",
    ];
    let mut with_zero = common.to_vec();
    with_zero.extend(["--monotone", "1:+", "--penalty-weight", "0", "--out", p(&a)]);
    ok(&with_zero);
    let mut plain = common.to_vec();
    plain.extend(["--monotone", "1:+", "--plain", "--out", p(&b)]);
    ok(&plain);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let log = fs::read_to_string(dir.path().join("a.txt.log.csv")).unwrap();
    assert!(log.starts_with("epoch,empirical,penalty,mk_1,seconds\n"));
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn missing_dataset_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = pwl(&[
        "train",
        "--data",
        p(&dir.path().join("nope.csv")),
        "--out",
        p(&dir.path().join("m.txt")),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.csv"));
}

#[test]
fn divergence_exits_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synthetic(dir.path(), "64");
    let model = dir.path().join("m.txt");
    let out = pwl(&[
        "train",
        "--data",
        p(&data),
        "--monotone",
        "1:+",
        "--learning-rate",
        "1e200",
        "--batch-size",
        "8",
        "--epochs",
        "3",
        "--out",
        p(&model),
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(dir.path().join("m.txt.last-finite").exists());
}

#[test]
fn config_file_is_merged_and_checked() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synthetic(dir.path(), "100");
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# sweep point\ndata = {}\nepochs = 2\nbatch-size = 10\nmonotone = 1:+\n",
            data.display()
        ),
    )
    .unwrap();
    let model = dir.path().join("m.txt");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--epochs",
        "1",
        "--out",
        p(&model),
    ]);
    let log = fs::read_to_string(dir.path().join("m.txt.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2, "flag overrides the file's epochs");

    fs::write(&cfg, "epochs = 2\nlearning_rat = 0.1\n").unwrap();
    let out = pwl(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data),
        "--out",
        p(&model),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

fn write_model(path: &Path, weights: Vec<f64>, output: OutputActivation) {
    MlpModel::from_params(&[2, 1], HiddenActivation::Tanh, output, weights)
        .unwrap()
        .save(path)
        .unwrap();
}

#[test]
fn evaluate_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synthetic(dir.path(), "200");
    let model = dir.path().join("id.txt");
    // score = y: identity in the monotone feature.
    write_model(&model, vec![0.0, 1.0, 0.0], OutputActivation::Identity);
    let report = dir.path().join("report.json");
    let csv = dir.path().join("csv");
    ok(&[
        "evaluate",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--monotone",
        "1:+",
        "--csv-dir",
        p(&csv),
        "--out",
        p(&report),
    ]);
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["task"], "regression");
    assert_eq!(json["monotonicity"][0]["mk"], 1.0);
    assert_eq!(json["mean_mk"], 1.0);
    assert!(json["mse"].as_f64().unwrap() > 0.0);
    assert!(json["seconds"].is_number());
    assert_eq!(
        fs::read_to_string(csv.join("mk.csv")).unwrap(),
        "feature,mk\n1,1\n"
    );
    let deltas = fs::read_to_string(csv.join("delta_1.csv")).unwrap();
    assert_eq!(deltas.lines().count(), 201);
}

#[test]
fn evaluate_rejects_task_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cls.csv");
    fs::write(&data, "a,b,label\n0.1,0.2,0\n0.3,0.9,1\n0.5,0.5,1\n").unwrap();
    let model = dir.path().join("reg.txt");
    write_model(&model, vec![1.0, 1.0, 0.0], OutputActivation::Identity);
    let out = pwl(&["evaluate", "--model", p(&model), "--data", p(&data)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));

    let cls_model = dir.path().join("cls.txt");
    write_model(&cls_model, vec![1.0, 1.0, 0.0], OutputActivation::Sigmoid);
    let out = ok(&["evaluate", "--model", p(&cls_model), "--data", p(&data)]);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(json["auc"], 1.0);
}

fn read_grid(path: &Path) -> Vec<(f64, f64, f64)> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x,y,f"));
    lines
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|s| s.parse().unwrap()).collect();
            (v[0], v[1], v[2])
        })
        .collect()
}

#[test]
fn contour_exports() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("target.csv");
    ok(&[
        "export-contour",
        "--target",
        "--resolution",
        "3",
        "--out",
        p(&target),
    ]);
    let grid = read_grid(&target);
    assert_eq!(grid.len(), 9);
    assert_eq!((grid[1].0, grid[1].1), (0.0, 0.5));
    for (x, y, f) in grid {
        assert_eq!(f, synthetic_target(x, y));
    }

    let data = small_synthetic(dir.path(), "200");
    let model = dir.path().join("m.txt");
    ok(&[
        "train",
        "--data",
        p(&data),
        "--epochs",
        "2",
        "--batch-size",
        "20",
        "--monotone",
        "1:+",
        "--out",
        p(&model),
    ]);
    let contour = dir.path().join("c.csv");
    ok(&[
        "export-contour",
        "--model",
        p(&model),
        "--resolution",
        "7",
        "--out",
        p(&contour),
    ]);
    let trained = MlpModel::load(&model).unwrap();
    for (x, y, f) in read_grid(&contour) {
        assert!((f - trained.forward(&[x, y]).unwrap().output).abs() <= 1e-12);
    }

    let wide = dir.path().join("wide.txt");
    MlpModel::from_params(
        &[3, 1],
        HiddenActivation::Tanh,
        OutputActivation::Identity,
        vec![1.0; 4],
    )
    .unwrap()
    .save(&wide)
    .unwrap();
    let out = pwl(&["export-contour", "--model", p(&wide), "--out", p(&contour)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn trend_exports() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synthetic(dir.path(), "50");
    let model = dir.path().join("lin.txt");
    write_model(&model, vec![0.5, 2.0, 0.1], OutputActivation::Identity);
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    let args = |out: &Path| {
        ok(&[
            "export-trends",
            "--model",
            p(&model),
            "--data",
            p(&data),
            "--feature",
            "y",
            "--anchors",
            "1",
            "--seed",
            "4",
            "--out",
            p(out),
        ])
    };
    args(&a);
    args(&b);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|s| s.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 20);
    assert!(rows.iter().all(|r| r[0] == rows[0][0] && r[1] == 1.0));
    // A single straight line with slope 2.
    for w in rows.windows(2) {
        let slope = (w[1][3] - w[0][3]) / (w[1][2] - w[0][2]);
        assert!((slope - 2.0).abs() < 1e-9);
    }

    let ten = dir.path().join("ten.csv");
    ok(&[
        "export-trends",
        "--model",
        p(&model),
        "--data",
        p(&data),
        "--feature",
        "1",
        "--anchors",
        "10",
        "--out",
        p(&ten),
    ]);
    let ids: std::collections::BTreeSet<String> = fs::read_to_string(&ten)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap().to_string())
        .collect();
    assert_eq!(ids.len(), 10);
}
