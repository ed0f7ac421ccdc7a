//! End-to-end checks of the `itw` binary: artifacts, exit codes, and
//! byte-for-byte reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use intertwiner::intertwiner::{ActivationKind, Element};
use intertwiner::metrics::{write_features, FeatureData};
use intertwiner::network::NetworkSpec;
use intertwiner::numerics::Rng;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_itw")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .env_remove("ITW_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("itw-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_spec(dir: &Path, name: &str, spec: &NetworkSpec) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(spec).unwrap()).unwrap();
    path
}

fn small_spec() -> NetworkSpec {
    NetworkSpec::mlp(vec![3, 12, 2], ActivationKind::Relu).unwrap()
}

#[test]
fn version_and_help_run_clean() {
    let out = run(&["--version"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("itw"));
    assert!(text.contains("ITWF1"));
    assert!(run(&["--help"]).status.success());
}

#[test]
fn train_produces_artifacts_and_is_reproducible() {
    let dir = tmp("train");
    let spec_path = write_spec(&dir, "spec.json", &small_spec());
    let run_train = |out: &str| {
        run(&[
            "train",
            "--spec",
            spec_path.to_str().unwrap(),
            "--data",
            "blobs",
            "--out",
            dir.join(out).to_str().unwrap(),
            "--seed",
            "7",
            "--epochs",
            "12",
            "--lr",
            "0.01",
            "--n",
            "600",
        ])
    };
    let out = run_train("a");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["weights.json", "history.csv", "manifest.json"] {
        assert!(dir.join("a").join(f).exists(), "{f} missing");
    }
    // The blobs task is easy: the history must reach 95% validation
    // accuracy.
    let history = std::fs::read_to_string(dir.join("a/history.csv")).unwrap();
    let best: f64 = history
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .fold(0.0, f64::max);
    assert!(best >= 0.95, "best acc {best}");

    let out = run_train("b");
    assert!(out.status.success());
    let wa = std::fs::read(dir.join("a/weights.json")).unwrap();
    let wb = std::fs::read(dir.join("b/weights.json")).unwrap();
    assert_eq!(wa, wb, "same seed must reproduce identical weight files");
    let ha = std::fs::read(dir.join("a/history.csv")).unwrap();
    let hb = std::fs::read(dir.join("b/history.csv")).unwrap();
    assert_eq!(ha, hb);
}

#[test]
fn bad_spec_exits_2_naming_the_problem() {
    let dir = tmp("badspec");
    let path = dir.join("spec.json");
    std::fs::write(
        &path,
        r#"{"dims":[3,12,2],"activation":[{"kind":"leaky_relu","slope":1.0}],"batchnorm":[false],"residual":null}"#,
    )
    .unwrap();
    let out = run(&[
        "train",
        "--spec",
        path.to_str().unwrap(),
        "--data",
        "blobs",
        "--out",
        dir.join("x").to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("slope"), "stderr should name the field: {err}");
}

#[test]
fn transform_identity_is_bitwise_and_random_verifies() {
    let dir = tmp("transform");
    let spec_path = write_spec(&dir, "spec.json", &small_spec());
    let out = run(&[
        "train",
        "--spec",
        spec_path.to_str().unwrap(),
        "--data",
        "blobs",
        "--out",
        dir.join("model").to_str().unwrap(),
        "--seed",
        "3",
        "--epochs",
        "4",
        "--n",
        "300",
    ]);
    assert!(out.status.success());
    let weights = dir.join("model/weights.json");

    // Identity assignment file.
    let identity = serde_json::json!({
        "elements": [Element::identity(ActivationKind::Relu, 12).to_json()],
    });
    let ass_path = dir.join("identity.json");
    std::fs::write(&ass_path, identity.to_string()).unwrap();
    let out_file = dir.join("id/out.json");
    let out = run(&[
        "transform",
        "--weights",
        weights.to_str().unwrap(),
        "--assignment",
        ass_path.to_str().unwrap(),
        "--seed",
        "1",
        "--out",
        out_file.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(&weights).unwrap(),
        std::fs::read(&out_file).unwrap(),
        "identity action must reproduce the weight file byte for byte"
    );

    // Random assignment: the report must show a tiny deviation.
    let out_file = dir.join("rand/out.json");
    let out = run(&[
        "transform",
        "--weights",
        weights.to_str().unwrap(),
        "--assignment",
        "random",
        "--seed",
        "5",
        "--out",
        out_file.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("rand/out.report.json")).unwrap(),
    )
    .unwrap();
    let dev = report["max_function_deviation"].as_f64().unwrap();
    assert!(dev < 1e-9, "deviation {dev}");
}

#[test]
fn transform_unequal_residual_exits_2_without_force() {
    let dir = tmp("residual");
    let spec = NetworkSpec::new(
        vec![3, 8, 8, 8, 8, 8, 2],
        vec![ActivationKind::Relu; 5],
        vec![false; 5],
        Some(intertwiner::network::ResidualSpec {
            layers: vec![3, 5],
            block_depth: 2,
        }),
    )
    .unwrap();
    let spec_path = write_spec(&dir, "spec.json", &spec);
    let out = run(&[
        "train",
        "--spec",
        spec_path.to_str().unwrap(),
        "--data",
        "blobs",
        "--out",
        dir.join("model").to_str().unwrap(),
        "--seed",
        "2",
        "--epochs",
        "2",
        "--n",
        "200",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    // Unequal elements on the skip-connected layers.
    let mut rng = Rng::new(9);
    let elements: Vec<serde_json::Value> = (1..=5)
        .map(|_| {
            Element::Monomial(
                intertwiner::intertwiner::random_element(ActivationKind::Relu, 8, &mut rng)
                    .unwrap(),
            )
            .to_json()
        })
        .collect();
    let ass_path = dir.join("unequal.json");
    std::fs::write(&ass_path, serde_json::json!({ "elements": elements }).to_string()).unwrap();
    let weights_path = dir.join("model/weights.json");
    let broken_path = dir.join("broken.json");
    let args = [
        "transform",
        "--weights",
        weights_path.to_str().unwrap(),
        "--assignment",
        ass_path.to_str().unwrap(),
        "--seed",
        "1",
        "--out",
        broken_path.to_str().unwrap(),
    ];
    let out = run(&args);
    assert_eq!(out.status.code(), Some(2), "guarded without --force");
    let mut forced: Vec<&str> = args.to_vec();
    forced.push("--force");
    let out = run(&forced);
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("broken.report.json")).unwrap(),
    )
    .unwrap();
    assert!(report["max_function_deviation"].as_f64().unwrap() > 1e-3);
}

#[test]
fn metric_command_prints_ten_digits_and_rejects_mismatch() {
    let dir = tmp("metric");
    let mut rng = Rng::new(4);
    let x = rng.gaussian_matrix(40, 6);
    let xp = dir.join("x.itwf");
    write_features(&xp, &FeatureData::Matrix(x.clone())).unwrap();
    let out = run(&[
        "metric",
        "--x",
        xp.to_str().unwrap(),
        "--y",
        xp.to_str().unwrap(),
        "--metric",
        "grelu-procrustes",
    ]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.trim(), "1.000000000");

    // A saved relu-group transform of the features scores 1 as well.
    let a = intertwiner::intertwiner::random_element(ActivationKind::Relu, 6, &mut rng)
        .unwrap()
        .to_matrix();
    let y = x.matmul(&a).unwrap();
    let yp = dir.join("y.itwf");
    write_features(&yp, &FeatureData::Matrix(y)).unwrap();
    let out = run(&[
        "metric",
        "--x",
        xp.to_str().unwrap(),
        "--y",
        yp.to_str().unwrap(),
        "--metric",
        "grelu-cka",
    ]);
    assert!(out.status.success());
    let value: f64 = String::from_utf8(out.stdout).unwrap().trim().parse().unwrap();
    assert!((value - 1.0).abs() < 1e-9);

    let zshort = rng.gaussian_matrix(30, 6);
    let zp = dir.join("z.itwf");
    write_features(&zp, &FeatureData::Matrix(zshort)).unwrap();
    let out = run(&[
        "metric",
        "--x",
        xp.to_str().unwrap(),
        "--y",
        zp.to_str().unwrap(),
        "--metric",
        "grelu-procrustes",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stitch_grid_writes_one_row_per_cell() {
    let dir = tmp("stitch");
    let spec = NetworkSpec::mlp(vec![4, 10, 10, 3], ActivationKind::Relu).unwrap();
    let spec_path = write_spec(&dir, "spec.json", &spec);
    for (name, seed) in [("f", "11"), ("g", "12")] {
        let out = run(&[
            "train",
            "--spec",
            spec_path.to_str().unwrap(),
            "--data",
            "rings",
            "--out",
            dir.join(name).to_str().unwrap(),
            "--seed",
            seed,
            "--epochs",
            "6",
            "--lr",
            "0.01",
            "--n",
            "600",
        ]);
        assert!(out.status.success());
    }
    let out = run(&[
        "stitch",
        "--f",
        dir.join("f/weights.json").to_str().unwrap(),
        "--g",
        dir.join("g/weights.json").to_str().unwrap(),
        "--layer",
        "1,2",
        "--variant",
        "full,grelu",
        "--data",
        "rings",
        "--seed",
        "3",
        "--out",
        dir.join("grid").to_str().unwrap(),
        "--epochs",
        "3",
        "--head-start",
        "1",
        "--n",
        "400",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("grid/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4, "header plus one row per cell");
    assert!(dir.join("grid/stitch-l1-full.json").exists());
    assert!(dir.join("grid/stitch-l2-grelu.json").exists());
    assert!(dir.join("grid/manifest.json").exists());
}

#[test]
fn unknown_experiment_exits_2() {
    let dir = tmp("exp");
    let cfg = dir.join("cfg.json");
    std::fs::write(&cfg, "{}").unwrap();
    let out = run(&[
        "experiment",
        "--name",
        "nonsense",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn residual_failure_experiment_reports_dichotomy() {
    let dir = tmp("resfail");
    let cfg = dir.join("cfg.json");
    // Tiny config so the test stays fast.
    std::fs::write(
        &cfg,
        r#"{"seed":3,"trials":3,"input_dim":6,"width":10,"classes":4,"n_train":800,"n_val":200,"train_epochs":8,"train_lr":0.01,"samples":100}"#,
    )
    .unwrap();
    let out = run(&[
        "experiment",
        "--name",
        "residual-failure",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("out").to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.join("out/report.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["equal_preserves_function"], 3);
    assert_eq!(report["unequal_breaks_function"], 3);
}
