//! End-to-end checks of the `bspml` binary: artifact manifests, report
//! schema, determinism, and exit-status conventions (0 success, 1 runtime
//! error, 2 usage error).

use std::path::Path;
use std::process::{Command, Output};

fn bspml(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bspml"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn assert_status(out: &Output, expected: i32) {
    assert_eq!(
        out.status.code(),
        Some(expected),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn generate_small(dir: &Path) {
    let out = bspml(
        &[
            "generate",
            "--classes",
            "3",
            "--per-class",
            "10",
            "--dim",
            "2",
            "--sep",
            "8",
            "--sd",
            "0.5",
            "--seed",
            "7",
            "--out",
            "train.csv",
        ],
        dir,
    );
    assert_status(&out, 0);
}

const SMALL_TRAIN: &[&str] = &[
    "--outer",
    "6",
    "--epochs",
    "2",
    "--w-steps",
    "800",
    "--lr",
    "0.01",
    "--p",
    "3",
    "--k",
    "3",
    "--ks",
    "1,2",
    "--seed",
    "1",
];

#[test]
fn generate_writes_expected_rows_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    generate_small(dir.path());
    let first = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
    assert_eq!(first.lines().count(), 31); // header + 30 rows
    assert!(first.starts_with("id,label,f0,f1\n"));

    let out = bspml(
        &[
            "generate",
            "--classes",
            "3",
            "--per-class",
            "10",
            "--dim",
            "2",
            "--sep",
            "8",
            "--sd",
            "0.5",
            "--seed",
            "7",
            "--out",
            "again.csv",
        ],
        dir.path(),
    );
    assert_status(&out, 0);
    let second = std::fs::read_to_string(dir.path().join("again.csv")).unwrap();
    assert_eq!(first, second);
}

#[test]
fn generate_without_out_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bspml(&["generate", "--classes", "2"], dir.path());
    assert_status(&out, 2);
}

#[test]
fn corrupt_flips_floor_ratio_per_class() {
    let dir = tempfile::tempdir().unwrap();
    generate_small(dir.path());
    let out = bspml(
        &[
            "corrupt",
            "--in",
            "train.csv",
            "--ratio",
            "0.2",
            "--seed",
            "3",
            "--out",
            "noisy.csv",
            "--mask",
            "mask.csv",
        ],
        dir.path(),
    );
    assert_status(&out, 0);
    let mask = std::fs::read_to_string(dir.path().join("mask.csv")).unwrap();
    let mut per_class = [0usize; 3];
    for line in mask.lines().skip(1) {
        let original: usize = line.split(',').nth(1).unwrap().parse().unwrap();
        per_class[original] += 1;
    }
    assert_eq!(per_class, [2, 2, 2]); // floor(0.2 * 10) per class
}

#[test]
fn corrupt_with_zero_ratio_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    generate_small(dir.path());
    let out = bspml(
        &[
            "corrupt",
            "--in",
            "train.csv",
            "--ratio",
            "0",
            "--seed",
            "3",
            "--out",
            "copy.csv",
            "--mask",
            "mask.csv",
        ],
        dir.path(),
    );
    assert_status(&out, 0);
    let original = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
    let copy = std::fs::read_to_string(dir.path().join("copy.csv")).unwrap();
    assert_eq!(original, copy);
    let mask = std::fs::read_to_string(dir.path().join("mask.csv")).unwrap();
    assert_eq!(mask.trim(), "id,original_label,new_label"); // header only
}

#[test]
fn corrupt_with_ratio_one_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    generate_small(dir.path());
    let out = bspml(
        &[
            "corrupt",
            "--in",
            "train.csv",
            "--ratio",
            "1.0",
            "--seed",
            "3",
            "--out",
            "noisy.csv",
            "--mask",
            "mask.csv",
        ],
        dir.path(),
    );
    assert_status(&out, 2);
}

fn train_small(dir: &Path, mode: &str, out: &str) {
    let mut args = vec![
        "train",
        "--mode",
        mode,
        "--data",
        "noisy.csv",
        "--mask",
        "mask.csv",
        "--out",
        out,
    ];
    args.extend_from_slice(SMALL_TRAIN);
    let res = bspml(&args, dir);
    assert_status(&res, 0);
}

#[test]
fn train_manifest_and_report_schema() {
    let dir = tempfile::tempdir().unwrap();
    generate_small(dir.path());
    let out = bspml(
        &[
            "corrupt",
            "--in",
            "train.csv",
            "--ratio",
            "0.2",
            "--seed",
            "3",
            "--out",
            "noisy.csv",
            "--mask",
            "mask.csv",
        ],
        dir.path(),
    );
    assert_status(&out, 0);

    train_small(dir.path(), "bspml", "run1");
    for file in ["report.json", "trace.csv", "weights.csv", "model.ckpt"] {
        assert!(dir.path().join("run1").join(file).exists(), "{file}");
    }

    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run1/report.json")).unwrap(),
    )
    .unwrap();
    for key in ["config", "metrics", "trace_file", "runtime_sec"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    let metrics = &report["metrics"];
    for key in ["recall", "nmi", "maw", "sdaw", "weight_gap"] {
        assert!(metrics.get(key).is_some(), "missing metric {key}");
    }
    assert!(metrics["recall"]["1"].is_f64());
    assert!(metrics["maw"].is_f64());
    assert!(metrics["weight_gap"].is_f64());

    // the trace files carry the documented headers
    let trace = std::fs::read_to_string(dir.path().join("run1/trace.csv")).unwrap();
    assert!(trace.starts_with("t,lambda,objective,delta_objective,maw,sdaw\n"));
    let wtrace = std::fs::read_to_string(dir.path().join("run1/weights.csv")).unwrap();
    assert!(wtrace.starts_with("iter,coordinate,G,gamma,objective,proj_grad_norm\n"));
    assert!(wtrace.lines().count() > 1);

    // ms mode: identical manifest minus weights.csv, weight metrics null
    train_small(dir.path(), "ms", "run2");
    for file in ["report.json", "trace.csv", "model.ckpt"] {
        assert!(dir.path().join("run2").join(file).exists(), "{file}");
    }
    assert!(!dir.path().join("run2/weights.csv").exists());
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run2/report.json")).unwrap(),
    )
    .unwrap();
    assert!(report["metrics"]["maw"].is_null());
    assert!(report["metrics"]["weight_gap"].is_null());
    assert!(report["null_reasons"]["maw"].is_string());
}

#[test]
fn train_reports_are_deterministic_modulo_wall_clock() {
    let dir = tempfile::tempdir().unwrap();
    generate_small(dir.path());
    bspml(
        &[
            "corrupt",
            "--in",
            "train.csv",
            "--ratio",
            "0.2",
            "--seed",
            "3",
            "--out",
            "noisy.csv",
            "--mask",
            "mask.csv",
        ],
        dir.path(),
    );
    train_small(dir.path(), "bspml", "a");
    train_small(dir.path(), "bspml", "b");
    let strip = |path: &Path| {
        let text = std::fs::read_to_string(path).unwrap();
        text.lines()
            .filter(|l| !l.contains("runtime_sec"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(
        strip(&dir.path().join("a/report.json")),
        strip(&dir.path().join("b/report.json"))
    );
    assert_eq!(
        std::fs::read(dir.path().join("a/model.ckpt")).unwrap(),
        std::fs::read(dir.path().join("b/model.ckpt")).unwrap()
    );
}

#[test]
fn train_rejects_bad_hyperparameters_before_running() {
    let dir = tempfile::tempdir().unwrap();
    // alpha <= 0 must fail fast even though the data file does not exist
    let out = bspml(
        &[
            "train",
            "--data",
            "missing.csv",
            "--alpha",
            "0",
            "--out",
            "run",
        ],
        dir.path(),
    );
    assert_status(&out, 2);
    assert!(!dir.path().join("run").exists());
}

#[test]
fn train_requires_exactly_one_data_source() {
    let dir = tempfile::tempdir().unwrap();
    let out = bspml(&["train", "--out", "run"], dir.path());
    assert_status(&out, 2);
    let out = bspml(
        &["train", "--data", "x.csv", "--classes", "3", "--out", "run"],
        dir.path(),
    );
    assert_status(&out, 2);
}

#[test]
fn config_file_applies_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("exp.conf"),
        "classes=3\nper-class=8\nnoise=0.25\nalpha=7\nouter=4\nepochs=1\nw-steps=300\nlr=0.01\np=3\nk=2\nks=1\n",
    )
    .unwrap();
    // --alpha 2 overrides the config file's alpha=7
    let out = bspml(
        &[
            "train", "--config", "exp.conf", "--alpha", "2", "--seed", "5", "--out", "run",
        ],
        dir.path(),
    );
    assert_status(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["config"]["train"]["ms"]["alpha"], 2.0);
    assert_eq!(report["config"]["train"]["outer_iters"], 4);
    assert_eq!(report["config"]["source"]["noise_ratio"], 0.25);
}

#[test]
fn eval_reports_exactly_the_requested_keys() {
    let dir = tempfile::tempdir().unwrap();
    generate_small(dir.path());
    bspml(
        &[
            "corrupt",
            "--in",
            "train.csv",
            "--ratio",
            "0.2",
            "--seed",
            "3",
            "--out",
            "noisy.csv",
            "--mask",
            "mask.csv",
        ],
        dir.path(),
    );
    train_small(dir.path(), "bspml", "run");
    let out = bspml(
        &[
            "eval",
            "--model",
            "run/model.ckpt",
            "--data",
            "train.csv",
            "--ks",
            "1,2,4",
        ],
        dir.path(),
    );
    assert_status(&out, 0);
    let report: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    let keys: Vec<&String> = report.as_object().unwrap().keys().collect();
    let mut expected = vec!["NMI", "R@1", "R@2", "R@4"];
    expected.sort();
    assert_eq!(keys, expected);
}

#[test]
fn eval_missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    generate_small(dir.path());
    let out = bspml(
        &["eval", "--model", "nope.ckpt", "--data", "train.csv"],
        dir.path(),
    );
    assert_status(&out, 1);
}

#[test]
fn sweep_emits_plot_ready_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = bspml(
        &[
            "sweep",
            "--classes",
            "3",
            "--per-class",
            "8",
            "--noise",
            "0.25",
            "--outer",
            "4",
            "--epochs",
            "1",
            "--w-steps",
            "300",
            "--lr",
            "0.01",
            "--p",
            "3",
            "--k",
            "2",
            "--seed",
            "2",
            "--param",
            "mu",
            "--grid",
            "0,1",
            "--out",
            "sweep.csv",
        ],
        dir.path(),
    );
    assert_status(&out, 0);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "mu,maw,sdaw");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,"));
    assert!(lines[2].starts_with("1,"));
}

#[test]
fn sweep_with_empty_grid_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = bspml(
        &[
            "sweep",
            "--classes",
            "3",
            "--param",
            "mu",
            "--grid",
            "",
            "--out",
            "s.csv",
        ],
        dir.path(),
    );
    assert_status(&out, 2);
}
