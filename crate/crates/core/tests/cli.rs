//! The command-line contract: outputs, replay and exit codes.

use std::path::Path;
use std::process::{Command, Output};

use dapconv::cli::{parse_ablation_csv, Grid};
use dapconv::train::parse_metrics_csv;

fn dapconv(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dapconv"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("run dapconv")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const TINY: &[&str] = &[
    "--widths",
    "6,8",
    "--k",
    "4",
    "--set",
    "model.head_hidden=8",
    "--points",
    "32",
];

#[test]
fn gen_data_counts_and_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = [
        "gen-data",
        "--classes",
        "8",
        "--per-class",
        "3",
        "--points",
        "20",
        "--seed",
        "1",
    ];
    ok(&dapconv(&[&args[..], &["--out", "a"]].concat(), d));
    ok(&dapconv(&[&args[..], &["--out", "b"]].concat(), d));
    let xyz = |sub: &str| {
        let mut v: Vec<_> = std::fs::read_dir(d.join(sub))
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "xyz"))
            .collect();
        v.sort();
        v
    };
    assert_eq!(xyz("a").len(), 24);
    for (a, b) in xyz("a").iter().zip(xyz("b")) {
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }
    assert!(d.join("a/manifest.txt").exists() && d.join("a/resolved.cfg").exists());
}

#[test]
fn invalid_class_lists_valid_names() {
    let dir = tempfile::tempdir().unwrap();
    let out = dapconv(
        &["gen-data", "--classes", "sphere,blob", "--out", "x"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("l-bracket") && err.contains("helix"), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["train", "--out", "x", "--no-such-flag"][..],
        &["train", "--out", "x", "--set", "train.nope=1"],
        &["train", "--out", "x", "--set", "model.k=zero"],
        &["ablate", "--out", "x", "--grid", "sideways"],
        &["frobnicate"],
    ] {
        assert_eq!(dapconv(args, dir.path()).status.code(), Some(1), "{args:?}");
    }
}

#[test]
fn train_eval_export_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train = [
        &[
            "train",
            "--classes",
            "3",
            "--per-class",
            "4",
            "--dap",
            "all",
            "--epochs",
            "2",
            "--out",
            "run",
        ][..],
        TINY,
    ]
    .concat();
    ok(&dapconv(&train, d));
    for f in ["resolved.cfg", "metrics.csv", "model.ckpt"] {
        assert!(d.join("run").join(f).exists(), "{f}");
    }

    // the resolved config alone reproduces the run
    ok(&dapconv(
        &["train", "--config", "run/resolved.cfg", "--out", "replay"],
        d,
    ));
    assert_eq!(
        std::fs::read(d.join("run/model.ckpt")).unwrap(),
        std::fs::read(d.join("replay/model.ckpt")).unwrap()
    );
    assert_eq!(
        std::fs::read(d.join("run/metrics.csv")).unwrap(),
        std::fs::read(d.join("replay/metrics.csv")).unwrap()
    );

    // evaluation replays the final test row exactly
    ok(&dapconv(
        &[
            "eval",
            "--checkpoint",
            "run/model.ckpt",
            "--config",
            "run/resolved.cfg",
            "--predictions",
            "--out",
            "ev",
        ],
        d,
    ));
    let history =
        parse_metrics_csv(&std::fs::read_to_string(d.join("run/metrics.csv")).unwrap()).unwrap();
    let final_test = history.iter().rev().find(|r| r.split == "test").unwrap();
    let eval =
        parse_metrics_csv(&std::fs::read_to_string(d.join("ev/metrics.csv")).unwrap()).unwrap();
    assert_eq!(&eval[0], final_test);
    let preds = std::fs::read_to_string(d.join("ev/predictions.csv")).unwrap();
    // 12 samples, round(0.8 * 12) = 10 in train
    assert_eq!(preds.lines().count(), 1 + 2);

    let out = dapconv(&["eval", "--checkpoint", "missing.ckpt", "--out", "ev2"], d);
    assert_eq!(out.status.code(), Some(2));

    ok(&dapconv(
        &[
            "export-attention",
            "--checkpoint",
            "run/model.ckpt",
            "--layer",
            "1",
            "--points",
            "30",
            "--out",
            "att",
        ],
        d,
    ));
    let att = std::fs::read_to_string(d.join("att/attention.txt")).unwrap();
    assert_eq!(att.lines().count(), 31);
}

#[test]
fn export_from_plain_layer_names_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train = [
        &[
            "train",
            "--classes",
            "2",
            "--per-class",
            "2",
            "--dap",
            "none",
            "--epochs",
            "0",
            "--out",
            "plain",
        ][..],
        TINY,
    ]
    .concat();
    ok(&dapconv(&train, d));
    let out = dapconv(
        &[
            "export-attention",
            "--checkpoint",
            "plain/model.ckpt",
            "--out",
            "att",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("edge-conv"), "{err}");
}

#[test]
fn segmentation_predictions_are_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train = [
        &[
            "train",
            "--kind",
            "parts",
            "--per-class",
            "2",
            "--train-fraction",
            "1",
            "--dap",
            "all",
            "--epochs",
            "1",
            "--out",
            "seg",
        ][..],
        TINY,
    ]
    .concat();
    ok(&dapconv(&train, d));
    ok(&dapconv(
        &[
            "eval",
            "--checkpoint",
            "seg/model.ckpt",
            "--config",
            "seg/resolved.cfg",
            "--split",
            "all",
            "--predictions",
            "--out",
            "ev",
        ],
        d,
    ));
    let preds = std::fs::read_to_string(d.join("ev/predictions.csv")).unwrap();
    assert!(preds.starts_with("sample,source,point,x,y,z,label,pred\n"));
    assert_eq!(preds.lines().count(), 1 + 6 * 32);
}

#[test]
fn ablate_k_grid_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let args = [
        &[
            "ablate",
            "--grid",
            "k",
            "--seeds",
            "1,2",
            "--classes",
            "2",
            "--per-class",
            "3",
            "--epochs",
            "1",
            "--out",
            "ab",
        ][..],
        &[
            "--widths",
            "6,8",
            "--set",
            "model.head_hidden=8",
            "--points",
            "48",
        ],
    ]
    .concat();
    ok(&dapconv(&args, d));
    let rows =
        parse_ablation_csv(&std::fs::read_to_string(d.join("ab/ablation.csv")).unwrap()).unwrap();
    assert_eq!(rows.len(), 4 * 2);
    assert!(rows.iter().all(|r| r.grid == Grid::K));
    let cells: Vec<&str> = rows.iter().step_by(2).map(|r| r.cell.as_str()).collect();
    assert_eq!(cells, ["5", "10", "20", "40"]);
    assert!(d.join("ab/resolved.cfg").exists() && d.join("ab/ablation_summary.csv").exists());
}
