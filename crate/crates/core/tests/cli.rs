//! The `flowreg` binary end to end: files written, reports and exit codes.

use std::path::{Path, PathBuf};
use std::process::Command;

use flowreg::cli::{names, EXIT_FOLDING, EXIT_GRID_MISMATCH, EXIT_OK};
use flowreg::io::{read_scalar, read_vector, write_volume, RunManifest};
use flowreg::volume::{GridSpec, LabelMask, VectorField3, Volume3};
use serde_json::Value;

fn flowreg(args: &[&str]) -> i32 {
    let out = Command::new(env!("CARGO_BIN_EXE_flowreg")).args(args).output().unwrap();
    out.status.code().expect("exited normally")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SYNTH: &str = "phantom.dims = 20 20 20\nphantom.n_blobs = 1\nbump.amplitude_voxels = 2\nbump.sigma = 0.5\n";

const TINY_RUN: &str = "coarse_dims = 4 4 4\nfine_dims = 6 6 6\nn_steps = 2\nnet.hidden_width = 8\n\
                        optimizer.lr = 1e-3\ncoarse.max_iters = 5\ndistill.max_iters = 5\nfine.max_iters = 5\n";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.path("synth.cfg"), SYNTH).unwrap();
        std::fs::write(ws.path("run.cfg"), TINY_RUN).unwrap();
        let synth = ws.path("synth");
        assert_eq!(flowreg(&["synth", p(&ws.path("synth.cfg")), "--out", p(&synth)]), EXIT_OK);
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn synth(&self, name: &str) -> PathBuf {
        self.path("synth").join(name)
    }

    fn register(&self, out: &str, threads: &str) -> i32 {
        flowreg(&[
            "register",
            p(&self.synth(names::MOVING)),
            p(&self.synth(names::FIXED)),
            "--config",
            p(&self.path("run.cfg")),
            "--seed",
            "5",
            "--threads",
            threads,
            "--out",
            p(&self.path(out)),
        ])
    }
}

fn report(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_register_evaluate_snapshots() {
    let ws = Workspace::new();
    for name in [
        names::MOVING,
        names::FIXED,
        names::MOVING_MASK,
        names::FIXED_MASK,
        names::GROUND_TRUTH,
        names::RECOVERY_TARGET,
    ] {
        assert!(ws.synth(name).is_file(), "{name} missing");
    }

    assert_eq!(ws.register("run", "1"), EXIT_OK);
    let run = ws.path("run");
    let field = read_vector(run.join(names::FIELD)).unwrap();
    assert_eq!(field.dims(), [6, 6, 6]);
    assert_eq!(read_scalar(run.join(names::MOVED)).unwrap().dims(), [20, 20, 20]);
    for stage in ["coarse", "distill", "fine"] {
        let table = std::fs::read_to_string(run.join(names::loss_table(stage))).unwrap();
        assert!(table.starts_with("iteration\ttotal"));
    }
    let manifest = RunManifest::load(run.join(names::MANIFEST)).unwrap();
    assert_eq!(manifest.status, "ok");
    assert_eq!(manifest.config.seed, 5);
    assert_eq!(manifest.stages.len(), 3);
    assert!(manifest.verify_inputs().unwrap());

    let rep_path = ws.path("eval.json");
    let code = flowreg(&[
        "evaluate",
        p(&run.join(names::FIELD)),
        p(&ws.synth(names::MOVING_MASK)),
        p(&ws.synth(names::FIXED_MASK)),
        "--gt",
        p(&ws.synth(names::RECOVERY_TARGET)),
        "--report",
        p(&rep_path),
    ]);
    assert_eq!(code, EXIT_OK);
    let rep = report(&rep_path);
    assert!(rep["dice_mean"].as_f64().unwrap() > 0.0);
    assert!(rep["mean_endpoint_error_voxels"].as_f64().unwrap() >= 0.0);
    assert!(rep["fold_fraction"].as_f64().unwrap() >= 0.0);

    let snaps = ws.path("snaps");
    let code = flowreg(&[
        "snapshots",
        p(&ws.synth(names::MOVING)),
        p(&run.join(names::PARAMS)),
        "--config",
        p(&ws.path("run.cfg")),
        "--out",
        p(&snaps),
    ]);
    assert_eq!(code, EXIT_OK);
    for k in 0..=2 {
        assert!(snaps.join(names::snapshot(k)).is_file());
    }
    let first = read_scalar(snaps.join(names::snapshot(0))).unwrap();
    let moving = read_scalar(ws.synth(names::MOVING)).unwrap();
    assert_eq!(first, moving);
}

fn without_timings(mut v: Value) -> Value {
    v["total_seconds"] = Value::Null;
    v["threads"] = Value::Null;
    for stage in v["stages"].as_array_mut().unwrap() {
        stage["seconds"] = Value::Null;
    }
    v
}

#[test]
fn reruns_are_bit_identical() {
    let ws = Workspace::new();
    assert_eq!(ws.register("a", "1"), EXIT_OK);
    assert_eq!(ws.register("b", "1"), EXIT_OK);
    assert_eq!(ws.register("c", "3"), EXIT_OK);
    let field = |d: &str| std::fs::read(ws.path(d).join(names::FIELD)).unwrap();
    assert_eq!(field("a"), field("b"));
    assert_eq!(field("a"), field("c"));
    let manifest = |d: &str| without_timings(report(&ws.path(d).join(names::MANIFEST)));
    assert_eq!(manifest("a"), manifest("b"));
    assert_eq!(manifest("a"), manifest("c"));
}

#[test]
fn mismatched_grids_exit_with_code_two() {
    let ws = Workspace::new();
    let small = ws.path("small.frg");
    write_volume(&small, &Volume3::filled(GridSpec::with_dims([8, 8, 8]).unwrap(), 0.5).into()).unwrap();
    let code = flowreg(&["register", p(&ws.synth(names::MOVING)), p(&small), "--out", p(&ws.path("x"))]);
    assert_eq!(code, EXIT_GRID_MISMATCH);
    assert!(!ws.path("x").join(names::FIELD).exists());

    let small_mask = ws.path("small_mask.frg");
    write_volume(&small_mask, &LabelMask::filled(GridSpec::with_dims([8, 8, 8]).unwrap(), 1).into()).unwrap();
    let code = flowreg(&[
        "evaluate",
        p(&ws.synth(names::GROUND_TRUTH)),
        p(&ws.synth(names::MOVING_MASK)),
        p(&small_mask),
        "--out",
        p(&ws.path("y")),
    ]);
    assert_eq!(code, EXIT_GRID_MISMATCH);
}

#[test]
fn folding_deformation_exits_with_code_four() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("fold.cfg");
    std::fs::write(&spec, "phantom.dims = 20 20 20\nphantom.n_blobs = 1\nbump.amplitude_voxels = 9\nbump.sigma = 0.2\n")
        .unwrap();
    let out = dir.path().join("out");
    assert_eq!(flowreg(&["synth", p(&spec), "--out", p(&out)]), EXIT_FOLDING);
    assert!(!out.join(names::MOVING).exists());
}

#[test]
fn zero_field_on_equal_masks() {
    let ws = Workspace::new();
    let mask = ws.synth(names::FIXED_MASK);
    let zero = ws.path("zero.frg");
    write_volume(&zero, &VectorField3::zeros(GridSpec::with_dims([20, 20, 20]).unwrap()).into()).unwrap();
    let rep_path = ws.path("zero.json");
    let code = flowreg(&["evaluate", p(&zero), p(&mask), p(&mask), "--report", p(&rep_path)]);
    assert_eq!(code, EXIT_OK);
    let rep = report(&rep_path);
    assert_eq!(rep["dice_mean"].as_f64(), Some(1.0));
    assert_eq!(rep["fold_fraction"].as_f64(), Some(0.0));
    // no ground truth given, so no endpoint error is reported
    assert!(rep.get("mean_endpoint_error_voxels").is_none());
    assert!(rep.get("max_endpoint_error_voxels").is_none());
}

#[test]
fn unknown_config_key_fails_before_any_output() {
    let ws = Workspace::new();
    let bad = ws.path("bad.cfg");
    std::fs::write(&bad, "fine.max_iter = 5\n").unwrap();
    let out = ws.path("bad");
    let code = flowreg(&[
        "register",
        p(&ws.synth(names::MOVING)),
        p(&ws.synth(names::FIXED)),
        "--config",
        p(&bad),
        "--out",
        p(&out),
    ]);
    assert_ne!(code, EXIT_OK);
    assert!(!out.join(names::MANIFEST).exists());
}
