//! End-to-end checks of the `geosegnet` binary: the scene pipeline,
//! exit codes, determinism of training artifacts, and the CSV surfaces
//! of eval, sweep, and gradcheck.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SCENE_SPEC: &str = "\
extent = 3 3 2
density = 120
seed = 5
floor_class = 0
floor_color = 0.55 0.55 0.55

[object]
class = 1
color = 0.8 0.2 0.1
min = 0.4 0.4 0
max = 1.1 1.2 0.6

[object]
class = 1
color = 0.2 0.3 0.9
min = 1.8 1.6 0
max = 2.5 2.3 0.5
";

fn experiment_config(epochs: usize, seed: u64, threads: usize) -> String {
    format!(
        "[paths]
scene = scene.xyz
checkpoint = model.ckpt
log = log.csv

[network]
classes = 2
ratios = 1,4,4,4,4
widths = 8,8,8,8,8
k1 = 4
k2 = 6
eigen_k = 3
seed = {seed}

[training]
epochs = {epochs}
batch = 2
batches_per_epoch = 2
column_points = 320
column_section = 1.5
threads = {threads}
"
    )
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geosegnet"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawning the binary")
}

fn assert_success(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path
}

/// Writes a scene and a tiny experiment config into `dir`.
fn prepare_run(dir: &Path, epochs: usize, seed: u64, threads: usize) {
    write(dir, "scene.spec", SCENE_SPEC);
    write(dir, "exp.cfg", &experiment_config(epochs, seed, threads));
    assert_success(&run_in(dir, &["gen", "scene.spec", "--out", "scene.xyz"]));
}

#[test]
fn scene_pipeline_produces_features_and_boundary_flags() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "scene.spec", SCENE_SPEC);
    let out = assert_success(&run_in(
        dir.path(),
        &["gen", "scene.spec", "--out", "scene.xyz"],
    ));
    assert!(out.contains("2 classes"), "{out}");
    let points = std::fs::read_to_string(dir.path().join("scene.xyz"))
        .unwrap()
        .lines()
        .count();
    assert!(points > 500, "suspiciously small scene: {points} points");

    let out = assert_success(&run_in(
        dir.path(),
        &["features", "--in", "scene.xyz", "--out", "feat.csv", "--k", "8"],
    ));
    assert!(out.contains(&format!("{points} feature rows")), "{out}");
    let feat = std::fs::read_to_string(dir.path().join("feat.csv")).unwrap();
    let mut lines = feat.lines();
    let header = lines.next().unwrap();
    assert_eq!(header.split(',').count(), 13, "{header}");
    assert!(header.starts_with("x,y,z,"));
    assert_eq!(lines.count(), points);

    assert_success(&run_in(
        dir.path(),
        &["boundary", "--in", "scene.xyz", "--out", "bdry.xyz"],
    ));
    let bdry = std::fs::read_to_string(dir.path().join("bdry.xyz")).unwrap();
    let mut flagged = 0;
    for line in bdry.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 8, "{line}");
        let flag: usize = fields[7].parse().unwrap();
        assert!(flag <= 1);
        flagged += flag;
    }
    // The scene contains two boxes on a floor, so some points sit on a
    // class boundary and most do not.
    assert!(flagged > 0 && flagged < points / 2, "{flagged} of {points}");
}

#[test]
fn missing_input_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["features", "--in", "nothere.xyz", "--out", "x.csv"],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: "), "{err}");
}

#[test]
fn bad_config_key_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "bad.cfg", "[paths]\nscene = s.xyz\n[network]\nclases = 2\n");
    let out = run_in(dir.path(), &["train", "bad.cfg"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("clases"), "{err}");
    assert!(err.contains("bad.cfg:4"), "{err}");
}

#[test]
fn class_count_mismatch_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    prepare_run(dir.path(), 1, 1, 1);
    assert_success(&run_in(dir.path(), &["train", "exp.cfg"]));
    write(
        dir.path(),
        "threeclass.xyz",
        "0 0 0 0.5 0.5 0.5 2\n1 0 0 0.5 0.5 0.5 1\n0 1 0 0.5 0.5 0.5 0\n",
    );
    let out = run_in(
        dir.path(),
        &["eval", "--checkpoint", "model.ckpt", "--in", "threeclass.xyz"],
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn training_artifacts_are_idempotent_and_thread_invariant() {
    let dir = tempfile::tempdir().unwrap();
    prepare_run(dir.path(), 2, 1, 2);
    let first_out = assert_success(&run_in(dir.path(), &["train", "exp.cfg"]));
    let ckpt = std::fs::read(dir.path().join("model.ckpt")).unwrap();
    let log = std::fs::read(dir.path().join("log.csv")).unwrap();

    let second_out = assert_success(&run_in(dir.path(), &["train", "exp.cfg"]));
    assert_eq!(first_out, second_out);
    assert_eq!(ckpt, std::fs::read(dir.path().join("model.ckpt")).unwrap());
    assert_eq!(log, std::fs::read(dir.path().join("log.csv")).unwrap());

    // Same experiment scheduled on a different worker count.
    write(dir.path(), "exp.cfg", &experiment_config(2, 1, 4));
    assert_success(&run_in(dir.path(), &["train", "exp.cfg"]));
    assert_eq!(ckpt, std::fs::read(dir.path().join("model.ckpt")).unwrap());
    assert_eq!(log, std::fs::read(dir.path().join("log.csv")).unwrap());
}

#[test]
fn train_honors_command_line_overrides() {
    let dir = tempfile::tempdir().unwrap();
    prepare_run(dir.path(), 3, 1, 2);
    assert_success(&run_in(
        dir.path(),
        &["train", "exp.cfg", "--epochs", "1", "--lambda2", "0"],
    ));
    let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2, "{log}");
    let header: Vec<&str> = lines[0].split(',').collect();
    let cbl_col = header.iter().position(|&h| h == "L_CBL").unwrap();
    let row: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(row[cbl_col], "0");
}

#[test]
fn eval_reports_each_scene_and_a_merged_row() {
    let dir = tempfile::tempdir().unwrap();
    prepare_run(dir.path(), 1, 1, 1);
    assert_success(&run_in(dir.path(), &["train", "exp.cfg"]));
    let out = assert_success(&run_in(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "model.ckpt",
            "--in",
            "scene.xyz",
            "--in",
            "scene.xyz",
        ],
    ));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "scene,OA,mIoU,mACC,boundary_mIoU");
    assert_eq!(lines.len(), 4, "{out}");
    assert!(lines[3].starts_with("all,"), "{out}");
    for line in &lines[1..] {
        assert_eq!(line.split(',').count(), 5, "{line}");
    }
    // Identical scenes merge to identical metrics.
    let row = lines[1].split_once(',').unwrap().1.to_string();
    assert_eq!(lines[3], format!("all,{row}"));
}

#[test]
fn sweep_prints_one_metrics_row_per_grid_cell() {
    let dir = tempfile::tempdir().unwrap();
    prepare_run(dir.path(), 1, 1, 2);
    let out = assert_success(&run_in(
        dir.path(),
        &["sweep", "exp.cfg", "--lambda2", "0,0.1,0.2", "--out", "sweep.csv"],
    ));
    let saved = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(out, saved);
    let lines: Vec<&str> = saved.lines().collect();
    assert_eq!(lines[0], "lambda1,lambda2,OA,mIoU,mACC,boundary_mIoU");
    assert_eq!(lines.len(), 4, "{saved}");
    for (i, expected_l2) in ["0", "0.1", "0.2"].iter().enumerate() {
        let fields: Vec<&str> = lines[i + 1].split(',').collect();
        assert_eq!(fields.len(), 6);
        assert_eq!(fields[0], "0.1", "default lambda1 comes from the config");
        assert_eq!(&fields[1], expected_l2);
    }
}

#[test]
fn gradcheck_covers_every_building_block_and_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = assert_success(&run_in(dir.path(), &["gradcheck", "--seed", "1"]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "op,max_rel_err,tolerance,status");
    for op in [
        "add",
        "matmul",
        "softmax",
        "cross_entropy",
        "attentive_pool",
        "contrastive_boundary",
        "geometry_module",
        "end_to_end",
    ] {
        assert!(
            lines.iter().any(|l| l.starts_with(&format!("{op},"))),
            "no row for {op}: {out}"
        );
    }
    for line in &lines[1..lines.len() - 1] {
        assert!(line.ends_with(",ok"), "{line}");
    }
    assert!(lines.last().unwrap().contains("gradient checks passed"));
}
