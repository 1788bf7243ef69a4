use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use togkit::dataset::{DatasetIndex, SplitSetting, SplitSpec};
use togkit::metrics::EvalReport;
use togkit::synthgen::SynthSpec;
use togkit::training::{leakage_violations, split_samples, Partition};

fn togkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_togkit")).args(args).output().expect("spawn togkit")
}

fn ok(args: &[&str]) -> Output {
    let out = togkit(args);
    assert!(out.status.success(), "togkit {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A six-class dataset small enough for seconds-long runs, with knowledge and
/// class splits.
fn dataset(dir: &Path) -> PathBuf {
    let spec =
        SynthSpec { instances_per_class: 2, grasps_per_instance: 4, points_per_instance: 256, ..SynthSpec::default() };
    let spec_path = dir.join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec).unwrap()).unwrap();
    let data = dir.join("data");
    ok(&["gen-synth", "--spec", s(&spec_path), "--out", s(&data)]);
    ok(&["gen-knowledge", "--data", s(&data)]);
    ok(&["make-splits", "--data", s(&data), "--setting", "class", "--folds", "4"]);
    data
}

fn train(data: &Path, out: &Path) {
    ok(&[
        "train",
        "--data",
        s(data),
        "--setting",
        "class",
        "--out",
        s(out),
        "--profile",
        "minimal",
        "--epochs",
        "2",
        "--batch-size",
        "8",
    ]);
}

#[test]
fn make_splits_writes_clean_class_folds() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let index = DatasetIndex::load(&data).unwrap();
    let mut tested = Vec::new();
    for fold in 0..4 {
        let split = SplitSpec::load(&data, SplitSetting::Class, fold).unwrap();
        let train = split_samples(&index, &split, Partition::Train).unwrap();
        assert!(leakage_violations(&index, &split, &train).is_empty());
        tested.extend(split.test_ids);
    }
    let mut classes = index.classes.clone();
    tested.sort();
    classes.sort();
    assert_eq!(tested, classes);
    assert!(data.join("splits/class/run_manifest.json").exists());
}

#[test]
fn oracle_eval_scores_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let report_path = dir.path().join("oracle.json");
    ok(&["eval", "--data", s(&data), "--setting", "class", "--fold", "1", "--oracle", "--out", s(&report_path)]);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!((report.instance_map, report.class_map, report.task_map), (1.0, 1.0, 1.0));
    assert!(dir.path().join("oracle.manifest.json").exists());
}

#[test]
fn runs_replay_from_their_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let (first, second) = (dir.path().join("run1"), dir.path().join("run2"));
    train(&data, &first);
    let manifest = first.join("run_manifest.json");
    ok(&["train", "--config", s(&manifest), "--out", s(&second)]);
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(first.join("metrics.jsonl")), read(second.join("metrics.jsonl")));
    for file in std::fs::read_dir(first.join("checkpoint")).unwrap() {
        let name = file.unwrap().file_name();
        assert_eq!(read(first.join("checkpoint").join(&name)), read(second.join("checkpoint").join(&name)), "{name:?}");
    }

    let (r1, r2) = (dir.path().join("r1.json"), dir.path().join("r2.json"));
    ok(&["eval", "--data", s(&data), "--checkpoint", s(&first), "--setting", "class", "--out", s(&r1)]);
    ok(&["eval", "--config", s(&dir.path().join("r1.manifest.json")), "--out", s(&r2)]);
    assert_eq!(read(r1), read(r2));
}

#[test]
fn rank_prints_table_and_decision() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let run = dir.path().join("run");
    train(&data, &run);
    let index = DatasetIndex::load(&data).unwrap();
    let inst = &index.instances[0];
    let ply = dir.path().join("viz/grasps.ply");
    let base = ["rank", "--data", s(&data), "--checkpoint", s(&run), "--instance", &inst.id, "--task", &index.tasks[0]];

    let mut args = base.to_vec();
    args.extend(["--threshold", "1.5", "--top-k", "3", "--ply", s(&ply)]);
    let out = ok(&args);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.lines().last().unwrap().starts_with("decision: REJECT"), "{table}");
    assert_eq!(table.lines().filter(|l| l.trim_start().starts_with(|c: char| c.is_ascii_digit())).count(), 3);
    let ply_text = std::fs::read_to_string(&ply).unwrap();
    assert!(ply_text.contains(&format!("element vertex {}", inst.pointcloud.len() + 18)));
    assert!(dir.path().join("viz/grasps.manifest.json").exists());

    let mut args = base.to_vec();
    args.extend(["--threshold", "0", "--class", "screwdriver"]);
    let table = String::from_utf8(ok(&args).stdout).unwrap();
    assert!(table.contains("grasp the screwdriver"));
    assert!(table.lines().last().unwrap().starts_with("decision: ACCEPT"), "{table}");
}

#[test]
fn exit_codes_classify_failures() {
    let dir = tempfile::tempdir().unwrap();
    let code = |args: &[&str]| togkit(args).status.code();
    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["train", "--no-such-flag"]), Some(1));
    assert_eq!(code(&["train", "--out", "x"]), Some(1), "missing --data");
    assert_eq!(code(&["train", "--data", "d", "--out", "x", "--set", "train.epoch=3"]), Some(1));
    assert_eq!(code(&["train", "--data", "d", "--out", "x", "--epochs", "0"]), Some(1));
    let missing = dir.path().join("missing");
    assert_eq!(code(&["make-splits", "--data", s(&missing)]), Some(2));

    let data = dataset(dir.path());
    let out = dir.path().join("nan");
    let args =
        ["train", "--data", s(&data), "--setting", "class", "--out", s(&out), "--profile", "minimal", "--lr", "1e300"];
    assert_eq!(code(&args), Some(3));
}

#[test]
fn help_names_config_keys() {
    let out = ok(&["train", "--help"]);
    let help = String::from_utf8(out.stdout).unwrap();
    for key in ["train.learning_rate", "train.epochs", "model.profile", "backend.semantic", "train.augment"] {
        assert!(help.contains(&format!("[key: {key}")), "{key} missing from help");
    }
}
