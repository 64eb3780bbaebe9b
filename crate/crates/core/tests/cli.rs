use std::path::{Path, PathBuf};

use rigidsim::cli::{run, TrainFile, EXIT_OK, EXIT_RUNTIME, EXIT_SELFTEST, EXIT_USAGE};
use rigidsim::datagen::{read_trajectory, write_trajectory, Trajectory};
use rigidsim::eval::{evaluation_frames, EvalReport};
use rigidsim::geometry::{axis_angle, RigidTransform};
use rigidsim::model::ModelConfig;
use rigidsim::training::{lr_schedule, TrainConfig};
use serde_json::Value;

fn rigidsim(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("rigidsim").chain(args.iter().copied());
    let code = run(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn json_of(args: &[&str]) -> Value {
    let mut all = vec!["--json"];
    all.extend(args);
    let (code, out, err) = rigidsim(&all);
    assert_eq!(code, EXIT_OK, "{args:?}: {err}");
    serde_json::from_str(&out).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen_data(dir: &Path, count: usize) {
    let v = json_of(&["gen-data", "--out", s(dir), "--count", &count.to_string(), "--seed", "100"]);
    assert_eq!(v["count"], count);
}

fn tiny_config(dir: &Path, epochs: usize) -> PathBuf {
    let file = TrainFile {
        model: ModelConfig {
            dropout: 0.0,
            accel_scale: 0.003,
            ..ModelConfig::tiny()
        },
        train: TrainConfig {
            epochs,
            warmup_epochs: 1,
            base_lr: 1e-3,
            sequence_length: 4,
            ..TrainConfig::default()
        },
    };
    let path = dir.join("train.json");
    std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
    path
}

fn test_file(data: &Path) -> PathBuf {
    let mut names: Vec<PathBuf> = std::fs::read_dir(data).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|x| x == "rgf")).collect();
    names.sort();
    names.pop().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(rigidsim(&["no-such-command"]).0, EXIT_USAGE);
    assert_eq!(rigidsim(&["rollout", "--input", "x", "--out", "y"]).0, EXIT_USAGE);
    assert_eq!(rigidsim(&["gen-data", "--out", "x", "--count", "many"]).0, EXIT_USAGE);
    assert_eq!(rigidsim(&["--help"]).0, EXIT_OK);
}

#[test]
fn gen_data_splits_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let v = json_of(&["gen-data", "--out", s(a.path()), "--count", "10", "--seed", "7"]);
    assert_eq!((v["train"].as_u64(), v["val"].as_u64(), v["test"].as_u64()), (Some(8), Some(1), Some(1)));
    json_of(&["gen-data", "--out", s(b.path()), "--count", "10", "--seed", "7"]);
    for i in [0, 9] {
        let name = format!("traj_{i:05}.rgf");
        assert_eq!(std::fs::read(a.path().join(&name)).unwrap(), std::fs::read(b.path().join(&name)).unwrap());
    }
    assert!(a.path().join("manifest.json").is_file());
}

#[test]
fn train_smoke_lowers_the_loss_and_resume_continues() {
    let data = tempfile::tempdir().unwrap();
    gen_data(data.path(), 10);
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_config(out.path(), 2);
    let run_dir = out.path().join("run");
    let v = json_of(&["train", "--data", s(data.path()), "--out", s(&run_dir), "--config", s(&cfg), "--limit", "4"]);
    assert_eq!(v["epoch"], 2);
    let epochs = v["epochs"].as_array().unwrap();
    let val = |e: &Value| e["val"]["total"].as_f64().unwrap();
    assert!(val(&epochs[1]) < val(&epochs[0]) || epochs[1]["train"]["total"].as_f64() < epochs[0]["train"]["total"].as_f64());
    let steps = std::fs::read_to_string(run_dir.join("steps.jsonl")).unwrap();
    let records: Vec<Value> = steps.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 8);
    let step_before = v["step"].as_u64().unwrap();

    let v = json_of(&["train", "--data", s(data.path()), "--out", s(&run_dir), "--config", s(&cfg), "--limit", "4", "--resume", "--epochs", "3"]);
    assert_eq!(v["epoch"], 3);
    assert_eq!(v["step"].as_u64().unwrap(), step_before + 4);
    let steps = std::fs::read_to_string(run_dir.join("steps.jsonl")).unwrap();
    let records: Vec<Value> = steps.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 12);
    for w in records.windows(2) {
        assert_eq!(w[1]["step"].as_u64().unwrap(), w[0]["step"].as_u64().unwrap() + 1);
    }
    let file: TrainFile = serde_json::from_str(&std::fs::read_to_string(run_dir.join("config.json")).unwrap()).unwrap();
    for r in &records[8..] {
        let step = r["step"].as_u64().unwrap() as usize;
        assert_eq!(r["lr"].as_f64().unwrap(), lr_schedule(step, 12, 4, &file.train));
    }
}

#[test]
fn non_finite_loss_exits_with_a_dump() {
    let data = tempfile::tempdir().unwrap();
    gen_data(data.path(), 10);
    let first = data.path().join("traj_00000.rgf");
    let mut t = read_trajectory(&first).unwrap();
    t.objects[0].physics.mass = 1e300;
    write_trajectory(&first, &t).unwrap();
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_config(out.path(), 1);
    let run_dir = out.path().join("run");
    let (code, _, err) = rigidsim(&["train", "--data", s(data.path()), "--out", s(&run_dir), "--config", s(&cfg), "--limit", "1"]);
    assert_eq!(code, EXIT_RUNTIME, "{err}");
    assert!(err.contains("non-finite"), "{err}");
    let dump = std::fs::read_dir(&run_dir).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).find(|n| n.starts_with("nonfinite_step"));
    let dump: Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join(dump.expect("dump file"))).unwrap()).unwrap();
    assert_eq!(dump["step"], 0);
    assert_eq!(dump["samples"][0]["trajectory"], 0);
}

#[test]
fn untrained_rollout_equals_the_baseline_and_is_deterministic() {
    let data = tempfile::tempdir().unwrap();
    gen_data(data.path(), 10);
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_config(out.path(), 1);
    let run_dir = out.path().join("run");
    json_of(&["train", "--data", s(data.path()), "--out", s(&run_dir), "--config", s(&cfg), "--init-only"]);
    let ckpt = run_dir.join("model.ckpt");
    let input = test_file(data.path());
    let (m, cv, m2) = (out.path().join("m.rgf"), out.path().join("cv.rgf"), out.path().join("m2.rgf"));
    let v = json_of(&["rollout", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(&m), "--step", "5", "--horizon", "100"]);
    let (_, predicted) = evaluation_frames(5, 100);
    assert_eq!(predicted.len(), 19);
    assert_eq!(v["files"][0]["predictions"], 19);
    assert!(v["files"][0]["rigidity"].as_f64().unwrap() <= 1e-5);
    json_of(&["rollout", "--constant-velocity", "--input", s(&input), "--out", s(&cv), "--step", "5", "--horizon", "100"]);
    json_of(&["rollout", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(&m2), "--step", "5", "--horizon", "100"]);
    assert_eq!(std::fs::read(&m).unwrap(), std::fs::read(&cv).unwrap());
    assert_eq!(std::fs::read(&m).unwrap(), std::fs::read(&m2).unwrap());

    let (code, _, _) = rigidsim(&["rollout", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(&m), "--horizon", "500"]);
    assert_eq!(code, EXIT_RUNTIME);
    let (code, _, _) = rigidsim(&["rollout", "--checkpoint", s(&ckpt), "--input", s(&input), "--out", s(&m), "--mask-fraction", "1.5"]);
    assert_eq!(code, EXIT_USAGE);
}

#[test]
fn masked_rollout_scatters_full_resolution_geometry() {
    let data = tempfile::tempdir().unwrap();
    gen_data(data.path(), 10);
    let out = tempfile::tempdir().unwrap();
    let cfg = tiny_config(out.path(), 1);
    let run_dir = out.path().join("run");
    json_of(&["train", "--data", s(data.path()), "--out", s(&run_dir), "--config", s(&cfg), "--init-only"]);
    let input = test_file(data.path());
    let pred = out.path().join("masked.rgf");
    let v = json_of(&[
        "rollout", "--checkpoint", s(&run_dir.join("model.ckpt")), "--input", s(&input), "--out", s(&pred), "--step", "10", "--horizon", "60", "--mask-fraction", "0.25",
    ]);
    assert!(v["files"][0]["rigidity"].as_f64().unwrap() <= 1e-5);
    let gt = read_trajectory(&input).unwrap();
    let p = read_trajectory(&pred).unwrap();
    for (a, b) in p.objects.iter().zip(&gt.objects) {
        assert_eq!(a.reference.len(), b.reference.len());
        assert_eq!(a.reference.len(), 64);
    }
}

/// Copy of `gt` with every transform after the warmup frames composed with
/// `offset`.
fn perturbed(gt: &Trajectory, step: usize, horizon: usize, offset: &RigidTransform) -> Trajectory {
    let (warm, predicted) = evaluation_frames(step, horizon);
    let frames: Vec<usize> = warm.iter().chain(&predicted).copied().collect();
    let transforms = frames
        .iter()
        .enumerate()
        .map(|(k, &f)| gt.transforms[f].iter().map(|t| if k < 2 { *t } else { offset.compose(t) }).collect())
        .collect();
    Trajectory {
        transforms,
        frame_indices: Some(frames),
        step_size: Some(step),
        ..gt.clone()
    }
}

fn eval_with(offset: RigidTransform) -> EvalReport {
    let data = tempfile::tempdir().unwrap();
    gen_data(data.path(), 10);
    let gt_dir = tempfile::tempdir().unwrap();
    let pred_dir = tempfile::tempdir().unwrap();
    let input = test_file(data.path());
    let name = input.file_name().unwrap();
    std::fs::copy(&input, gt_dir.path().join(name)).unwrap();
    let gt = read_trajectory(&input).unwrap();
    write_trajectory(&pred_dir.path().join(name), &perturbed(&gt, 5, 100, &offset)).unwrap();
    let v = json_of(&["eval", "--pred", s(pred_dir.path()), "--gt", s(gt_dir.path())]);
    let report: EvalReport = serde_json::from_value(v.clone()).unwrap();
    assert_eq!(serde_json::to_value(&report).unwrap(), v);
    report
}

#[test]
fn eval_of_ground_truth_is_zero() {
    let r = eval_with(RigidTransform::identity());
    let m = r.get(5, 100).unwrap();
    assert!(m.translation_rmse < 1e-6 && m.orientation_rmse_deg < 1e-3, "{m:?}");
}

#[test]
fn eval_measures_translation_offsets() {
    let r = eval_with(RigidTransform::new(axis_angle([0.0, 0.0, 1.0], 0.0), [0.1, 0.0, 0.0]));
    let m = r.get(5, 50).unwrap();
    assert!((m.translation_rmse - 0.1).abs() < 1e-5, "{m:?}");
    assert!(m.orientation_rmse_deg < 1e-3);
}

#[test]
fn eval_measures_rotation_offsets() {
    let r = eval_with(RigidTransform::new(axis_angle([0.0, 0.0, 1.0], 10f64.to_radians()), [0.0; 3]));
    let m = r.get(5, 100).unwrap();
    assert!((m.orientation_rmse_deg - 10.0).abs() < 1e-3, "{m:?}");
}

#[test]
fn eval_rejects_orphans_and_missing_dirs() {
    let data = tempfile::tempdir().unwrap();
    gen_data(data.path(), 10);
    let pred = tempfile::tempdir().unwrap();
    let input = test_file(data.path());
    std::fs::copy(&input, pred.path().join("orphan.rgf")).unwrap();
    let gt = tempfile::tempdir().unwrap();
    std::fs::copy(&input, gt.path().join("other.rgf")).unwrap();
    assert_eq!(rigidsim(&["eval", "--pred", s(pred.path()), "--gt", s(gt.path())]).0, EXIT_RUNTIME);
    assert_eq!(rigidsim(&["eval", "--pred", "/nonexistent/pred", "--gt", s(gt.path())]).0, EXIT_RUNTIME);
}

#[test]
fn selftest_exit_codes() {
    let quick = ["selftest", "--trials", "3", "--kabsch-trials", "50", "--gradient-seeds", "1", "--gradient-coords", "6"];
    let (code, out, _) = rigidsim(&quick);
    assert_eq!(code, EXIT_OK, "{out}");
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 8, "{out}");
    let mut broken = quick.to_vec();
    broken.push("--break-det-correction");
    let (code, out, _) = rigidsim(&broken);
    assert_eq!(code, EXIT_SELFTEST);
    assert!(out.lines().any(|l| l.starts_with("FAIL") && l.contains("kabsch")), "{out}");
}

#[test]
fn profile_reports_pair_counts() {
    let v = json_of(&["profile", "--objects", "4,8", "--vertices", "16", "--repeats", "1"]);
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows[0]["decoder_pairs_per_layer"], 20 * 20);
    assert_eq!(rows[1]["predictor_pairs_per_scale"], 8 * 4 * 8);
    assert_eq!(v["ratios"][0]["pair_ratio"], 576.0 / 400.0);
}
