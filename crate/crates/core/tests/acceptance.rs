//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Pass criterion ids (`C1` .. `C10`) as arguments to run a subset. The
//! desk-scale model shared by C1, C6, C7 and C9 is trained once and cached
//! under the cargo target directory; set `RIGIDSIM_ACCEPTANCE_RETRAIN=1` to
//! discard the cache.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use rigidsim::datagen::{simulate_scene, SceneConfig, Trajectory};
use rigidsim::eval::{constant_velocity_trajectory, evaluate, rigidity_error, rollout_trajectory, EvalReport, RolloutOptions};
use rigidsim::model::{Model, ModelConfig};
use rigidsim::profile::{decoder_pairs, predictor_pairs, profile_row, vertex_pairs, ProfileRow};
use rigidsim::selftest::{
    arope_reindex_suite, avp_suite, gradient_suite, kabsch_suite, object_permutation_suite, randomized_tiny, zero_init_suite, Mutations, SuiteResult,
};
use rigidsim::training::{lr_schedule, smooth_l1_values, validation_sequences, LossReport, TrainConfig, Trainer};

const TRAIN_TRAJECTORIES: u64 = 200;
const TEST_SEEDS: std::ops::Range<u64> = 10_000..10_020;
const VAL_SEEDS: std::ops::Range<u64> = 20_000..20_010;
const STEPS: [usize; 3] = [1, 5, 10];
const HORIZON: usize = 100;
const MODEL_SEED: u64 = 7;

struct Outcome {
    id: &'static str,
    name: &'static str,
    passed: bool,
    detail: String,
    seconds: f64,
}

impl Outcome {
    fn line(&self) -> String {
        format!(
            "{} {:<4} {:<34} {} [{:.1}s]",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

fn suites_outcome(id: &'static str, name: &'static str, suites: &[SuiteResult], seconds: f64, budget: f64) -> Outcome {
    let mut detail: Vec<String> = suites
        .iter()
        .map(|s| format!("{}: {:.2e} <= {:.0e} ({})", s.name, s.observed, s.tolerance, if s.passed { "ok" } else { "over" }))
        .collect();
    let in_time = seconds <= budget;
    if !in_time {
        detail.push(format!("runtime {seconds:.0}s over {budget:.0}s"));
    }
    Outcome {
        id,
        name,
        passed: in_time && suites.iter().all(|s| s.passed),
        detail: detail.join("; "),
        seconds,
    }
}

fn desk_model_config() -> ModelConfig {
    ModelConfig::desk()
}

fn desk_train_config() -> TrainConfig {
    TrainConfig::default()
}

fn generate(seeds: impl Iterator<Item = u64>) -> Vec<Trajectory> {
    let cfg = SceneConfig::default();
    let seeds: Vec<u64> = seeds.collect();
    seeds.par_iter().map(|&s| simulate_scene(&cfg, s).expect("scene generation")).collect()
}

fn cache_path(model: &ModelConfig, train: &TrainConfig) -> PathBuf {
    let key = serde_json::json!({
        "model": model,
        "train": train,
        "scene": SceneConfig::default(),
        "train_trajectories": TRAIN_TRAJECTORIES,
        "val": [VAL_SEEDS.start, VAL_SEEDS.end],
        "model_seed": MODEL_SEED,
        "version": env!("CARGO_PKG_VERSION"),
    });
    let mut h = DefaultHasher::new();
    key.to_string().hash(&mut h);
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(format!("desk_{:016x}.ckpt", h.finish()))
}

/// The desk-scale model, trained now or loaded from the cache, and the
/// seconds spent training it (from the cache metadata when loaded).
fn desk_model() -> (Model<f32>, f64, bool) {
    let mc = desk_model_config();
    let tc = desk_train_config();
    let path = cache_path(&mc, &tc);
    let retrain = std::env::var("RIGIDSIM_ACCEPTANCE_RETRAIN").is_ok_and(|v| v == "1");
    if !retrain {
        if let Ok((model, extra)) = Model::<f32>::load(&path) {
            eprintln!("loaded cached desk model from {}", path.display());
            return (model, extra["train_seconds"].as_f64().unwrap_or(f64::NAN), true);
        }
    }
    let t0 = Instant::now();
    let train = generate(0..TRAIN_TRAJECTORIES);
    let val = validation_sequences(&generate(VAL_SEEDS), &tc).expect("validation windows");
    let model = Model::<f32>::new(mc, MODEL_SEED).expect("desk config");
    eprintln!("training desk model: {} parameters, {} trajectories, {} epochs", model.num_params(), train.len(), tc.epochs);
    let mut trainer = Trainer::new(model, tc, train.len()).expect("trainer");
    while !trainer.finished() {
        let s = trainer.run_epoch(&train, &val, &mut |_| {}).expect("training epoch");
        eprintln!(
            "  epoch {:>3} train {:>10.3} val {:>10.3} ({:.0}s)",
            s.epoch,
            s.train.total,
            s.val.map_or(f64::NAN, |v| v.total),
            t0.elapsed().as_secs_f64()
        );
    }
    let seconds = t0.elapsed().as_secs_f64();
    if let Some(dir) = path.parent() {
        let _ = std::fs::create_dir_all(dir);
    }
    if let Err(e) = trainer.model.save(&path, serde_json::json!({ "train_seconds": seconds })) {
        eprintln!("could not cache the desk model: {e}");
    }
    (trainer.model, seconds, false)
}

/// Rollouts of `model` on every test trajectory at every step size.
fn rollouts(model: &Model<f32>, test: &[Trajectory], mask: Option<f64>) -> Vec<(usize, Trajectory)> {
    let runs: Vec<(usize, usize)> = (0..test.len()).flat_map(|i| STEPS.iter().map(move |&s| (i, s))).collect();
    runs.par_iter()
        .map(|&(i, s)| {
            let opts = RolloutOptions {
                mask: mask.map(|f| (f, i as u64)),
            };
            (i, rollout_trajectory(model, &test[i], s, HORIZON, opts).expect("rollout").0)
        })
        .collect()
}

fn report_of(preds: &[(usize, Trajectory)], test: &[Trajectory]) -> EvalReport {
    let pairs: Vec<(&Trajectory, &Trajectory)> = preds.iter().map(|(i, p)| (p, &test[*i])).collect();
    evaluate(&pairs, &[50, HORIZON]).expect("evaluation")
}

fn rmse(r: &EvalReport, step: usize, horizon: usize) -> f64 {
    r.get(step, horizon).map_or(f64::NAN, |m| m.translation_rmse)
}

struct DeskRun {
    model_report: EvalReport,
    cv_report: EvalReport,
    masked_report: EvalReport,
    rigidity: f64,
    masked_rigidity: f64,
    rollout_seconds: f64,
    train_seconds: f64,
    cached: bool,
}

fn desk_run() -> DeskRun {
    let (model, train_seconds, cached) = desk_model();
    let test = generate(TEST_SEEDS);
    let t0 = Instant::now();
    let preds = rollouts(&model, &test, None);
    let rollout_seconds = t0.elapsed().as_secs_f64();
    let rigidity = preds.iter().map(|(_, p)| rigidity_error(p)).fold(0.0, f64::max);
    let masked = rollouts(&model, &test, Some(0.25));
    let masked_rigidity = masked.iter().map(|(_, p)| rigidity_error(p)).fold(0.0, f64::max);
    let cv: Vec<(usize, Trajectory)> = (0..test.len())
        .flat_map(|i| STEPS.iter().map(move |&s| (i, s)))
        .map(|(i, s)| (i, constant_velocity_trajectory(&test[i], s, HORIZON, model.config.anchors).expect("baseline")))
        .collect();
    DeskRun {
        model_report: report_of(&preds, &test),
        cv_report: report_of(&cv, &test),
        masked_report: report_of(&masked, &test),
        rigidity,
        masked_rigidity,
        rollout_seconds,
        train_seconds,
        cached,
    }
}

fn c1(run: &DeskRun) -> Outcome {
    let passed = run.rigidity <= 1e-5 && run.rollout_seconds < 60.0;
    Outcome {
        id: "C1",
        name: "rigidity of 32-bit rollouts",
        passed,
        detail: format!(
            "max relative distance deviation {:.2e} <= 1e-5 over {} test rollouts; rollouts took {:.1}s (< 60s)",
            run.rigidity,
            TEST_SEEDS.count() * STEPS.len(),
            run.rollout_seconds
        ),
        seconds: run.rollout_seconds,
    }
}

fn c2() -> Outcome {
    let t0 = Instant::now();
    let r = kabsch_suite(1000, Mutations::default(), 11);
    let s = t0.elapsed().as_secs_f64();
    suites_outcome("C2", "Kabsch oracle", &[r], s, 10.0)
}

fn c3() -> Outcome {
    let t0 = Instant::now();
    let m64 = randomized_tiny::<f64>(21);
    let m32 = randomized_tiny::<f32>(21);
    let suites = vec![
        object_permutation_suite(&m32, 100, 1e-5, 22),
        object_permutation_suite(&m64, 100, 1e-10, 23),
        arope_reindex_suite(&m64, 100, 24),
        avp_suite(&m64, 100, 25),
    ];
    let s = t0.elapsed().as_secs_f64();
    suites_outcome("C3", "symmetry suite", &suites, s, 120.0)
}

fn c4() -> Outcome {
    let t0 = Instant::now();
    let r = gradient_suite(20, 24, 31);
    let s = t0.elapsed().as_secs_f64();
    let mut o = suites_outcome("C4", "gradient check", &[r.clone()], s, 600.0);
    o.detail = format!("{}; {}", o.detail, r.detail);
    o
}

fn c5() -> Outcome {
    let t0 = Instant::now();
    let r = zero_init_suite(6, 41);
    let s = t0.elapsed().as_secs_f64();
    suites_outcome("C5", "zero-init baseline identity", &[r], s, f64::INFINITY)
}

fn c6(run: &DeskRun) -> Outcome {
    let mut parts = Vec::new();
    let mut passed = run.train_seconds.is_nan() || run.train_seconds <= 4.0 * 3600.0;
    for s in STEPS {
        let (m, c) = (rmse(&run.model_report, s, 50), rmse(&run.cv_report, s, 50));
        let ratio = m / c;
        passed &= ratio <= 0.8;
        parts.push(format!("s={s}: model {m:.4} m vs baseline {c:.4} m (ratio {ratio:.3} <= 0.8)"));
    }
    parts.push(format!(
        "training {:.0}s{}",
        run.train_seconds,
        if run.cached { " (cached model)" } else { "" }
    ));
    Outcome {
        id: "C6",
        name: "desk-scale learning vs baseline",
        passed,
        detail: parts.join("; "),
        seconds: run.train_seconds,
    }
}

fn c7(run: &DeskRun) -> Outcome {
    let (s1, s10) = (rmse(&run.model_report, 1, HORIZON), rmse(&run.model_report, 10, HORIZON));
    Outcome {
        id: "C7",
        name: "step-size trend",
        passed: s10 <= s1,
        detail: format!("100-frame RMSE step 10 {s10:.4} m <= step 1 {s1:.4} m"),
        seconds: 0.0,
    }
}

/// Profile rows with each timing minimized over interleaved rounds, so a
/// burst of host load cannot land on a single configuration.
fn fastest_rows(model: &Model<f32>, configs: &[(usize, usize)], rounds: usize) -> Vec<ProfileRow> {
    let mut best: Vec<ProfileRow> = Vec::new();
    for round in 0..rounds {
        for (k, &(m, nv)) in configs.iter().enumerate() {
            let row = profile_row(model, m, nv, 3).expect("profile");
            if round == 0 {
                best.push(row);
            } else {
                best[k].ms_per_step = best[k].ms_per_step.min(row.ms_per_step);
                best[k].ms_decoder = best[k].ms_decoder.min(row.ms_decoder);
            }
        }
    }
    best
}

fn c8() -> Outcome {
    let t0 = Instant::now();
    let model = Model::<f32>::new(ModelConfig::desk(), 0).expect("desk config");
    let r = model.config.registers;
    let na = model.config.anchors;
    let mut parts = Vec::new();
    let mut passed = decoder_pairs(217, 16) == 54_289;
    parts.push(format!("217 objects + 16 registers -> {} pairs", decoder_pairs(217, 16)));
    let ms = [8usize, 32, 128];
    let configs = [(8, 64), (32, 64), (128, 64), (32, 16), (32, 256)];
    let rows = fastest_rows(&model, &configs, 5);
    for row in &rows[..3] {
        let m = row.objects;
        passed &= row.decoder_pairs_per_layer == (m + r) * (m + r)
            && row.predictor_pairs_per_scale == m * na * m
            && row.vertex_level_pairs == vertex_pairs(m * 64)
            && row.predictor_pairs_per_scale == predictor_pairs(m, na);
    }
    let t: Vec<f64> = rows[..3].iter().map(|r| r.ms_decoder).collect();
    // Superlinear growth: the time per added object rises with M.
    let slope_low = (t[1] - t[0]) / (ms[1] - ms[0]) as f64;
    let slope_high = (t[2] - t[1]) / (ms[2] - ms[1]) as f64;
    passed &= slope_high > slope_low && t[2] > t[1] && t[1] > t[0];
    parts.push(format!(
        "decoder ms at M=8/32/128: {:.2}/{:.2}/{:.2}; ms per added object {:.4} -> {:.4}",
        t[0], t[1], t[2], slope_low, slope_high
    ));
    let (few, many) = (&rows[3], &rows[4]);
    let ratio = many.ms_decoder / few.ms_decoder;
    passed &= (0.8..=1.25).contains(&ratio);
    parts.push(format!(
        "M=32 decoder ms at 16 vs 256 vertices: {:.2} vs {:.2} (ratio {ratio:.2}); full step {:.1} vs {:.1} ms",
        few.ms_decoder, many.ms_decoder, few.ms_per_step, many.ms_per_step
    ));
    Outcome {
        id: "C8",
        name: "cost accounting",
        passed,
        detail: parts.join("; "),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn c9(run: &DeskRun) -> Outcome {
    let mut passed = run.masked_rigidity <= 1e-5;
    let mut parts = Vec::new();
    for s in STEPS {
        let (masked, full) = (rmse(&run.masked_report, s, 50), rmse(&run.model_report, s, 50));
        let ratio = masked / full;
        passed &= ratio <= 2.0;
        parts.push(format!("s={s}: masked {masked:.4} m vs full {full:.4} m (ratio {ratio:.2} <= 2)"));
    }
    parts.push(format!("masked rigidity {:.2e} <= 1e-5", run.masked_rigidity));
    Outcome {
        id: "C9",
        name: "partial-input robustness",
        passed,
        detail: parts.join("; "),
        seconds: 0.0,
    }
}

fn c10() -> Outcome {
    let t0 = Instant::now();
    let c = TrainConfig::default();
    let steps_per_epoch = TRAIN_TRAJECTORIES as usize;
    let total = steps_per_epoch * c.epochs;
    let warm = steps_per_epoch * c.warmup_epochs;
    let lr = [lr_schedule(0, total, warm, &c), lr_schedule(warm, total, warm, &c), lr_schedule(total - 1, total, warm, &c)];
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b;
    let lr_ok = close(lr[0], 1e-5) && close(lr[1], 1e-4) && close(lr[2], 1e-6);
    let sl = [smooth_l1_values(&[0.5], &[0.0]), smooth_l1_values(&[2.0], &[0.0])];
    let sl_ok = sl == [0.125, 1.5];
    let r = LossReport::from_components(0.3, 0.25, 1.5, 0.125);
    let recomposed = 10.0 * (r.pos_raw + r.pos_rigid) + (r.acc_raw + r.acc_rigid);
    let rep_ok = r.total == recomposed;
    Outcome {
        id: "C10",
        name: "loss and schedule point checks",
        passed: lr_ok && sl_ok && rep_ok,
        detail: format!(
            "lr start/warmup end/final {:.1e}/{:.1e}/{:.1e}; smooth-L1 {} / {}; total {} == 10*pos + acc {}",
            lr[0], lr[1], lr[2], sl[0], sl[1], r.total, recomposed
        ),
        seconds: t0.elapsed().as_secs_f64(),
    }
}

fn main() {
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with('C')).collect();
    let on = |id: &str| wanted.is_empty() || wanted.iter().any(|w| w == id);
    let mut outcomes = Vec::new();
    let mut emit = |o: Outcome| {
        println!("{}", o.line());
        outcomes.push(o.passed);
    };
    for (id, f) in [("C2", c2 as fn() -> Outcome), ("C3", c3), ("C4", c4), ("C5", c5), ("C8", c8), ("C10", c10)] {
        if on(id) {
            emit(f());
        }
    }
    if ["C1", "C6", "C7", "C9"].iter().any(|id| on(id)) {
        let run = desk_run();
        for (id, f) in [("C1", c1 as fn(&DeskRun) -> Outcome), ("C6", c6), ("C7", c7), ("C9", c9)] {
            if on(id) {
                emit(f(&run));
            }
        }
    }
    let failed = outcomes.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {} failed", outcomes.len() - failed, failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
