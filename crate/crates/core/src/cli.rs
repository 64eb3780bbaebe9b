//! Command-line front end: data generation, training, rollout, evaluation,
//! self-tests and profiling.
//!
//! Every command produces a report that prints either as text or, with
//! `--json`, as a single JSON document on stdout. Logs go to stderr.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error, 3 self-test
//! failure. `RIGIDSIM_THREADS` sizes the worker pool and `RIGIDSIM_SEED`
//! replaces every seed flag.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datagen::{
    read_manifest, read_trajectory, simulate_scene, write_manifest, write_trajectory, Manifest, ManifestEntry, SceneConfig, Split, Trajectory,
};
use crate::eval::{constant_velocity_trajectory, evaluate_dirs, rigidity_error, rollout_trajectory, RolloutOptions};
use crate::model::{Model, ModelConfig};
use crate::profile::{format_table, profile_row, ProfileRow};
use crate::selftest::{run_all, Mutations, SelftestOptions, SuiteResult};
use crate::training::{validation_sequences, EpochSummary, JsonLog, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_SELFTEST: i32 = 3;

pub const THREADS_VAR: &str = "RIGIDSIM_THREADS";
pub const SEED_VAR: &str = "RIGIDSIM_SEED";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "rigidsim", version, about = "Learned mesh-free rigid-body simulation")]
pub struct Cli {
    /// Emit the report as JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset of trajectories with a manifest.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Roll a checkpoint out on trajectory files.
    Rollout(RolloutArgs),
    /// Compare predicted trajectories with ground truth.
    Eval(EvalArgs),
    /// Run the invariant and gradient suites.
    Selftest(SelftestArgs),
    /// Time the advance and report attention pair counts.
    Profile(ProfileArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Scene configuration (JSON); omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the first trajectory; trajectory i uses seed + i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory containing a manifest.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for checkpoints and logs.
    #[arg(long)]
    pub out: PathBuf,
    /// Training configuration `{"model": {...}, "train": {...}}` (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from the checkpoint in the output directory.
    #[arg(long)]
    pub resume: bool,
    /// Override the configured epoch count.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Limit the number of training trajectories used.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Write the initialized checkpoint without training.
    #[arg(long, conflicts_with = "resume")]
    pub init_only: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RolloutArgs {
    /// Model checkpoint; omit together with `--constant-velocity`.
    #[arg(long, required_unless_present = "constant_velocity")]
    pub checkpoint: Option<PathBuf>,
    /// Roll out the rigid constant-velocity baseline instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub constant_velocity: bool,
    /// A trajectory file, or a directory of them.
    #[arg(long)]
    pub input: PathBuf,
    /// Output file, or directory when the input is a directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub step: usize,
    #[arg(long, default_value_t = 100)]
    pub horizon: usize,
    /// Hide this fraction of every object's points from the model.
    #[arg(long)]
    pub mask_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted trajectories.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of ground-truth trajectories with the same file names.
    #[arg(long)]
    pub gt: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1000)]
    pub kabsch_trials: usize,
    #[arg(long, default_value_t = 20)]
    pub gradient_seeds: usize,
    #[arg(long, default_value_t = 24)]
    pub gradient_coords: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Test hook: Kabsch without the reflection correction.
    #[arg(long)]
    pub break_det_correction: bool,
    /// Test hook: farthest-point ties resolved by input order.
    #[arg(long)]
    pub index_ordered_ties: bool,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Checkpoint to time; a fresh desk-scale model otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [8, 32, 128])]
    pub objects: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [64])]
    pub vertices: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0} self-test suite(s) failed")]
    Selftest(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Selftest(_) => EXIT_SELFTEST,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Training configuration file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// What a command hands back for printing.
pub struct Report {
    pub text: String,
    pub json: Value,
    /// Set when the command ran but its verdict is a failure.
    pub failure: Option<CliError>,
}

impl Report {
    fn ok(text: String, json: Value) -> Self {
        Self { text, json, failure: None }
    }
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("{SEED_VAR} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn env_threads() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_VAR) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("{THREADS_VAR} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(runtime)?;
    std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Splits for `count` trajectories: a tenth each (rounded down) for
/// validation and test, the rest for training, in that file order.
pub fn split_counts(count: usize) -> [usize; 3] {
    let held = count / 10;
    [count - 2 * held, held, held]
}

pub fn trajectory_file_name(i: usize) -> String {
    format!("traj_{i:05}.rgf")
}

pub fn cmd_gen_data(args: &GenDataArgs, seed: u64) -> Result<Report, CliError> {
    let config: SceneConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => SceneConfig::default(),
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Runtime(format!("{}: {e}", args.out.display())))?;
    let [train, val, _] = split_counts(args.count);
    let entries: Vec<ManifestEntry> = (0..args.count)
        .map(|i| ManifestEntry {
            file: trajectory_file_name(i),
            split: if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            },
            seed: seed.wrapping_add(i as u64),
        })
        .collect();
    entries
        .par_iter()
        .map(|e| {
            let t = simulate_scene(&config, e.seed).map_err(runtime)?;
            write_trajectory(&args.out.join(&e.file), &t).map_err(runtime)
        })
        .collect::<Result<Vec<()>, CliError>>()?;
    let manifest = Manifest { config, entries };
    write_manifest(&args.out.join(MANIFEST_FILE), &manifest).map_err(runtime)?;
    let counts = [Split::Train, Split::Val, Split::Test].map(|s| manifest.count(s));
    Ok(Report::ok(
        format!(
            "wrote {} trajectories to {}: train {}, val {}, test {}",
            args.count,
            args.out.display(),
            counts[0],
            counts[1],
            counts[2]
        ),
        json!({ "out": args.out, "count": args.count, "train": counts[0], "val": counts[1], "test": counts[2] }),
    ))
}

/// Trajectories of one split, in manifest order.
pub fn load_split(dir: &Path, split: Split) -> Result<Vec<Trajectory>, CliError> {
    let manifest = read_manifest(&dir.join(MANIFEST_FILE)).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let files: Vec<&ManifestEntry> = manifest.split(split).collect();
    files
        .par_iter()
        .map(|e| read_trajectory(&dir.join(&e.file)).map_err(|err| CliError::Runtime(format!("{}: {err}", e.file))))
        .collect()
}

pub fn cmd_train(args: &TrainArgs, seed: Option<u64>) -> Result<Report, CliError> {
    let mut file: TrainFile = match &args.config {
        Some(p) => read_json(p)?,
        None => TrainFile::default(),
    };
    if let Some(e) = args.epochs {
        file.train.epochs = e;
    }
    if let Some(s) = seed {
        file.train.seed = s;
    }
    file.train.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let mut train = load_split(&args.data, Split::Train)?;
    if let Some(n) = args.limit {
        train.truncate(n);
    }
    let val_data = load_split(&args.data, Split::Val)?;
    let val = validation_sequences(&val_data, &file.train).map_err(runtime)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Runtime(format!("{}: {e}", args.out.display())))?;

    let mut trainer = if args.resume {
        Trainer::resume(&args.out, file.train.clone(), train.len()).map_err(runtime)?
    } else {
        let model = Model::<f32>::new(file.model.clone(), file.train.seed).map_err(|e| CliError::Usage(e.to_string()))?;
        let mut t = Trainer::new(model, file.train.clone(), train.len()).map_err(|e| CliError::Usage(e.to_string()))?;
        t.out_dir = Some(args.out.clone());
        t
    };
    write_json(
        &args.out.join("config.json"),
        &TrainFile {
            model: trainer.model.config.clone(),
            train: trainer.config.clone(),
        },
    )?;
    if args.init_only {
        trainer.save(&args.out).map_err(runtime)?;
        return Ok(Report::ok(
            format!("wrote initialized checkpoint to {}", args.out.display()),
            json!({ "out": args.out, "epoch": 0, "step": 0, "parameters": trainer.model.num_params() }),
        ));
    }
    let mut steps = JsonLog::append(&args.out.join("steps.jsonl")).map_err(runtime)?;
    let mut epochs = JsonLog::append(&args.out.join("epochs.jsonl")).map_err(runtime)?;
    log::info!(
        "training {} parameters on {} trajectories from epoch {} step {}",
        trainer.model.num_params(),
        train.len(),
        trainer.epoch,
        trainer.step
    );
    let mut summaries: Vec<EpochSummary> = Vec::new();
    let mut io_error = None;
    while !trainer.finished() {
        let summary = trainer
            .run_epoch(&train, &val, &mut |r| {
                if let Err(e) = steps.write(r) {
                    io_error.get_or_insert(e);
                }
            })
            .map_err(runtime)?;
        if let Some(e) = io_error.take() {
            return Err(runtime(e));
        }
        epochs.write(&summary).map_err(runtime)?;
        log::info!(
            "epoch {} step {} train {:.4} val {} ({:.1}s)",
            summary.epoch,
            summary.step,
            summary.train.total,
            summary.val.map_or("-".to_string(), |v| format!("{:.4}", v.total)),
            summary.seconds
        );
        summaries.push(summary);
    }
    trainer.save(&args.out).map_err(runtime)?;
    let mut text = format!("trained to epoch {} (step {}); checkpoint in {}\n", trainer.epoch, trainer.step, args.out.display());
    for s in &summaries {
        text.push_str(&format!(
            "epoch {:>4}  train {:>12.4}  val {:>12}\n",
            s.epoch,
            s.train.total,
            s.val.map_or("-".to_string(), |v| format!("{:.4}", v.total))
        ));
    }
    Ok(Report::ok(
        text.trim_end().to_string(),
        json!({ "out": args.out, "epoch": trainer.epoch, "step": trainer.step, "epochs": summaries }),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub input: PathBuf,
    pub output: PathBuf,
    pub predictions: usize,
    pub seconds: f64,
    pub rigidity: f64,
}

fn rollout_pairs(args: &RolloutArgs) -> Result<Vec<(PathBuf, PathBuf)>, CliError> {
    if !args.input.is_dir() {
        return Ok(vec![(args.input.clone(), args.out.clone())]);
    }
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Runtime(format!("{}: {e}", args.out.display())))?;
    let mut names: Vec<OsString> = std::fs::read_dir(&args.input)
        .map_err(runtime)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name())
        .filter(|n| Path::new(n).extension().is_some_and(|x| x == "rgf"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Runtime(format!("no .rgf files in {}", args.input.display())));
    }
    Ok(names.into_iter().map(|n| (args.input.join(&n), args.out.join(&n))).collect())
}

pub fn cmd_rollout(args: &RolloutArgs, seed: u64) -> Result<Report, CliError> {
    if let Some(f) = args.mask_fraction {
        if !(0.0..1.0).contains(&f) {
            return Err(CliError::Usage(format!("--mask-fraction {f} outside [0, 1)")));
        }
    }
    // 64-bit inference keeps an untrained checkpoint bit-identical to the
    // constant-velocity baseline.
    let model = match &args.checkpoint {
        Some(p) => Some(Model::<f32>::load(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?.0.cast::<f64>()),
        None => None,
    };
    let anchors = model.as_ref().map_or(ModelConfig::desk().anchors, |m| m.config.anchors);
    let pairs = rollout_pairs(args)?;
    let records = pairs
        .par_iter()
        .enumerate()
        .map(|(i, (input, output))| {
            let t = read_trajectory(input).map_err(|e| CliError::Runtime(format!("{}: {e}", input.display())))?;
            let (pred, seconds) = match &model {
                Some(m) => {
                    let opts = RolloutOptions {
                        mask: args.mask_fraction.map(|f| (f, seed.wrapping_add(i as u64))),
                    };
                    let (p, timing) = rollout_trajectory(m, &t, args.step, args.horizon, opts).map_err(runtime)?;
                    (p, timing.seconds)
                }
                None => (constant_velocity_trajectory(&t, args.step, args.horizon, anchors).map_err(runtime)?, 0.0),
            };
            write_trajectory(output, &pred).map_err(|e| CliError::Runtime(format!("{}: {e}", output.display())))?;
            Ok(RolloutRecord {
                input: input.clone(),
                output: output.clone(),
                predictions: pred.frames() - 2,
                seconds,
                rigidity: rigidity_error(&pred),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut text = format!("rolled out {} file(s) at step {} to frame {}\n", records.len(), args.step, args.horizon);
    for r in &records {
        text.push_str(&format!(
            "{} -> {}: {} predictions, {:.3}s, rigidity {:.2e}\n",
            r.input.display(),
            r.output.display(),
            r.predictions,
            r.seconds,
            r.rigidity
        ));
    }
    Ok(Report::ok(
        text.trim_end().to_string(),
        json!({ "step": args.step, "horizon": args.horizon, "mask_fraction": args.mask_fraction, "files": records }),
    ))
}

pub fn cmd_eval(args: &EvalArgs) -> Result<Report, CliError> {
    for dir in [&args.pred, &args.gt] {
        if !dir.is_dir() {
            return Err(CliError::Runtime(format!("{} is not a directory", dir.display())));
        }
    }
    let report = evaluate_dirs(&args.pred, &args.gt).map_err(runtime)?;
    let json = serde_json::to_value(&report).map_err(runtime)?;
    Ok(Report::ok(report.to_table(), json))
}

pub fn cmd_selftest(args: &SelftestArgs, seed: u64) -> Result<Report, CliError> {
    let opts = SelftestOptions {
        trials: args.trials,
        kabsch_trials: args.kabsch_trials,
        gradient_seeds: args.gradient_seeds,
        gradient_coords: args.gradient_coords,
        seed,
        mutations: Mutations {
            skip_det_correction: args.break_det_correction,
            index_ordered_fps_ties: args.index_ordered_ties,
        },
    };
    let results: Vec<SuiteResult> = run_all(&opts);
    let failed = results.iter().filter(|r| !r.passed).count();
    let text = results.iter().map(SuiteResult::line).collect::<Vec<_>>().join("\n");
    Ok(Report {
        text,
        json: json!({ "passed": failed == 0, "suites": results }),
        failure: (failed > 0).then_some(CliError::Selftest(failed)),
    })
}

pub fn cmd_profile(args: &ProfileArgs) -> Result<Report, CliError> {
    let model = match &args.checkpoint {
        Some(p) => Model::<f32>::load(p).map_err(|e| CliError::Runtime(format!("{}: {e}", p.display())))?.0,
        None => Model::<f32>::new(ModelConfig::desk(), 0).map_err(runtime)?,
    };
    if args.objects.is_empty() || args.vertices.is_empty() || args.objects.contains(&0) {
        return Err(CliError::Usage("need at least one positive object count and vertex count".into()));
    }
    let mut rows: Vec<ProfileRow> = Vec::new();
    for &nv in &args.vertices {
        for &m in &args.objects {
            rows.push(profile_row(&model, m, nv, args.repeats).map_err(runtime)?);
        }
    }
    let mut text = format_table(&rows);
    let mut ratios = Vec::new();
    for w in rows.windows(2) {
        if w[0].vertices_per_object == w[1].vertices_per_object {
            let r = json!({
                "from": w[0].objects,
                "to": w[1].objects,
                "pair_ratio": w[1].decoder_pairs_per_layer as f64 / w[0].decoder_pairs_per_layer as f64,
                "decoder_time_ratio": w[1].ms_decoder / w[0].ms_decoder,
            });
            text.push_str(&format!(
                "M {} -> {}: decoder pairs x{:.2}, decoder time x{:.2}\n",
                w[0].objects,
                w[1].objects,
                r["pair_ratio"].as_f64().unwrap_or(0.0),
                r["decoder_time_ratio"].as_f64().unwrap_or(0.0)
            ));
            ratios.push(r);
        }
    }
    Ok(Report::ok(text.trim_end().to_string(), json!({ "rows": rows, "ratios": ratios })))
}

fn init_threads() -> Result<(), CliError> {
    if let Some(n) = env_threads()? {
        // A second call in the same process (tests) keeps the first pool.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("worker pool already initialized");
        }
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<Report, CliError> {
    init_threads()?;
    let seed = env_seed()?;
    match &cli.command {
        Command::GenData(a) => cmd_gen_data(a, seed.unwrap_or(a.seed)),
        Command::Train(a) => cmd_train(a, seed.or(a.seed)),
        Command::Rollout(a) => cmd_rollout(a, seed.unwrap_or(a.seed)),
        Command::Eval(a) => cmd_eval(a),
        Command::Selftest(a) => cmd_selftest(a, seed.unwrap_or(a.seed)),
        Command::Profile(a) => cmd_profile(a),
    }
}

/// Parse `args` (program name first), run, print to `out`/`err`, and
/// return the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    let (report, failure) = match execute(&cli) {
        Ok(r) => {
            let failure = r.failure;
            (Some((r.text, r.json)), failure)
        }
        Err(e) => (None, Some(e)),
    };
    if let Some((text, json)) = report {
        let printed = if cli.json {
            serde_json::to_string_pretty(&json).map(|s| writeln!(out, "{s}"))
        } else {
            Ok(writeln!(out, "{text}"))
        };
        if !matches!(printed, Ok(Ok(()))) {
            return EXIT_RUNTIME;
        }
    }
    match failure {
        None => EXIT_OK,
        Some(e) => {
            if cli.json && !matches!(e, CliError::Selftest(_)) {
                let _ = writeln!(out, "{}", json!({ "error": e.to_string(), "exit_code": e.exit_code() }));
            }
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
