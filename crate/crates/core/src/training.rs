//! Anchor losses, optimizer, schedule, augmentation and the sequence
//! training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::datagen::Trajectory;
use crate::geometry::{rot_z, mat_vec, GeometryError, Vec3};
use crate::model::{AnchorTrace, Model};
use crate::scene::{ObjectState, Physics, SceneState};
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::{Gradients, Graph, ParamStore, Real, Result as TResult, Tensor, TensorError, Var};

pub const POSITION_WEIGHT: f64 = 10.0;
pub const ACCEL_WEIGHT: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("batch assembly: {0}")]
    Data(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {detail}{}", dump.as_ref().map(|p| format!(" (batch dumped to {})", p.display())).unwrap_or_default())]
    NonFinite {
        step: usize,
        detail: String,
        dump: Option<PathBuf>,
    },
}

/// Loss components of one prediction or an average over many.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub pos_raw: f64,
    pub pos_rigid: f64,
    pub acc_raw: f64,
    pub acc_rigid: f64,
}

impl LossReport {
    pub fn from_components(pos_raw: f64, pos_rigid: f64, acc_raw: f64, acc_rigid: f64) -> Self {
        Self {
            total: POSITION_WEIGHT * (pos_raw + pos_rigid) + ACCEL_WEIGHT * (acc_raw + acc_rigid),
            pos_raw,
            pos_rigid,
            acc_raw,
            acc_rigid,
        }
    }

    /// Mean of several reports, with the total recomposed from the averaged
    /// components.
    pub fn mean(reports: &[LossReport]) -> Self {
        if reports.is_empty() {
            return Self::default();
        }
        let n = reports.len() as f64;
        let s = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self::from_components(s(|r| r.pos_raw), s(|r| r.pos_rigid), s(|r| r.acc_raw), s(|r| r.acc_rigid))
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.pos_raw, self.pos_rigid, self.acc_raw, self.acc_rigid].iter().all(|v| v.is_finite())
    }
}

/// Smooth-L1 (threshold 1) averaged over all elements of `pred − target`.
pub fn smooth_l1<T: Real>(g: &mut Graph<'_, T>, pred: Var, target: Var) -> TResult<Var> {
    let d = g.sub(pred, target)?;
    let e = g.smooth_l1_elem(d)?;
    g.mean_all(e)
}

/// Plain-number Smooth-L1 mean.
pub fn smooth_l1_values(pred: &[f64], target: &[f64]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    let s: f64 = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = (p - t).abs();
            if d < 1.0 {
                0.5 * d * d
            } else {
                d - 0.5
            }
        })
        .sum();
    s / pred.len() as f64
}

/// The four loss terms of one step on the tape.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub pos_raw: Var,
    pub pos_rigid: Var,
    pub acc_raw: Var,
    pub acc_rigid: Var,
}

impl LossTerms {
    pub fn report<T: Real>(&self, g: &Graph<'_, T>) -> LossReport {
        let v = |x: Var| g.value(x).item().to_f64().unwrap_or(f64::NAN);
        LossReport::from_components(v(self.pos_raw), v(self.pos_rigid), v(self.acc_raw), v(self.acc_rigid))
    }
}

/// Anchor losses of one predicted step. `gt_next`, `gt_cur` and `gt_prev`
/// are ground-truth anchors `[ΣNa, 3]` at the predicted frame and the two
/// frames before it; `dt` is the interval between them.
pub fn compute_loss<T: Real>(
    g: &mut Graph<'_, T>,
    trace: &AnchorTrace,
    gt_next: Var,
    gt_cur: Var,
    gt_prev: Var,
    dt: f64,
) -> TResult<LossTerms> {
    let inv = T::c(1.0 / (dt * dt));
    let second_difference = |g: &mut Graph<'_, T>, next: Var, cur: Var, prev: Var| -> TResult<Var> {
        let twice = g.scale(cur, T::c(2.0))?;
        let a = g.sub(next, twice)?;
        let a = g.add(a, prev)?;
        g.scale(a, inv)
    };
    let target = g.scale(gt_next, inv)?;
    let raw = g.scale(trace.raw, inv)?;
    let rigid = g.scale(trace.rigid, inv)?;
    let pos_raw = smooth_l1(g, raw, target)?;
    let pos_rigid = smooth_l1(g, rigid, target)?;

    let a_gt = second_difference(g, gt_next, gt_cur, gt_prev)?;
    let a_raw = second_difference(g, trace.raw, trace.current, trace.previous)?;
    let a_rigid = second_difference(g, trace.rigid, trace.current, trace.previous)?;
    let acc_raw = smooth_l1(g, a_raw, a_gt)?;
    let acc_rigid = smooth_l1(g, a_rigid, a_gt)?;

    let p = g.add(pos_raw, pos_rigid)?;
    let p = g.scale(p, T::c(POSITION_WEIGHT))?;
    let a = g.add(acc_raw, acc_rigid)?;
    let a = g.scale(a, T::c(ACCEL_WEIGHT))?;
    let total = g.add(p, a)?;
    Ok(LossTerms {
        total,
        pos_raw,
        pos_rigid,
        acc_raw,
        acc_rigid,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_epochs: usize,
    pub warmup_start_fraction: f64,
    pub min_lr: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Network frames per training sequence, warmup frames included.
    pub sequence_length: usize,
    pub step_sizes: Vec<usize>,
    pub warmup_frames: usize,
    pub rotation_probability: f64,
    pub permutation_probability: f64,
    /// Cut gradients between consecutive rollout steps.
    pub detach_between_steps: bool,
    pub validate: bool,
    /// Save a numbered checkpoint every this many epochs (0: only the latest).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_epochs: 10,
            warmup_start_fraction: 0.1,
            min_lr: 1e-6,
            clip_norm: 1.0,
            epochs: 50,
            batch_size: 1,
            sequence_length: 8,
            step_sizes: vec![1, 5, 10],
            warmup_frames: 2,
            rotation_probability: 0.5,
            permutation_probability: 0.5,
            detach_between_steps: false,
            validate: true,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.base_lr > 0.0 && self.min_lr > 0.0 && self.min_lr <= self.base_lr) {
            return bad(format!("learning rates base {} min {}", self.base_lr, self.min_lr));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if self.warmup_frames != 2 || self.sequence_length <= self.warmup_frames {
            return bad(format!(
                "sequence length {} with {} warmup frames; exactly 2 warmup frames and at least one prediction are required",
                self.sequence_length, self.warmup_frames
            ));
        }
        if self.step_sizes.is_empty() || self.step_sizes.contains(&0) {
            return bad(format!("step sizes {:?}", self.step_sizes));
        }
        if !(self.clip_norm > 0.0 && (0.0..=1.0).contains(&self.warmup_start_fraction)) {
            return bad("clip norm and warmup start fraction".into());
        }
        Ok(())
    }

    /// Number of base frames one training sequence spans at step size `s`.
    pub fn span(&self, s: usize) -> usize {
        (self.sequence_length - 1) * s + 1
    }
}

/// Linear warmup from `warmup_start_fraction·base_lr` to `base_lr` over
/// `warmup_steps`, then cosine decay reaching `min_lr` at the final step.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, config: &TrainConfig) -> f64 {
    let base = config.base_lr;
    if step < warmup_steps {
        let f = config.warmup_start_fraction;
        return base * (f + (1.0 - f) * step as f64 / warmup_steps as f64);
    }
    let last = total_steps.saturating_sub(1);
    if last <= warmup_steps {
        return base;
    }
    let p = ((step - warmup_steps) as f64 / (last - warmup_steps) as f64).min(1.0);
    config.min_lr + (base - config.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW<T: Real> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Real> AdamW<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64, betas: [f64; 2], eps: f64, weight_decay: f64) {
        self.t += 1;
        let [b1, b2] = betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let k = id.0;
            let mut p = params.get(id).expect("parameter").clone();
            let zero;
            let grad = match grads.get(id) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(p.shape());
                    &zero
                }
            };
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gf = gv.to_f64().unwrap_or(f64::NAN);
                let mf = b1 * mv.to_f64().unwrap_or(0.0) + (1.0 - b1) * gf;
                let vf = b2 * vv.to_f64().unwrap_or(0.0) + (1.0 - b2) * gf * gf;
                *mv = T::c(mf);
                *vv = T::c(vf);
                let x = pv.to_f64().unwrap_or(f64::NAN);
                let update = (mf / c1) / ((vf / c2).sqrt() + eps) + weight_decay * x;
                *pv = T::c(x - lr * update);
            }
            params.set(id, p).expect("same shape");
        }
    }
}

/// Ground-truth window of `sequence_length` network frames at one step
/// size; the first frame doubles as the reference geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub step: usize,
    pub frame_dt: f64,
    pub physics: Vec<Physics>,
    /// `frames[k][object][vertex]`
    pub frames: Vec<Vec<Vec<Vec3>>>,
    pub trajectory: usize,
    pub start: usize,
}

impl Sequence {
    pub fn from_trajectory(t: &Trajectory, trajectory: usize, start: usize, step: usize, len: usize) -> Result<Self, TrainError> {
        let last = start + (len - 1) * step;
        if step == 0 || last >= t.frames() {
            return Err(TrainError::Data(format!(
                "trajectory {trajectory} has {} frames; step {step} from frame {start} needs frame {last}",
                t.frames()
            )));
        }
        let frames = (0..len)
            .map(|k| (0..t.objects.len()).map(|o| t.vertices(start + k * step, o)).collect())
            .collect();
        Ok(Self {
            step,
            frame_dt: t.dt,
            physics: t.objects.iter().map(|o| o.physics).collect(),
            frames,
            trajectory,
            start,
        })
    }

    /// Physical seconds between consecutive network frames.
    pub fn dt(&self) -> f64 {
        self.step as f64 * self.frame_dt
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Fully observed scene whose reference is the first frame.
    pub fn base_scene(&self, anchors: usize) -> Result<SceneState, GeometryError> {
        let objects = self.frames[0]
            .iter()
            .zip(&self.physics)
            .map(|(v, p)| ObjectState::new(v.clone(), *p, anchors))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SceneState::new(objects))
    }

    pub fn rotated_z(&self, degrees: f64) -> Self {
        let r = rot_z(degrees);
        let mut out = self.clone();
        for p in out.frames.iter_mut().flatten().flatten() {
            *p = mat_vec(&r, *p);
        }
        out
    }

    /// Reorder objects so that new slot `i` holds old object `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut out = self.clone();
        out.physics = perm.iter().map(|&i| self.physics[i]).collect();
        out.frames = self.frames.iter().map(|f| perm.iter().map(|&i| f[i].clone()).collect()).collect();
        out
    }

    /// Ground-truth anchors of every object at network frame `k`, stacked.
    pub fn anchors_at(&self, scene: &SceneState, k: usize) -> Vec<Vec3> {
        scene
            .objects
            .iter()
            .zip(&self.frames[k])
            .filter(|(o, _)| o.valid)
            .flat_map(|(o, v)| o.anchors.iter().map(move |&i| v[i]))
            .collect()
    }

    /// Ground-truth anchor accelerations at network frame `k` (needs
    /// `1 ≤ k < len − 1`).
    pub fn anchor_accel(&self, scene: &SceneState, k: usize) -> Vec<Vec3> {
        let dt2 = self.dt() * self.dt();
        let (p, c, n) = (self.anchors_at(scene, k - 1), self.anchors_at(scene, k), self.anchors_at(scene, k + 1));
        (0..c.len()).map(|i| std::array::from_fn(|d| (n[i][d] - 2.0 * c[i][d] + p[i][d]) / dt2)).collect()
    }
}

/// Candidate rotation angles (degrees) for yaw augmentation.
pub fn rotation_grid() -> Vec<f64> {
    (1..72).map(|k| 5.0 * k as f64).collect()
}

/// What augmentation did to a batch, for logs and dumps.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Augmentation {
    pub rotation_deg: Option<f64>,
    pub permutations: Vec<Option<Vec<usize>>>,
}

/// One yaw rotation shared by the whole batch (with the configured
/// probability) and an independent object permutation per sample.
pub fn augment_batch(batch: &[Sequence], config: &TrainConfig, rng: &mut impl Rng) -> (Vec<Sequence>, Augmentation) {
    let rotation_deg = if rng.random::<f64>() < config.rotation_probability {
        let grid = rotation_grid();
        Some(grid[rng.random_range(0..grid.len())])
    } else {
        None
    };
    let mut permutations = Vec::with_capacity(batch.len());
    let out = batch
        .iter()
        .map(|s| {
            let s = match rotation_deg {
                Some(a) => s.rotated_z(a),
                None => s.clone(),
            };
            if rng.random::<f64>() < config.permutation_probability {
                let mut perm: Vec<usize> = (0..s.physics.len()).collect();
                perm.shuffle(rng);
                let p = s.permuted(&perm);
                permutations.push(Some(perm));
                p
            } else {
                permutations.push(None);
                s
            }
        })
        .collect();
    (out, Augmentation { rotation_deg, permutations })
}

/// Roll a sequence out from its two warmup frames on tape `g`, returning
/// the mean loss node and the mean per-step report.
pub fn sequence_loss<T: Real>(g: &mut Graph<'_, T>, model: &Model<T>, seq: &Sequence, detach: bool) -> TResult<(Var, LossReport)> {
    let scene = seq.base_scene(model.config.anchors).map_err(|e| TensorError::Domain {
        op: "sequence",
        detail: e.to_string(),
    })?;
    let frame = |g: &mut Graph<'_, T>, k: usize| -> TResult<Vec<Var>> {
        seq.frames[k].iter().map(|v| g.constant(Tensor::from_rows(v))).collect()
    };
    let mut prev = frame(g, 0)?;
    let mut cur = frame(g, 1)?;
    let mut totals = Vec::new();
    let mut reports = Vec::new();
    for k in 2..seq.len() {
        let out = model.step(g, &scene, &cur, &prev, seq.step as f64)?;
        if let Some(trace) = &out.anchors {
            let gt: Vec<Var> = [k, k - 1, k - 2]
                .iter()
                .map(|&j| g.constant(Tensor::from_rows(&seq.anchors_at(&scene, j))))
                .collect::<TResult<_>>()?;
            let terms = compute_loss(g, trace, gt[0], gt[1], gt[2], seq.dt())?;
            totals.push(terms.total);
            reports.push(terms.report(g));
        }
        prev = cur;
        cur = out.next;
        if detach {
            cur = cur.iter().map(|&v| g.detach(v)).collect::<TResult<_>>()?;
        }
    }
    if totals.is_empty() {
        return Err(TensorError::Domain {
            op: "sequence",
            detail: "no valid object to supervise".into(),
        });
    }
    let rows = totals.iter().map(|&t| g.reshape(t, &[1])).collect::<TResult<Vec<_>>>()?;
    let all = g.concat(&rows, 0)?;
    let loss = g.mean_all(all)?;
    Ok((loss, LossReport::mean(&reports)))
}

/// Loss of the rigid constant-velocity advance (zero predicted
/// acceleration, no learned parameters) on a sequence, computed without
/// the network. Matches the loss of an untrained model.
pub fn constant_velocity_loss(seq: &Sequence, anchors: usize) -> Result<LossReport, TrainError> {
    let scene = seq.base_scene(anchors)?;
    let dt2 = seq.dt() * seq.dt();
    let mut prev = seq.frames[0].clone();
    let mut cur = seq.frames[1].clone();
    let stack = |frame: &[Vec<Vec3>]| -> Vec<f64> {
        scene
            .objects
            .iter()
            .zip(frame)
            .flat_map(|(o, v)| o.anchors.iter().flat_map(move |&i| v[i]))
            .collect()
    };
    let per_dt2 = |v: Vec<f64>| v.into_iter().map(|x| x / dt2).collect::<Vec<f64>>();
    let mut reports = Vec::new();
    for k in 2..seq.len() {
        let mut next = Vec::with_capacity(cur.len());
        for (o, (c, p)) in scene.objects.iter().zip(cur.iter().zip(&prev)) {
            let (v, _) = crate::anchors::constant_velocity_update(&o.reference, &o.anchors, c, p, seq.step as f64)?;
            next.push(v);
        }
        let (qp, qc, qn) = (stack(&prev), stack(&cur), stack(&next));
        let raw: Vec<f64> = qc.iter().zip(&qp).map(|(c, p)| 2.0 * c - p).collect();
        let gt = per_dt2(stack(&seq.frames[k]));
        let a_gt: Vec<f64> = seq.anchor_accel(&scene, k - 1).into_iter().flatten().collect();
        let a_rigid: Vec<f64> = (0..qn.len()).map(|i| (qn[i] - 2.0 * qc[i] + qp[i]) / dt2).collect();
        reports.push(LossReport::from_components(
            smooth_l1_values(&per_dt2(raw), &gt),
            smooth_l1_values(&per_dt2(qn), &gt),
            smooth_l1_values(&vec![0.0; a_gt.len()], &a_gt),
            smooth_l1_values(&a_rigid, &a_gt),
        ));
        prev = std::mem::replace(&mut cur, next);
    }
    Ok(LossReport::mean(&reports))
}

/// Training-set sampler: one sequence per trajectory per epoch with a
/// uniformly drawn step size and start frame.
pub fn epoch_sequences(data: &[Trajectory], config: &TrainConfig, epoch: usize) -> Result<Vec<Sequence>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|i| {
            let t = &data[i];
            let s = config.step_sizes[rng.random_range(0..config.step_sizes.len())];
            let span = config.span(s);
            if span > t.frames() {
                return Err(TrainError::Data(format!("trajectory {i} has {} frames; step {s} needs {span}", t.frames())));
            }
            let start = rng.random_range(0..=t.frames() - span);
            Sequence::from_trajectory(t, i, start, s, config.sequence_length)
        })
        .collect()
}

/// Fixed validation sequences: every step size from frame 0.
pub fn validation_sequences(data: &[Trajectory], config: &TrainConfig) -> Result<Vec<Sequence>, TrainError> {
    let mut out = Vec::new();
    for (i, t) in data.iter().enumerate() {
        for &s in &config.step_sizes {
            if config.span(s) <= t.frames() {
                out.push(Sequence::from_trajectory(t, i, 0, s, config.sequence_length)?);
            }
        }
    }
    Ok(out)
}

/// Mean evaluation-mode loss over sequences.
pub fn evaluate_loss<T: Real>(model: &Model<T>, seqs: &[Sequence]) -> Result<LossReport, TrainError> {
    let reports = seqs
        .par_iter()
        .map(|s| {
            let mut g = Graph::with_params(&model.params);
            sequence_loss(&mut g, model, s, false).map(|(_, r)| r)
        })
        .collect::<TResult<Vec<_>>>()?;
    Ok(LossReport::mean(&reports))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
    pub grad_norm: f64,
}

/// Model, optimizer and schedule position.
pub struct Trainer {
    pub model: Model<f32>,
    pub optimizer: AdamW<f32>,
    pub config: TrainConfig,
    pub step: usize,
    pub epoch: usize,
    pub steps_per_epoch: usize,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub step: usize,
    pub train: LossReport,
    pub val: Option<LossReport>,
    pub seconds: f64,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig, train_len: usize) -> Result<Self, TrainError> {
        config.validate()?;
        if train_len == 0 {
            return Err(TrainError::Data("empty training set".into()));
        }
        Ok(Self {
            optimizer: AdamW::new(&model.params),
            model,
            steps_per_epoch: train_len.div_ceil(config.batch_size),
            config,
            step: 0,
            epoch: 0,
            out_dir: None,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.config.epochs
    }

    pub fn warmup_steps(&self) -> usize {
        self.steps_per_epoch * self.config.warmup_epochs
    }

    pub fn lr(&self) -> f64 {
        lr_schedule(self.step, self.total_steps(), self.warmup_steps(), &self.config)
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Gradients and mean report of one batch at the current parameters.
    pub fn batch_gradients(&self, batch: &[Sequence]) -> TResult<(Gradients<f32>, LossReport)> {
        let detach = self.config.detach_between_steps;
        let seed = self.config.seed.wrapping_add(self.step as u64 * 7919);
        let parts = batch
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut g = Graph::with_params(&self.model.params).train_mode(seed.wrapping_add(i as u64));
                let (loss, report) = sequence_loss(&mut g, &self.model, s, detach)?;
                g.backward(loss)?;
                Ok((g.param_grads(), report))
            })
            .collect::<TResult<Vec<_>>>()?;
        let mut grads = Gradients::new(self.model.params.len());
        let mut reports = Vec::with_capacity(parts.len());
        for (g, r) in parts {
            grads.merge(&g);
            reports.push(r);
        }
        grads.scale(1.0 / batch.len() as f64);
        Ok((grads, LossReport::mean(&reports)))
    }

    /// One optimizer step on a batch: augment, backprop, clip, update.
    pub fn train_batch(&mut self, batch: &[Sequence]) -> Result<LogRecord, TrainError> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0xA076_1D64_78BD_642F ^ self.step as u64);
        let (batch, aug) = augment_batch(batch, &self.config, &mut rng);
        let result = self.batch_gradients(&batch);
        let (mut grads, report) = match result {
            Ok(ok) if ok.1.is_finite() && ok.0.global_norm().is_finite() => ok,
            Ok((_, report)) => return Err(self.non_finite(&batch, &aug, format!("loss {report:?}"))),
            Err(TensorError::NonFinite { op }) => return Err(self.non_finite(&batch, &aug, format!("{op} produced a non-finite value"))),
            Err(e) => return Err(e.into()),
        };
        let grad_norm = grads.clip_global_norm(self.config.clip_norm);
        let lr = self.lr();
        let c = &self.config;
        self.optimizer.step(&mut self.model.params, &grads, lr, c.betas, c.eps, c.weight_decay);
        let rec = LogRecord {
            step: self.step,
            epoch: self.epoch,
            lr,
            loss: report,
            grad_norm,
        };
        self.step += 1;
        Ok(rec)
    }

    fn non_finite(&self, batch: &[Sequence], aug: &Augmentation, detail: String) -> TrainError {
        let dump = self.out_dir.as_ref().and_then(|dir| {
            let path = dir.join(format!("nonfinite_step{}.json", self.step));
            let samples: Vec<Value> = batch
                .iter()
                .map(|s| {
                    json!({
                        "trajectory": s.trajectory,
                        "start": s.start,
                        "step_size": s.step,
                        "physics": s.physics,
                        "frames": s.frames,
                    })
                })
                .collect();
            let body = json!({ "step": self.step, "epoch": self.epoch, "detail": detail, "augmentation": aug, "samples": samples });
            std::fs::write(&path, serde_json::to_string(&body).ok()?).ok()?;
            Some(path)
        });
        TrainError::NonFinite {
            step: self.step,
            detail,
            dump,
        }
    }

    /// Train one epoch over `data`, appending records to `log`.
    pub fn run_epoch(&mut self, data: &[Trajectory], val: &[Sequence], log: &mut dyn FnMut(&LogRecord)) -> Result<EpochSummary, TrainError> {
        let t0 = std::time::Instant::now();
        let seqs = epoch_sequences(data, &self.config, self.epoch)?;
        let mut reports = Vec::new();
        for batch in seqs.chunks(self.config.batch_size) {
            let rec = self.train_batch(batch)?;
            log(&rec);
            reports.push(rec.loss);
        }
        let val = if self.config.validate && !val.is_empty() {
            Some(evaluate_loss(&self.model, val)?)
        } else {
            None
        };
        self.epoch += 1;
        let summary = EpochSummary {
            epoch: self.epoch,
            step: self.step,
            train: LossReport::mean(&reports),
            val,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(dir) = self.out_dir.clone() {
            self.save(&dir)?;
            if self.config.checkpoint_every > 0 && self.epoch % self.config.checkpoint_every == 0 {
                self.model.save(&dir.join(format!("model_epoch{:04}.ckpt", self.epoch)), self.metadata())?;
            }
        }
        Ok(summary)
    }

    fn metadata(&self) -> Value {
        json!({ "step": self.step, "epoch": self.epoch, "train": self.config })
    }

    /// Write `model.ckpt` and `optimizer.ckpt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir)?;
        self.model.save(&dir.join("model.ckpt"), self.metadata())?;
        let mut tensors = Vec::with_capacity(2 * self.optimizer.m.len());
        for (id, name, _) in self.model.params.iter() {
            tensors.push((format!("m.{name}"), self.optimizer.m[id.0].clone()));
            tensors.push((format!("v.{name}"), self.optimizer.v[id.0].clone()));
        }
        let bytes = checkpoint::to_bytes(&tensors, &json!({ "t": self.optimizer.t, "step": self.step, "epoch": self.epoch }));
        std::fs::write(dir.join("optimizer.ckpt"), bytes)?;
        Ok(())
    }

    /// Restore a trainer saved by [`Trainer::save`]; the schedule resumes at
    /// the saved step.
    pub fn resume(dir: &Path, config: TrainConfig, train_len: usize) -> Result<Self, TrainError> {
        let (model, extra) = Model::<f32>::load(&dir.join("model.ckpt"))?;
        let mut tr = Self::new(model, config, train_len)?;
        let (tensors, meta) = checkpoint::from_bytes::<f32>(&std::fs::read(dir.join("optimizer.ckpt"))?)?;
        for (name, t) in tensors {
            let (kind, pname) = name
                .split_once('.')
                .ok_or_else(|| CheckpointError::Format(format!("optimizer tensor {name}")))?;
            let id = tr
                .model
                .params
                .id(pname)
                .ok_or_else(|| CheckpointError::Format(format!("optimizer tensor for unknown parameter {pname}")))?;
            if t.shape() != tr.optimizer.m[id.0].shape() {
                return Err(CheckpointError::Format(format!("optimizer tensor {name} has shape {:?}", t.shape())).into());
            }
            match kind {
                "m" => tr.optimizer.m[id.0] = t,
                "v" => tr.optimizer.v[id.0] = t,
                _ => return Err(CheckpointError::Format(format!("optimizer tensor {name}")).into()),
            }
        }
        let get = |v: &Value, k: &str| v.get(k).and_then(Value::as_u64).ok_or_else(|| CheckpointError::Format(format!("missing {k}")));
        tr.optimizer.t = get(&meta, "t")?;
        tr.step = get(&extra, "step")? as usize;
        tr.epoch = get(&extra, "epoch")? as usize;
        tr.out_dir = Some(dir.to_path_buf());
        Ok(tr)
    }
}

/// Newline-delimited JSON writer for log records.
pub struct JsonLog {
    out: BufWriter<File>,
}

impl JsonLog {
    pub fn append(path: &Path) -> std::io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::options().create(true).append(true).open(path)?),
        })
    }

    pub fn write<S: Serialize>(&mut self, rec: &S) -> std::io::Result<()> {
        serde_json::to_writer(&mut self.out, rec)?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smooth_l1_spot_values() {
        assert_eq!(smooth_l1_values(&[0.5], &[0.0]), 0.125);
        assert_eq!(smooth_l1_values(&[2.0], &[0.0]), 1.5);
        assert_eq!(smooth_l1_values(&[1.0, 3.0], &[1.0, 3.0]), 0.0);
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[2], &[0.5, -2.0])).unwrap();
        let t = g.constant(Tensor::zeros(&[2])).unwrap();
        let l = smooth_l1(&mut g, p, t).unwrap();
        assert_eq!(g.value(l).item(), (0.125 + 1.5) / 2.0);
    }

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig::default();
        let (total, warm) = (1000, 200);
        assert!((lr_schedule(0, total, warm, &c) - 1e-5).abs() < 1e-18);
        assert!((lr_schedule(warm, total, warm, &c) - 1e-4).abs() < 1e-18);
        assert!((lr_schedule(total - 1, total, warm, &c) - 1e-6).abs() < 1e-18);
        let before = lr_schedule(warm - 1, total, warm, &c);
        assert!(before < 1e-4 && 1e-4 - before < 1e-6);
    }

    #[test]
    fn adamw_first_step_is_unit_sized() {
        let mut store = ParamStore::<f64>::new();
        let id = store.zeros("x", &[1]).unwrap();
        let mut opt = AdamW::new(&store);
        let mut grads = Gradients::new(1);
        grads.accumulate(id, &Tensor::from_f64(&[1], &[1.0]));
        opt.step(&mut store, &grads, 0.1, [0.9, 0.999], 1e-8, 0.0);
        assert!((store.get(id).unwrap().item() + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adamw_decay_only() {
        let mut store = ParamStore::<f64>::new();
        let id = store.full("x", &[1], 2.0).unwrap();
        let mut opt = AdamW::new(&store);
        opt.step(&mut store, &Gradients::new(1), 0.1, [0.9, 0.999], 1e-8, 0.01);
        assert!((store.get(id).unwrap().item() - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
        let mut opt = AdamW::new(&store);
        let before = store.get(id).unwrap().item();
        opt.step(&mut store, &Gradients::new(1), 0.1, [0.9, 0.999], 1e-8, 0.0);
        assert_eq!(store.get(id).unwrap().item(), before);
    }

    #[test]
    fn rotation_grid_has_71_angles() {
        let g = rotation_grid();
        assert_eq!(g.len(), 71);
        assert_eq!((g[0], g[70]), (5.0, 355.0));
    }
}
