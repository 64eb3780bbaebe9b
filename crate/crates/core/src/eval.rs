//! Rollout protocol and trajectory metrics.
//!
//! A rollout at step size `s` is seeded with the ground-truth frames `0` and
//! `s` and predicts physical frames `2s, 3s, …` up to the horizon. Metrics
//! at horizon `h` compare the prediction at physical frame `h`, so they are
//! reported only for step sizes dividing `h`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anchors::constant_velocity_update;
use crate::datagen::{mask_partial, read_trajectory, DatagenError, Trajectory, TrajectoryError};
use crate::geometry::{mean, quat_geodesic_deg, GeometryError, RigidTransform, Vec3};
use crate::model::Model;
use crate::scene::SceneState;
use crate::tensor::{Real, TensorError};

pub const HORIZONS: [usize; 4] = [25, 50, 75, 100];

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("horizon {horizon} at step {step} needs frame {horizon} but the trajectory has {frames} frames")]
    Horizon { horizon: usize, step: usize, frames: usize },
    #[error("step size must be positive and at most half the horizon (step {step}, horizon {horizon})")]
    Step { step: usize, horizon: usize },
    #[error("unmatched trajectories: {0:?}")]
    Orphans(Vec<String>),
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Datagen(#[from] DatagenError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Physical frames touched by a rollout: the two warmup frames and the
/// predicted frames.
pub fn evaluation_frames(step: usize, horizon: usize) -> ([usize; 2], Vec<usize>) {
    ([0, step], (2..=horizon / step.max(1)).map(|k| k * step).collect())
}

/// Options for [`rollout_trajectory`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RolloutOptions {
    /// Fraction of points hidden from the model, and the mask seed.
    pub mask: Option<(f64, u64)>,
}

/// Timing of one rollout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RolloutTiming {
    pub steps: usize,
    pub seconds: f64,
}

fn check(t: &Trajectory, step: usize, horizon: usize) -> Result<(), EvalError> {
    if step == 0 || 2 * step > horizon {
        return Err(EvalError::Step { step, horizon });
    }
    if horizon >= t.frames() {
        return Err(EvalError::Horizon {
            horizon,
            step,
            frames: t.frames(),
        });
    }
    Ok(())
}

fn predicted(t: &Trajectory, step: usize, frames: Vec<usize>, transforms: Vec<Vec<RigidTransform>>) -> Trajectory {
    Trajectory {
        dt: t.dt,
        objects: t.objects.clone(),
        transforms,
        frame_indices: Some(frames),
        step_size: Some(step),
    }
    .quantized()
}

/// Model rollout on a ground-truth trajectory. The result stores the
/// warmup frames and every prediction, with transforms taken from the
/// rigid projection.
pub fn rollout_trajectory<T: Real>(
    model: &Model<T>,
    t: &Trajectory,
    step: usize,
    horizon: usize,
    opts: RolloutOptions,
) -> Result<(Trajectory, RolloutTiming), EvalError> {
    check(t, step, horizon)?;
    let mut base = t.base_scene(model.config.anchors)?;
    if let Some((f, seed)) = opts.mask {
        base = mask_partial(&base, f, seed)?;
    }
    let (warm, pred) = evaluation_frames(step, horizon);
    let first = t.scene_at(&base, warm[0]);
    let second = t.scene_at(&base, warm[1]);
    let t0 = Instant::now();
    let out = model.rollout(&first, &second, step as f64, pred.len())?;
    let timing = RolloutTiming {
        steps: pred.len(),
        seconds: t0.elapsed().as_secs_f64(),
    };
    let mut transforms = vec![t.transforms[warm[0]].clone(), t.transforms[warm[1]].clone()];
    transforms.extend(out.into_iter().map(|(_, tf)| tf));
    let frames = warm.iter().copied().chain(pred).collect();
    Ok((predicted(t, step, frames, transforms), timing))
}

/// The same protocol with zero acceleration and no network: each object
/// advances by its rigidly projected constant-velocity update.
pub fn constant_velocity_trajectory(t: &Trajectory, step: usize, horizon: usize, anchors: usize) -> Result<Trajectory, EvalError> {
    check(t, step, horizon)?;
    let base = t.base_scene(anchors)?;
    let (warm, pred) = evaluation_frames(step, horizon);
    let mut prev = t.scene_at(&base, warm[0]);
    let mut cur = t.scene_at(&base, warm[1]);
    let mut transforms = vec![t.transforms[warm[0]].clone(), t.transforms[warm[1]].clone()];
    for _ in &pred {
        let mut next = cur.clone();
        let mut tfs = Vec::with_capacity(cur.len());
        for ((n, c), p) in next.objects.iter_mut().zip(&cur.objects).zip(&prev.objects) {
            let (v, tf) = constant_velocity_update(&c.reference, &c.anchors, &c.vertices, &p.vertices, step as f64)?;
            n.vertices = v;
            tfs.push(tf);
        }
        transforms.push(tfs);
        prev = std::mem::replace(&mut cur, next);
    }
    let frames = warm.iter().copied().chain(pred).collect();
    Ok(predicted(t, step, frames, transforms))
}

/// Squared centre errors and orientation errors (degrees) per object of a
/// predicted frame against the ground truth.
pub fn frame_errors(pred: &Trajectory, gt: &Trajectory, stored: usize) -> Result<Vec<(f64, f64)>, EvalError> {
    let frame = pred.frame_index(stored);
    if frame >= gt.frames() {
        return Err(EvalError::Mismatch(format!("prediction frame {frame} beyond ground truth ({} frames)", gt.frames())));
    }
    if pred.objects.len() != gt.objects.len() {
        return Err(EvalError::Mismatch(format!("{} predicted objects vs {} ground-truth objects", pred.objects.len(), gt.objects.len())));
    }
    (0..gt.objects.len())
        .map(|o| {
            let c: Vec3 = mean(&pred.vertices(stored, o));
            let g: Vec3 = mean(&gt.vertices(frame, o));
            let e2 = (0..3).map(|d| (c[d] - g[d]).powi(2)).sum::<f64>();
            let ang = quat_geodesic_deg(&pred.transforms[stored][o].r, &gt.transforms[frame][o].r)?;
            Ok((e2, ang))
        })
        .collect()
}

/// Metrics at one horizon and step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub step: usize,
    pub horizon: usize,
    /// Centre-of-mass translation RMSE (m).
    pub translation_rmse: f64,
    /// Quaternion geodesic RMSE (degrees).
    pub orientation_rmse_deg: f64,
    pub trajectories: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RuntimeStats {
    pub ms_per_step: f64,
    pub decoder_pairs_per_layer: usize,
    pub predictor_pairs_per_scale: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trajectories: usize,
    pub metrics: Vec<HorizonMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime: Option<RuntimeStats>,
}

impl EvalReport {
    pub fn get(&self, step: usize, horizon: usize) -> Option<&HorizonMetrics> {
        self.metrics.iter().find(|m| m.step == step && m.horizon == horizon)
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:>5} {:>8} {:>14} {:>16} {:>6}\n", "step", "horizon", "trans RMSE (m)", "orient RMSE (deg)", "n");
        for m in &self.metrics {
            s.push_str(&format!(
                "{:>5} {:>8} {:>14.4} {:>16.2} {:>6}\n",
                m.step, m.horizon, m.translation_rmse, m.orientation_rmse_deg, m.trajectories
            ));
        }
        if let Some(r) = &self.runtime {
            s.push_str(&format!(
                "{:.2} ms/step, {} decoder pairs per layer, {} predictor pairs per scale\n",
                r.ms_per_step, r.decoder_pairs_per_layer, r.predictor_pairs_per_scale
            ));
        }
        s
    }
}

/// Metrics over matched (prediction, ground truth) pairs. Squared errors
/// are averaged over objects, then over trajectories, before the root.
pub fn evaluate(pairs: &[(&Trajectory, &Trajectory)], horizons: &[usize]) -> Result<EvalReport, EvalError> {
    let mut acc: BTreeMap<(usize, usize), (f64, f64, usize)> = BTreeMap::new();
    for (pred, gt) in pairs {
        let step = match pred.step_size {
            Some(s) => s,
            None => pred.frame_index(1.min(pred.frames().saturating_sub(1))).max(1),
        };
        for &h in horizons {
            let Some(stored) = (0..pred.frames()).find(|&k| pred.frame_index(k) == h) else {
                continue;
            };
            if stored < 2 {
                continue;
            }
            let errs = frame_errors(pred, gt, stored)?;
            let n = errs.len().max(1) as f64;
            let e = acc.entry((step, h)).or_insert((0.0, 0.0, 0));
            e.0 += errs.iter().map(|x| x.0).sum::<f64>() / n;
            e.1 += errs.iter().map(|x| x.1 * x.1).sum::<f64>() / n;
            e.2 += 1;
        }
    }
    Ok(EvalReport {
        trajectories: pairs.len(),
        metrics: acc
            .into_iter()
            .map(|((step, horizon), (t, r, n))| HorizonMetrics {
                step,
                horizon,
                translation_rmse: (t / n as f64).sqrt(),
                orientation_rmse_deg: (r / n as f64).sqrt(),
                trajectories: n,
            })
            .collect(),
        runtime: None,
    })
}

/// Roll out every trajectory at every step size and evaluate at all
/// reachable horizons up to `horizon`.
pub fn evaluate_model<T: Real>(
    model: &Model<T>,
    data: &[Trajectory],
    steps: &[usize],
    horizon: usize,
    opts: RolloutOptions,
) -> Result<EvalReport, EvalError> {
    let runs: Vec<(usize, usize)> = (0..data.len()).flat_map(|i| steps.iter().map(move |&s| (i, s))).collect();
    let preds = runs
        .par_iter()
        .map(|&(i, s)| rollout_trajectory(model, &data[i], s, horizon, opts))
        .collect::<Result<Vec<_>, _>>()?;
    let pairs: Vec<(&Trajectory, &Trajectory)> = preds.iter().zip(&runs).map(|((p, _), &(i, _))| (p, &data[i])).collect();
    let horizons: Vec<usize> = HORIZONS.iter().copied().filter(|&h| h <= horizon).collect();
    let mut report = evaluate(&pairs, &horizons)?;
    report.trajectories = data.len();
    let (steps_done, secs) = preds.iter().fold((0, 0.0), |(n, s), (_, t)| (n + t.steps, s + t.seconds));
    let m = data.first().map_or(0, |t| t.objects.len());
    report.runtime = Some(RuntimeStats {
        ms_per_step: 1e3 * secs / steps_done.max(1) as f64,
        decoder_pairs_per_layer: crate::profile::decoder_pairs(m, model.config.registers),
        predictor_pairs_per_scale: crate::profile::predictor_pairs(m, model.config.anchors),
    });
    Ok(report)
}

/// Constant-velocity baseline under the same protocol.
pub fn evaluate_constant_velocity(data: &[Trajectory], steps: &[usize], horizon: usize, anchors: usize) -> Result<EvalReport, EvalError> {
    let runs: Vec<(usize, usize)> = (0..data.len()).flat_map(|i| steps.iter().map(move |&s| (i, s))).collect();
    let preds = runs
        .par_iter()
        .map(|&(i, s)| constant_velocity_trajectory(&data[i], s, horizon, anchors))
        .collect::<Result<Vec<_>, _>>()?;
    let pairs: Vec<(&Trajectory, &Trajectory)> = preds.iter().zip(&runs).map(|(p, &(i, _))| (p, &data[i])).collect();
    let horizons: Vec<usize> = HORIZONS.iter().copied().filter(|&h| h <= horizon).collect();
    let mut report = evaluate(&pairs, &horizons)?;
    report.trajectories = data.len();
    Ok(report)
}

/// Largest relative intra-object distance deviation of any stored frame of
/// `pred` against its reference geometry.
pub fn rigidity_error(pred: &Trajectory) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..pred.frames() {
        for (o, rec) in pred.objects.iter().enumerate() {
            let v = pred.vertices(k, o);
            worst = worst.max(crate::geometry::max_pairwise_distortion(&v, &rec.reference, 1e-6));
        }
    }
    worst
}

/// Evaluate prediction files against ground-truth files with the same
/// names. Every `.rgf` file must have a partner.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path) -> Result<EvalReport, EvalError> {
    let list = |d: &Path| -> Result<Vec<String>, EvalError> {
        let mut v: Vec<String> = std::fs::read_dir(d)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".rgf"))
            .collect();
        v.sort();
        Ok(v)
    };
    let preds = list(pred_dir)?;
    let gts = list(gt_dir)?;
    let orphans: Vec<String> = preds
        .iter()
        .filter(|p| !gts.contains(p))
        .map(|p| format!("prediction {p}"))
        .chain(gts.iter().filter(|g| !preds.contains(g)).map(|g| format!("ground truth {g}")))
        .collect();
    if !orphans.is_empty() {
        return Err(EvalError::Orphans(orphans));
    }
    if preds.is_empty() {
        return Err(EvalError::Mismatch(format!("no .rgf files in {}", pred_dir.display())));
    }
    let loaded = preds
        .par_iter()
        .map(|n| Ok((read_trajectory(&pred_dir.join(n))?, read_trajectory(&gt_dir.join(n))?)))
        .collect::<Result<Vec<_>, EvalError>>()?;
    let pairs: Vec<(&Trajectory, &Trajectory)> = loaded.iter().map(|(p, g)| (p, g)).collect();
    evaluate(&pairs, &HORIZONS)
}

/// Scene of `t` at frame 0 with `anchors` anchors, for callers that roll
/// out by hand.
pub fn initial_scene(t: &Trajectory, anchors: usize) -> Result<SceneState, EvalError> {
    Ok(t.base_scene(anchors)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_mapping_matches_enumeration() {
        for s in 1..=12 {
            for h in [25, 50, 75, 100] {
                if 2 * s > h {
                    continue;
                }
                let (w, p) = evaluation_frames(s, h);
                assert_eq!(w, [0, s]);
                let oracle: Vec<usize> = (0..=h).filter(|f| f % s == 0 && *f >= 2 * s).collect();
                assert_eq!(p, oracle);
            }
        }
        assert_eq!(evaluation_frames(5, 100).1.len(), 19);
    }
}
