//! Randomized invariant and gradient suites on small models.
//!
//! Each suite reports the largest observed error next to its tolerance.
//! [`Mutations`] deliberately break a kernel so callers can confirm that
//! the matching suite notices.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::avp_weights;
use crate::datagen::shapes::{box_surface, fibonacci_sphere};
use crate::datagen::{simulate_scene, SceneConfig};
use crate::eval::constant_velocity_trajectory;
use crate::geometry::{
    apply_rigid, axis_angle, det, kabsch_align_with, max_pairwise_distortion, KabschHooks, RigidTransform, TieBreak, Vec3,
};
use crate::interaction::arope_descriptor;
use crate::model::{Model, ModelConfig};
use crate::nn::step_code;
use crate::scene::{ObjectState, Physics, SceneState};
use crate::tensor::gradcheck::{finite_diff_check_params, FdOptions};
use crate::tensor::{Graph, Real, Tensor};
use crate::training::{sequence_loss, Sequence};

/// Test hooks that break one kernel each.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mutations {
    /// Kabsch without the reflection correction.
    pub skip_det_correction: bool,
    /// Farthest-point sampling that resolves ties by input index.
    pub index_ordered_fps_ties: bool,
}

impl Mutations {
    fn tie(&self) -> TieBreak {
        if self.index_ordered_fps_ties {
            TieBreak::Index
        } else {
            TieBreak::Lexicographic
        }
    }

    fn kabsch(&self) -> KabschHooks {
        KabschHooks {
            skip_det_correction: self.skip_det_correction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub observed: f64,
    pub tolerance: f64,
    pub trials: usize,
    pub detail: String,
}

impl SuiteResult {
    fn new(name: &str, observed: f64, tolerance: f64, trials: usize, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: observed.is_finite() && observed <= tolerance,
            observed,
            tolerance,
            trials,
            detail,
        }
    }

    fn failed(name: &str, tolerance: f64, detail: String) -> Self {
        Self {
            name: name.to_string(),
            passed: false,
            observed: f64::NAN,
            tolerance,
            trials: 0,
            detail,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<34} observed {:.3e} tolerance {:.1e} ({} trials){}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.observed,
            self.tolerance,
            self.trials,
            if self.detail.is_empty() { String::new() } else { format!(" {}", self.detail) }
        )
    }
}

pub fn random_rotation(rng: &mut impl Rng) -> crate::geometry::Mat3 {
    let axis: Vec3 = loop {
        let v: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = crate::geometry::norm(v);
        if n > 1e-2 && n <= 1.0 {
            break v.map(|x| x / n);
        }
    };
    axis_angle(axis, rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
}

pub fn random_transform(rng: &mut impl Rng, spread: f64) -> RigidTransform {
    RigidTransform::new(random_rotation(rng), std::array::from_fn(|_| rng.random_range(-spread..spread)))
}

/// Local point set of a random sphere or box with `nv` points. Box points
/// use dyadic half-extents so symmetric ties are exact.
fn random_shape(rng: &mut impl Rng, nv: usize) -> Vec<Vec3> {
    if rng.random::<bool>() {
        fibonacci_sphere(nv, rng.random_range(0.1..0.3))
    } else {
        let half = [0.25, 0.125, 0.1875].map(|h| h * rng.random_range(1..=2) as f64);
        let mut pts: Vec<Vec3> = crate::datagen::shapes::box_corners(half).to_vec();
        pts.extend(box_surface(nv.saturating_sub(8), half, rng));
        pts.truncate(nv);
        pts
    }
}

/// Two consecutive states of `m` random objects above the ground, with
/// anchors chosen under `tie`.
pub fn random_scene(rng: &mut impl Rng, m: usize, nv: usize, anchors: usize, tie: TieBreak) -> (SceneState, SceneState) {
    let mut prev = Vec::with_capacity(m);
    let mut cur = Vec::with_capacity(m);
    for i in 0..m {
        let local = random_shape(rng, nv);
        let pose = RigidTransform::new(random_rotation(rng), [i as f64 * 0.8 + rng.random_range(-0.1..0.1), rng.random_range(-0.5..0.5), rng.random_range(0.4..0.8)]);
        let reference = apply_rigid(&pose, &local);
        let physics = Physics {
            mass: rng.random_range(0.5..2.0),
            friction: rng.random_range(0.2..0.8),
            restitution: rng.random_range(0.1..0.7),
        };
        let idx: Vec<usize> = (0..reference.len()).collect();
        let o = ObjectState::with_observed_tie(reference.clone(), reference.clone(), physics, idx, anchors, tie).expect("enough points");
        let step = RigidTransform::new(axis_angle([0.0, 0.0, 1.0], rng.random_range(-0.05..0.05)), std::array::from_fn(|_| rng.random_range(-0.02..0.02)));
        let centre = crate::geometry::mean(&reference);
        let moved: Vec<Vec3> = reference
            .iter()
            .map(|p| {
                let q = step.apply(crate::geometry::sub(*p, centre));
                crate::geometry::add(q, centre)
            })
            .collect();
        let mut c = o.clone();
        c.vertices = moved;
        prev.push(o);
        cur.push(c);
    }
    (SceneState::new(prev), SceneState::new(cur))
}

/// A tiny model with every zero-initialized tensor redrawn, so outputs
/// depend on all parameters.
pub fn randomized_tiny<T: Real>(seed: u64) -> Model<T> {
    let config = ModelConfig {
        dropout: 0.0,
        accel_scale: 0.5,
        ..ModelConfig::tiny()
    };
    let mut m = Model::<T>::new(config, seed).expect("tiny config is valid");
    m.randomize_zero_params(0.2, seed ^ 0x5EED);
    m
}

/// Construct-then-recover Kabsch cases, half of them against mirrored
/// targets where only a proper rotation is acceptable.
pub fn kabsch_suite(trials: usize, mutations: Mutations, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut improper = 0;
    for k in 0..trials {
        let n = rng.random_range(4..24);
        let src: Vec<Vec3> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let tf = random_transform(&mut rng, 5.0);
        let mirrored = k % 2 == 1;
        let dst: Vec<Vec3> = apply_rigid(&tf, &src)
            .into_iter()
            .map(|p| if mirrored { [-p[0], p[1], p[2]] } else { p })
            .collect();
        let res = match kabsch_align_with(&src, &dst, mutations.kabsch()) {
            Ok(r) => r,
            Err(e) => return SuiteResult::failed("kabsch properness", 1e-6, format!("case {k}: {e}")),
        };
        let d = det(&res.transform.r);
        if (d - 1.0).abs() > 1e-6 {
            improper += 1;
            worst = worst.max((d - 1.0).abs());
        }
        if !mirrored {
            for i in 0..3 {
                for j in 0..3 {
                    worst = worst.max((res.transform.r[i][j] - tf.r[i][j]).abs());
                }
                worst = worst.max((res.transform.t[i] - tf.t[i]).abs());
            }
        }
    }
    SuiteResult::new("kabsch properness", worst, 1e-6, trials, format!("{improper} improper results"))
}

/// Rollouts of a randomized model keep every object rigid.
pub fn rigidity_suite<T: Real>(model: &Model<T>, trials: usize, tol: f64, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..trials {
        let m = rng.random_range(1..4);
        let (prev, cur) = random_scene(&mut rng, m, 16, model.config.anchors, TieBreak::Lexicographic);
        let out = match model.rollout(&prev, &cur, 1.0 + (k % 3) as f64, 4) {
            Ok(o) => o,
            Err(e) => return SuiteResult::failed("rigidity", tol, format!("trial {k}: {e}")),
        };
        for (state, _) in &out {
            for o in &state.objects {
                worst = worst.max(max_pairwise_distortion(&o.vertices, &o.reference, 1e-6));
            }
        }
    }
    SuiteResult::new("rigidity", worst, tol, trials, String::new())
}

/// Object permutations commute with the decoder and with a full advance.
pub fn object_permutation_suite<T: Real>(model: &Model<T>, trials: usize, tol: f64, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let d = model.config.d_model;
    let rw = model.rope.width;
    for k in 0..trials {
        let m = rng.random_range(2..5);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);

        let tokens: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let phases: Vec<f64> = (0..m * rw).map(|_| rng.random_range(-3.0..3.0)).collect();
        let run = |tok: &[f64], ph: &[f64]| -> crate::tensor::Result<Vec<f64>> {
            let mut g = Graph::with_params(&model.params);
            let t = g.constant(Tensor::from_f64(&[m, d], tok))?;
            let p = g.constant(Tensor::from_f64(&[m, rw], ph))?;
            let c = g.constant(Tensor::from_f64(&[1, 2], &step_code(5.0)))?;
            let out = model.decoder.forward(&mut g, t, p, c, &vec![true; m])?;
            Ok(g.value(*out.layers.last().expect("layers")).to_f64())
        };
        let permute = |x: &[f64], w: usize| -> Vec<f64> { perm.iter().flat_map(|&i| x[i * w..(i + 1) * w].iter().copied()).collect() };
        match (run(&tokens, &phases), run(&permute(&tokens, d), &permute(&phases, rw))) {
            (Ok(a), Ok(b)) => {
                let a = permute(&a, d);
                worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
            }
            (Err(e), _) | (_, Err(e)) => return SuiteResult::failed("object permutation equivariance", tol, format!("trial {k}: {e}")),
        }

        let (prev, cur) = random_scene(&mut rng, m, 16, model.config.anchors, TieBreak::Lexicographic);
        let a = model.advance_state(&prev, &cur, 5.0);
        let b = model.advance_state(&prev.permuted(&perm), &cur.permuted(&perm), 5.0);
        match (a, b) {
            (Ok((a, _)), Ok((b, _))) => {
                for (slot, &i) in perm.iter().enumerate() {
                    for (p, q) in a.objects[i].vertices.iter().zip(&b.objects[slot].vertices) {
                        for c in 0..3 {
                            worst = worst.max((p[c] - q[c]).abs());
                        }
                    }
                }
            }
            (Err(e), _) | (_, Err(e)) => return SuiteResult::failed("object permutation equivariance", tol, format!("trial {k}: {e}")),
        }
    }
    SuiteResult::new("object permutation equivariance", worst, tol, trials, String::new())
}

/// Reordering an object's vertices (reference and current positions
/// alike) leaves the advance unchanged. Box-shaped objects carry exact
/// symmetric ties, so anchor selection must not depend on input order.
pub fn vertex_permutation_suite<T: Real>(model: &Model<T>, trials: usize, tol: f64, mutations: Mutations, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let tie = mutations.tie();
    let na = model.config.anchors;
    for k in 0..trials {
        let m = rng.random_range(1..4);
        let mut objects = Vec::with_capacity(m);
        let mut perms = Vec::with_capacity(m);
        for i in 0..m {
            let local = {
                let half = [0.25, 0.125, 0.375];
                let mut pts: Vec<Vec3> = crate::datagen::shapes::box_corners(half).to_vec();
                pts.extend(box_surface(12, half, &mut rng).into_iter().map(|p| p.map(|v| (v * 64.0).round() / 64.0)));
                pts
            };
            let physics = Physics {
                mass: 1.0,
                friction: 0.5,
                restitution: 0.5,
            };
            let offset: Vec3 = [i as f64 * 1.0, 0.5, 1.0];
            let reference: Vec<Vec3> = local.iter().map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]]).collect();
            let pose = random_transform(&mut rng, 0.05);
            let centre = crate::geometry::mean(&reference);
            let place = |tf: &RigidTransform| -> Vec<Vec3> {
                reference.iter().map(|p| crate::geometry::add(tf.apply(crate::geometry::sub(*p, centre)), centre)).collect()
            };
            let cur = place(&pose);
            let mut nudge = pose;
            nudge.t = [pose.t[0] - 0.01, pose.t[1] + 0.005, pose.t[2] + 0.02];
            let prev = place(&nudge);
            let mut perm: Vec<usize> = (0..reference.len()).collect();
            perm.shuffle(&mut rng);
            objects.push((reference, prev, cur, physics));
            perms.push(perm);
        }
        let build = |permuted: bool| -> Result<(SceneState, SceneState), crate::geometry::GeometryError> {
            let mut ps = Vec::new();
            let mut cs = Vec::new();
            for ((r, p, c, ph), perm) in objects.iter().zip(&perms) {
                let pick = |v: &Vec<Vec3>| -> Vec<Vec3> {
                    if permuted {
                        perm.iter().map(|&i| v[i]).collect()
                    } else {
                        v.clone()
                    }
                };
                let idx: Vec<usize> = (0..r.len()).collect();
                let o = ObjectState::with_observed_tie(pick(r), pick(p), *ph, idx, na, tie)?;
                let mut oc = o.clone();
                oc.vertices = pick(c);
                ps.push(o);
                cs.push(oc);
            }
            Ok((SceneState::new(ps), SceneState::new(cs)))
        };
        let (Ok((p0, c0)), Ok((p1, c1))) = (build(false), build(true)) else {
            return SuiteResult::failed("vertex permutation invariance", tol, format!("trial {k}: scene construction"));
        };
        match (model.advance_state(&p0, &c0, 1.0), model.advance_state(&p1, &c1, 1.0)) {
            (Ok((_, ta)), Ok((_, tb))) => {
                for (a, b) in ta.iter().zip(&tb) {
                    let (ra, rb) = (a.to_rt_rows(), b.to_rt_rows());
                    worst = worst.max(ra.iter().zip(&rb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
                }
            }
            (Err(e), _) | (_, Err(e)) => return SuiteResult::failed("vertex permutation invariance", tol, format!("trial {k}: {e}")),
        }
    }
    SuiteResult::new("vertex permutation invariance", worst, tol, trials, String::new())
}

/// The rotary descriptor ignores the order of an object's anchors.
pub fn arope_reindex_suite<T: Real>(model: &Model<T>, trials: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let n = rng.random_range(3..12);
        let anchors: Vec<Vec3> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0))).collect();
        let mut shuffled = anchors.clone();
        shuffled.shuffle(&mut rng);
        let a = arope_descriptor(&model.rope, &anchors);
        let b = arope_descriptor(&model.rope, &shuffled);
        worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    SuiteResult::new("arope anchor reindexing", worst, 1e-6, trials, String::new())
}

/// Anchor-vertex pooling ignores vertex order, and its weights are
/// unchanged when anchor and vertices move rigidly together.
pub fn avp_suite<T: Real>(model: &Model<T>, trials: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let sigma = model.predictor.sigma(&model.params);
    let w = model.config.feat_width;
    for k in 0..trials {
        let n = rng.random_range(4..20);
        let verts: Vec<Vec3> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();
        let feats: Vec<f64> = (0..n * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let anchor_rows = vec![(0..3).map(|_| rng.random_range(0..n)).collect::<Vec<usize>>()];
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut inverse = vec![0; n];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        let pool = |v: &[Vec3], f: &[f64], rows: &[Vec<usize>]| -> crate::tensor::Result<Vec<f64>> {
            let mut g = Graph::with_params(&model.params);
            let x = g.constant(Tensor::from_rows(v))?;
            let fv = g.constant(Tensor::from_f64(&[n, w], f))?;
            let out = model.predictor.pool(&mut g, x, fv, &[(0, n)], rows)?;
            Ok(g.value(out).to_f64())
        };
        let pv: Vec<Vec3> = perm.iter().map(|&i| verts[i]).collect();
        let pf: Vec<f64> = perm.iter().flat_map(|&i| feats[i * w..(i + 1) * w].iter().copied()).collect();
        let prows = vec![anchor_rows[0].iter().map(|&r| inverse[r]).collect::<Vec<_>>()];
        match (pool(&verts, &feats, &anchor_rows), pool(&pv, &pf, &prows)) {
            (Ok(a), Ok(b)) => worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)),
            (Err(e), _) | (_, Err(e)) => return SuiteResult::failed("avp invariance", 1e-6, format!("trial {k}: {e}")),
        }
        let anchor = verts[anchor_rows[0][0]];
        let tf = random_transform(&mut rng, 10.0);
        let a = avp_weights(anchor, &verts, sigma);
        let b = avp_weights(tf.apply(anchor), &apply_rigid(&tf, &verts), sigma);
        worst = worst.max(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
    }
    SuiteResult::new("avp invariance", worst, 1e-6, trials, String::new())
}

/// Ground-truth training sequence for gradient checks: two objects of 16
/// points, `len` network frames at step `step`.
pub fn gradient_sequence(seed: u64, step: usize, len: usize) -> Sequence {
    let cfg = SceneConfig {
        objects: [2, 2],
        points: 16,
        frames: (len - 1) * step + 1,
        ..SceneConfig::default()
    };
    let t = simulate_scene(&cfg, seed).expect("valid scene config");
    Sequence::from_trajectory(&t, 0, 0, step, len).expect("sequence fits")
}

/// Full training-loss gradient of a randomized tiny 64-bit model against
/// central differences on sampled coordinates, one scene per seed. Seeds
/// whose rollout meets a near-degenerate alignment are skipped.
pub fn gradient_suite(seeds: usize, coords_per_seed: usize, seed: u64) -> SuiteResult {
    let tol = 1e-4;
    let mut worst: f64 = 0.0;
    let mut skipped = 0;
    let mut checked = 0;
    for k in 0..seeds as u64 {
        let s = seed.wrapping_add(k);
        let model = randomized_tiny::<f64>(s);
        let seq = gradient_sequence(s, [1, 5, 10][k as usize % 3], 4);
        let mut degenerate = false;
        {
            let mut g = Graph::with_params(&model.params);
            let scene = seq.base_scene(model.config.anchors).expect("scene");
            let frames: Vec<_> = seq.frames[..2]
                .iter()
                .map(|f| f.iter().map(|v| g.constant(Tensor::from_rows(v))).collect::<crate::tensor::Result<Vec<_>>>())
                .collect();
            if let (Ok(p), Ok(c)) = (&frames[0], &frames[1]) {
                if let Ok(out) = model.step(&mut g, &scene, c, p, seq.step as f64) {
                    degenerate = out.degenerate.iter().any(|&d| d);
                }
            }
        }
        if degenerate {
            skipped += 1;
            continue;
        }
        let f = |g: &mut Graph<'_, f64>| sequence_loss(g, &model, &seq, false).map(|(l, _)| l);
        let loss = {
            let mut g = Graph::with_params(&model.params);
            match f(&mut g) {
                Ok(l) => g.value(l).item(),
                Err(e) => return SuiteResult::failed("training-loss gradient", tol, format!("seed {s}: {e}")),
            }
        };
        let opts = FdOptions {
            h: 1e-6 * loss.abs().max(1.0).sqrt().min(10.0),
            max_coords: Some(coords_per_seed),
            seed: s,
            abs_floor: 1e-7 * loss.abs().max(1.0),
        };
        match finite_diff_check_params(f, &model.params, &opts) {
            Ok(r) => {
                worst = worst.max(r.max_rel_error);
                checked += r.checked - r.skipped_below_floor;
            }
            Err(e) => return SuiteResult::failed("training-loss gradient", tol, format!("seed {s}: {e}")),
        }
    }
    SuiteResult::new(
        "training-loss gradient",
        worst,
        tol,
        seeds,
        format!("{checked} coordinates compared, {skipped} degenerate seeds skipped"),
    )
}

/// An untrained model (zero-initialized acceleration head) reproduces the
/// rigid constant-velocity rollout bit for bit.
pub fn zero_init_suite(trials: usize, seed: u64) -> SuiteResult {
    let mut worst: f64 = 0.0;
    let cfg = SceneConfig {
        frames: 31,
        ..SceneConfig::default()
    };
    for k in 0..trials as u64 {
        let model = Model::<f64>::new(ModelConfig::tiny(), seed + k).expect("tiny config");
        let t = match simulate_scene(&cfg, seed + k) {
            Ok(t) => t,
            Err(e) => return SuiteResult::failed("zero-init identity", 0.0, e.to_string()),
        };
        let step = [1, 5, 10][k as usize % 3];
        let horizon = 30 / step * step;
        let (a, b) = match (
            crate::eval::rollout_trajectory(&model, &t, step, horizon, Default::default()),
            constant_velocity_trajectory(&t, step, horizon, model.config.anchors),
        ) {
            (Ok((a, _)), Ok(b)) => (a, b),
            (Err(e), _) => return SuiteResult::failed("zero-init identity", 0.0, e.to_string()),
            (_, Err(e)) => return SuiteResult::failed("zero-init identity", 0.0, e.to_string()),
        };
        for (fa, fb) in a.transforms.iter().zip(&b.transforms) {
            for (x, y) in fa.iter().zip(fb) {
                if x.to_rt_rows().iter().zip(&y.to_rt_rows()).any(|(p, q)| p.to_bits() != q.to_bits()) {
                    worst = worst.max(x.to_rt_rows().iter().zip(&y.to_rt_rows()).map(|(p, q)| (p - q).abs()).fold(f64::MIN_POSITIVE, f64::max));
                }
            }
        }
    }
    SuiteResult::new("zero-init identity", worst, 0.0, trials, "bit-level comparison of transforms".into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelftestOptions {
    pub trials: usize,
    pub kabsch_trials: usize,
    pub gradient_seeds: usize,
    pub gradient_coords: usize,
    pub seed: u64,
    pub mutations: Mutations,
}

impl Default for SelftestOptions {
    fn default() -> Self {
        Self {
            trials: 20,
            kabsch_trials: 1000,
            gradient_seeds: 3,
            gradient_coords: 24,
            seed: 0,
            mutations: Mutations::default(),
        }
    }
}

/// Every suite at 64-bit on randomized tiny models.
pub fn run_all(opts: &SelftestOptions) -> Vec<SuiteResult> {
    let mut model = randomized_tiny::<f64>(opts.seed);
    model.hooks = opts.mutations.kabsch();
    let n = opts.trials;
    let s = opts.seed;
    vec![
        kabsch_suite(opts.kabsch_trials, opts.mutations, s),
        rigidity_suite(&model, n, 1e-10, s + 1),
        object_permutation_suite(&model, n, 1e-10, s + 2),
        vertex_permutation_suite(&model, n, 1e-10, opts.mutations, s + 3),
        arope_reindex_suite(&model, n, s + 4),
        avp_suite(&model, n, s + 5),
        zero_init_suite(3, s + 6),
        gradient_suite(opts.gradient_seeds, opts.gradient_coords, s + 7),
    ]
}
