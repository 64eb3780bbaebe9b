use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rigidsim::datagen::shapes::fibonacci_sphere;
use rigidsim::datagen::{simulate_scene, SceneConfig};
use rigidsim::encoder::{assemble_vertex_features, FEATURE_WIDTH};
use rigidsim::geometry::{axis_angle, dist, RigidTransform, Vec3};
use rigidsim::interaction::GatedAttention;
use rigidsim::model::{constant_sets, rows_of, Model, ModelConfig};
use rigidsim::nn::step_code;
use rigidsim::scene::{ObjectState, Physics, SceneState};
use rigidsim::tensor::{Graph, Mask, ParamStore, Tensor};
use rigidsim::training::{
    constant_velocity_loss, epoch_sequences, sequence_loss, smooth_l1_values, LossReport, Sequence, TrainConfig,
};

const PHYS: Physics = Physics {
    mass: 1.0,
    friction: 0.5,
    restitution: 0.4,
};

fn ball(center: Vec3, n: usize) -> Vec<Vec3> {
    fibonacci_sphere(n, 0.2).into_iter().map(|p| [p[0] + center[0], p[1] + center[1], p[2] + center[2]]).collect()
}

fn two_ball_scene() -> SceneState {
    SceneState::new(vec![
        ObjectState::new(ball([0.0, 0.0, 0.3], 32), PHYS, 4).unwrap(),
        ObjectState::new(ball([0.6, 0.1, 0.5], 32), PHYS, 4).unwrap(),
    ])
}

fn moving_pair(scene: &SceneState) -> (SceneState, SceneState) {
    let a = RigidTransform::new(axis_angle([0.0, 0.0, 1.0], 0.01), [0.01, 0.0, -0.005]);
    let b = RigidTransform::new(axis_angle([1.0, 0.0, 0.0], -0.02), [-0.01, 0.004, 0.0]);
    (scene.clone(), scene.posed(&[a, b]))
}

fn tiny<T: rigidsim::tensor::Real>(seed: u64) -> Model<T> {
    let cfg = ModelConfig {
        dropout: 0.0,
        ..ModelConfig::tiny()
    };
    Model::new(cfg, seed).unwrap()
}

#[test]
fn static_scene_features_have_zero_velocity_and_offset() {
    let s = two_ball_scene();
    let f = assemble_vertex_features(&s, &s).unwrap();
    for row in f.iter().flatten() {
        assert_eq!(&row[3..9], &[0.0; 6]);
        assert_eq!(&row[9..12], &[1.0, 0.5, 0.4]);
    }
}

#[test]
fn translated_scene_features_report_the_shift() {
    let s = two_ball_scene();
    let shift = RigidTransform::new(axis_angle([0.0, 0.0, 1.0], 0.0), [1.0, 0.0, 0.0]);
    let moved = s.posed(&[shift, shift]);
    let f = assemble_vertex_features(&moved, &s).unwrap();
    for row in f.iter().flatten() {
        for (got, want) in row[3..9].iter().zip([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }
}

#[test]
fn object_token_ignores_vertex_order() {
    let model = tiny::<f32>(3);
    let s = two_ball_scene();
    let (prev, cur) = moving_pair(&s);
    let feats = &assemble_vertex_features(&cur, &prev).unwrap()[0];
    let pyramid = &s.objects[0].pyramid;
    let (tok, _) = model.encoder.encode_object(&model.params, feats, pyramid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut perm: Vec<usize> = (0..feats.len()).collect();
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let mut inverse = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inverse[old] = new;
    }
    let shuffled: Vec<[f64; FEATURE_WIDTH]> = perm.iter().map(|&i| feats[i]).collect();
    let moved_pyramid: Vec<usize> = pyramid.iter().map(|&p| inverse[p]).collect();
    let (tok2, _) = model.encoder.encode_object(&model.params, &shuffled, &moved_pyramid).unwrap();
    for (a, b) in tok.iter().zip(&tok2) {
        assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
    }
}

#[test]
fn duplicated_vertices_pool_to_the_same_summary() {
    let model = tiny::<f64>(5);
    let s = two_ball_scene();
    let (prev, cur) = moving_pair(&s);
    let feats = assemble_vertex_features(&cur, &prev).unwrap()[0].clone();
    let all: Vec<usize> = (0..feats.len()).collect();
    let mut doubled = feats.clone();
    doubled.extend(feats.iter().copied());
    let doubled_order: Vec<usize> = (0..doubled.len()).collect();
    let (_, fa) = model.encoder.encode_object(&model.params, &feats, &all).unwrap();
    let (_, fb) = model.encoder.encode_object(&model.params, &doubled, &doubled_order).unwrap();
    let w = fa.shape()[1];
    let max_of = |t: &Tensor<f64>, rows: usize| -> Vec<f64> {
        (0..w).map(|c| (0..rows).map(|r| t.data()[r * w + c]).fold(f64::NEG_INFINITY, f64::max)).collect()
    };
    assert_eq!(max_of(&fa, feats.len()), max_of(&fb, doubled.len()));
}

#[test]
fn untrained_model_predicts_zero_acceleration_and_keeps_static_scenes() {
    let model = tiny::<f64>(1);
    let s = two_ball_scene();
    let mut g = Graph::with_params(&model.params);
    let xt = constant_sets(&mut g, &s).unwrap();
    let out = model.step(&mut g, &s, &xt, &xt, 1.0).unwrap();
    let trace = out.anchors.unwrap();
    assert!(g.value(trace.accel).data().iter().all(|&a| a == 0.0));
    let (next, _) = model.advance_state(&s, &s, 1.0).unwrap();
    for (a, b) in next.objects.iter().zip(&s.objects) {
        for (p, q) in a.vertices.iter().zip(&b.vertices) {
            assert!(dist(*p, *q) < 1e-12);
        }
    }
}

#[test]
fn cross_attention_spreads_over_every_valid_object() {
    let model = tiny::<f64>(2);
    let s = two_ball_scene();
    let (prev, cur) = moving_pair(&s);
    let mut g = Graph::with_params(&model.params);
    let xt = constant_sets(&mut g, &cur).unwrap();
    let xp = constant_sets(&mut g, &prev).unwrap();
    let out = model.step(&mut g, &cur, &xt, &xp, 1.0).unwrap();
    assert!(!out.cross_attention.is_empty());
    for w in &out.cross_attention {
        let t = g.value(*w);
        let keys = *t.shape().last().unwrap();
        assert_eq!(keys, 2);
        for row in t.data().chunks(keys) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }
}

#[test]
fn padding_slots_do_not_change_valid_objects() {
    let mut model = tiny::<f64>(6);
    model.randomize_zero_params(0.2, 6);
    let s = two_ball_scene();
    let (prev, cur) = moving_pair(&s);
    let (plain, _) = model.advance_state(&prev, &cur, 5.0).unwrap();
    let pad = |x: &SceneState| {
        let mut o = x.objects.clone();
        o.insert(1, ObjectState::padding());
        SceneState::new(o)
    };
    let (padded, _) = model.advance_state(&pad(&prev), &pad(&cur), 5.0).unwrap();
    for (a, b) in [(0, 0), (1, 2)] {
        for (p, q) in plain.objects[a].vertices.iter().zip(&padded.objects[b].vertices) {
            assert!(dist(*p, *q) < 1e-10);
        }
    }
    assert_eq!(padded.objects[1], ObjectState::padding());
}

#[test]
fn decoder_handles_a_single_object() {
    let model = tiny::<f64>(7);
    let d = model.config.d_model;
    let rw = model.rope.width;
    let mut g = Graph::with_params(&model.params);
    let t = g.constant(Tensor::from_f64(&[1, d], &vec![0.3; d])).unwrap();
    let p = g.constant(Tensor::zeros(&[1, rw])).unwrap();
    let c = g.constant(Tensor::from_f64(&[1, 2], &step_code(1.0))).unwrap();
    let out = model.decoder.forward(&mut g, t, p, c, &[true]).unwrap();
    assert_eq!(out.layers.len(), model.config.layers + 1);
    let last = g.value(*out.layers.last().unwrap());
    assert_eq!(last.shape(), &[1, d]);
    assert!(last.data().iter().all(|v| v.is_finite()));
}

#[test]
fn decoder_ignores_invalid_rows() {
    let mut model = tiny::<f64>(8);
    model.randomize_zero_params(0.2, 8);
    let d = model.config.d_model;
    let rw = model.rope.width;
    let run = |garbage: f64| {
        let mut g = Graph::with_params(&model.params);
        let mut tok: Vec<f64> = (0..3 * d).map(|i| (i as f64 * 0.37).sin()).collect();
        tok[d..2 * d].iter_mut().for_each(|v| *v = garbage);
        let t = g.constant(Tensor::from_f64(&[3, d], &tok)).unwrap();
        let mut ph: Vec<f64> = (0..3 * rw).map(|i| (i as f64 * 0.11).cos()).collect();
        ph[rw..2 * rw].iter_mut().for_each(|v| *v = garbage);
        let p = g.constant(Tensor::from_f64(&[3, rw], &ph)).unwrap();
        let c = g.constant(Tensor::from_f64(&[1, 2], &step_code(5.0))).unwrap();
        let out = model.decoder.forward(&mut g, t, p, c, &[true, false, true]).unwrap();
        g.value(*out.layers.last().unwrap()).to_vec()
    };
    let (a, b) = (run(0.0), run(1e3));
    for row in [0, 2] {
        for c in 0..d {
            assert!((a[row * d + c] - b[row * d + c]).abs() < 1e-9);
        }
    }
}

fn attention(gate_bias: f64) -> (ParamStore<f64>, GatedAttention) {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let attn = GatedAttention::new(&mut store, "a", 16, 2, 0.0, &mut rng).unwrap();
    let gw = store.get(attn.gate_w).unwrap().shape().to_vec();
    let gb = store.get(attn.gate_b).unwrap().shape().to_vec();
    store.set(attn.gate_w, Tensor::zeros(&gw)).unwrap();
    let n = gb.iter().product();
    store.set(attn.gate_b, Tensor::from_f64(&gb, &vec![gate_bias; n])).unwrap();
    (store, attn)
}

#[test]
fn closed_gate_silences_attention_and_open_gate_passes_it() {
    let x: Vec<f64> = (0..3 * 16).map(|i| (i as f64 * 0.7).sin()).collect();
    let run = |bias: f64, valid: Vec<bool>| {
        let (store, attn) = attention(bias);
        let mut g = Graph::with_params(&store);
        let q = g.constant(Tensor::from_f64(&[3, 16], &x)).unwrap();
        let ph = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        let tr = attn.forward(&mut g, q, q, ph, ph, &Mask::vector(valid)).unwrap();
        (g.value(tr.output).to_vec(), g.value(tr.weights).to_vec())
    };
    let (closed, _) = run(-20.0, vec![true; 3]);
    for row in closed.chunks(16).skip(1) {
        for (a, b) in row.iter().zip(&closed[..16]) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    let (open, w) = run(20.0, vec![false, true, false]);
    for row in w.chunks(3) {
        assert_eq!(row[0], 0.0);
        assert_eq!(row[2], 0.0);
        assert!((row[1] - 1.0).abs() < 1e-15);
    }
    for row in open.chunks(16).skip(1) {
        for (a, b) in row.iter().zip(&open[..16]) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    assert!(open.iter().zip(&closed).any(|(a, b)| (a - b).abs() > 1e-3));
}

#[test]
fn loss_report_recomposes_exactly() {
    let r = LossReport::from_components(0.1, 0.2, 0.3, 0.4);
    assert_eq!(r.total, 10.0 * (0.1 + 0.2) + (0.3 + 0.4));
    let m = LossReport::mean(&[r, LossReport::from_components(0.3, 0.0, 0.1, 0.0)]);
    assert_eq!(m.total, 10.0 * (m.pos_raw + m.pos_rigid) + (m.acc_raw + m.acc_rigid));
    assert_eq!(smooth_l1_values(&[0.5], &[0.0]), 0.125);
    assert_eq!(smooth_l1_values(&[2.0], &[0.0]), 1.5);
    assert_eq!(smooth_l1_values(&[-2.0, 0.5], &[0.0, 0.0]), (1.5 + 0.125) / 2.0);
}

/// Two objects drifting at constant velocity with no rotation.
fn drifting_sequence(step: usize) -> Sequence {
    let refs = [ball([0.0, 0.0, 1.0], 16), ball([0.7, 0.0, 1.0], 16)];
    let vel = [[0.3, -0.1, 0.05], [-0.2, 0.0, 0.1]];
    let frame_dt = 1.0 / 60.0;
    let frames = (0..6)
        .map(|k| {
            let t = (k * step) as f64 * frame_dt;
            refs.iter().zip(&vel).map(|(r, v)| r.iter().map(|p| [p[0] + v[0] * t, p[1] + v[1] * t, p[2] + v[2] * t]).collect()).collect()
        })
        .collect();
    Sequence {
        step,
        frame_dt,
        physics: vec![PHYS; 2],
        frames,
        trajectory: 0,
        start: 0,
    }
}

#[test]
fn perfect_prediction_has_zero_loss() {
    let seq = drifting_sequence(5);
    let cv = constant_velocity_loss(&seq, 4).unwrap();
    assert!(cv.total < 1e-12, "{cv:?}");
    let model = tiny::<f64>(1);
    let mut g = Graph::with_params(&model.params);
    let (_, r) = sequence_loss(&mut g, &model, &seq, false).unwrap();
    assert!(r.total < 1e-12, "{r:?}");
}

#[test]
fn uniform_kick_hand_computed_loss() {
    let mut seq = drifting_sequence(1);
    seq.physics.truncate(1);
    for f in &mut seq.frames {
        f.truncate(1);
    }
    // A kick of 1 mm at the third frame, carried on afterwards.
    let kick = 1e-3;
    for k in 2..seq.len() {
        for p in &mut seq.frames[k][0] {
            p[2] += kick;
        }
    }
    let shorter = Sequence {
        frames: seq.frames[..3].to_vec(),
        ..seq.clone()
    };
    let dt2 = shorter.dt() * shorter.dt();
    let d = kick / dt2;
    let want = if d < 1.0 { 0.5 * d * d } else { d - 0.5 } / 3.0;
    let r = constant_velocity_loss(&shorter, 4).unwrap();
    for v in [r.pos_raw, r.pos_rigid, r.acc_raw, r.acc_rigid] {
        assert!((v - want).abs() < 1e-9 * want, "{v} vs {want}");
    }
    assert!((r.total - 22.0 * want).abs() < 1e-9 * r.total);
}

fn real_sequences() -> Vec<Sequence> {
    let cfg = SceneConfig::default();
    let data: Vec<_> = (0..3).map(|s| simulate_scene(&cfg, s).unwrap()).collect();
    epoch_sequences(&data, &TrainConfig::default(), 0).unwrap()
}

#[test]
fn untrained_loss_equals_constant_velocity_loss() {
    let model = Model::<f32>::new(ModelConfig::desk(), 11).unwrap().cast::<f64>();
    for seq in real_sequences() {
        let mut g = Graph::with_params(&model.params);
        let (_, r) = sequence_loss(&mut g, &model, &seq, false).unwrap();
        let cv = constant_velocity_loss(&seq, model.config.anchors).unwrap();
        assert!((r.total - cv.total).abs() <= 1e-9 * cv.total.max(1.0), "{r:?} vs {cv:?}");
    }
}

#[test]
fn yaw_augmentation_keeps_distances_and_rotates_accelerations() {
    let seq = real_sequences().remove(0);
    let rot = seq.rotated_z(35.0);
    let scene = seq.base_scene(4).unwrap();
    let rscene = rot.base_scene(4).unwrap();
    for (f, g) in seq.frames.iter().zip(&rot.frames) {
        for (a, b) in f.iter().zip(g) {
            for i in 0..a.len() {
                let j = (i * 7 + 3) % a.len();
                assert!((dist(a[i], a[j]) - dist(b[i], b[j])).abs() < 1e-12);
            }
        }
    }
    let r = rigidsim::geometry::rot_z(35.0);
    let acc = seq.anchor_accel(&scene, 2);
    let racc = rot.anchor_accel(&rscene, 2);
    for (a, b) in acc.iter().zip(&racc) {
        let want = rigidsim::geometry::mat_vec(&r, *a);
        for c in 0..3 {
            assert!((want[c] - b[c]).abs() < 1e-6 * (1.0 + want[c].abs()));
        }
    }
}

#[test]
fn object_permutation_keeps_the_loss() {
    let model = {
        let mut m = tiny::<f64>(12);
        m.randomize_zero_params(0.05, 12);
        m
    };
    for seq in real_sequences() {
        let n = seq.physics.len();
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut g = Graph::with_params(&model.params);
        let (_, a) = sequence_loss(&mut g, &model, &seq, false).unwrap();
        let mut g = Graph::with_params(&model.params);
        let (_, b) = sequence_loss(&mut g, &model, &seq.permuted(&perm), false).unwrap();
        assert!((a.total - b.total).abs() <= 1e-5 * a.total.max(1.0), "{a:?} vs {b:?}");
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut model = tiny::<f32>(13);
    model.randomize_zero_params(0.1, 13);
    let bytes = model.to_checkpoint_bytes(serde_json::json!({"epoch": 3}));
    let (back, extra) = Model::<f32>::from_checkpoint_bytes(&bytes).unwrap();
    assert_eq!(extra["epoch"], 3);
    assert_eq!(back.config, model.config);
    assert_eq!(back.to_checkpoint_bytes(extra), bytes);
    let s = two_ball_scene();
    let (prev, cur) = moving_pair(&s);
    let (a, _) = model.advance_state(&prev, &cur, 1.0).unwrap();
    let (b, _) = back.advance_state(&prev, &cur, 1.0).unwrap();
    assert_eq!(a, b);
}

#[test]
fn rows_of_reads_back_constants() {
    let pts = ball([0.1, 0.2, 0.3], 8);
    let mut g = Graph::<f64>::new();
    let v = g.constant(Tensor::from_rows(&pts)).unwrap();
    assert_eq!(rows_of(&g, v), pts);
}
