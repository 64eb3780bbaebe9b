use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rigidsim::datagen::shapes::fibonacci_sphere;
use rigidsim::datagen::{
    mask_partial, read_trajectory, simulate_scene, trajectory_from_bytes, trajectory_to_bytes, write_trajectory, Body, Engine, EngineParams, ObjectRecord,
    SceneConfig, Shape, Trajectory, TrajectoryError,
};
use rigidsim::geometry::{
    apply_rigid, det, dist, farthest_point_sample, kabsch_align, mat_mul, max_pairwise_distortion, nearest_displacement, rot_x, rot_z, RigidTransform, Vec3,
};
use rigidsim::scene::Physics;

fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect()
}

/// Greedy max-min selection by scalar loops: first the point farthest from
/// the centroid, then repeatedly the point farthest from the chosen set.
fn greedy_oracle(points: &[Vec3], k: usize) -> Vec<usize> {
    let n = points.len() as f64;
    let mut c = [0.0; 3];
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for p in &sorted {
        for j in 0..3 {
            c[j] += p[j];
        }
    }
    let c = c.map(|v| v / n);
    let mut chosen = vec![];
    let mut best = 0;
    for i in 0..points.len() {
        if dist(points[i], c) > dist(points[best], c) {
            best = i;
        }
    }
    chosen.push(best);
    while chosen.len() < k {
        let mut best = usize::MAX;
        let mut best_d = -1.0;
        for i in 0..points.len() {
            let d = chosen.iter().map(|&j| dist(points[i], points[j])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best = i;
                best_d = d;
            }
        }
        chosen.push(best);
    }
    chosen
}

#[test]
fn fps_matches_greedy_oracle_on_random_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let pts = random_points(&mut rng, 100);
        assert_eq!(farthest_point_sample(&pts, 4).unwrap(), greedy_oracle(&pts, 4));
    }
}

#[test]
fn nearest_displacement_examples() {
    assert_eq!(nearest_displacement(&[[0.0, 0.0, 2.5]], &[]), vec![[0.0, 0.0, -2.5]]);
    assert_eq!(nearest_displacement(&[[0.0, 0.0, 1.0]], &[[3.0, 0.0, 1.0]]), vec![[0.0, 0.0, -1.0]]);
}

#[test]
fn nearest_displacement_matches_pairwise_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let objects: Vec<Vec<Vec3>> = (0..3)
        .map(|k| random_points(&mut rng, 20).into_iter().map(|p| [p[0] + k as f64, p[1], p[2].abs() + 0.1]).collect())
        .collect();
    for i in 0..3 {
        let others: Vec<Vec3> = (0..3).filter(|&j| j != i).flat_map(|j| objects[j].clone()).collect();
        let got = nearest_displacement(&objects[i], &others);
        for (x, d) in objects[i].iter().zip(&got) {
            let mut best = [0.0, 0.0, -x[2]];
            let mut best_d = x[2];
            for y in &others {
                if dist(*x, *y) < best_d {
                    best_d = dist(*x, *y);
                    best = [y[0] - x[0], y[1] - x[1], y[2] - x[2]];
                }
            }
            assert_eq!(*d, best);
        }
    }
}

#[test]
fn kabsch_recovers_composed_rotation() {
    let r0 = mat_mul(&rot_z(37.0), &rot_x(12.0));
    let t0 = [1.0, 2.0, 3.0];
    let tf = RigidTransform::new(r0, t0);
    let src: Vec<Vec3> = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.3, 0.7, -0.2]];
    let fit = kabsch_align(&src, &apply_rigid(&tf, &src)).unwrap();
    for i in 0..3 {
        for j in 0..3 {
            assert!((fit.transform.r[i][j] - r0[i][j]).abs() < 1e-8);
        }
        assert!((fit.transform.t[i] - t0[i]).abs() < 1e-8);
    }
    let mirrored: Vec<Vec3> = src[..4].iter().map(|p| [p[0], p[1], -p[2]]).collect();
    assert!((det(&kabsch_align(&src[..4], &mirrored).unwrap().transform.r) - 1.0).abs() < 1e-12);
}

#[test]
fn ground_truth_is_rigid_and_above_ground() {
    let cfg = SceneConfig::default();
    for seed in 0..5 {
        let t = simulate_scene(&cfg, seed).unwrap();
        for k in 0..t.frames() {
            for (o, rec) in t.objects.iter().enumerate() {
                let v = t.vertices(k, o);
                assert_eq!(v, apply_rigid(&t.transforms[k][o], &rec.reference));
                assert!(max_pairwise_distortion(&v, &rec.reference, 1e-9) <= 1e-6);
                assert!(v.iter().all(|p| p[2] >= -cfg.penetration_tol));
            }
        }
    }
}

#[test]
fn simulation_is_deterministic_per_seed() {
    let cfg = SceneConfig::default();
    let a = trajectory_to_bytes(&simulate_scene(&cfg, 42).unwrap());
    let b = trajectory_to_bytes(&simulate_scene(&cfg, 42).unwrap());
    assert_eq!(a, b);
    assert_ne!(a, trajectory_to_bytes(&simulate_scene(&cfg, 43).unwrap()));
}

#[test]
fn dissipative_contacts_do_not_gain_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..4 {
        let mut a = Body::new(Shape::Sphere { radius: 0.2 }, 1.0, 0.5, 0.5);
        a.position = [0.0, 0.0, rng.random_range(0.5..1.0)];
        a.velocity = [rng.random_range(0.5..1.5), 0.0, 0.0];
        let mut b = Body::new(Shape::Box { half: [0.2, 0.15, 0.1] }, 2.0, 0.4, 0.3);
        b.position = [0.8, 0.05, 0.4];
        b.angular_velocity = [0.0, 1.0, 0.5];
        let mut eng = Engine::new(vec![a, b], EngineParams::default());
        let start = eng.energy();
        for _ in 0..1500 {
            eng.substep();
            let excess = eng.energy() - start;
            assert!(excess <= 1e-3 * eng.contact_events.max(1) as f64, "energy rose by {excess} over {} contacts", eng.contact_events);
        }
        assert!(eng.contact_events > 0);
        assert!(eng.energy() < start);
    }
}

fn sample_trajectory() -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let objects = (0..2)
        .map(|k| ObjectRecord {
            shape: Shape::Sphere { radius: 0.2 },
            physics: Physics {
                mass: 1.0 + k as f64,
                friction: 0.3,
                restitution: 0.6,
            },
            reference: fibonacci_sphere(16, 0.2).into_iter().map(|p| [p[0] + k as f64 + 0.123456789, p[1], p[2] + 0.5]).collect(),
        })
        .collect();
    let transforms = (0..5)
        .map(|_| {
            (0..2)
                .map(|_| {
                    RigidTransform::new(
                        rigidsim::geometry::axis_angle([0.0, 0.6, 0.8], rng.random_range(-1.0..1.0)),
                        std::array::from_fn(|_| rng.random_range(-1.0..1.0)),
                    )
                })
                .collect()
        })
        .collect();
    Trajectory {
        dt: 1.0 / 60.0,
        objects,
        transforms,
        frame_indices: Some(vec![0, 5, 10, 15, 20]),
        step_size: Some(5),
    }
}

#[test]
fn file_round_trip_is_bit_exact_after_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let t = sample_trajectory().quantized();
    let path = dir.path().join("t.rgf");
    write_trajectory(&path, &t).unwrap();
    let back = read_trajectory(&path).unwrap();
    assert_eq!(trajectory_to_bytes(&back), trajectory_to_bytes(&t));
    assert_eq!(back.frame_indices, t.frame_indices);
    assert_eq!(back.step_size, Some(5));
    for (a, b) in back.transforms.iter().flatten().zip(t.transforms.iter().flatten()) {
        assert_eq!(a.to_rt_rows(), b.to_rt_rows());
    }
}

#[test]
fn storage_quantization_is_bounded() {
    let t = sample_trajectory();
    let back = trajectory_from_bytes(&trajectory_to_bytes(&t)).unwrap();
    let rel = |a: f64, b: f64| if a == 0.0 { b.abs() } else { ((a - b) / a).abs() };
    for (a, b) in t.objects.iter().zip(&back.objects) {
        for (p, q) in a.reference.iter().zip(&b.reference) {
            for c in 0..3 {
                assert!(rel(p[c], q[c]) <= 1e-6);
            }
        }
    }
    for (a, b) in t.transforms.iter().flatten().zip(back.transforms.iter().flatten()) {
        for (x, y) in a.to_rt_rows().iter().zip(b.to_rt_rows()) {
            assert!(rel(*x, y) <= 1e-6);
        }
    }
}

#[test]
fn truncated_file_names_the_missing_section() {
    let bytes = trajectory_to_bytes(&sample_trajectory());
    let header_end = 8 + u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let cases = [(2, "magic"), (6, "header length"), (header_end - 3, "header"), (header_end + 10, "reference"), (bytes.len() - 4, "transform")];
    for (cut, section) in cases {
        match trajectory_from_bytes(&bytes[..cut]) {
            Err(TrajectoryError::Truncated { section: s, .. }) => assert!(s.contains(section), "cut {cut}: got section {s}, wanted {section}"),
            other => panic!("cut {cut}: expected truncation, got {other:?}"),
        }
    }
    assert!(matches!(trajectory_from_bytes(b"XXXX\0\0\0\0"), Err(TrajectoryError::Magic(_))));
    let mut extra = bytes.clone();
    extra.extend([0; 4]);
    assert!(matches!(trajectory_from_bytes(&extra), Err(TrajectoryError::Trailing(4))));
}

#[test]
fn masking_keeps_the_floor_fraction_and_is_deterministic() {
    let t = simulate_scene(&SceneConfig::default(), 3).unwrap();
    let base = t.base_scene(16).unwrap();
    assert_eq!(mask_partial(&base, 0.0, 1).unwrap(), base);
    let m = mask_partial(&base, 0.25, 1).unwrap();
    for (o, full) in m.objects.iter().zip(&base.objects) {
        assert_eq!(o.observed.len(), 48);
        assert_eq!(o.reference, full.reference);
        assert!(o.anchors.iter().all(|a| o.observed.contains(a)));
    }
    assert_eq!(mask_partial(&base, 0.25, 1).unwrap(), m);
    assert_ne!(mask_partial(&base, 0.25, 2).unwrap(), m);
    assert!(mask_partial(&base, 1.0, 1).is_err());
    assert!(mask_partial(&base, 0.95, 1).is_err());
}
