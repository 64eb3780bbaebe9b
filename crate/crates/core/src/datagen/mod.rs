//! Synthetic ground-truth trajectories from a small impulse engine, their
//! file format and partial-observation masking.

pub mod engine;
mod io;
mod mask;
pub mod shapes;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{apply_rigid, RigidTransform, Vec3};
use crate::scene::{ObjectState, Physics, SceneState};

pub use engine::{Body, Engine, EngineParams};
pub use io::{read_manifest, read_trajectory, trajectory_from_bytes, trajectory_to_bytes, write_manifest, write_trajectory, Manifest, ManifestEntry, Split, TrajectoryError};
pub use mask::mask_partial;
pub use shapes::Shape;

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("no valid scene after {0} attempts")]
    Exhausted(usize),
    #[error("{0}")]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("masking leaves {left} points on object {object}; at least 8 are required")]
    TooFewSurvivors { object: usize, left: usize },
    #[error("mask fraction {0} outside [0, 1)")]
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub objects: [usize; 2],
    /// Probability that an object is a sphere rather than a box.
    pub sphere_fraction: f64,
    /// Sphere radius / box half-extent range (metres).
    pub size: [f64; 2],
    pub mass: [f64; 2],
    pub friction: [f64; 2],
    pub restitution: [f64; 2],
    /// Spawn height of the object centre above its lowest point (metres).
    pub spawn_height: [f64; 2],
    /// Objects spawn on a ring of this radius range around the origin.
    pub spawn_radius: [f64; 2],
    /// Horizontal launch speed towards the scene centre, and vertical speed.
    pub horizontal_speed: [f64; 2],
    pub vertical_speed: [f64; 2],
    pub angular_speed: [f64; 2],
    pub gravity: Vec3,
    pub frame_dt: f64,
    pub substeps: usize,
    pub frames: usize,
    pub points: usize,
    pub penetration_tol: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            objects: [2, 4],
            sphere_fraction: 0.5,
            size: [0.15, 0.3],
            mass: [0.5, 2.0],
            friction: [0.2, 0.8],
            restitution: [0.1, 0.7],
            spawn_height: [0.1, 1.0],
            spawn_radius: [0.4, 1.0],
            horizontal_speed: [0.5, 2.5],
            vertical_speed: [-1.0, 2.0],
            angular_speed: [0.0, 3.0],
            gravity: [0.0, 0.0, -9.8],
            frame_dt: 1.0 / 60.0,
            substeps: 8,
            frames: 120,
            points: 64,
            penetration_tol: 1e-3,
            max_attempts: 50,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let ranges = [
            ("size", self.size),
            ("mass", self.mass),
            ("friction", self.friction),
            ("restitution", self.restitution),
            ("spawn_height", self.spawn_height),
            ("spawn_radius", self.spawn_radius),
            ("horizontal_speed", self.horizontal_speed),
            ("vertical_speed", self.vertical_speed),
            ("angular_speed", self.angular_speed),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(DatagenError::Config(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        if self.objects[0] == 0 || self.objects[0] > self.objects[1] {
            return Err(DatagenError::Config(format!("object count range {:?}", self.objects)));
        }
        if self.size[0] <= 0.0 || self.mass[0] <= 0.0 || self.frame_dt <= 0.0 || self.frames < 2 {
            return Err(DatagenError::Config("sizes, masses, frame interval and frame count must be positive".into()));
        }
        if self.substeps < 4 {
            return Err(DatagenError::Config(format!("{} substeps; at least 4 required", self.substeps)));
        }
        if self.points < 8 {
            return Err(DatagenError::Config(format!("{} points per object; at least 8 required", self.points)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectRecord {
    pub shape: Shape,
    pub physics: Physics,
    /// Surface points at the first frame (world coordinates).
    pub reference: Vec<Vec3>,
}

/// Per-object reference geometry plus per-frame rigid transforms mapping
/// the reference onto each frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub objects: Vec<ObjectRecord>,
    /// `transforms[frame][object]`
    pub transforms: Vec<Vec<RigidTransform>>,
    /// Physical frame of each stored frame; `None` means `0..frames`.
    pub frame_indices: Option<Vec<usize>>,
    pub step_size: Option<usize>,
}

impl Trajectory {
    pub fn frames(&self) -> usize {
        self.transforms.len()
    }

    pub fn frame_index(&self, k: usize) -> usize {
        self.frame_indices.as_ref().map_or(k, |f| f[k])
    }

    pub fn vertices(&self, frame: usize, object: usize) -> Vec<Vec3> {
        apply_rigid(&self.transforms[frame][object], &self.objects[object].reference)
    }

    /// Fully observed scene at the reference pose with anchors chosen.
    pub fn base_scene(&self, anchors: usize) -> Result<SceneState, DatagenError> {
        let objects = self
            .objects
            .iter()
            .map(|o| ObjectState::new(o.reference.clone(), o.physics, anchors))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(SceneState::new(objects))
    }

    /// `base` posed at a stored frame.
    pub fn scene_at(&self, base: &SceneState, frame: usize) -> SceneState {
        base.posed(&self.transforms[frame])
    }

    /// Centre (unweighted vertex mean) of an object at a frame.
    pub fn center(&self, frame: usize, object: usize) -> Vec3 {
        crate::geometry::mean(&self.vertices(frame, object))
    }

    /// Round every stored value through `f32`, as the file format does.
    pub fn quantized(&self) -> Self {
        let q = |v: f64| v as f32 as f64;
        Self {
            dt: self.dt,
            objects: self
                .objects
                .iter()
                .map(|o| ObjectRecord {
                    shape: o.shape,
                    physics: o.physics,
                    reference: o.reference.iter().map(|p| p.map(q)).collect(),
                })
                .collect(),
            transforms: self
                .transforms
                .iter()
                .map(|f| f.iter().map(|t| RigidTransform::from_rt_rows(&t.to_rt_rows().map(q))).collect())
                .collect(),
            frame_indices: self.frame_indices.clone(),
            step_size: self.step_size,
        }
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn random_unit(rng: &mut impl Rng) -> Vec3 {
    loop {
        let v: Vec3 = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = crate::geometry::norm(v);
        if n > 1e-3 && n <= 1.0 {
            return v.map(|x| x / n);
        }
    }
}

fn spawn(config: &SceneConfig, rng: &mut impl Rng) -> Vec<(Body, Vec<Vec3>)> {
    let n = rng.random_range(config.objects[0]..=config.objects[1]);
    let mut bodies: Vec<(Body, Vec<Vec3>)> = Vec::with_capacity(n);
    while bodies.len() < n {
        let size = uniform(rng, config.size);
        let shape = if rng.random::<f64>() < config.sphere_fraction {
            Shape::Sphere { radius: size }
        } else {
            let aspect: Vec3 = std::array::from_fn(|_| rng.random_range(0.6..1.0));
            Shape::Box {
                half: aspect.map(|a| a * size),
            }
        };
        let mut body = Body::new(
            shape,
            uniform(rng, config.mass),
            uniform(rng, config.friction),
            uniform(rng, config.restitution),
        );
        let orient = crate::geometry::mat_to_quat(&crate::geometry::axis_angle(random_unit(rng), rng.random_range(0.0..std::f64::consts::TAU)));
        body.orientation = orient;
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        let radius = uniform(rng, config.spawn_radius);
        let lift = body.position[2] - body.lowest_z();
        body.position = [radius * angle.cos(), radius * angle.sin(), lift + uniform(rng, config.spawn_height)];
        let overlaps = bodies.iter().any(|(b, _)| {
            crate::geometry::dist(b.position, body.position) < b.shape.bounding_radius() + body.shape.bounding_radius() + 0.02
        });
        if overlaps {
            continue;
        }
        let speed = uniform(rng, config.horizontal_speed);
        let jitter = rng.random_range(-0.5..0.5);
        let dir = [-(angle + jitter).cos(), -(angle + jitter).sin()];
        body.velocity = [speed * dir[0], speed * dir[1], uniform(rng, config.vertical_speed)];
        body.angular_velocity = random_unit(rng).map(|v| v * uniform(rng, config.angular_speed));
        let local = shape.surface_points(config.points, rng);
        if let Shape::Box { .. } = shape {
            body.probes.extend(local.iter().copied());
        }
        bodies.push((body, local));
    }
    bodies
}

/// Simulate one scene. Scenes whose penetration exceeds the tolerance are
/// discarded and resampled from the same seed stream.
pub fn simulate_scene(config: &SceneConfig, seed: u64) -> Result<Trajectory, DatagenError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = EngineParams {
        gravity: config.gravity,
        dt: config.frame_dt / config.substeps as f64,
        ..EngineParams::default()
    };
    for attempt in 0..config.max_attempts {
        let spawned = spawn(config, &mut rng);
        let locals: Vec<Vec<Vec3>> = spawned.iter().map(|(_, l)| l.clone()).collect();
        let mut eng = Engine::new(spawned.into_iter().map(|(b, _)| b).collect(), params);
        let first: Vec<RigidTransform> = eng.bodies.iter().map(|b| b.transform()).collect();
        let inv: Vec<RigidTransform> = first.iter().map(|t| t.inverse()).collect();
        let mut transforms = Vec::with_capacity(config.frames);
        let mut ok = true;
        for f in 0..config.frames {
            if f > 0 {
                for _ in 0..config.substeps {
                    eng.substep();
                }
            }
            let frame: Vec<RigidTransform> = eng.bodies.iter().zip(&inv).map(|(b, i)| b.transform().compose(i)).collect();
            let lowest = eng
                .bodies
                .iter()
                .zip(&locals)
                .flat_map(|(b, l)| apply_rigid(&b.transform(), l))
                .map(|p| p[2])
                .fold(f64::INFINITY, f64::min);
            if lowest < -config.penetration_tol || eng.max_penetration() > 10.0 * config.penetration_tol + 0.01 {
                ok = false;
                break;
            }
            transforms.push(frame);
        }
        if !ok {
            log::info!("scene seed {seed} attempt {attempt}: penetration beyond tolerance, resampling");
            continue;
        }
        let objects = eng
            .bodies
            .iter()
            .zip(&locals)
            .zip(&first)
            .map(|((b, l), t0)| ObjectRecord {
                shape: b.shape,
                physics: Physics {
                    mass: b.mass,
                    friction: b.friction,
                    restitution: b.restitution,
                },
                reference: apply_rigid(t0, l),
            })
            .collect();
        return Ok(Trajectory {
            dt: config.frame_dt,
            objects,
            transforms,
            frame_indices: None,
            step_size: None,
        }
        .quantized());
    }
    Err(DatagenError::Exhausted(config.max_attempts))
}
