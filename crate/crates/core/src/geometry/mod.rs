//! Non-learned geometric kernels: farthest-point sampling, nearest
//! displacement, Verlet integration, Kabsch alignment and rotation metrics.
//!
//! All functions are pure. Points are `[T; 3]` rows; rotations are
//! row-major `[[f64; 3]; 3]`.

mod fps;
mod kabsch;
mod nearest;
pub mod tape;

pub use fps::{farthest_point_sample, farthest_point_sample_with, TieBreak};
pub use kabsch::{
    jacobi_svd3, kabsch_align, kabsch_align_with, kabsch_backward, KabschHooks, KabschResult, Svd3,
    DEGENERATE_SIGMA, SVD_GRAD_EPS,
};
pub use nearest::{nearest_displacement, nearest_targets, NearestGrid};
pub use tape::{apply_rigid_var, kabsch, nearest_var, tensor_transform, transform_tensor, verlet_var};

use serde::{Deserialize, Serialize};

use crate::tensor::Real;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("cannot sample {k} points from {n}")]
    TooFewPoints { k: usize, n: usize },
    #[error("point sets differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("kabsch needs at least 3 correspondences, got {0}")]
    TooFewAnchors(usize),
    #[error("matrix is not a rotation (orthonormality error {0:.3e})")]
    NotRotation(f64),
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
}

pub const IDENTITY: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// A proper rigid motion `x ↦ R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub r: Mat3,
    pub t: Vec3,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { r: IDENTITY, t: [0.0; 3] }
    }

    pub fn new(r: Mat3, t: Vec3) -> Self {
        Self { r, t }
    }

    pub fn apply(&self, x: Vec3) -> Vec3 {
        apply_point(&self.r, &self.t, x)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            r: mat_mul(&self.r, &other.r),
            t: add(mat_vec(&self.r, other.t), self.t),
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = transpose(&self.r);
        let t = mat_vec(&rt, self.t);
        RigidTransform {
            r: rt,
            t: [-t[0], -t[1], -t[2]],
        }
    }

    /// Max deviation of RᵀR from I and of det(R) from +1.
    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.r)
    }

    /// `[R | t]` as 12 row-major values.
    pub fn to_rt_rows(&self) -> [f64; 12] {
        let r = &self.r;
        let t = &self.t;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1], r[2][2], t[2],
        ]
    }

    pub fn from_rt_rows(v: &[f64]) -> Self {
        Self {
            r: [[v[0], v[1], v[2]], [v[4], v[5], v[6]], [v[8], v[9], v[10]]],
            t: [v[3], v[7], v[11]],
        }
    }
}

pub fn orthonormality_error(r: &Mat3) -> f64 {
    let rtr = mat_mul(&transpose(r), r);
    let mut e: f64 = 0.0;
    for (i, row) in rtr.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            e = e.max((v - IDENTITY[i][j]).abs());
        }
    }
    e.max((det(r) - 1.0).abs())
}

#[inline]
fn apply_point(r: &Mat3, t: &Vec3, x: Vec3) -> Vec3 {
    [
        r[0][0] * x[0] + r[0][1] * x[1] + r[0][2] * x[2] + t[0],
        r[1][0] * x[0] + r[1][1] * x[1] + r[1][2] * x[2] + t[1],
        r[2][0] * x[0] + r[2][1] * x[1] + r[2][2] * x[2] + t[2],
    ]
}

/// `R·x + t` for every reference point.
pub fn apply_rigid<T: Real>(tf: &RigidTransform, points: &[[T; 3]]) -> Vec<[T; 3]> {
    let r = tf.r.map(|row| row.map(T::c));
    let t = tf.t.map(T::c);
    points
        .iter()
        .map(|x| {
            [
                r[0][0] * x[0] + r[0][1] * x[1] + r[0][2] * x[2] + t[0],
                r[1][0] * x[0] + r[1][1] * x[1] + r[1][2] * x[2] + t[1],
                r[2][0] * x[0] + r[2][1] * x[1] + r[2][2] * x[2] + t[2],
            ]
        })
        .collect()
}

/// `a·dt² + 2·q_t − q_prev` per point.
pub fn verlet_step<T: Real>(q_t: &[[T; 3]], q_prev: &[[T; 3]], a: &[[T; 3]], dt: f64) -> Result<Vec<[T; 3]>, GeometryError> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(GeometryError::NonPositiveStep(dt));
    }
    if q_t.len() != q_prev.len() || q_t.len() != a.len() {
        return Err(GeometryError::LengthMismatch(q_t.len(), q_prev.len().min(a.len())));
    }
    let dt2 = T::c(dt * dt);
    let two = T::c(2.0);
    Ok(q_t
        .iter()
        .zip(q_prev)
        .zip(a)
        .map(|((q, p), a)| std::array::from_fn(|j| a[j] * dt2 + two * q[j] - p[j]))
        .collect())
}

/// Geodesic angle in degrees between two rotations, via unit quaternions.
pub fn quat_geodesic_deg(ra: &Mat3, rb: &Mat3) -> Result<f64, GeometryError> {
    for r in [ra, rb] {
        let e = orthonormality_error(r);
        if e > 1e-4 {
            return Err(GeometryError::NotRotation(e));
        }
    }
    let qa = mat_to_quat(ra);
    let qb = mat_to_quat(rb);
    let dot = (qa[0] * qb[0] + qa[1] * qb[1] + qa[2] * qb[2] + qa[3] * qb[3]).abs().min(1.0);
    Ok(2.0 * dot.acos().to_degrees())
}

/// Unit quaternion `[w, x, y, z]` of a rotation matrix (Shepperd's method).
pub fn mat_to_quat(r: &Mat3) -> [f64; 4] {
    let tr = r[0][0] + r[1][1] + r[2][2];
    let q = if tr > 0.0 {
        let s = (tr + 1.0).sqrt() * 2.0;
        [0.25 * s, (r[2][1] - r[1][2]) / s, (r[0][2] - r[2][0]) / s, (r[1][0] - r[0][1]) / s]
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        [(r[2][1] - r[1][2]) / s, 0.25 * s, (r[0][1] + r[1][0]) / s, (r[0][2] + r[2][0]) / s]
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        [(r[0][2] - r[2][0]) / s, (r[0][1] + r[1][0]) / s, 0.25 * s, (r[1][2] + r[2][1]) / s]
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        [(r[1][0] - r[0][1]) / s, (r[0][2] + r[2][0]) / s, (r[1][2] + r[2][1]) / s, 0.25 * s]
    };
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    q.map(|v| v / n)
}

/// Rotation matrix of a (not necessarily normalized) quaternion `[w, x, y, z]`.
pub fn quat_to_mat(q: [f64; 4]) -> Mat3 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn rot_x(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

pub fn rot_y(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

pub fn rot_z(deg: f64) -> Mat3 {
    let (s, c) = deg.to_radians().sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Rotation about a unit axis by `angle` radians (Rodrigues).
pub fn axis_angle(axis: Vec3, angle: f64) -> Mat3 {
    let n = norm(axis);
    if n == 0.0 {
        return IDENTITY;
    }
    let h = 0.5 * angle;
    let s = h.sin() / n;
    quat_to_mat([h.cos(), axis[0] * s, axis[1] * s, axis[2] * s])
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j]))
}

pub fn transpose(a: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| a[j][i]))
}

pub fn mat_vec(a: &Mat3, v: Vec3) -> Vec3 {
    std::array::from_fn(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

pub fn det(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    norm(sub(a, b))
}

pub fn mean<T: Real>(points: &[[T; 3]]) -> [T; 3] {
    let n = T::c(points.len() as f64);
    let mut s = [T::zero(); 3];
    for p in points {
        for j in 0..3 {
            s[j] += p[j];
        }
    }
    s.map(|v| v / n)
}

/// Largest relative change of any pairwise distance between `a` and `b`
/// (corresponding point sets). Pairs closer than `min_ref` in `b` are skipped.
pub fn max_pairwise_distortion(a: &[Vec3], b: &[Vec3], min_ref: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for u in 0..a.len() {
        for v in u + 1..a.len() {
            let dr = dist(b[u], b[v]);
            if dr <= min_ref {
                continue;
            }
            worst = worst.max((dist(a[u], a[v]) - dr).abs() / dr);
        }
    }
    worst
}
