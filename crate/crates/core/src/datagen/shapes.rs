use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Vec3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half: Vec3 },
}

impl Shape {
    /// Body-frame inertia diagonal for a solid body of mass `m`.
    pub fn inertia(&self, m: f64) -> Vec3 {
        match *self {
            Shape::Sphere { radius } => [0.4 * m * radius * radius; 3],
            Shape::Box { half: [a, b, c] } => [
                m / 3.0 * (b * b + c * c),
                m / 3.0 * (a * a + c * c),
                m / 3.0 * (a * a + b * b),
            ],
        }
    }

    /// Radius of a sphere enclosing the shape.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Shape::Sphere { radius } => radius,
            Shape::Box { half } => (half[0] * half[0] + half[1] * half[1] + half[2] * half[2]).sqrt(),
        }
    }

    /// Surface samples in the body frame.
    pub fn surface_points(&self, n: usize, rng: &mut impl Rng) -> Vec<Vec3> {
        match *self {
            Shape::Sphere { radius } => fibonacci_sphere(n, radius),
            Shape::Box { half } => box_surface(n, half, rng),
        }
    }
}

/// `n` near-uniform points on a sphere of the given radius (golden-angle
/// spiral).
pub fn fibonacci_sphere(n: usize, radius: f64) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
            let r = (1.0 - z * z).max(0.0).sqrt();
            let phi = golden * i as f64;
            [radius * r * phi.cos(), radius * r * phi.sin(), radius * z]
        })
        .collect()
}

/// `n` points on the faces of a box: faces receive counts proportional to
/// their area and each face is split into jittered strata.
pub fn box_surface(n: usize, half: Vec3, rng: &mut impl Rng) -> Vec<Vec3> {
    // Faces as (normal axis, sign); the other two axes span the face.
    let faces: Vec<(usize, f64)> = (0..3).flat_map(|a| [(a, 1.0), (a, -1.0)]).collect();
    let area = |a: usize| {
        let (u, v) = ((a + 1) % 3, (a + 2) % 3);
        half[u] * half[v]
    };
    let total: f64 = faces.iter().map(|&(a, _)| area(a)).sum();
    let mut counts: Vec<usize> = faces.iter().map(|&(a, _)| (n as f64 * area(a) / total).floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut k = 0;
    while rest > 0 {
        counts[k % 6] += 1;
        rest -= 1;
        k += 1;
    }
    let mut out = Vec::with_capacity(n);
    for (&(a, s), &c) in faces.iter().zip(&counts) {
        if c == 0 {
            continue;
        }
        let (u, v) = ((a + 1) % 3, (a + 2) % 3);
        let cols = ((c as f64 * half[u] / half[v]).sqrt().round() as usize).clamp(1, c);
        let rows = c.div_ceil(cols);
        for i in 0..c {
            let (r, q) = (i / cols, i % cols);
            let fu = (q as f64 + rng.random::<f64>()) / cols as f64;
            let fv = (r as f64 + rng.random::<f64>()) / rows as f64;
            let mut p = [0.0; 3];
            p[a] = s * half[a];
            p[u] = (2.0 * fu - 1.0) * half[u];
            p[v] = (2.0 * fv - 1.0) * half[v];
            out.push(p);
        }
    }
    out
}

/// The 8 corners of a box in the body frame.
pub fn box_corners(half: Vec3) -> [Vec3; 8] {
    std::array::from_fn(|i| {
        let s = |b: usize| if i >> b & 1 == 1 { 1.0 } else { -1.0 };
        [s(0) * half[0], s(1) * half[1], s(2) * half[2]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sphere_points_lie_on_the_surface() {
        let p = fibonacci_sphere(64, 0.3);
        assert_eq!(p.len(), 64);
        for x in &p {
            let r = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
            assert!((r - 0.3).abs() < 1e-12);
        }
    }

    #[test]
    fn box_points_lie_on_faces() {
        let half = [0.2, 0.3, 0.1];
        let p = box_surface(64, half, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(p.len(), 64);
        for x in &p {
            assert!((0..3).all(|a| x[a].abs() <= half[a] + 1e-12));
            assert!((0..3).any(|a| (x[a].abs() - half[a]).abs() < 1e-12));
        }
    }
}
