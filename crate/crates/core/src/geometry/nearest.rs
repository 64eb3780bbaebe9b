use std::collections::HashMap;

use super::Vec3;

#[inline]
fn d2(a: &Vec3, b: &Vec3) -> f64 {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// For each vertex, the vector to the closest candidate among `others` and
/// the vertex's projection onto the ground plane z = 0. Exact scan; ties go
/// to the plane, then to the lowest index in `others`.
pub fn nearest_displacement(vertices: &[Vec3], others: &[Vec3]) -> Vec<Vec3> {
    nearest_targets(vertices, others)
        .iter()
        .zip(vertices)
        .map(|(t, x)| displacement(x, t.map(|j| &others[j])))
        .collect()
}

/// Index into `others` of each vertex's closest candidate, `None` for the
/// ground plane.
pub fn nearest_targets(vertices: &[Vec3], others: &[Vec3]) -> Vec<Option<usize>> {
    vertices
        .iter()
        .map(|x| {
            let mut best = x[2] * x[2];
            let mut arg = None;
            for (j, y) in others.iter().enumerate() {
                let d = d2(x, y);
                if d < best {
                    best = d;
                    arg = Some(j);
                }
            }
            arg
        })
        .collect()
}

#[inline]
pub(crate) fn displacement(x: &Vec3, target: Option<&Vec3>) -> Vec3 {
    match target {
        Some(y) => [y[0] - x[0], y[1] - x[1], y[2] - x[2]],
        None => [0.0, 0.0, -x[2]],
    }
}

/// Uniform-grid index over candidate points. Queries return exactly what
/// [`nearest_displacement`] returns.
pub struct NearestGrid<'a> {
    points: &'a [Vec3],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> NearestGrid<'a> {
    pub fn new(points: &'a [Vec3], cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell size must be positive");
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let c = Self::key(p, cell);
            for j in 0..3 {
                lo[j] = lo[j].min(c[j]);
                hi[j] = hi[j].max(c[j]);
            }
            cells.entry(c).or_default().push(i);
        }
        Self {
            points,
            cell,
            cells,
            lo,
            hi,
        }
    }

    fn key(p: &Vec3, cell: f64) -> [i64; 3] {
        p.map(|v| (v / cell).floor() as i64)
    }

    pub fn query(&self, x: &Vec3) -> Vec3 {
        let mut best = x[2] * x[2];
        let mut arg: Option<usize> = None;
        if self.points.is_empty() {
            return displacement(x, None);
        }
        let q = Self::key(x, self.cell);
        // Rings beyond this radius contain no occupied cells.
        let reach = (0..3)
            .map(|j| (q[j] - self.lo[j]).abs().max((self.hi[j] - q[j]).abs()))
            .max()
            .unwrap_or(0);
        for r in 0..=reach {
            let bound = (r as f64 - 1.0).max(0.0) * self.cell;
            if r > 0 && best < bound * bound {
                break;
            }
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let Some(ids) = self.cells.get(&[q[0] + dx, q[1] + dy, q[2] + dz]) else {
                            continue;
                        };
                        for &j in ids {
                            let d = d2(x, &self.points[j]);
                            if d < best || (d == best && arg.is_some_and(|a| j < a)) {
                                best = d;
                                arg = Some(j);
                            }
                        }
                    }
                }
            }
        }
        displacement(x, arg.map(|j| &self.points[j]))
    }

    pub fn query_all(&self, vertices: &[Vec3]) -> Vec<Vec3> {
        vertices.iter().map(|x| self.query(x)).collect()
    }
}
