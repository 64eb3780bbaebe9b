//! Geometry kernels recorded as differentiable tape operations. Forward
//! values come from the same plain functions used elsewhere, so taped and
//! untaped results agree bit for bit.

use crate::tensor::{CustomOp, Graph, Real, Result, Tensor, TensorError, Var};

use super::{apply_rigid, kabsch_align_with, kabsch_backward, verlet_step, KabschHooks, KabschResult, RigidTransform, Vec3};

fn rows<T: Real>(t: &Tensor<T>) -> Vec<[T; 3]> {
    t.data().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn rows_f64<T: Real>(t: &Tensor<T>) -> Vec<Vec3> {
    t.to_rows()
}

fn from_rows<T: Real>(r: &[[T; 3]]) -> Tensor<T> {
    Tensor::from_vec(&[r.len(), 3], r.iter().flatten().copied().collect())
}

fn from_rows_f64<T: Real>(r: &[Vec3]) -> Tensor<T> {
    Tensor::from_vec(&[r.len(), 3], r.iter().flatten().map(|&v| T::c(v)).collect())
}

fn expect_points(g: &Graph<'_, impl Real>, v: Var, op: &'static str) -> Result<usize> {
    match g.shape(v) {
        [n, 3] => Ok(*n),
        s => Err(TensorError::InvalidShape {
            op,
            detail: format!("expected [n, 3], got {s:?}"),
        }),
    }
}

/// The 3×4 `[R | t]` tensor of a transform.
pub fn transform_tensor<T: Real>(tf: &RigidTransform) -> Tensor<T> {
    Tensor::from_vec(&[3, 4], tf.to_rt_rows().iter().map(|&v| T::c(v)).collect())
}

pub fn tensor_transform<T: Real>(t: &Tensor<T>) -> RigidTransform {
    RigidTransform::from_rt_rows(&t.to_f64())
}

struct KabschOp {
    result: KabschResult,
}

impl<T: Real> CustomOp<T> for KabschOp {
    fn name(&self) -> &'static str {
        "kabsch"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.to_f64();
        let g_r = [[g[0], g[1], g[2]], [g[4], g[5], g[6]], [g[8], g[9], g[10]]];
        let g_t = [g[3], g[7], g[11]];
        let (gs, gd) = kabsch_backward(&rows_f64(inputs[0]), &rows_f64(inputs[1]), &self.result, &g_r, &g_t);
        Ok(vec![Some(from_rows_f64(&gs)), Some(from_rows_f64(&gd))])
    }
}

/// Kabsch alignment of `src` onto `dst` (both `[n, 3]`), returning the
/// `[3, 4]` transform node and the full forward result.
pub fn kabsch<T: Real>(g: &mut Graph<'_, T>, src: Var, dst: Var, hooks: KabschHooks) -> Result<(Var, KabschResult)> {
    let n = expect_points(g, src, "kabsch")?;
    if expect_points(g, dst, "kabsch")? != n {
        return Err(TensorError::ShapeMismatch {
            op: "kabsch",
            lhs: g.shape(src).to_vec(),
            rhs: g.shape(dst).to_vec(),
        });
    }
    let result = kabsch_align_with(&rows_f64(g.value(src)), &rows_f64(g.value(dst)), hooks).map_err(|e| {
        TensorError::InvalidShape {
            op: "kabsch",
            detail: e.to_string(),
        }
    })?;
    let out = transform_tensor(&result.transform);
    let v = g.custom(&[src, dst], out, Box::new(KabschOp { result }))?;
    Ok((v, result))
}

struct ApplyRigidOp;

impl<T: Real> CustomOp<T> for ApplyRigidOp {
    fn name(&self) -> &'static str {
        "apply_rigid"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let rt = inputs[0].data();
        let x = rows(inputs[1]);
        let gy = rows(grad);
        let mut g_rt = vec![T::zero(); 12];
        let mut g_x = Vec::with_capacity(x.len());
        for (xk, gk) in x.iter().zip(&gy) {
            for i in 0..3 {
                for j in 0..3 {
                    g_rt[i * 4 + j] += gk[i] * xk[j];
                }
                g_rt[i * 4 + 3] += gk[i];
            }
            g_x.push(std::array::from_fn(|j| rt[j] * gk[0] + rt[4 + j] * gk[1] + rt[8 + j] * gk[2]));
        }
        Ok(vec![Some(Tensor::from_vec(&[3, 4], g_rt)), Some(from_rows(&g_x))])
    }
}

/// `R·x + t` for each row of `points` given a `[3, 4]` transform node.
pub fn apply_rigid_var<T: Real>(g: &mut Graph<'_, T>, rt: Var, points: Var) -> Result<Var> {
    if g.shape(rt) != [3, 4] {
        return Err(TensorError::InvalidShape {
            op: "apply_rigid",
            detail: format!("transform must be [3, 4], got {:?}", g.shape(rt)),
        });
    }
    expect_points(g, points, "apply_rigid")?;
    let tf = tensor_transform(g.value(rt));
    let out = from_rows(&apply_rigid(&tf, &rows(g.value(points))));
    g.custom(&[rt, points], out, Box::new(ApplyRigidOp))
}

struct VerletOp {
    dt2: f64,
}

impl<T: Real> CustomOp<T> for VerletOp {
    fn name(&self) -> &'static str {
        "verlet"
    }

    fn backward(&self, _inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let dt2 = T::c(self.dt2);
        let two = T::c(2.0);
        Ok(vec![
            Some(grad.map(|v| v * two)),
            Some(grad.map(|v| -v)),
            Some(grad.map(|v| v * dt2)),
        ])
    }
}

/// Verlet advance `a·dt² + 2·q_t − q_prev` on `[n, 3]` nodes.
pub fn verlet_var<T: Real>(g: &mut Graph<'_, T>, q_t: Var, q_prev: Var, a: Var, dt: f64) -> Result<Var> {
    let n = expect_points(g, q_t, "verlet")?;
    for v in [q_prev, a] {
        if expect_points(g, v, "verlet")? != n {
            return Err(TensorError::ShapeMismatch {
                op: "verlet",
                lhs: g.shape(q_t).to_vec(),
                rhs: g.shape(v).to_vec(),
            });
        }
    }
    let out = verlet_step(&rows(g.value(q_t)), &rows(g.value(q_prev)), &rows(g.value(a)), dt).map_err(|e| {
        TensorError::Domain {
            op: "verlet",
            detail: e.to_string(),
        }
    })?;
    g.custom(&[q_t, q_prev, a], from_rows(&out), Box::new(VerletOp { dt2: dt * dt }))
}

struct NearestOp {
    /// For each row, the row of the closest other-object vertex, or `None`
    /// when the ground plane is closest.
    target: Vec<Option<usize>>,
}

impl<T: Real> CustomOp<T> for NearestOp {
    fn name(&self) -> &'static str {
        "nearest_displacement"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let mut d = vec![T::zero(); inputs[0].numel()];
        let gd = grad.data();
        for (i, t) in self.target.iter().enumerate() {
            match t {
                Some(j) => {
                    for c in 0..3 {
                        d[i * 3 + c] -= gd[i * 3 + c];
                        d[j * 3 + c] += gd[i * 3 + c];
                    }
                }
                None => d[i * 3 + 2] -= gd[i * 3 + 2],
            }
        }
        Ok(vec![Some(Tensor::from_vec(inputs[0].shape(), d))])
    }
}

/// Nearest-displacement features for a stacked vertex array `[n, 3]` where
/// `groups[o]` lists the rows of object `o`. Candidates are the vertices of
/// every other group plus the ground plane.
pub fn nearest_var<T: Real>(g: &mut Graph<'_, T>, verts: Var, groups: &[Vec<usize>]) -> Result<Var> {
    let n = expect_points(g, verts, "nearest_displacement")?;
    let pts = rows_f64(g.value(verts));
    let mut out = vec![[0.0; 3]; n];
    let mut target = vec![None; n];
    for (o, rows_o) in groups.iter().enumerate() {
        let other_rows: Vec<usize> = groups
            .iter()
            .enumerate()
            .filter(|(p, _)| *p != o)
            .flat_map(|(_, r)| r.iter().copied())
            .collect();
        let others: Vec<Vec3> = other_rows.iter().map(|&r| pts[r]).collect();
        let own: Vec<Vec3> = rows_o.iter().map(|&r| pts[r]).collect();
        let hits = super::nearest_targets(&own, &others);
        for (k, &r) in rows_o.iter().enumerate() {
            out[r] = super::nearest::displacement(&own[k], hits[k].map(|j| &others[j]));
            target[r] = hits[k].map(|j| other_rows[j]);
        }
    }
    g.custom(&[verts], from_rows_f64(&out), Box::new(NearestOp { target }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{mat_mul, rot_x, rot_z};
    use crate::tensor::gradcheck::{finite_diff_check, FdOptions};

    fn tet() -> Tensor<f64> {
        Tensor::from_rows(&[[0.1, 0.0, 0.2], [1.0, 0.1, 0.0], [0.0, 0.9, 0.3], [0.2, 0.1, 1.1]])
    }

    fn moved(noise: f64) -> Tensor<f64> {
        let tf = RigidTransform::new(mat_mul(&rot_z(37.0), &rot_x(12.0)), [1.0, 2.0, 3.0]);
        let mut p = apply_rigid(&tf, &tet().to_rows());
        for (k, row) in p.iter_mut().enumerate() {
            row[k % 3] += noise * (k as f64 + 1.0);
        }
        Tensor::from_rows(&p)
    }

    fn projected_loss(g: &mut Graph<'_, f64>, v: &[Var]) -> Result<Var> {
        let (rt, _) = kabsch(g, v[0], v[1], KabschHooks::default())?;
        let verts = g.constant(Tensor::from_rows(&[[0.5, 0.5, 0.5], [-0.3, 0.2, 0.8], [1.0, -1.0, 0.0]]))?;
        let y = apply_rigid_var(g, rt, verts)?;
        let w = g.constant(Tensor::from_rows(&[[0.3, -1.2, 0.7], [2.0, 0.1, -0.4], [-0.6, 0.9, 1.5]]))?;
        let p = g.mul(y, w)?;
        let s = g.sin(p)?;
        g.sum_all(s)
    }

    #[test]
    fn kabsch_projection_gradient_matches_finite_differences() {
        for noise in [0.0, 0.05, 0.3] {
            let point = vec![tet(), moved(noise)];
            let r = finite_diff_check(projected_loss, &point, &FdOptions::default()).unwrap();
            assert!(r.max_rel_error < 1e-4, "noise {noise}: {r:?}");
        }
    }

    #[test]
    fn reflection_branch_gradient_matches() {
        let mirrored: Vec<Vec3> = tet().to_rows().iter().map(|p| [-p[0], p[1] * 1.1, p[2]]).collect();
        let point = vec![tet(), Tensor::from_rows(&mirrored)];
        let r = finite_diff_check(projected_loss, &point, &FdOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn verlet_and_nearest_gradients() {
        let point = vec![
            Tensor::from_rows(&[[0.0, 0.0, 1.0], [0.2, 0.0, 0.05], [0.3, 0.1, 2.0]]),
            Tensor::from_rows(&[[0.1, 0.0, 0.9], [0.0, 0.2, 0.4], [0.3, 0.1, 1.7]]),
            Tensor::from_rows(&[[0.5, -0.2, 0.1], [0.0, 0.0, -1.0], [0.7, 0.7, 0.7]]),
        ];
        let r = finite_diff_check(
            |g, v| {
                let q = verlet_var(g, v[0], v[1], v[2], 0.7)?;
                let d = nearest_var(g, q, &[vec![0, 1], vec![2]])?;
                let s = g.square(d)?;
                let w = g.add(s, q)?;
                g.sum_all(w)
            },
            &point,
            &FdOptions::default(),
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }
}
