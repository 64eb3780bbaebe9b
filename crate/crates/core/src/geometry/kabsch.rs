use super::{cross, det, mat_mul, transpose, GeometryError, Mat3, RigidTransform, Vec3};

/// Two smallest singular values below this flag a degenerate alignment.
pub const DEGENERATE_SIGMA: f64 = 1e-9;
/// Floor on |σᵢ ± σⱼ| in the SVD gradient.
pub const SVD_GRAD_EPS: f64 = 1e-8;

const JACOBI_TOL: f64 = 1e-12;
const JACOBI_SWEEPS: usize = 30;

/// `A = U · diag(sigma) · Vᵀ` with `sigma` sorted descending and U, V
/// orthogonal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Svd3 {
    pub u: Mat3,
    pub sigma: [f64; 3],
    pub v: Mat3,
    pub sweeps: usize,
}

fn col(m: &Mat3, j: usize) -> Vec3 {
    [m[0][j], m[1][j], m[2][j]]
}

fn set_col(m: &mut Mat3, j: usize, c: Vec3) {
    for i in 0..3 {
        m[i][j] = c[i];
    }
}

/// Any unit vector orthogonal to `a` (assumed unit).
fn orthogonal_to(a: Vec3) -> Vec3 {
    let pick = if a[0].abs() <= a[1].abs() && a[0].abs() <= a[2].abs() {
        [1.0, 0.0, 0.0]
    } else if a[1].abs() <= a[2].abs() {
        [0.0, 1.0, 0.0]
    } else {
        [0.0, 0.0, 1.0]
    };
    let c = cross(a, pick);
    let n = super::norm(c);
    c.map(|v| v / n)
}

/// One-sided cyclic Jacobi SVD of a 3×3 matrix.
pub fn jacobi_svd3(a: &Mat3) -> Svd3 {
    let mut w = *a;
    let mut v = super::IDENTITY;
    let mut sweeps = 0;
    while sweeps < JACOBI_SWEEPS {
        sweeps += 1;
        let mut rotated = false;
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
            for row in &w {
                alpha += row[p] * row[p];
                beta += row[q] * row[q];
                gamma += row[p] * row[q];
            }
            if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            for m in [&mut w, &mut v] {
                for row in m.iter_mut() {
                    let (xp, xq) = (row[p], row[q]);
                    row[p] = c * xp - s * xq;
                    row[q] = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sigma = [0.0; 3];
    for (j, s) in sigma.iter_mut().enumerate() {
        *s = super::norm(col(&w, j));
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));
    let mut u = [[0.0; 3]; 3];
    let mut vs = [[0.0; 3]; 3];
    let mut ss = [0.0; 3];
    for (k, &j) in order.iter().enumerate() {
        ss[k] = sigma[j];
        set_col(&mut vs, k, col(&v, j));
        set_col(&mut u, k, col(&w, j));
    }
    // Normalize left vectors; complete the basis where a column vanished.
    let scale = ss[0].max(f64::MIN_POSITIVE);
    let tiny = |s: f64| s <= 1e-14 * scale;
    for k in 0..3 {
        if !tiny(ss[k]) {
            let c = col(&u, k).map(|x| x / ss[k]);
            set_col(&mut u, k, c);
        }
    }
    if tiny(ss[0]) {
        u = super::IDENTITY;
    } else if tiny(ss[1]) {
        let u0 = col(&u, 0);
        let u1 = orthogonal_to(u0);
        set_col(&mut u, 1, u1);
        set_col(&mut u, 2, cross(u0, u1));
    } else if tiny(ss[2]) {
        let c = cross(col(&u, 0), col(&u, 1));
        let n = super::norm(c);
        set_col(&mut u, 2, c.map(|x| x / n));
    }
    Svd3 {
        u,
        sigma: ss,
        v: vs,
        sweeps,
    }
}

/// Test hooks that deliberately break the alignment.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct KabschHooks {
    /// Skip the reflection correction, so mirrored inputs yield det(R) = −1.
    pub skip_det_correction: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KabschResult {
    pub transform: RigidTransform,
    pub svd: Svd3,
    /// Sign applied to the last singular direction (±1).
    pub d: f64,
    pub src_mean: Vec3,
    pub dst_mean: Vec3,
    pub degenerate: bool,
}

/// Least-squares proper rigid transform mapping `src` onto `dst`.
pub fn kabsch_align(src: &[Vec3], dst: &[Vec3]) -> Result<KabschResult, GeometryError> {
    kabsch_align_with(src, dst, KabschHooks::default())
}

pub fn kabsch_align_with(src: &[Vec3], dst: &[Vec3], hooks: KabschHooks) -> Result<KabschResult, GeometryError> {
    if src.len() != dst.len() {
        return Err(GeometryError::LengthMismatch(src.len(), dst.len()));
    }
    if src.len() < 3 {
        return Err(GeometryError::TooFewAnchors(src.len()));
    }
    let sm = super::mean(src);
    let dm = super::mean(dst);
    let mut h = [[0.0; 3]; 3];
    for (s, d) in src.iter().zip(dst) {
        let a = super::sub(*s, sm);
        let b = super::sub(*d, dm);
        for i in 0..3 {
            for j in 0..3 {
                h[i][j] += a[i] * b[j];
            }
        }
    }
    let svd = jacobi_svd3(&h);
    let vut = mat_mul(&svd.v, &transpose(&svd.u));
    let d = if hooks.skip_det_correction || det(&vut) >= 0.0 { 1.0 } else { -1.0 };
    let mut vd = svd.v;
    for row in vd.iter_mut() {
        row[2] *= d;
    }
    let r = mat_mul(&vd, &transpose(&svd.u));
    let rs = super::mat_vec(&r, sm);
    let t = super::sub(dm, rs);
    Ok(KabschResult {
        transform: RigidTransform { r, t },
        svd,
        d,
        src_mean: sm,
        dst_mean: dm,
        degenerate: svd.sigma[1] < DEGENERATE_SIGMA && svd.sigma[2] < DEGENERATE_SIGMA,
    })
}

fn regularized(x: f64) -> f64 {
    if x.abs() >= SVD_GRAD_EPS {
        x
    } else if x < 0.0 {
        -SVD_GRAD_EPS
    } else {
        SVD_GRAD_EPS
    }
}

/// Gradients of a scalar loss with respect to `src` and `dst` given its
/// gradients `g_r` (3×3) and `g_t` with respect to the output transform.
pub fn kabsch_backward(
    src: &[Vec3],
    dst: &[Vec3],
    res: &KabschResult,
    g_r: &Mat3,
    g_t: &Vec3,
) -> (Vec<Vec3>, Vec<Vec3>) {
    let n = src.len() as f64;
    let r = &res.transform.r;
    let (u, v, sigma) = (&res.svd.u, &res.svd.v, &res.svd.sigma);
    let signs = [1.0, 1.0, res.d];
    // t = d̄ − R s̄ contributes −g_t s̄ᵀ to dL/dR.
    let mut gr = *g_r;
    for i in 0..3 {
        for j in 0..3 {
            gr[i][j] -= g_t[i] * res.src_mean[j];
        }
    }
    // dL/dR in the singular bases, then in terms of P = Uᵀ dH V.
    let k = mat_mul(&mat_mul(&transpose(v), &gr), u);
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            if i == j {
                continue;
            }
            if signs[i] == signs[j] {
                let c = signs[i] * k[i][j] / regularized(sigma[i] + sigma[j]);
                m[j][i] += c;
                m[i][j] -= c;
            } else {
                let c = signs[j] * k[i][j] / regularized(sigma[j] - sigma[i]);
                m[i][j] += c;
                m[j][i] += c;
            }
        }
    }
    let gh = mat_mul(&mat_mul(u, &m), &transpose(v));
    let rt_gt = super::mat_vec(&transpose(r), *g_t);
    let mut gs = Vec::with_capacity(src.len());
    let mut gd = Vec::with_capacity(dst.len());
    for (s, d) in src.iter().zip(dst) {
        let a = super::sub(*s, res.src_mean);
        let b = super::sub(*d, res.dst_mean);
        let mut g_src = super::mat_vec(&gh, b);
        let mut g_dst = super::mat_vec(&transpose(&gh), a);
        for j in 0..3 {
            g_src[j] -= rt_gt[j] / n;
            g_dst[j] += g_t[j] / n;
        }
        gs.push(g_src);
        gd.push(g_dst);
    }
    (gs, gd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_rigid, rot_x, rot_z};

    const TET: [Vec3; 4] = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    #[test]
    fn svd_reconstructs() {
        let a = [[2.0, -1.0, 0.5], [0.3, 4.0, 1.0], [-2.0, 0.0, 1.5]];
        let s = jacobi_svd3(&a);
        assert!(s.sigma[0] >= s.sigma[1] && s.sigma[1] >= s.sigma[2]);
        let mut us = s.u;
        for row in us.iter_mut() {
            for j in 0..3 {
                row[j] *= s.sigma[j];
            }
        }
        let back = mat_mul(&us, &transpose(&s.v));
        for i in 0..3 {
            for j in 0..3 {
                assert!((back[i][j] - a[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identity_alignment() {
        let res = kabsch_align(&TET, &TET).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((res.transform.r[i][j] - super::super::IDENTITY[i][j]).abs() < 1e-10);
            }
            assert!(res.transform.t[i].abs() < 1e-10);
        }
    }

    #[test]
    fn recovers_known_motion() {
        let r0 = mat_mul(&rot_z(37.0), &rot_x(12.0));
        let tf = RigidTransform::new(r0, [1.0, 2.0, 3.0]);
        let dst = apply_rigid::<f64>(&tf, &TET);
        let res = kabsch_align(&TET, &dst).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!((res.transform.r[i][j] - r0[i][j]).abs() < 1e-8);
            }
        }
        assert!(super::super::dist(res.transform.t, [1.0, 2.0, 3.0]) < 1e-8);
        assert!(!res.degenerate);
    }

    #[test]
    fn mirrored_input_still_proper() {
        let mirrored: Vec<Vec3> = TET.iter().map(|p| [-p[0], p[1], p[2]]).collect();
        let res = kabsch_align(&TET, &mirrored).unwrap();
        assert!((det(&res.transform.r) - 1.0).abs() < 1e-12);
        assert_eq!(res.d, -1.0);
        let broken = kabsch_align_with(&TET, &mirrored, KabschHooks { skip_det_correction: true }).unwrap();
        assert!((det(&broken.transform.r) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn collinear_input_is_flagged() {
        let line: Vec<Vec3> = (0..4).map(|i| [i as f64, 0.0, 0.0]).collect();
        let res = kabsch_align(&line, &line).unwrap();
        assert!(res.degenerate);
        assert!(res.transform.orthonormality_error() < 1e-9);
        assert!(kabsch_align(&line[..2], &line[..2]).is_err());
    }
}
