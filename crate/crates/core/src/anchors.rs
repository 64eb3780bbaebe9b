//! Anchor queries, anchor-vertex pooling, multi-scale acceleration
//! prediction and the rigid one-step state advance.

use rand::Rng;

use crate::geometry::{apply_rigid_var, kabsch, kabsch_align, transform_tensor, verlet_var, KabschHooks, RigidTransform, Vec3};
use crate::interaction::GatedAttention;
use crate::nn::{Film, Init, Linear, Mlp};
use crate::tensor::{CustomOp, Graph, Mask, ParamId, ParamStore, Real, Result, Tensor, TensorError, Var};

const NORM_EPS: f64 = 1e-6;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus, used to initialise the kernel bandwidth.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Normalised `exp(−‖x − q‖/σ)` weights of `vertices` around `anchor`.
pub fn avp_weights(anchor: Vec3, vertices: &[Vec3], sigma: f64) -> Vec<f64> {
    let d: Vec<f64> = vertices.iter().map(|v| crate::geometry::dist(*v, anchor)).collect();
    let m = d.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = d.iter().map(|&x| (-(x - m) / sigma).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

struct DistanceOp;

impl<T: Real> CustomOp<T> for DistanceOp {
    fn name(&self) -> &'static str {
        "pairwise_distance"
    }

    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let (p, q) = (a.len() / 3, b.len() / 3);
        let d = output.data();
        let gd = grad.data();
        let mut ga = vec![T::zero(); a.len()];
        let mut gb = vec![T::zero(); b.len()];
        for i in 0..p {
            for j in 0..q {
                let dij = d[i * q + j];
                if dij == T::zero() {
                    continue;
                }
                let s = gd[i * q + j] / dij;
                for c in 0..3 {
                    let diff = (a[i * 3 + c] - b[j * 3 + c]) * s;
                    ga[i * 3 + c] += diff;
                    gb[j * 3 + c] -= diff;
                }
            }
        }
        Ok(vec![
            Some(Tensor::from_vec(inputs[0].shape(), ga)),
            Some(Tensor::from_vec(inputs[1].shape(), gb)),
        ])
    }
}

/// Euclidean distances `[P, Q]` between rows of `a: [P, 3]` and `b: [Q, 3]`.
/// Coincident points get a zero gradient.
pub fn pairwise_distance_var<T: Real>(g: &mut Graph<'_, T>, a: Var, b: Var) -> Result<Var> {
    let (sa, sb) = (g.shape(a).to_vec(), g.shape(b).to_vec());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != 3 || sb[1] != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "pairwise_distance",
            lhs: sa,
            rhs: sb,
        });
    }
    let (ad, bd) = (g.value(a).data(), g.value(b).data());
    let mut out = Vec::with_capacity(sa[0] * sb[0]);
    for i in 0..sa[0] {
        for j in 0..sb[0] {
            let s: T = (0..3).map(|c| (ad[i * 3 + c] - bd[j * 3 + c]).powi(2)).sum();
            out.push(s.sqrt());
        }
    }
    g.custom(&[a, b], Tensor::from_vec(&[sa[0], sb[0]], out), Box::new(DistanceOp))
}

#[derive(Debug, Clone)]
pub struct PredictorConfig {
    pub width: usize,
    pub heads: usize,
    pub feat_width: usize,
    pub avp_width: usize,
    pub film_hidden: usize,
    pub scales: Vec<usize>,
    pub sigma_init: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct CrossScale {
    pub layer: usize,
    pub query_norm: ParamId,
    pub key_norm: ParamId,
    pub attn: GatedAttention,
}

/// Anchor-query predictor reading several decoder layer outputs.
#[derive(Debug, Clone)]
pub struct Predictor {
    pub config: PredictorConfig,
    /// Softplus pre-image of the pooling bandwidth, shape `[1]`.
    pub sigma_raw: ParamId,
    pub avp: Mlp,
    pub query: Mlp,
    pub scales: Vec<CrossScale>,
    pub fuse: Linear,
    pub film: Film,
    pub head: Mlp,
}

/// Inputs for one prediction, all on the stacked valid-object rows.
pub struct PredictorInputs<'a> {
    /// Vertex features `[ΣN, 12]`, positions `[ΣN, 3]`, encoder features
    /// `[ΣN, W_f]`.
    pub h: Var,
    pub x: Var,
    pub features: Var,
    /// `(offset, count)` of each object's rows.
    pub spans: &'a [(usize, usize)],
    /// Stacked rows of each object's anchors.
    pub anchor_rows: &'a [Vec<usize>],
    /// Decoder outputs `Z⁽ℓ⁾` over all slots `[M, D]`.
    pub layers: &'a [Var],
    /// Object phases `[M, rw]` and per-anchor phases `[ΣNa, rw]`.
    pub key_phases: Var,
    pub query_phases: Var,
    pub key_mask: &'a Mask,
    pub code: Var,
}

pub struct Prediction {
    /// Accelerations `[ΣNa, 3]` in metres per base frame².
    pub accel: Var,
    /// Raw pooled features `[ΣNa, W_f]` before projection.
    pub pooled: Var,
    /// Cross-attention weights per scale, `[H, ΣNa, M]`.
    pub attention: Vec<Var>,
}

impl Predictor {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: PredictorConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = config.width;
        let sigma_raw = store.full(&format!("{name}.sigma"), &[1], softplus_inverse(config.sigma_init))?;
        let avp = Mlp::new(store, &format!("{name}.avp"), &[config.feat_width, config.avp_width, config.avp_width], Init::Zeros, rng)?;
        let query = Mlp::new(store, &format!("{name}.query"), &[crate::encoder::FEATURE_WIDTH + 3 + config.avp_width, d, d], Init::Normal(1.0), rng)?;
        let scales = config
            .scales
            .iter()
            .map(|&layer| {
                let p = format!("{name}.scale{layer}");
                Ok(CrossScale {
                    layer,
                    query_norm: store.full(&format!("{p}.query_norm"), &[d], 1.0)?,
                    key_norm: store.full(&format!("{p}.key_norm"), &[d], 1.0)?,
                    attn: GatedAttention::new(store, &format!("{p}.attn"), d, config.heads, config.dropout, rng)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fuse = Linear::new(store, &format!("{name}.fuse"), d * scales.len(), d, true, Init::Normal(1.0), rng)?;
        let film = Film::new(store, &format!("{name}.film"), d, config.film_hidden, rng)?;
        let head = Mlp::new(store, &format!("{name}.head"), &[d, d / 2, 3], Init::Zeros, rng)?;
        Ok(Self {
            config,
            sigma_raw,
            avp,
            query,
            scales,
            fuse,
            film,
            head,
        })
    }

    /// Current bandwidth σ = softplus(raw).
    pub fn sigma<T: Real>(&self, params: &ParamStore<T>) -> f64 {
        let raw = params.get(self.sigma_raw).map(|t| t.data()[0].to_f64().unwrap_or(0.0)).unwrap_or(0.0);
        softplus(raw)
    }

    /// Distance-weighted mean of each object's vertex features around its
    /// anchors, `[ΣNa, W_f]`.
    pub fn pool<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, features: Var, spans: &[(usize, usize)], anchor_rows: &[Vec<usize>]) -> Result<Var> {
        let raw = g.param(self.sigma_raw)?;
        let sigma = g.softplus(raw)?;
        let one = g.scalar(T::one())?;
        let inv = g.div(one, sigma)?;
        let neg_inv = g.neg(inv)?;
        let mut pooled = Vec::with_capacity(spans.len());
        for (&(off, n), rows) in spans.iter().zip(anchor_rows) {
            let verts = g.narrow(x, 0, off, n)?;
            let feats = g.narrow(features, 0, off, n)?;
            let anchors = g.index_select(x, 0, rows)?;
            let d = pairwise_distance_var(g, anchors, verts)?;
            let logits = g.mul(d, neg_inv)?;
            let w = g.softmax(logits, None)?;
            pooled.push(g.matmul(w, feats)?);
        }
        g.concat(&pooled, 0)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, inp: &PredictorInputs<'_>) -> Result<Prediction> {
        let all_rows: Vec<usize> = inp.anchor_rows.iter().flatten().copied().collect();
        let pooled = self.pool(g, inp.x, inp.features, inp.spans, inp.anchor_rows)?;
        let u = self.avp.forward(g, pooled)?;
        let h_a = g.index_select(inp.h, 0, &all_rows)?;
        let x_a = g.index_select(inp.x, 0, &all_rows)?;
        let raw = g.concat(&[h_a, x_a, u], 1)?;
        let query = self.query.forward(g, raw)?;

        let mut outs = Vec::with_capacity(self.scales.len());
        let mut attention = Vec::with_capacity(self.scales.len());
        for s in &self.scales {
            let z = *inp.layers.get(s.layer).ok_or_else(|| TensorError::InvalidShape {
                op: "predictor",
                detail: format!("decoder has no layer output {}", s.layer),
            })?;
            let qn = g.param(s.query_norm)?;
            let kn = g.param(s.key_norm)?;
            let q = g.rms_norm(query, qn, NORM_EPS)?;
            let k = g.rms_norm(z, kn, NORM_EPS)?;
            let trace = s.attn.forward(g, q, k, inp.query_phases, inp.key_phases, inp.key_mask)?;
            outs.push(trace.output);
            attention.push(trace.weights);
        }
        let cat = g.concat(&outs, 1)?;
        let fused = self.fuse.forward(g, cat)?;
        let y = g.add(fused, query)?;
        let y = self.film.forward(g, y, inp.code)?;
        let accel = self.head.forward(g, y)?;
        Ok(Prediction { accel, pooled, attention })
    }
}

/// Result of advancing one object's anchors.
pub struct RigidUpdate {
    /// `[3, 4]` transform node, `[Nv, 3]` full next vertices and
    /// `[Na, 3]` projected anchors.
    pub transform: Var,
    pub vertices: Var,
    pub anchors: Var,
    pub value: RigidTransform,
    pub degenerate: bool,
}

/// Verlet-advanced candidate anchors projected onto the rigid motions of
/// the reference geometry. Degenerate alignments keep the current
/// orientation and move by the mean anchor displacement.
pub fn rigid_update<T: Real>(
    g: &mut Graph<'_, T>,
    reference: &[Vec3],
    reference_anchors: &[Vec3],
    current: Var,
    current_anchors: Var,
    candidate: Var,
    hooks: KabschHooks,
) -> Result<RigidUpdate> {
    let ref_full = g.constant(Tensor::from_rows(reference))?;
    let ref_anchors = g.constant(Tensor::from_rows(reference_anchors))?;
    let (rt, res) = kabsch(g, ref_anchors, candidate, hooks)?;
    if !res.degenerate {
        let vertices = apply_rigid_var(g, rt, ref_full)?;
        let anchors = apply_rigid_var(g, rt, ref_anchors)?;
        return Ok(RigidUpdate {
            transform: rt,
            vertices,
            anchors,
            value: res.transform,
            degenerate: false,
        });
    }
    log::warn!("degenerate anchor alignment, falling back to a translation update");
    let cur_pts = g.value(current).to_rows();
    let pose = kabsch_align(reference, &cur_pts).map(|r| r.transform).unwrap_or_else(|_| RigidTransform::identity());
    let c_mean = g.mean(candidate, 0)?;
    let q_mean = g.mean(current_anchors, 0)?;
    let shift = g.sub(c_mean, q_mean)?;
    let vertices = g.add(current, shift)?;
    let anchors = g.add(current_anchors, shift)?;
    let shift_v = g.value(shift).to_f64();
    let value = RigidTransform::new(pose.r, [pose.t[0] + shift_v[0], pose.t[1] + shift_v[1], pose.t[2] + shift_v[2]]);
    let transform = g.constant(transform_tensor(&value))?;
    Ok(RigidUpdate {
        transform,
        vertices,
        anchors,
        value,
        degenerate: true,
    })
}

/// Plain constant-velocity advance through the same kernels as the model
/// with zero acceleration.
pub fn constant_velocity_update(
    reference: &[Vec3],
    anchor_idx: &[usize],
    current: &[Vec3],
    previous: &[Vec3],
    dt: f64,
) -> Result<(Vec<Vec3>, RigidTransform)> {
    let mut g = Graph::<f64>::new();
    let cur = g.constant(Tensor::from_rows(current))?;
    let qa: Vec<Vec3> = anchor_idx.iter().map(|&i| current[i]).collect();
    let qp: Vec<Vec3> = anchor_idx.iter().map(|&i| previous[i]).collect();
    let ref_a: Vec<Vec3> = anchor_idx.iter().map(|&i| reference[i]).collect();
    let q_t = g.constant(Tensor::from_rows(&qa))?;
    let q_p = g.constant(Tensor::from_rows(&qp))?;
    let zero = g.constant(Tensor::zeros(&[qa.len(), 3]))?;
    let cand = verlet_var(&mut g, q_t, q_p, zero, dt)?;
    let up = rigid_update(&mut g, reference, &ref_a, cur, q_t, cand, KabschHooks::default())?;
    Ok((g.value(up.vertices).to_rows(), up.value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [0.1, 0.5, 2.0] {
            assert!((softplus(softplus_inverse(y)) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn avp_weights_are_normalised() {
        let w = avp_weights([0.0; 3], &[[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]], 0.5);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((w[0] - w[2]).abs() < 1e-15);
        assert!((w[0] / w[1] - 2f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn distance_gradient_matches_differences() {
        use crate::tensor::gradcheck::{finite_diff_check, FdOptions};
        let a = Tensor::from_rows(&[[0.1, 0.2, 0.3], [1.0, -0.5, 0.2]]);
        let b = Tensor::from_rows(&[[0.5, 0.5, 0.5], [-1.0, 0.0, 1.0], [0.3, 0.1, -0.2]]);
        let rep = finite_diff_check(
            |g, v| {
                let d = pairwise_distance_var(g, v[0], v[1])?;
                let s = g.square(d)?;
                let d2 = g.mul(s, d)?;
                g.sum_all(d2)
            },
            &[a, b],
            &FdOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }
}
