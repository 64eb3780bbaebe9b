//! Object-level transformer decoder with anchor-based rotary embeddings.

use std::f64::consts::PI;

use rand::Rng;

use crate::geometry::Vec3;
use crate::nn::{Film, Init, Linear};
use crate::tensor::{Graph, Mask, ParamId, ParamStore, Real, Result, Tensor, TensorError, Var};

const NORM_EPS: f64 = 1e-6;

/// Log-spaced angular frequencies for one coordinate axis: `count` values
/// whose wavelengths `2π/ω` run from `max_wavelength` down to
/// `min_wavelength`.
pub fn arope_frequencies(count: usize, min_wavelength: f64, max_wavelength: f64) -> Vec<f64> {
    let base = 2.0 * PI / max_wavelength;
    if count == 1 {
        return vec![base];
    }
    let ratio = max_wavelength / min_wavelength;
    (0..count)
        .map(|l| base * ratio.powf(l as f64 / (count - 1) as f64))
        .collect()
}

/// Rotary phase layout shared by descriptors and `apply_rope`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeSpec {
    /// Total rotary channels (3 axes × pairs × 2).
    pub width: usize,
    pub frequencies: Vec<f64>,
}

impl RopeSpec {
    pub fn new(width: usize, min_wavelength: f64, max_wavelength: f64) -> Result<Self> {
        if width == 0 || width % 6 != 0 {
            return Err(TensorError::InvalidShape {
                op: "arope",
                detail: format!("rotary width {width} must be a positive multiple of 6"),
            });
        }
        Ok(Self {
            width,
            frequencies: arope_frequencies(width / 6, min_wavelength, max_wavelength),
        })
    }

    /// `[3, width]` map from a position to its phases: axis `j` fills
    /// channels `j·w/3 ..` with each frequency duplicated into an even/odd
    /// pair.
    pub fn phase_matrix<T: Real>(&self) -> Tensor<T> {
        let per_axis = self.width / 3;
        let mut m = vec![T::zero(); 3 * self.width];
        for j in 0..3 {
            for (l, &w) in self.frequencies.iter().enumerate() {
                let c = j * per_axis + 2 * l;
                m[j * self.width + c] = T::c(w);
                m[j * self.width + c + 1] = T::c(w);
            }
        }
        Tensor::from_vec(&[3, self.width], m)
    }
}

/// Mean-pooled rotary phases of a set of anchors (plain evaluation).
pub fn arope_descriptor(spec: &RopeSpec, anchors: &[Vec3]) -> Vec<f64> {
    let per_axis = spec.width / 3;
    let mut out = vec![0.0; spec.width];
    for a in anchors {
        for j in 0..3 {
            for (l, &w) in spec.frequencies.iter().enumerate() {
                let phase = w * a[j];
                out[j * per_axis + 2 * l] += phase;
                out[j * per_axis + 2 * l + 1] += phase;
            }
        }
    }
    let n = anchors.len().max(1) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    out
}

/// Per-row phases `[n, width]` for positions `[n, 3]`.
pub fn rope_phases<T: Real>(g: &mut Graph<'_, T>, spec: &RopeSpec, positions: Var) -> Result<Var> {
    let m = g.constant(spec.phase_matrix())?;
    g.matmul(positions, m)
}

/// Descriptor `[width]` of one object's anchors `[n, 3]`.
pub fn arope_descriptor_var<T: Real>(g: &mut Graph<'_, T>, spec: &RopeSpec, anchors: Var) -> Result<Var> {
    let p = rope_phases(g, spec, anchors)?;
    g.mean(p, 0)
}

/// Rotate the leading `angles.last()` channels of `x` by the given phases:
/// `x·cos(a) + rot(x)·sin(a)` where `rot` maps each pair `(e, o)` to
/// `(−o, e)`. Remaining channels pass through. `angles` broadcasts against
/// the leading axes of `x`.
pub fn apply_rope<T: Real>(g: &mut Graph<'_, T>, x: Var, angles: Var) -> Result<Var> {
    let xs = g.shape(x).to_vec();
    let width = *g.shape(angles).last().unwrap_or(&0);
    let hd = *xs.last().unwrap_or(&0);
    if width > hd || width % 2 != 0 {
        return Err(TensorError::ShapeMismatch {
            op: "apply_rope",
            lhs: xs,
            rhs: g.shape(angles).to_vec(),
        });
    }
    let last = xs.len() - 1;
    let (rot, pass) = if width == hd {
        (x, None)
    } else {
        let parts = g.split(x, last, &[width, hd - width])?;
        (parts[0], Some(parts[1]))
    };
    let mut paired = xs.clone();
    paired[last] = width / 2;
    paired.push(2);
    let pr = g.reshape(rot, &paired)?;
    let eo = g.split(pr, last + 1, &[1, 1])?;
    let neg_odd = g.neg(eo[1])?;
    let swapped = g.concat(&[neg_odd, eo[0]], last + 1)?;
    let mut flat = xs.clone();
    flat[last] = width;
    let swapped = g.reshape(swapped, &flat)?;
    let cos = g.cos(angles)?;
    let sin = g.sin(angles)?;
    let a = g.mul(rot, cos)?;
    let b = g.mul(swapped, sin)?;
    let rotated = g.add(a, b)?;
    match pass {
        Some(p) => g.concat(&[rotated, p], last),
        None => Ok(rotated),
    }
}

/// Multi-head scaled dot-product attention with query/key RMS norms,
/// rotary phases and a query-conditioned sigmoid output gate.
#[derive(Debug, Clone)]
pub struct GatedAttention {
    pub heads: usize,
    pub head_dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    /// Per-head gate weights `[H, hd, hd]` and bias `[H, 1, hd]`.
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub q_norm: ParamId,
    pub k_norm: ParamId,
    pub dropout: f64,
}

/// Intermediate values exposed for inspection.
pub struct AttentionTrace {
    pub output: Var,
    /// Attention weights `[H, Tq, Tk]`.
    pub weights: Var,
    /// Gate pre-activations `[H, Tq, hd]`.
    pub gate_logits: Var,
}

impl GatedAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        width: usize,
        heads: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hd = width / heads;
        let inner = hd * heads;
        Ok(Self {
            heads,
            head_dim: hd,
            q: Linear::new(store, &format!("{name}.q"), width, inner, false, Init::Normal(1.0), rng)?,
            k: Linear::new(store, &format!("{name}.k"), width, inner, false, Init::Normal(1.0), rng)?,
            v: Linear::new(store, &format!("{name}.v"), width, inner, false, Init::Normal(1.0), rng)?,
            out: Linear::new(store, &format!("{name}.o"), inner, width, false, Init::Normal(0.5), rng)?,
            gate_w: store.zeros(&format!("{name}.gate.w"), &[heads, hd, hd])?,
            gate_b: store.zeros(&format!("{name}.gate.b"), &[heads, 1, hd])?,
            q_norm: store.full(&format!("{name}.q_norm"), &[hd], 1.0)?,
            k_norm: store.full(&format!("{name}.k_norm"), &[hd], 1.0)?,
            dropout,
        })
    }

    /// `[T, H·hd] → [H, T, hd]`
    fn split_heads<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let t = g.shape(x)[0];
        let x = g.reshape(x, &[t, self.heads, self.head_dim])?;
        g.permute(x, &[1, 0, 2])
    }

    /// `queries: [Tq, D]`, `keys: [Tk, D]`, phases `[Tq, rw]` / `[Tk, rw]`,
    /// `key_mask` over `Tk`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        keys: Var,
        q_phases: Var,
        k_phases: Var,
        key_mask: &Mask,
    ) -> Result<AttentionTrace> {
        let tq = g.shape(queries)[0];
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, keys)?;
        let v = self.v.forward(g, keys)?;
        let q = self.split_heads(g, q)?;
        let k = self.split_heads(g, k)?;
        let v = self.split_heads(g, v)?;

        let gw = g.param(self.gate_w)?;
        let gb = g.param(self.gate_b)?;
        let gate_logits = g.linear(q, gw, Some(gb))?;
        let gate = g.sigmoid(gate_logits)?;

        let qn = g.param(self.q_norm)?;
        let kn = g.param(self.k_norm)?;
        let q = g.rms_norm(q, qn, NORM_EPS)?;
        let k = g.rms_norm(k, kn, NORM_EPS)?;
        let q = apply_rope(g, q, q_phases)?;
        let k = apply_rope(g, k, k_phases)?;

        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, T::c(1.0 / (self.head_dim as f64).sqrt()))?;
        let weights = g.softmax(scores, Some(key_mask))?;
        let dropped = g.dropout(weights, self.dropout)?;
        let attn = g.matmul(dropped, v)?;
        let gated = g.mul(attn, gate)?;
        let merged = g.permute(gated, &[1, 0, 2])?;
        let merged = g.reshape(merged, &[tq, self.heads * self.head_dim])?;
        let output = self.out.forward(g, merged)?;
        Ok(AttentionTrace {
            output,
            weights,
            gate_logits,
        })
    }
}

/// `W2·(SiLU(W1·x) ⊙ W3·x)`
#[derive(Debug, Clone)]
pub struct SwiGlu {
    pub w1: Linear,
    pub w3: Linear,
    pub w2: Linear,
    pub dropout: f64,
}

impl SwiGlu {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize, hidden: usize, dropout: f64, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            w1: Linear::new(store, &format!("{name}.w1"), width, hidden, false, Init::Normal(1.0), rng)?,
            w3: Linear::new(store, &format!("{name}.w3"), width, hidden, false, Init::Normal(1.0), rng)?,
            w2: Linear::new(store, &format!("{name}.w2"), hidden, width, false, Init::Normal(0.5), rng)?,
            dropout,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let a = self.w1.forward(g, x)?;
        let a = g.silu(a)?;
        let b = self.w3.forward(g, x)?;
        let h = g.mul(a, b)?;
        let h = g.dropout(h, self.dropout)?;
        self.w2.forward(g, h)
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub attn_norm: ParamId,
    pub attn: GatedAttention,
    pub film: Film,
    pub ffn_norm: ParamId,
    pub ffn: SwiGlu,
}

#[derive(Debug, Clone)]
pub struct DecoderConfig {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub registers: usize,
    pub block_size: usize,
    pub ffn_hidden: usize,
    pub film_hidden: usize,
    pub dropout: f64,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub registers: ParamId,
    pub layers: Vec<DecoderLayer>,
}

/// Per-layer outputs `Z⁽⁰⁾..Z⁽ᴸ⁾` on object rows.
pub struct DecoderOutput {
    pub layers: Vec<Var>,
    pub attention: Vec<Var>,
}

impl Decoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = config.width;
        let nr = config.registers.max(1);
        let registers = store.normal(&format!("{name}.registers"), &[nr, d], (nr as f64).sqrt(), rng)?;
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Ok(DecoderLayer {
                    attn_norm: store.full(&format!("{p}.attn_norm"), &[d], 1.0)?,
                    attn: GatedAttention::new(store, &format!("{p}.attn"), d, config.heads, config.dropout, rng)?,
                    film: Film::new(store, &format!("{p}.film"), d, config.film_hidden, rng)?,
                    ffn_norm: store.full(&format!("{p}.ffn_norm"), &[d], 1.0)?,
                    ffn: SwiGlu::new(store, &format!("{p}.ffn"), d, config.ffn_hidden, config.dropout, rng)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            config,
            registers,
            layers,
        })
    }

    /// `tokens: [M, D]`, `phases: [M, rw]` object descriptors, `code: [1, 2]`
    /// step code, `valid` flags per object.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, tokens: Var, phases: Var, code: Var, valid: &[bool]) -> Result<DecoderOutput> {
        let m = g.shape(tokens)[0];
        let nr = self.config.registers;
        let rw = g.shape(phases)[1];
        let (mut x, all_phases) = if nr > 0 {
            let regs = g.param(self.registers)?;
            let x = g.concat(&[tokens, regs], 0)?;
            let zero = g.constant(Tensor::zeros(&[nr, rw]))?;
            (x, g.concat(&[phases, zero], 0)?)
        } else {
            (tokens, phases)
        };
        let mut flags = valid.to_vec();
        flags.extend(std::iter::repeat_n(true, nr));
        let mask = Mask::vector(flags);

        let mut layers = vec![tokens];
        let mut attention = Vec::with_capacity(self.layers.len());
        let mut block_entry = x;
        for (l, layer) in self.layers.iter().enumerate() {
            let w = g.param(layer.attn_norm)?;
            let h = g.rms_norm(x, w, NORM_EPS)?;
            let trace = layer.attn.forward(g, h, h, all_phases, all_phases, &mask)?;
            attention.push(trace.weights);
            x = g.add(x, trace.output)?;
            x = layer.film.forward(g, x, code)?;
            let w = g.param(layer.ffn_norm)?;
            let h = g.rms_norm(x, w, NORM_EPS)?;
            let f = layer.ffn.forward(g, h)?;
            x = g.add(x, f)?;
            if (l + 1) % self.config.block_size == 0 {
                x = g.add(x, block_entry)?;
                block_entry = x;
            }
            let z = if nr > 0 { g.narrow(x, 0, 0, m)? } else { x };
            layers.push(z);
        }
        Ok(DecoderOutput { layers, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn frequency_band_endpoints() {
        let w = arope_frequencies(16, 0.25, 64.0);
        assert!((2.0 * PI / w[0] - 64.0).abs() < 1e-12);
        assert!((2.0 * PI / w[15] - 0.25).abs() < 1e-12);
        let expected = (2.0 * PI / 64.0) * 256f64.powf(3.0 / 15.0);
        assert!((w[3] - expected).abs() < 1e-12);
    }

    #[test]
    fn descriptor_single_anchor_on_x() {
        let spec = RopeSpec::new(96, 0.25, 64.0).unwrap();
        let d = arope_descriptor(&spec, &[[1.0, 0.0, 0.0]]);
        for l in 0..16 {
            assert_eq!(d[2 * l], spec.frequencies[l]);
            assert_eq!(d[2 * l + 1], spec.frequencies[l]);
        }
        assert!(d[32..].iter().all(|&v| v == 0.0));
        assert!(arope_descriptor(&spec, &[[0.0; 3]; 4]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn taped_descriptor_matches_plain() {
        let spec = RopeSpec::new(24, 0.25, 64.0).unwrap();
        let pts = [[0.3, -1.0, 2.0], [1.5, 0.2, 0.1], [-0.7, 0.4, 0.9]];
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_rows(&pts)).unwrap();
        let d = arope_descriptor_var(&mut g, &spec, a).unwrap();
        let plain = arope_descriptor(&spec, &pts);
        for (x, y) in g.value(d).data().iter().zip(&plain) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn rope_on_one_pair() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.0])).unwrap();
        let a = g.constant(Tensor::from_f64(&[1, 2], &[0.7, 0.7])).unwrap();
        let y = apply_rope(&mut g, x, a).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.7f64.cos()).abs() < 1e-15 && (v[1] - 0.7f64.sin()).abs() < 1e-15);
    }

    #[test]
    fn rope_preserves_norm_and_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..3 * 10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let angles: Vec<f64> = (0..3 * 3)
            .flat_map(|_| {
                let a = rng.random_range(-5.0..5.0);
                [a, a]
            })
            .collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(&[3, 10], &xs)).unwrap();
        let a = g.constant(Tensor::from_f64(&[3, 6], &angles)).unwrap();
        let y = apply_rope(&mut g, x, a).unwrap();
        let out = g.value(y).data();
        for r in 0..3 {
            let n0: f64 = xs[r * 10..r * 10 + 6].iter().map(|v| v * v).sum();
            let n1: f64 = out[r * 10..r * 10 + 6].iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-12);
            assert_eq!(&out[r * 10 + 6..r * 10 + 10], &xs[r * 10 + 6..r * 10 + 10]);
        }
        let zero = g.constant(Tensor::zeros(&[3, 6])).unwrap();
        let same = apply_rope(&mut g, x, zero).unwrap();
        assert_eq!(g.value(same).data(), &xs[..]);
    }

    #[test]
    fn rope_width_mismatch_is_an_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[2, 4])).unwrap();
        let a = g.constant(Tensor::zeros(&[2, 6])).unwrap();
        assert!(apply_rope(&mut g, x, a).is_err());
    }
}
