//! Model configuration, parameter ownership and the one-step advance.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::anchors::{rigid_update, Predictor, PredictorConfig, PredictorInputs};
use crate::encoder::{vertex_features_var, Encoder, EncoderConfig, SceneLayout};
use crate::geometry::{apply_rigid, verlet_var, KabschHooks, RigidTransform, Vec3};
use crate::interaction::{arope_descriptor_var, rope_phases, Decoder, DecoderConfig, RopeSpec};
use crate::nn::step_code;
use crate::scene::SceneState;
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::{Graph, Mask, ParamStore, Real, Result, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub feat_width: usize,
    pub enc_hidden: Vec<usize>,
    pub levels: Vec<f64>,
    pub heads: usize,
    pub layers: usize,
    pub registers: usize,
    pub block_size: usize,
    pub ffn_mult: f64,
    pub film_hidden: usize,
    pub dropout: f64,
    pub anchors: usize,
    pub avp_width: usize,
    pub predictor_scales: Vec<usize>,
    pub sigma_init: f64,
    /// Explicit rotary width per head; derived from the head size when absent.
    pub rotary_width: Option<usize>,
    pub rope_min_wavelength: f64,
    pub rope_max_wavelength: f64,
    /// Multiplier on the acceleration head output.
    pub accel_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Desk-scale model (about 1.6M parameters).
    pub fn desk() -> Self {
        Self {
            d_model: 128,
            feat_width: 256,
            enc_hidden: vec![64, 128],
            levels: vec![1.0, 0.5, 0.25, 0.125],
            heads: 2,
            layers: 4,
            registers: 16,
            block_size: 4,
            ffn_mult: 2.5,
            film_hidden: 64,
            dropout: 0.1,
            anchors: 4,
            avp_width: 256,
            predictor_scales: vec![0, 1, 2, 4],
            sigma_init: 0.5,
            rotary_width: None,
            rope_min_wavelength: 0.25,
            rope_max_wavelength: 64.0,
            accel_scale: 0.003,
        }
    }

    /// Full-size architecture (width 768, six heads of 128 channels).
    pub fn full_scale() -> Self {
        Self {
            d_model: 768,
            feat_width: 1024,
            enc_hidden: vec![128, 256],
            heads: 6,
            film_hidden: 256,
            rotary_width: Some(96),
            ..Self::desk()
        }
    }

    /// Small model for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            d_model: 32,
            feat_width: 32,
            enc_hidden: vec![16, 32],
            heads: 1,
            registers: 4,
            film_hidden: 8,
            avp_width: 16,
            ..Self::desk()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn rotary_width(&self) -> usize {
        self.rotary_width.unwrap_or_else(|| {
            let hd = self.head_dim();
            let w = 96.min(hd - hd / 4);
            w - w % 6
        })
    }

    pub fn ffn_hidden(&self) -> usize {
        (self.d_model as f64 * self.ffn_mult).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(TensorError::InvalidShape { op: "model_config", detail });
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("{} heads do not divide width {}", self.heads, self.d_model));
        }
        let rw = self.rotary_width();
        if rw == 0 || rw % 6 != 0 || rw > self.head_dim() {
            return bad(format!("rotary width {rw} must be a positive multiple of 6 within head size {}", self.head_dim()));
        }
        if self.anchors < 3 {
            return bad(format!("at least 3 anchors are needed, got {}", self.anchors));
        }
        if self.block_size == 0 || self.layers == 0 || self.levels.is_empty() {
            return bad("layers, block size and pooling levels must be non-empty".into());
        }
        if let Some(&s) = self.predictor_scales.iter().find(|&&s| s > self.layers) {
            return bad(format!("predictor scale {s} exceeds layer count {}", self.layers));
        }
        if self.predictor_scales.is_empty() || !(0.0..1.0).contains(&self.dropout) || self.sigma_init <= 0.0 {
            return bad("predictor scales, dropout in [0,1) and positive bandwidth required".into());
        }
        Ok(())
    }
}

/// All learnable weights plus the structure that addresses them.
#[derive(Debug, Clone)]
pub struct Model<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub predictor: Predictor,
    pub rope: RopeSpec,
    pub hooks: KabschHooks,
}

/// Everything recorded by one advance on a tape.
pub struct StepOutput {
    pub layout: SceneLayout,
    /// Full next vertex sets per slot (padding slots carried over).
    pub next: Vec<Var>,
    pub transforms: Vec<RigidTransform>,
    pub degenerate: Vec<bool>,
    /// Stacked anchor rows over valid objects `[ΣNa, 3]`: previous, current,
    /// Verlet candidate and rigidly projected positions, and predicted
    /// accelerations. `None` when the scene has no valid object.
    pub anchors: Option<AnchorTrace>,
    pub tokens: Option<Var>,
    pub decoder_layers: Vec<Var>,
    pub cross_attention: Vec<Var>,
    pub pooled: Option<Var>,
    /// Wall time of the decoder forward pass, ms.
    pub decoder_ms: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct AnchorTrace {
    pub previous: Var,
    pub current: Var,
    pub raw: Var,
    pub rigid: Var,
    pub accel: Var,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = config.d_model;
        let encoder = Encoder::new(
            &mut params,
            "encoder",
            EncoderConfig {
                hidden: config.enc_hidden.clone(),
                feat_width: config.feat_width,
                width: d,
                levels: config.levels.clone(),
            },
            &mut rng,
        )?;
        let decoder = Decoder::new(
            &mut params,
            "decoder",
            DecoderConfig {
                width: d,
                heads: config.heads,
                layers: config.layers,
                registers: config.registers,
                block_size: config.block_size,
                ffn_hidden: config.ffn_hidden(),
                film_hidden: config.film_hidden,
                dropout: config.dropout,
            },
            &mut rng,
        )?;
        let predictor = Predictor::new(
            &mut params,
            "predictor",
            PredictorConfig {
                width: d,
                heads: config.heads,
                feat_width: config.feat_width,
                avp_width: config.avp_width,
                film_hidden: config.film_hidden,
                scales: config.predictor_scales.clone(),
                sigma_init: config.sigma_init,
                dropout: config.dropout,
            },
            &mut rng,
        )?;
        let rope = RopeSpec::new(config.rotary_width(), config.rope_min_wavelength, config.rope_max_wavelength)?;
        Ok(Self {
            config,
            params,
            encoder,
            decoder,
            predictor,
            rope,
            hooks: KabschHooks::default(),
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            predictor: self.predictor.clone(),
            rope: self.rope.clone(),
            hooks: self.hooks,
        }
    }

    /// Redraw every all-zero weight tensor from N(0, std²). Used to build
    /// randomized models whose gradients reach every parameter.
    pub fn randomize_zero_params(&mut self, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).expect("finite std");
        let ids: Vec<_> = self
            .params
            .iter()
            .filter(|(_, _, t)| t.data().iter().all(|v| *v == T::zero()))
            .map(|(id, _, t)| (id, t.shape().to_vec()))
            .collect();
        for (id, shape) in ids {
            let n = shape.iter().product();
            let data = (0..n).map(|_| T::c(dist.sample(&mut rng))).collect();
            self.params.set(id, Tensor::from_vec(&shape, data)).expect("same shape");
        }
    }

    /// One advance on tape `g` (which must read `self.params`). `x_t` and
    /// `x_prev` hold each slot's full vertex set `[Nv, 3]`; `step` is the
    /// step size in base frames.
    pub fn step(&self, g: &mut Graph<'_, T>, scene: &SceneState, x_t: &[Var], x_prev: &[Var], step: f64) -> Result<StepOutput> {
        if x_t.len() != scene.len() || x_prev.len() != scene.len() {
            return Err(TensorError::InvalidShape {
                op: "advance",
                detail: format!("{} objects but {} / {} vertex sets", scene.len(), x_t.len(), x_prev.len()),
            });
        }
        let layout = SceneLayout::new(scene)?;
        let m = scene.len();
        let mut out = StepOutput {
            next: x_t.to_vec(),
            transforms: vec![RigidTransform::identity(); m],
            degenerate: vec![false; m],
            anchors: None,
            tokens: None,
            decoder_layers: Vec::new(),
            cross_attention: Vec::new(),
            pooled: None,
            decoder_ms: 0.0,
            layout: layout.clone(),
        };
        if layout.is_empty() {
            return Ok(out);
        }
        let (h, x) = vertex_features_var(g, scene, &layout, x_t, x_prev)?;
        let enc = self.encoder.forward(g, scene, &layout, h)?;

        let rw = self.rope.width;
        let zero_row = g.constant(Tensor::zeros(&[1, rw]))?;
        let mut desc = Vec::with_capacity(m);
        for slot in 0..m {
            match layout.stack_of[slot] {
                Some(k) => {
                    let a = g.index_select(x, 0, &layout.anchor_rows[k])?;
                    let d = arope_descriptor_var(g, &self.rope, a)?;
                    desc.push(g.reshape(d, &[1, rw])?);
                }
                None => desc.push(zero_row),
            }
        }
        let key_phases = g.concat(&desc, 0)?;
        let c = step_code(step);
        let code = g.constant(Tensor::from_f64(&[1, 2], &c))?;
        let valid: Vec<bool> = scene.objects.iter().map(|o| o.valid).collect();
        let t0 = Instant::now();
        let dec = self.decoder.forward(g, enc.tokens, key_phases, code, &valid)?;
        out.decoder_ms = t0.elapsed().as_secs_f64() * 1e3;

        let all_rows: Vec<usize> = layout.anchor_rows.iter().flatten().copied().collect();
        let anchor_pos = g.index_select(x, 0, &all_rows)?;
        let query_phases = rope_phases(g, &self.rope, anchor_pos)?;
        let spans: Vec<(usize, usize)> = layout.offsets.iter().copied().zip(layout.counts.iter().copied()).collect();
        let mask = Mask::vector(valid);
        let pred = self.predictor.forward(
            g,
            &PredictorInputs {
                h,
                x,
                features: enc.features,
                spans: &spans,
                anchor_rows: &layout.anchor_rows,
                layers: &dec.layers,
                key_phases,
                query_phases,
                key_mask: &mask,
                code,
            },
        )?;
        let accel = if self.config.accel_scale == 1.0 {
            pred.accel
        } else {
            g.scale(pred.accel, T::c(self.config.accel_scale))?
        };

        let mut prevs = Vec::new();
        let mut curs = Vec::new();
        let mut raws = Vec::new();
        let mut rigids = Vec::new();
        let mut start = 0;
        for (k, &slot) in layout.slots.iter().enumerate() {
            let o = &scene.objects[slot];
            let na = o.anchors.len();
            let a = g.narrow(accel, 0, start, na)?;
            start += na;
            let q_t = g.index_select(x_t[slot], 0, &o.anchors)?;
            let q_p = g.index_select(x_prev[slot], 0, &o.anchors)?;
            let cand = verlet_var(g, q_t, q_p, a, step)?;
            let up = rigid_update(g, &o.reference, &o.reference_anchors(), x_t[slot], q_t, cand, self.hooks)?;
            out.next[slot] = up.vertices;
            out.transforms[slot] = up.value;
            out.degenerate[slot] = up.degenerate;
            debug_assert_eq!(layout.slots[k], slot);
            prevs.push(q_p);
            curs.push(q_t);
            raws.push(cand);
            rigids.push(up.anchors);
        }
        out.anchors = Some(AnchorTrace {
            previous: g.concat(&prevs, 0)?,
            current: g.concat(&curs, 0)?,
            raw: g.concat(&raws, 0)?,
            rigid: g.concat(&rigids, 0)?,
            accel,
        });
        out.tokens = Some(enc.tokens);
        out.decoder_layers = dec.layers;
        out.cross_attention = pred.attention;
        out.pooled = Some(pred.pooled);
        Ok(out)
    }

    /// Advance `state_t` by `step` base frames given the previous state, in
    /// evaluation mode. Returns the next state and per-object transforms.
    pub fn advance_state(&self, state_prev: &SceneState, state_t: &SceneState, step: f64) -> Result<(SceneState, Vec<RigidTransform>)> {
        let mut g = Graph::with_params(&self.params);
        let xt = constant_sets(&mut g, state_t)?;
        let xp = constant_sets(&mut g, state_prev)?;
        let out = self.step(&mut g, state_t, &xt, &xp, step)?;
        // Vertices come from the transform applied to the full reference in
        // 64-bit, so 32-bit models stay rigid to rounding of the transform.
        let mut next = state_t.clone();
        for &slot in &out.layout.slots {
            let o = &mut next.objects[slot];
            o.vertices = apply_rigid(&out.transforms[slot], &o.reference);
        }
        Ok((next, out.transforms))
    }

    /// Autoregressive rollout from two seed states, returning `steps`
    /// predicted states and their transforms.
    pub fn rollout(&self, first: &SceneState, second: &SceneState, step: f64, steps: usize) -> Result<Vec<(SceneState, Vec<RigidTransform>)>> {
        let mut prev = first.clone();
        let mut cur = second.clone();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (next, tfs) = self.advance_state(&prev, &cur, step)?;
            prev = std::mem::replace(&mut cur, next.clone());
            out.push((next, tfs));
        }
        Ok(out)
    }

    pub fn to_checkpoint_bytes(&self, extra: Value) -> Vec<u8> {
        let tensors: Vec<(String, Tensor<T>)> = self.params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        checkpoint::to_bytes(&tensors, &json!({ "config": self.config, "extra": extra }))
    }

    pub fn save(&self, path: &Path, extra: Value) -> std::result::Result<(), CheckpointError> {
        std::fs::write(path, self.to_checkpoint_bytes(extra))?;
        Ok(())
    }

    /// Rebuild a model from checkpoint bytes; returns it with the caller's
    /// extra metadata.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> std::result::Result<(Self, Value), CheckpointError> {
        let (tensors, meta) = checkpoint::from_bytes::<T>(bytes)?;
        let config: ModelConfig = serde_json::from_value(meta.get("config").cloned().unwrap_or(Value::Null))
            .map_err(|e| CheckpointError::Format(format!("model config: {e}")))?;
        let mut model = Self::new(config, 0).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let mut seen = vec![false; model.params.len()];
        for (name, t) in tensors {
            let id = model
                .params
                .id(&name)
                .ok_or_else(|| CheckpointError::Format(format!("unexpected tensor {name}")))?;
            model.params.set(id, t).map_err(|e| CheckpointError::Format(format!("{name}: {e}")))?;
            seen[id.0] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(CheckpointError::Format(format!(
                "missing tensor {}",
                model.params.name(crate::tensor::ParamId(i))
            )));
        }
        Ok((model, meta.get("extra").cloned().unwrap_or(Value::Null)))
    }

    pub fn load(path: &Path) -> std::result::Result<(Self, Value), CheckpointError> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }
}

/// One constant node per object holding its current vertices.
pub fn constant_sets<T: Real>(g: &mut Graph<'_, T>, scene: &SceneState) -> Result<Vec<Var>> {
    scene
        .objects
        .iter()
        .map(|o| g.constant(Tensor::from_rows(&o.vertices)))
        .collect()
}

/// Rows of a vertex-set node as plain points.
pub fn rows_of<T: Real>(g: &Graph<'_, T>, v: Var) -> Vec<Vec3> {
    g.value(v).to_rows()
}
