//! Per-vertex input features and the shared hierarchical object encoder.

use rand::Rng;

use crate::geometry::nearest_var;
use crate::nn::{Init, Mlp};
use crate::scene::SceneState;
use crate::tensor::{Graph, ParamStore, Real, Result, Tensor, TensorError, Var};

/// Channels per vertex: nearest displacement, velocity, reference offset,
/// physics.
pub const FEATURE_WIDTH: usize = 12;

/// Below this many observed vertices every pooling level uses the full set.
pub const MIN_PYRAMID_VERTICES: usize = 8;

/// Row bookkeeping for the valid objects of a scene, stacked object-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneLayout {
    /// Object slot of each stacked object.
    pub slots: Vec<usize>,
    /// Slot → position among stacked objects.
    pub stack_of: Vec<Option<usize>>,
    /// First stacked row and row count of each stacked object.
    pub offsets: Vec<usize>,
    pub counts: Vec<usize>,
    /// Stacked rows of each object.
    pub groups: Vec<Vec<usize>>,
    /// Stacked rows of each object's anchors, in anchor order.
    pub anchor_rows: Vec<Vec<usize>>,
    pub total_rows: usize,
}

impl SceneLayout {
    pub fn new(scene: &SceneState) -> Result<Self> {
        let mut layout = Self {
            slots: Vec::new(),
            stack_of: vec![None; scene.len()],
            offsets: Vec::new(),
            counts: Vec::new(),
            groups: Vec::new(),
            anchor_rows: Vec::new(),
            total_rows: 0,
        };
        for (slot, o) in scene.objects.iter().enumerate() {
            if !o.valid {
                continue;
            }
            let off = layout.total_rows;
            let n = o.observed.len();
            let anchors = o
                .anchors
                .iter()
                .map(|a| {
                    o.observed.iter().position(|v| v == a).map(|k| off + k).ok_or_else(|| TensorError::InvalidShape {
                        op: "scene_layout",
                        detail: format!("anchor vertex {a} of object {slot} is not observed"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            layout.stack_of[slot] = Some(layout.slots.len());
            layout.slots.push(slot);
            layout.offsets.push(off);
            layout.counts.push(n);
            layout.groups.push((off..off + n).collect());
            layout.anchor_rows.push(anchors);
            layout.total_rows += n;
        }
        Ok(layout)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Number of vertices kept at each pooling level for an object with `n`
/// observed vertices.
pub fn level_sizes(n: usize, levels: &[f64]) -> Vec<usize> {
    levels
        .iter()
        .map(|&r| {
            if n < MIN_PYRAMID_VERTICES {
                n
            } else {
                ((n as f64 * r).ceil() as usize).clamp(1, n)
            }
        })
        .collect()
}

/// Stacked `[ΣN, 12]` features `[d, v, r, φ]` on the observed vertices of
/// the valid objects. `x_t` and `x_prev` hold each slot's full vertex set.
pub fn vertex_features_var<T: Real>(
    g: &mut Graph<'_, T>,
    scene: &SceneState,
    layout: &SceneLayout,
    x_t: &[Var],
    x_prev: &[Var],
) -> Result<(Var, Var)> {
    let mut cur = Vec::with_capacity(layout.len());
    let mut prev = Vec::with_capacity(layout.len());
    let mut refs = Vec::with_capacity(layout.total_rows * 3);
    let mut phys = Vec::with_capacity(layout.total_rows * 3);
    for &slot in &layout.slots {
        let o = &scene.objects[slot];
        let n = o.reference.len();
        for (what, v) in [("current", x_t[slot]), ("previous", x_prev[slot])] {
            if g.shape(v) != [n, 3] {
                return Err(TensorError::InvalidShape {
                    op: "vertex_features",
                    detail: format!("object {slot} {what} frame has shape {:?}, reference has {n} vertices", g.shape(v)),
                });
            }
        }
        cur.push(g.index_select(x_t[slot], 0, &o.observed)?);
        prev.push(g.index_select(x_prev[slot], 0, &o.observed)?);
        for &i in &o.observed {
            refs.extend(o.reference[i].iter().map(|&v| T::c(v)));
            phys.extend(o.physics.as_array().iter().map(|&v| T::c(v)));
        }
    }
    let x = g.concat(&cur, 0)?;
    let xp = g.concat(&prev, 0)?;
    let rows = layout.total_rows;
    let xr = g.constant(Tensor::from_vec(&[rows, 3], refs))?;
    let ph = g.constant(Tensor::from_vec(&[rows, 3], phys))?;
    let d = nearest_var(g, x, &layout.groups)?;
    let v = g.sub(x, xp)?;
    let r = g.sub(x, xr)?;
    let h = g.concat(&[d, v, r, ph], 1)?;
    Ok((h, x))
}

/// Plain per-object features (observed vertices only, valid objects only)
/// for a pair of consecutive states.
pub fn assemble_vertex_features(state_t: &SceneState, state_prev: &SceneState) -> Result<Vec<Vec<[f64; FEATURE_WIDTH]>>> {
    if state_t.len() != state_prev.len() {
        return Err(TensorError::InvalidShape {
            op: "vertex_features",
            detail: format!("{} objects vs {} in the previous frame", state_t.len(), state_prev.len()),
        });
    }
    let layout = SceneLayout::new(state_t)?;
    let mut g = Graph::<f64>::new();
    let mut xt = Vec::new();
    let mut xp = Vec::new();
    for (a, b) in state_t.objects.iter().zip(&state_prev.objects) {
        if a.vertices.len() != b.vertices.len() {
            return Err(TensorError::InvalidShape {
                op: "vertex_features",
                detail: format!("vertex count {} vs {} in the previous frame", a.vertices.len(), b.vertices.len()),
            });
        }
        xt.push(g.constant(Tensor::from_rows(&a.vertices))?);
        xp.push(g.constant(Tensor::from_rows(&b.vertices))?);
    }
    let (h, _) = vertex_features_var(&mut g, state_t, &layout, &xt, &xp)?;
    let data = g.value(h).data();
    Ok(layout
        .offsets
        .iter()
        .zip(&layout.counts)
        .map(|(&off, &n)| {
            (off..off + n)
                .map(|r| std::array::from_fn(|c| data[r * FEATURE_WIDTH + c]))
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub feat_width: usize,
    pub width: usize,
    pub levels: Vec<f64>,
}

/// Shared per-vertex perceptron, multi-level max pooling and a fusion
/// perceptron producing one token per object.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub vertex_mlp: Mlp,
    pub fuse: Mlp,
}

/// Object tokens `[M, D]` (zero rows for padding slots) and stacked
/// per-vertex features `[ΣN, W_f]`.
pub struct Encoded {
    pub tokens: Var,
    pub features: Var,
}

impl Encoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let mut widths = vec![FEATURE_WIDTH];
        widths.extend(&config.hidden);
        widths.push(config.feat_width);
        let vertex_mlp = Mlp::new(store, &format!("{name}.vertex"), &widths, Init::Normal(1.0), rng)?;
        let pooled = config.feat_width * config.levels.len();
        let fuse = Mlp::new(store, &format!("{name}.fuse"), &[pooled, config.width, config.width], Init::Normal(1.0), rng)?;
        Ok(Self {
            config,
            vertex_mlp,
            fuse,
        })
    }

    /// Pooling groups (stacked rows), object-major then level.
    pub fn pooling_groups(&self, scene: &SceneState, layout: &SceneLayout) -> Vec<Vec<usize>> {
        let mut groups = Vec::with_capacity(layout.len() * self.config.levels.len());
        for (k, &slot) in layout.slots.iter().enumerate() {
            let o = &scene.objects[slot];
            let off = layout.offsets[k];
            for s in level_sizes(o.observed.len(), &self.config.levels) {
                groups.push(o.pyramid[..s].iter().map(|&p| off + p).collect());
            }
        }
        groups
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, scene: &SceneState, layout: &SceneLayout, h: Var) -> Result<Encoded> {
        let features = self.vertex_mlp.forward_act(g, h)?;
        let groups = self.pooling_groups(scene, layout);
        let pooled = g.segment_max(features, &groups)?;
        let mv = layout.len();
        let pooled = g.reshape(pooled, &[mv, self.config.levels.len() * self.config.feat_width])?;
        let tokens = self.fuse.forward(g, pooled)?;
        let tokens = if mv == scene.len() {
            tokens
        } else {
            let zero = g.constant(Tensor::zeros(&[1, self.config.width]))?;
            let padded = g.concat(&[tokens, zero], 0)?;
            let idx: Vec<usize> = layout.stack_of.iter().map(|s| s.unwrap_or(mv)).collect();
            g.index_select(padded, 0, &idx)?
        };
        Ok(Encoded { tokens, features })
    }

    /// Token and feature map of a single object from its features and
    /// pooling order (positions into `features`).
    pub fn encode_object<T: Real>(&self, params: &ParamStore<T>, features: &[[f64; FEATURE_WIDTH]], pyramid: &[usize]) -> Result<(Vec<T>, Tensor<T>)> {
        let mut g = Graph::with_params(params);
        let flat: Vec<f64> = features.iter().flatten().copied().collect();
        let h = g.constant(Tensor::from_f64(&[features.len(), FEATURE_WIDTH], &flat))?;
        let f = self.vertex_mlp.forward_act(&mut g, h)?;
        let groups: Vec<Vec<usize>> = level_sizes(features.len(), &self.config.levels)
            .into_iter()
            .map(|s| pyramid[..s].to_vec())
            .collect();
        let pooled = g.segment_max(f, &groups)?;
        let pooled = g.reshape(pooled, &[1, groups.len() * self.config.feat_width])?;
        let tok = self.fuse.forward(&mut g, pooled)?;
        Ok((g.value(tok).to_vec(), g.value(f).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_sizes_follow_ratios() {
        let lv = [1.0, 0.5, 0.25, 0.125];
        assert_eq!(level_sizes(64, &lv), vec![64, 32, 16, 8]);
        assert_eq!(level_sizes(48, &lv), vec![48, 24, 12, 6]);
        assert_eq!(level_sizes(9, &lv), vec![9, 5, 3, 2]);
        assert_eq!(level_sizes(5, &lv), vec![5, 5, 5, 5]);
    }
}
