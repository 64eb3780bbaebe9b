//! Attention pair accounting and step timings.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::shapes::fibonacci_sphere;
use crate::geometry::Vec3;
use crate::model::{constant_sets, Model};
use crate::scene::{ObjectState, Physics, SceneState};
use crate::tensor::{Graph, Real, Result};

/// Token pairs scored by one decoder self-attention layer.
pub fn decoder_pairs(objects: usize, registers: usize) -> usize {
    (objects + registers).pow(2)
}

/// Anchor-to-object pairs scored by one cross-attention scale.
pub fn predictor_pairs(objects: usize, anchors: usize) -> usize {
    objects * anchors * objects
}

/// Pairs a vertex-level transformer would score over the same scene.
pub fn vertex_pairs(total_vertices: usize) -> usize {
    total_vertices.pow(2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub objects: usize,
    pub vertices_per_object: usize,
    pub decoder_pairs_per_layer: usize,
    pub predictor_pairs_per_scale: usize,
    pub vertex_level_pairs: usize,
    /// Full advance (encoder, decoder, predictor, projection), ms.
    pub ms_per_step: f64,
    /// Decoder share of the same advance, ms.
    pub ms_decoder: f64,
}

/// Two consecutive states of `m` spheres of `nv` points each, on a grid
/// and drifting slowly.
pub fn synthetic_scene(m: usize, nv: usize, anchors: usize, seed: u64) -> std::result::Result<(SceneState, SceneState), crate::geometry::GeometryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = (m as f64).sqrt().ceil() as usize;
    let mut prev = Vec::with_capacity(m);
    let mut cur = Vec::with_capacity(m);
    for i in 0..m {
        let c: Vec3 = [(i % side) as f64 * 0.5, (i / side) as f64 * 0.5, 0.3];
        let pts: Vec<Vec3> = fibonacci_sphere(nv, 0.2).into_iter().map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]]).collect();
        let v: Vec3 = std::array::from_fn(|_| rng.random_range(-0.01..0.01));
        let physics = Physics {
            mass: 1.0,
            friction: 0.5,
            restitution: 0.5,
        };
        let o = ObjectState::new(pts.clone(), physics, anchors)?;
        let mut c1 = o.clone();
        c1.vertices = pts.iter().map(|p| [p[0] + v[0], p[1] + v[1], p[2] + v[2]]).collect();
        prev.push(o);
        cur.push(c1);
    }
    Ok((SceneState::new(prev), SceneState::new(cur)))
}

/// Best full-advance and decoder times in ms over `repeats` advances.
pub fn time_step<T: Real>(model: &Model<T>, prev: &SceneState, cur: &SceneState, repeats: usize) -> Result<(f64, f64)> {
    let (mut full, mut decoder) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        let mut g = Graph::with_params(&model.params);
        let xt = constant_sets(&mut g, cur)?;
        let xp = constant_sets(&mut g, prev)?;
        let out = model.step(&mut g, cur, &xt, &xp, 1.0)?;
        full = full.min(t0.elapsed().as_secs_f64() * 1e3);
        decoder = decoder.min(out.decoder_ms);
    }
    Ok((full, decoder))
}

/// Timings and pair counts for a scene of `m` objects with `nv` vertices.
pub fn profile_row<T: Real>(model: &Model<T>, m: usize, nv: usize, repeats: usize) -> Result<ProfileRow> {
    let (prev, cur) = synthetic_scene(m, nv, model.config.anchors, 0).map_err(|e| crate::tensor::TensorError::Domain {
        op: "profile",
        detail: e.to_string(),
    })?;
    let (ms_per_step, ms_decoder) = time_step(model, &prev, &cur, repeats)?;
    Ok(ProfileRow {
        objects: m,
        vertices_per_object: nv,
        decoder_pairs_per_layer: decoder_pairs(m, model.config.registers),
        predictor_pairs_per_scale: predictor_pairs(m, model.config.anchors),
        vertex_level_pairs: vertex_pairs(m * nv),
        ms_per_step,
        ms_decoder,
    })
}

pub fn format_table(rows: &[ProfileRow]) -> String {
    let mut s = format!(
        "{:>7} {:>6} {:>12} {:>14} {:>16} {:>10} {:>10}\n",
        "objects", "verts", "dec pairs", "pred pairs", "vertex pairs", "ms/step", "ms dec"
    );
    for r in rows {
        s.push_str(&format!(
            "{:>7} {:>6} {:>12} {:>14} {:>16} {:>10.2} {:>10.2}\n",
            r.objects, r.vertices_per_object, r.decoder_pairs_per_layer, r.predictor_pairs_per_scale, r.vertex_level_pairs, r.ms_per_step, r.ms_decoder
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_counts() {
        assert_eq!(decoder_pairs(10, 16), 676);
        assert_eq!(decoder_pairs(217, 16), 54_289);
        assert_eq!(decoder_pairs(20, 0), 4 * decoder_pairs(10, 0));
        assert_eq!(predictor_pairs(10, 4), 400);
        assert_eq!(vertex_pairs(10 * 64), 409_600);
    }
}
