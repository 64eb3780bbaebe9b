use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::MIN_PYRAMID_VERTICES;
use crate::scene::{ObjectState, SceneState};

use super::DatagenError;

/// Hide `⌊fraction·Nv⌋` uniformly chosen points of every valid object.
/// The observed subset is stored as indices, so it applies identically to
/// every frame posed from the returned state; anchors and pooling order are
/// recomputed on the surviving reference points.
pub fn mask_partial(state: &SceneState, fraction: f64, seed: u64) -> Result<SceneState, DatagenError> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(DatagenError::Fraction(fraction));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = state
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| {
            if !o.valid {
                return Ok(o.clone());
            }
            let n = o.observed.len();
            let drop = (fraction * n as f64).floor() as usize;
            let left = n - drop;
            if left < MIN_PYRAMID_VERTICES {
                return Err(DatagenError::TooFewSurvivors { object: i, left });
            }
            let mut keep: Vec<usize> = sample(&mut rng, n, left).into_iter().map(|k| o.observed[k]).collect();
            keep.sort_unstable();
            Ok(ObjectState::with_observed(
                o.reference.clone(),
                o.vertices.clone(),
                o.physics,
                keep,
                o.anchors.len(),
            )?)
        })
        .collect::<Result<Vec<_>, DatagenError>>()?;
    Ok(SceneState::new(objects))
}
