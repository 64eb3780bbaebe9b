//! Hide a quarter of every object's points. Anchors are re-chosen from the
//! survivors, while predictions are still written for the full geometry.

use rigidsim::datagen::{mask_partial, simulate_scene, SceneConfig};
use rigidsim::eval::{rigidity_error, rollout_trajectory, RolloutOptions};
use rigidsim::model::{Model, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t = simulate_scene(&SceneConfig::default(), 11)?;
    let base = t.base_scene(16)?;
    let masked = mask_partial(&base, 0.25, 7)?;
    for (a, b) in base.objects.iter().zip(&masked.objects) {
        println!("observed {} -> {} of {} points", a.observed.len(), b.observed.len(), b.reference.len());
    }

    let model = Model::<f32>::new(ModelConfig::tiny(), 0)?;
    let opts = RolloutOptions { mask: Some((0.25, 7)) };
    let (pred, _) = rollout_trajectory(&model, &t, 5, 50, opts)?;
    println!(
        "masked rollout: {} stored frames, {} vertices in object 0, rigidity error {:.1e}",
        pred.frames(),
        pred.vertices(pred.frames() - 1, 0).len(),
        rigidity_error(&pred)
    );
    Ok(())
}
