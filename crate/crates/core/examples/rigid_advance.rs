//! One learned advance from two observed states. An untrained model has a
//! zero acceleration head, so it moves every object at constant velocity,
//! and the rigid projection keeps the geometry exact.

use rigidsim::datagen::{simulate_scene, SceneConfig};
use rigidsim::geometry::max_pairwise_distortion;
use rigidsim::model::{Model, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t = simulate_scene(&SceneConfig::default(), 3)?;
    let model = Model::<f64>::new(ModelConfig::tiny(), 0)?;
    let base = t.base_scene(model.config.anchors)?;
    let prev = t.scene_at(&base, 0);
    let cur = t.scene_at(&base, 5);

    let (next, transforms) = model.advance_state(&prev, &cur, 5.0)?;
    for (i, (o, tf)) in next.objects.iter().zip(&transforms).enumerate() {
        let c = tf.t;
        println!(
            "object {i}: translation ({:.3}, {:.3}, {:.3}), rigidity error {:.1e}",
            c[0],
            c[1],
            c[2],
            max_pairwise_distortion(&o.vertices, &o.reference, 1e-6)
        );
    }
    Ok(())
}
