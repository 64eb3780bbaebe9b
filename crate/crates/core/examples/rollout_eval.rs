//! Roll out a model and the constant-velocity baseline under the
//! evaluation protocol (two warmup frames, then autoregressive steps) and
//! report translation and orientation RMSE per horizon.

use rigidsim::datagen::{simulate_scene, SceneConfig};
use rigidsim::eval::{evaluate_constant_velocity, evaluate_model, evaluation_frames, RolloutOptions};
use rigidsim::model::{Model, ModelConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data: Vec<_> = (0..3).map(|s| simulate_scene(&SceneConfig::default(), 500 + s)).collect::<Result<_, _>>()?;
    let (warm, preds) = evaluation_frames(10, 100);
    println!("step 10: warmup frames {warm:?}, predictions at {preds:?}");

    let model = Model::<f32>::new(ModelConfig::tiny(), 0)?;
    let steps = [1, 5, 10];
    let report = evaluate_model(&model, &data, &steps, 100, RolloutOptions::default())?;
    let baseline = evaluate_constant_velocity(&data, &steps, 100, model.config.anchors)?;
    println!("untrained model\n{}", report.to_table());
    println!("constant velocity\n{}", baseline.to_table());
    if let Some(rt) = report.runtime {
        println!("{:.2} ms per step, {} decoder pairs per layer", rt.ms_per_step, rt.decoder_pairs_per_layer);
    }
    Ok(())
}
