//! Train a tiny model for a few epochs and compare its loss with the
//! constant-velocity baseline on held-out sequences.

use rigidsim::datagen::{simulate_scene, SceneConfig};
use rigidsim::model::{Model, ModelConfig};
use rigidsim::training::{constant_velocity_loss, validation_sequences, LossReport, TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let scenes = SceneConfig {
        frames: 60,
        points: 32,
        ..SceneConfig::default()
    };
    let train: Vec<_> = (0..8).map(|s| simulate_scene(&scenes, s)).collect::<Result<_, _>>()?;
    let held: Vec<_> = (100..102).map(|s| simulate_scene(&scenes, s)).collect::<Result<_, _>>()?;

    let config = TrainConfig {
        epochs: 4,
        warmup_epochs: 1,
        sequence_length: 4,
        base_lr: 1e-3,
        ..TrainConfig::default()
    };
    let val = validation_sequences(&held, &config)?;
    let cv = LossReport::mean(&val.iter().map(|s| constant_velocity_loss(s, 8)).collect::<Result<Vec<_>, _>>()?);
    println!("constant-velocity validation loss {:.3}", cv.total);

    let model = Model::<f32>::new(ModelConfig::tiny(), 0)?;
    let mut trainer = Trainer::new(model, config, train.len())?;
    while !trainer.finished() {
        let s = trainer.run_epoch(&train, &val, &mut |_| {})?;
        println!("epoch {} train {:.3} val {:.3} ({:.1}s)", s.epoch, s.train.total, s.val.map_or(f64::NAN, |v| v.total), s.seconds);
    }
    Ok(())
}
