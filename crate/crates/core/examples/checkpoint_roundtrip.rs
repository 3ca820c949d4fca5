//! Saves a model to disk, loads it back and confirms forecasts match.

use powerformer::masks::MaskSpec;
use powerformer::model::{Checkpoint, ModelConfig, Powerformer};

fn main() -> powerformer::Result<()> {
    let cfg = ModelConfig {
        mask: MaskSpec::butterworth(2, 10.0),
        ..ModelConfig::preset("weather", 336, 96)?
    };
    let model = Powerformer::new(cfg)?;
    println!("{} parameters, fingerprint {}", model.parameter_count(), &model.params.fingerprint()[..16]);

    let path = std::env::temp_dir().join("powerformer_example.ckpt");
    model.checkpoint(0).save(&path)?;
    let restored = Powerformer::from_checkpoint(Checkpoint::load(&path)?)?;
    println!("restored fingerprint {}", &restored.params.fingerprint()[..16]);

    let window: Vec<f64> = (0..336).map(|t| (t as f64 / 24.0 * std::f64::consts::TAU).sin()).collect();
    let (a, _) = model.forward(std::slice::from_ref(&window), false)?;
    let (b, _) = restored.forward(&[window], false)?;
    println!("forecasts identical: {}", a == b);
    Ok(())
}
