//! Learns the power-law decay constant alongside the network and prints
//! its per-epoch trajectory.

use powerformer::data::Synthetic;
use powerformer::masks::MaskSpec;
use powerformer::model::ModelConfig;
use powerformer::training::{self, TrainConfig, TrainData};

fn main() -> powerformer::Result<()> {
    let ds = Synthetic::SineMixture.generate(1200, 7);
    let cfg = TrainConfig {
        epochs: 8,
        batch_size: 32,
        lr: 1e-3,
        alpha_lr: 1e-2,
        window_stride: 2,
        eval_stride: 4,
        ..TrainConfig::default()
    };
    let data = TrainData::from_dataset(&ds, 96, 24, &cfg)?;
    let model = ModelConfig {
        layers: 2,
        embed_width: 16,
        heads: 4,
        ff_width: 32,
        mask: MaskSpec::weight_power_law(1.0).learnable(),
        ..ModelConfig::preset("etth1", 96, 24)?
    };
    let (trained, rec) = training::train_learnable_alpha(&model, &cfg, &data, 2021)?;
    for (epoch, a) in rec.alpha_trajectory.iter().enumerate() {
        println!("epoch {epoch:>2}: alpha {a:.4}");
    }
    println!("final alpha {:.4}, test mse {:.5}", trained.alpha(), rec.test.mse);
    Ok(())
}
