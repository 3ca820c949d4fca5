//! Compares full and banded weighted causal attention: identical outputs
//! when the band covers the sequence, and score work that grows linearly
//! with the number of patches.

use std::time::Instant;

use powerformer::attention::{self, AttentionParams};
use powerformer::masks::{self, MaskSpec};
use powerformer::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> powerformer::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let width = 16;
    let params = AttentionParams::init(width, 4, &mut rng)?;
    let spec = MaskSpec::weight_power_law(1.0);
    let tau = 8;

    println!("{:>6} {:>14} {:>14} {:>10} {:>10} {:>12}", "P", "full ops", "banded ops", "full", "banded", "max diff");
    for p in [32, 64, 128, 256, 512] {
        let x = Tensor::new(vec![p, width], (0..p * width).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
        let mask = masks::combined_mask(&spec, p)?;
        let t = Instant::now();
        let (full, _) = attention::wcmha_eval(&x, &params, &mask)?;
        let full_time = t.elapsed();
        let t = Instant::now();
        let (_, stats) = attention::wcmha_banded(&x, &params, &mask, tau)?;
        let band_time = t.elapsed();
        let (same, wide) = attention::wcmha_banded(&x, &params, &mask, p)?;
        let diff = full.data().iter().zip(same.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!(
            "{p:>6} {:>14} {:>14} {:>10.1?} {:>10.1?} {diff:>12.1e}",
            wide.score_ops, stats.score_ops, full_time, band_time
        );
    }
    Ok(())
}
