//! Patch counts for common look-backs and the instance normalization
//! round trip.

use powerformer::patching::{self, PatchConfig};

fn main() -> powerformer::Result<()> {
    for seq_len in [96, 336, 512] {
        let cfg = PatchConfig::new(16, 8, 16, seq_len)?;
        let (first, last) = (cfg.patch_span(0), cfg.patch_span(cfg.num_patches() - 1));
        println!("T={seq_len:>3}: {:>2} patches, first {first:?}, last {last:?}", cfg.num_patches());
    }

    let x: Vec<f64> = (0..64).map(|t| 100.0 + 5.0 * (t as f64 * 0.3).sin()).collect();
    let (z, stats) = patching::instance_normalize(&x)?;
    let back = patching::denormalize(&z, stats);
    let err = x.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("mean {:.4}, std {:.4}, round trip error {err:.1e}", stats.mean, stats.std);
    Ok(())
}
