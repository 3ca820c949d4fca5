//! Per-window instance normalization and strided patch embedding.
//!
//! Each channel is handled as an independent univariate series: the window
//! is standardized with its own mean and population standard deviation,
//! cut into `P = (T_seq - p) / s + 1` patches (trailing remainder dropped),
//! projected to the embedding width and offset by a learned positional
//! embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Floor applied to the per-window standard deviation.
pub const STD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub embed_width: usize,
    pub seq_len: usize,
}

impl PatchConfig {
    pub fn new(patch_len: usize, stride: usize, embed_width: usize, seq_len: usize) -> Result<Self> {
        let cfg = Self {
            patch_len,
            stride,
            embed_width,
            seq_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_len == 0 || self.patch_len > self.seq_len {
            return Err(Error::contract(format!(
                "patch length {} must be in 1..={}",
                self.patch_len, self.seq_len
            )));
        }
        if self.stride == 0 {
            return Err(Error::contract("patch stride must be at least 1"));
        }
        if self.embed_width == 0 {
            return Err(Error::contract("embedding width must be positive"));
        }
        Ok(())
    }

    /// `(T_seq - p) / s + 1`.
    pub fn num_patches(&self) -> usize {
        (self.seq_len - self.patch_len) / self.stride + 1
    }

    /// Time indices `[start, end)` covered by patch `k`.
    pub fn patch_span(&self, k: usize) -> (usize, usize) {
        (k * self.stride, k * self.stride + self.patch_len)
    }
}

/// Per-window location and scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
}

impl NormStats {
    pub const IDENTITY: NormStats = NormStats { mean: 0.0, std: 1.0 };
}

/// Standardizes one window with its population statistics.
pub fn instance_normalize(x: &[f64]) -> Result<(Vec<f64>, NormStats)> {
    if x.len() < 2 {
        return Err(Error::contract(format!(
            "instance normalization needs at least 2 steps, got {}",
            x.len()
        )));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    let z = x.iter().map(|v| (v - mean) / std).collect();
    Ok((z, NormStats { mean, std }))
}

/// Inverse of [`instance_normalize`].
pub fn denormalize(y: &[f64], stats: NormStats) -> Vec<f64> {
    y.iter().map(|v| v * stats.std + stats.mean).collect()
}

/// Strided windows of a normalized series, row-major `[P, p]`.
pub fn extract_patches(z: &[f64], cfg: &PatchConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if z.len() != cfg.seq_len {
        return Err(Error::shape("extract_patches", &[z.len()], &[cfg.seq_len]));
    }
    let mut out = Vec::with_capacity(cfg.num_patches() * cfg.patch_len);
    for k in 0..cfg.num_patches() {
        let (start, end) = cfg.patch_span(k);
        out.extend_from_slice(&z[start..end]);
    }
    Ok(out)
}

/// Embeds one window: patches projected by `w_embed: [p, N]` plus `pos: [P, N]`.
pub fn patchify(z: &[f64], cfg: &PatchConfig, w_embed: &Tensor, pos: &Tensor) -> Result<Tensor> {
    let p = cfg.num_patches();
    if w_embed.shape() != [cfg.patch_len, cfg.embed_width] || pos.shape() != [p, cfg.embed_width] {
        return Err(Error::shape("patchify", w_embed.shape(), pos.shape()));
    }
    let patches = Tensor::new(vec![p, cfg.patch_len], extract_patches(z, cfg)?)?;
    let mut out = crate::tensor::matmul(&patches, w_embed)?;
    out.data_mut().iter_mut().zip(pos.data()).for_each(|(o, e)| *o += e);
    Ok(out)
}

/// Tape version of [`patchify`] over a batch: `patches` is `[B, P, p]`.
pub fn embed_patches(tape: &mut Tape, patches: Var, w_embed: Var, pos: Var) -> Result<Var> {
    let projected = tape.matmul(patches, w_embed)?;
    tape.add_broadcast(projected, pos)
}

/// Positional embedding drawn from `uniform(-0.02, 0.02)`.
pub fn init_positional<R: Rng>(patches: usize, width: usize, rng: &mut R) -> Tensor {
    let data = (0..patches * width).map(|_| rng.gen_range(-0.02..0.02)).collect();
    Tensor::new(vec![patches, width], data).expect("sized")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn patch_counts() {
        assert_eq!(PatchConfig::new(16, 8, 16, 512).unwrap().num_patches(), 63);
        assert_eq!(PatchConfig::new(16, 8, 16, 336).unwrap().num_patches(), 41);
        assert_eq!(PatchConfig::new(7, 7, 4, 7).unwrap().num_patches(), 1);
        assert!(PatchConfig::new(17, 8, 16, 16).is_err());
        assert!(PatchConfig::new(4, 0, 16, 16).is_err());
    }

    #[test]
    fn remainder_is_dropped() {
        let cfg = PatchConfig::new(4, 3, 2, 12).unwrap();
        // starts 0, 3, 6; a start at 9 would end at 13
        assert_eq!(cfg.num_patches(), 3);
        let z: Vec<f64> = (0..12).map(f64::from).collect();
        let p = extract_patches(&z, &cfg).unwrap();
        assert_eq!(&p[8..12], &[6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn constant_series_normalizes_to_zero() {
        let (z, stats) = instance_normalize(&[3.0; 10]).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
        assert_eq!(stats.std, STD_FLOOR);
        assert_eq!(stats.mean, 3.0);
    }

    #[test]
    fn standardized_pair_is_unchanged() {
        let (z, _) = instance_normalize(&[-1.0, 1.0]).unwrap();
        assert_eq!(z, vec![-1.0, 1.0]);
        assert!(instance_normalize(&[1.0]).is_err());
    }

    #[test]
    fn denormalize_examples() {
        assert_eq!(denormalize(&[1.5, -2.0], NormStats::IDENTITY), vec![1.5, -2.0]);
        let s = NormStats { mean: 4.0, std: 2.0 };
        assert_eq!(denormalize(&[0.0, 0.0], s), vec![4.0, 4.0]);
    }

    #[test]
    fn whole_window_patch() {
        let cfg = PatchConfig::new(3, 3, 2, 3).unwrap();
        let w = Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let pos = Tensor::zeros(&[1, 2]);
        let e = patchify(&[1.0, 2.0, 3.0], &cfg, &w, &pos).unwrap();
        assert_eq!(e.data(), &[6.0, 8.0]);
    }

    proptest! {
        #[test]
        fn normalization_round_trip(xs in prop::collection::vec(-1e3f64..1e3, 2..200)) {
            let (z, stats) = instance_normalize(&xs).unwrap();
            let back = denormalize(&z, stats);
            for (a, b) in xs.iter().zip(&back) {
                prop_assert!((a - b).abs() < 1e-10);
            }
            if stats.std > STD_FLOOR {
                let n = z.len() as f64;
                let mean = z.iter().sum::<f64>() / n;
                let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                prop_assert!(mean.abs() < 1e-10);
                prop_assert!((var.sqrt() - 1.0).abs() < 1e-10);
            }
        }

        #[test]
        fn patches_stay_in_bounds(seq in 1usize..300, p in 1usize..40, s in 1usize..20) {
            prop_assume!(p <= seq);
            let cfg = PatchConfig::new(p, s, 4, seq).unwrap();
            let last = cfg.patch_span(cfg.num_patches() - 1);
            prop_assert!(last.1 <= seq);
            prop_assert!(last.1 + s > seq);
        }
    }
}
