use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masks::MaskSpec;
use crate::patching::PatchConfig;

/// Architecture hyperparameters of the encoder-only forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub seq_len: usize,
    pub pred_len: usize,
    pub patch_len: usize,
    pub stride: usize,
    pub layers: usize,
    pub embed_width: usize,
    pub heads: usize,
    pub ff_width: usize,
    /// Dropout on the feed-forward hidden layer and both residual branches.
    pub dropout: f64,
    /// Dropout on the flattened encoder output feeding the linear head.
    pub head_dropout: f64,
    pub mask: MaskSpec,
    /// Restrict attention to lags below this cutoff.
    pub banded_tau: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset("etth1", 336, 96).expect("known preset")
    }
}

/// Names accepted by [`ModelConfig::preset`].
pub const PRESETS: [&str; 7] = ["etth1", "etth2", "ettm1", "ettm2", "weather", "electricity", "traffic"];

impl ModelConfig {
    /// Per-dataset defaults: small width for the hourly ETT sets, wide otherwise.
    pub fn preset(name: &str, seq_len: usize, pred_len: usize) -> Result<Self> {
        let small = match name.to_ascii_lowercase().as_str() {
            "etth1" | "etth2" => true,
            "ettm1" | "ettm2" | "weather" | "electricity" | "traffic" => false,
            other => {
                return Err(Error::Config {
                    key: "preset".into(),
                    reason: format!("unknown preset `{other}`"),
                })
            }
        };
        let (embed_width, heads, ff_width, dropout) = if small {
            (16, 4, 128, 0.3)
        } else {
            (128, 16, 256, 0.2)
        };
        Ok(Self {
            seq_len,
            pred_len,
            patch_len: 16,
            stride: 8,
            layers: 3,
            embed_width,
            heads,
            ff_width,
            dropout,
            head_dropout: dropout,
            mask: MaskSpec::weight_power_law(1.0),
            banded_tau: None,
            seed: 2021,
        })
    }

    pub fn patch_config(&self) -> PatchConfig {
        PatchConfig {
            patch_len: self.patch_len,
            stride: self.stride,
            embed_width: self.embed_width,
            seq_len: self.seq_len,
        }
    }

    pub fn num_patches(&self) -> usize {
        self.patch_config().num_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_width / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |key: &str, reason: String| Error::Config {
            key: key.into(),
            reason,
        };
        self.patch_config()
            .validate()
            .map_err(|e| cfg_err("patch_len", e.to_string()))?;
        if self.pred_len == 0 {
            return Err(cfg_err("pred_len", "must be positive".into()));
        }
        if self.layers == 0 {
            return Err(cfg_err("layers", "must be positive".into()));
        }
        if self.heads == 0 || !self.embed_width.is_multiple_of(self.heads) {
            return Err(cfg_err(
                "heads",
                format!("embed width {} not divisible by {} heads", self.embed_width, self.heads),
            ));
        }
        if self.ff_width == 0 {
            return Err(cfg_err("ff_width", "must be positive".into()));
        }
        for (key, rate) in [("dropout", self.dropout), ("head_dropout", self.head_dropout)] {
            if !(0.0..1.0).contains(&rate) {
                return Err(cfg_err(key, format!("{rate} not in [0, 1)")));
            }
        }
        if self.banded_tau == Some(0) {
            return Err(cfg_err("banded_tau", "must be at least 1".into()));
        }
        self.mask.validate().map_err(|e| cfg_err("mask", e.to_string()))?;
        Ok(())
    }

    /// Number of trainable scalars; a closed form in the hyperparameters.
    pub fn parameter_count(&self) -> usize {
        let (n, p, ff) = (self.embed_width, self.num_patches(), self.ff_width);
        let embed = self.patch_len * n + p * n;
        let attn = 3 * n * self.head_dim() * self.heads + n * n;
        let norms = 4 * n;
        let feed = n * ff + ff + ff * n + n;
        let head = p * n * self.pred_len + self.pred_len;
        let alpha = usize::from(self.mask.learnable);
        embed + self.layers * (attn + norms + feed) + head + alpha
    }

    /// Short content hash of the serialized config.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let hash = Sha256::digest(json);
        hash.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}
