//! Encoder-only forecaster: instance normalization, patch embedding,
//! post-norm encoder layers with weighted causal attention, a flattened
//! linear head and denormalization.
//!
//! Channels are forecast independently; a batch is simply a list of
//! univariate look-back windows.

mod checkpoint;
mod config;

pub use checkpoint::{Checkpoint, MAGIC};
pub use config::{ModelConfig, PRESETS};

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionTrace, AttentionVars, BandStats};
use crate::error::{Error, Result};
use crate::masks::{self, MaskCache};
use crate::patching::{self, NormStats};
use crate::tensor::{Tape, Tensor, Var};

/// Epsilon inside every layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, t: Tensor) {
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = t,
            None => self.entries.push((name.to_string(), t)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.entries.iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Order-sensitive hash over names, shapes and exact bit patterns.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (n, t) in &self.entries {
            h.update(n.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Per-channel forecasts in the units of the input windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub channels: Vec<Vec<f64>>,
}

/// Dropout source for a forward pass; `None` evaluates deterministically.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

/// A recorded forward pass.
pub struct Graph {
    pub tape: Tape,
    /// `[B, T_pred]` forecasts in the units of the input windows.
    pub forecast: Var,
    /// One node per entry of the parameter store, in store order.
    pub params: Vec<Var>,
    pub traces: Vec<AttentionTrace>,
    /// Per-window normalization statistics.
    pub stats: Vec<NormStats>,
    pub band: BandStats,
    /// Token embeddings after patching, `[B, P, N]`.
    pub embedded: Var,
}

impl Graph {
    pub fn forecast_values(&self) -> &[f64] {
        self.tape.value(self.forecast).data()
    }

    /// Gradients of every parameter after `tape.backward`, in store order.
    pub fn param_grads(&self) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .map(|v| {
                self.tape
                    .grad(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; self.tape.value(*v).len()])
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct Powerformer {
    pub config: ModelConfig,
    pub params: ParamStore,
    masks: Arc<MaskCache>,
}

impl Clone for Powerformer {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            masks: Arc::clone(&self.masks),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect()).expect("sized")
}

impl Powerformer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (n, p, ff) = (config.embed_width, config.num_patches(), config.ff_width);
        let mut params = ParamStore::default();
        let fan = |k: usize| 1.0 / (k as f64).sqrt();
        params.insert("patch.weight", uniform(&mut rng, &[config.patch_len, n], fan(config.patch_len)));
        params.insert("patch.pos", patching::init_positional(p, n, &mut rng));
        for l in 0..config.layers {
            let attn = attention::AttentionParams::init(n, config.heads, &mut rng)?;
            for (kind, ws) in [("wq", &attn.wq), ("wk", &attn.wk), ("wv", &attn.wv)] {
                for (h, w) in ws.iter().enumerate() {
                    params.insert(&format!("layers.{l}.attn.{kind}.{h}"), w.clone());
                }
            }
            params.insert(&format!("layers.{l}.attn.wo"), attn.wo);
            params.insert(&format!("layers.{l}.norm1.gamma"), Tensor::filled(&[n], 1.0));
            params.insert(&format!("layers.{l}.norm1.beta"), Tensor::zeros(&[n]));
            params.insert(&format!("layers.{l}.ff.w1"), uniform(&mut rng, &[n, ff], fan(n)));
            params.insert(&format!("layers.{l}.ff.b1"), uniform(&mut rng, &[ff], fan(n)));
            params.insert(&format!("layers.{l}.ff.w2"), uniform(&mut rng, &[ff, n], fan(ff)));
            params.insert(&format!("layers.{l}.ff.b2"), uniform(&mut rng, &[n], fan(ff)));
            params.insert(&format!("layers.{l}.norm2.gamma"), Tensor::filled(&[n], 1.0));
            params.insert(&format!("layers.{l}.norm2.beta"), Tensor::zeros(&[n]));
        }
        params.insert("head.weight", uniform(&mut rng, &[p * n, config.pred_len], fan(p * n)));
        params.insert("head.bias", uniform(&mut rng, &[config.pred_len], fan(p * n)));
        if config.mask.learnable {
            params.insert("mask.alpha", Tensor::vector(vec![config.mask.alpha]));
        }
        Ok(Self {
            config,
            params,
            masks: Arc::new(MaskCache::new()),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let fresh = Self::new(ckpt.config.clone())?;
        for (name, t) in fresh.params.iter() {
            let loaded = ckpt.params.require(name)?;
            if loaded.shape() != t.shape() {
                return Err(Error::shape("checkpoint", loaded.shape(), t.shape()));
            }
        }
        if ckpt.params.len() != fresh.params.len() {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(Self {
            config: ckpt.config,
            params: ckpt.params,
            masks: fresh.masks,
        })
    }

    pub fn checkpoint(&self, step: u64) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            seed: self.config.seed,
            step,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Current decay constant (the learned one when `mask.learnable`).
    pub fn alpha(&self) -> f64 {
        self.params
            .get("mask.alpha")
            .map_or(self.config.mask.alpha, Tensor::item)
    }

    /// Records a forward pass over univariate windows of length `seq_len`.
    pub fn build(&self, windows: &[&[f64]], mut dropout: DropoutRng<'_>, capture: bool) -> Result<Graph> {
        let cfg = &self.config;
        if windows.is_empty() {
            return Err(Error::Empty("forward over zero windows".into()));
        }
        let pc = cfg.patch_config();
        let (p, n, b) = (pc.num_patches(), cfg.embed_width, windows.len());
        let mut patches = Vec::with_capacity(b * p * cfg.patch_len);
        let mut stats = Vec::with_capacity(b);
        for w in windows {
            if w.len() != cfg.seq_len {
                return Err(Error::shape("forward window", &[w.len()], &[cfg.seq_len]));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("non-finite value in input window".into()));
            }
            let (z, s) = patching::instance_normalize(w)?;
            patches.extend(patching::extract_patches(&z, &pc)?);
            stats.push(s);
        }

        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|(_, t)| tape.param(t.clone())).collect();
        let var = |name: &str| -> Result<Var> {
            self.params
                .index_of(name)
                .map(|i| params[i])
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
        };

        let patches = tape.constant(Tensor::new(vec![b, p, cfg.patch_len], patches)?);
        let embedded = patching::embed_patches(&mut tape, patches, var("patch.weight")?, var("patch.pos")?)?;
        let mut mask = self.mask_node(&mut tape, p, &var)?;
        if let (Some(tau), true) = (cfg.banded_tau, capture) {
            let band = tape.constant(masks::band_mask(p, tau)?.to_tensor());
            mask = tape.add(mask, band)?;
        }

        let mut x = embedded;
        let mut traces = Vec::new();
        let mut band = BandStats::default();
        for l in 0..cfg.layers {
            let names = |kind: &str| -> Result<Vec<Var>> {
                (0..cfg.heads).map(|h| var(&format!("layers.{l}.attn.{kind}.{h}"))).collect()
            };
            let vars = AttentionVars {
                wq: names("wq")?,
                wk: names("wk")?,
                wv: names("wv")?,
                wo: var(&format!("layers.{l}.attn.wo"))?,
                head_dim: cfg.head_dim(),
            };
            let attended = match cfg.banded_tau {
                Some(tau) if !capture => attention::banded_block(&mut tape, x, &vars, mask, tau, &mut band)?,
                _ => {
                    let out = attention::wcmha_forward(&mut tape, x, &vars, mask, l, capture)?;
                    traces.extend(out.traces);
                    out.output
                }
            };
            let attended = dropout_node(&mut tape, attended, cfg.dropout, dropout.as_deref_mut())?;
            let res = tape.add(x, attended)?;
            let x1 = tape.layer_norm(
                res,
                var(&format!("layers.{l}.norm1.gamma"))?,
                var(&format!("layers.{l}.norm1.beta"))?,
                LAYER_NORM_EPS,
            )?;
            let hidden = tape.matmul(x1, var(&format!("layers.{l}.ff.w1"))?)?;
            let hidden = tape.add_bias(hidden, var(&format!("layers.{l}.ff.b1"))?)?;
            let hidden = tape.gelu(hidden);
            let hidden = dropout_node(&mut tape, hidden, cfg.dropout, dropout.as_deref_mut())?;
            let ff = tape.matmul(hidden, var(&format!("layers.{l}.ff.w2"))?)?;
            let ff = tape.add_bias(ff, var(&format!("layers.{l}.ff.b2"))?)?;
            let ff = dropout_node(&mut tape, ff, cfg.dropout, dropout.as_deref_mut())?;
            let res = tape.add(x1, ff)?;
            x = tape.layer_norm(
                res,
                var(&format!("layers.{l}.norm2.gamma"))?,
                var(&format!("layers.{l}.norm2.beta"))?,
                LAYER_NORM_EPS,
            )?;
        }

        let flat = tape.reshape(x, vec![b, p * n])?;
        let flat = dropout_node(&mut tape, flat, cfg.head_dropout, dropout)?;
        let out = tape.matmul(flat, var("head.weight")?)?;
        let out = tape.add_bias(out, var("head.bias")?)?;
        let forecast = tape.row_affine(
            out,
            stats.iter().map(|s| s.std).collect(),
            stats.iter().map(|s| s.mean).collect(),
        )?;
        Ok(Graph {
            tape,
            forecast,
            params,
            traces,
            stats,
            band,
            embedded,
        })
    }

    fn mask_node(&self, tape: &mut Tape, p: usize, var: &dyn Fn(&str) -> Result<Var>) -> Result<Var> {
        let spec = self.config.mask;
        if !spec.learnable {
            let m = self.masks.get(&spec, p)?;
            return Ok(tape.constant(m.to_tensor()));
        }
        let alpha_var = var("mask.alpha")?;
        let current = spec.with_alpha(tape.value(alpha_var).item());
        let mask = masks::combined_mask(&current, p)?;
        let dvalue = masks::render_alpha_derivative(&current, p);
        tape.parametric(alpha_var, mask.to_tensor(), dvalue)
    }

    /// Forecasts a `channels x seq_len` block in evaluation mode.
    pub fn forward(&self, batch: &[Vec<f64>], capture: bool) -> Result<(Forecast, Vec<AttentionTrace>)> {
        let windows: Vec<&[f64]> = batch.iter().map(Vec::as_slice).collect();
        let g = self.build(&windows, None, capture)?;
        let channels = g
            .forecast_values()
            .chunks(self.config.pred_len)
            .map(<[f64]>::to_vec)
            .collect();
        Ok((Forecast { channels }, g.traces))
    }
}

fn dropout_node(tape: &mut Tape, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let factors = (0..tape.value(x).len())
                .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                .collect();
            tape.mul_const(x, factors)
        }
        _ => Ok(x),
    }
}

/// Aggregate forecast errors.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

/// Running sums for [`Metrics`] over many batches.
#[derive(Debug, Clone, Copy, Default)]
pub struct MetricsAccumulator {
    sum_sq: f64,
    sum_abs: f64,
    count: usize,
}

impl MetricsAccumulator {
    pub fn add(&mut self, pred: &[f64], target: &[f64]) -> Result<()> {
        if pred.len() != target.len() {
            return Err(Error::shape("metrics", &[pred.len()], &[target.len()]));
        }
        for (p, t) in pred.iter().zip(target) {
            let d = p - t;
            self.sum_sq += d * d;
            self.sum_abs += d.abs();
        }
        self.count += pred.len();
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.count == 0 {
            return Err(Error::Empty("metrics over zero values".into()));
        }
        let n = self.count as f64;
        Ok(Metrics {
            mse: self.sum_sq / n,
            mae: self.sum_abs / n,
        })
    }
}

/// Mean squared and mean absolute error over every element.
pub fn metrics(pred: &[f64], target: &[f64]) -> Result<Metrics> {
    let mut acc = MetricsAccumulator::default();
    acc.add(pred, target)?;
    acc.finish()
}

pub fn loss_mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    Ok(metrics(pred, target)?.mse)
}
