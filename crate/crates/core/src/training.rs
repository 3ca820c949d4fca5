//! Mini-batch training with early stopping, the learnable decay-constant
//! mode, multi-seed runs and the benchmark evaluation protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{RawDataset, SplitSpec, Splits, WindowedDataset};
use crate::error::{Error, Result};
use crate::masks::{MaskSpec, MIN_ALPHA};
use crate::model::{Metrics, MetricsAccumulator, ModelConfig, Powerformer};
use crate::tensor::{Adam, AdamConfig, Tensor};

/// Seeds used for every reported configuration.
pub const SEEDS: [u64; 3] = [2021, 1776, 1953];
/// Forecast horizons of the benchmark protocol.
pub const PRED_LENS: [usize; 4] = [96, 192, 336, 720];
/// Look-back windows of the benchmark protocol.
pub const SEQ_LENS: [usize; 2] = [336, 512];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: Option<usize>,
    pub lr: f64,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Initial learning rate of the decay constant.
    pub alpha_lr: f64,
    /// Per-epoch multiplier on `alpha_lr`.
    pub alpha_lr_decay: f64,
    /// Largest allowed `|alpha - alpha_0|`; defaults to half of `alpha_0`.
    pub drift_cap: Option<f64>,
    /// Keep every n-th training window.
    pub window_stride: usize,
    /// Keep every n-th validation and test window.
    pub eval_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            patience: None,
            lr: 1e-4,
            batch_size: 128,
            seeds: SEEDS.to_vec(),
            alpha_lr: 1e-2,
            alpha_lr_decay: 0.9,
            drift_cap: None,
            window_stride: 1,
            eval_stride: 1,
        }
    }
}

impl TrainConfig {
    /// Per-dataset patience and batch size.
    pub fn preset(name: &str) -> Result<Self> {
        let (patience, batch_size) = match name.to_ascii_lowercase().as_str() {
            "etth1" | "etth2" => (None, 128),
            "ettm1" | "ettm2" | "weather" => (Some(20), 128),
            "electricity" => (Some(10), 32),
            "traffic" => (Some(10), 24),
            other => {
                return Err(Error::Config {
                    key: "preset".into(),
                    reason: format!("unknown preset `{other}`"),
                })
            }
        };
        Ok(Self {
            patience,
            batch_size,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be a finite non-negative number");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.patience == Some(0) {
            return bad("patience", "must be at least 1 when set");
        }
        if self.seeds.is_empty() {
            return bad("seeds", "at least one seed is required");
        }
        if self.window_stride == 0 || self.eval_stride == 0 {
            return bad("window_stride", "strides must be at least 1");
        }
        if self.alpha_lr.is_nan() || self.alpha_lr < 0.0 || !(0.0..=1.0).contains(&self.alpha_lr_decay) {
            return bad("alpha_lr", "learning rate and decay must be non-negative, decay at most 1");
        }
        if self.drift_cap.is_some_and(|c| c.is_nan() || c < 0.0) {
            return bad("drift_cap", "must be non-negative");
        }
        Ok(())
    }
}

/// Short hash identifying a run configuration independent of its seed.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let mut m = model.clone();
    m.seed = 0;
    let mut t = train.clone();
    t.seeds.clear();
    let json = serde_json::to_vec(&(m, t)).expect("configs serialize");
    Sha256::digest(json).iter().take(6).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub dataset: String,
    pub config_hash: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub epochs: Vec<EpochLog>,
    /// One-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val: f64,
    /// Fingerprint of the restored parameters.
    pub best_params: String,
    pub checkpoint: Option<String>,
    pub stopped_early: bool,
    pub test: Metrics,
    pub steps: u64,
    /// Decay constant at the start and after each epoch.
    pub alpha_trajectory: Vec<f64>,
}

impl RunRecord {
    pub fn mask_label(&self) -> String {
        self.model.mask.label()
    }
}

/// Train, validation and test windows of one dataset.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub name: String,
    pub train: WindowedDataset,
    pub val: WindowedDataset,
    pub test: WindowedDataset,
}

impl TrainData {
    pub fn new(name: &str, splits: &Splits, seq_len: usize, pred_len: usize, cfg: &TrainConfig) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            train: WindowedDataset::with_stride(&splits.train, seq_len, pred_len, cfg.window_stride)?,
            val: WindowedDataset::with_stride(&splits.val, seq_len, pred_len, cfg.eval_stride)?,
            test: WindowedDataset::with_stride(&splits.test, seq_len, pred_len, cfg.eval_stride)?,
        })
    }

    /// Standardizes `ds` with its conventional split and windows it.
    pub fn from_dataset(ds: &RawDataset, seq_len: usize, pred_len: usize, cfg: &TrainConfig) -> Result<Self> {
        let spec = SplitSpec::for_dataset(&ds.name, ds.len(), seq_len)?;
        let splits = crate::data::split_and_standardize(ds, &spec)?;
        Self::new(&ds.name, &splits, seq_len, pred_len, cfg)
    }
}

/// Validation-driven stopping rule.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: Option<usize>,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: Option<usize>) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Feeds the validation loss of one-based `epoch`.
    pub fn update(&mut self, epoch: usize, val: f64) -> Verdict {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.stale = 0;
            return Verdict::Improved;
        }
        self.stale += 1;
        match self.patience {
            Some(p) if self.stale >= p => Verdict::Stop,
            _ => Verdict::Continue,
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

/// Adam on the decay constant with a decaying learning rate and a hard
/// bound on the distance from the initial value.
#[derive(Debug, Clone)]
pub struct AlphaController {
    pub alpha0: f64,
    pub cap: f64,
    adam: Adam,
    decay: f64,
    pub floor_hits: usize,
}

impl AlphaController {
    pub fn new(alpha0: f64, cfg: &TrainConfig) -> Self {
        Self {
            alpha0,
            cap: cfg.drift_cap.unwrap_or(0.5 * alpha0),
            adam: Adam::new(AdamConfig {
                lr: cfg.alpha_lr,
                ..AdamConfig::default()
            }),
            decay: cfg.alpha_lr_decay,
            floor_hits: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.adam.config.lr
    }

    /// Applies one gradient step and returns the clamped value.
    pub fn step(&mut self, alpha: f64, grad: f64) -> Result<f64> {
        let mut t = [Tensor::vector(vec![alpha])];
        self.adam.step(&mut t, &[vec![grad]])?;
        let moved = t[0].item();
        let mut next = moved.clamp(self.alpha0 - self.cap, self.alpha0 + self.cap);
        if next < MIN_ALPHA {
            if self.floor_hits == 0 {
                log::warn!("decay constant driven to {next:.4}; clamping at {MIN_ALPHA}");
            }
            self.floor_hits += 1;
            next = MIN_ALPHA;
        }
        Ok(next)
    }

    pub fn end_epoch(&mut self) {
        self.adam.config.lr *= self.decay;
    }
}

/// Mean squared and absolute error over a windowed split, in its units.
pub fn evaluate(model: &Powerformer, data: &WindowedDataset, batch_size: usize) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation over zero windows".into()));
    }
    let mut acc = MetricsAccumulator::default();
    let order: Vec<usize> = (0..data.len()).collect();
    for chunk in order.chunks(batch_size.max(1)) {
        let (xs, ys): (Vec<&[f64]>, Vec<&[f64]>) = chunk.iter().map(|&i| data.example(i)).unzip();
        let g = model.build(&xs, None, false)?;
        let target: Vec<f64> = ys.concat();
        acc.add(g.forecast_values(), &target)?;
    }
    acc.finish()
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 32) | epoch as u64);
    rng
}

/// Trains one seed and returns the best-validation model with its record.
///
/// `model_cfg.seed` is replaced by `seed`. When the mask is learnable, the
/// decay constant is optimized by an [`AlphaController`].
pub fn train(model_cfg: &ModelConfig, cfg: &TrainConfig, data: &TrainData, seed: u64) -> Result<(Powerformer, RunRecord)> {
    let model_cfg = ModelConfig {
        seed,
        ..model_cfg.clone()
    };
    train_model(Powerformer::new(model_cfg)?, cfg, data)
}

/// Continues training an existing model; shuffling and dropout are seeded
/// from `model.config.seed`.
pub fn train_model(mut model: Powerformer, cfg: &TrainConfig, data: &TrainData) -> Result<(Powerformer, RunRecord)> {
    cfg.validate()?;
    let model_cfg = model.config.clone();
    let seed = model_cfg.seed;
    if data.train.is_empty() {
        return Err(Error::Empty("no training windows".into()));
    }
    if data.train.seq_len != model_cfg.seq_len || data.train.pred_len != model_cfg.pred_len {
        return Err(Error::shape(
            "train windows",
            &[data.train.seq_len, data.train.pred_len],
            &[model_cfg.seq_len, model_cfg.pred_len],
        ));
    }

    let alpha_index = model.params.index_of("mask.alpha");
    let mut alpha_ctl = alpha_index.map(|_| AlphaController::new(model.alpha(), cfg));
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params.clone();
    let mut epochs = Vec::new();
    let mut trajectory = vec![model.alpha()];
    let mut stopped_early = false;
    let mut step = 0usize;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut epoch_rng(seed, epoch, 0));
        let mut dropout_rng = epoch_rng(seed, epoch, 1);
        let (mut loss_sum, mut count) = (0.0, 0usize);

        for chunk in order.chunks(cfg.batch_size) {
            let (xs, ys): (Vec<&[f64]>, Vec<&[f64]>) = chunk.iter().map(|&i| data.train.example(i)).unzip();
            let mut g = model.build(&xs, Some(&mut dropout_rng), false)?;
            let target = Tensor::new(vec![chunk.len(), model_cfg.pred_len], ys.concat())?;
            let loss_var = g.tape.mse(g.forecast, &target)?;
            let loss = g.tape.value(loss_var).item();
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("loss is {loss}"),
                });
            }
            g.tape.backward(loss_var)?;
            let mut grads = g.param_grads();
            if grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: "non-finite gradient".into(),
                });
            }
            let alpha_grad = alpha_index.map(|i| grads.remove(i)[0]);
            let mut tensors: Vec<Tensor> = model
                .params
                .tensors_mut()
                .enumerate()
                .filter(|(i, _)| Some(*i) != alpha_index)
                .map(|(_, t)| std::mem::replace(t, Tensor::zeros(&[0])))
                .collect();
            adam.step(&mut tensors, &grads)?;
            let mut updated = tensors.into_iter();
            for (i, slot) in model.params.tensors_mut().enumerate() {
                if Some(i) != alpha_index {
                    *slot = updated.next().expect("one tensor per slot");
                }
            }
            if let (Some(ctl), Some(grad)) = (alpha_ctl.as_mut(), alpha_grad) {
                let next = ctl.step(model.alpha(), grad)?;
                model.params.insert("mask.alpha", Tensor::vector(vec![next]));
            }
            loss_sum += loss * chunk.len() as f64;
            count += chunk.len();
            step += 1;
        }
        if let Some(ctl) = alpha_ctl.as_mut() {
            ctl.end_epoch();
        }

        let val = evaluate(&model, &data.val, cfg.batch_size)?.mse;
        if !val.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step,
                detail: format!("validation loss is {val}"),
            });
        }
        let alpha = alpha_index.map(|_| model.alpha());
        trajectory.extend(alpha);
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / count as f64,
            val_loss: val,
            alpha,
        });
        log::debug!("seed {seed} epoch {epoch}: train {:.5} val {val:.5}", loss_sum / count as f64);
        match stopper.update(epoch, val) {
            Verdict::Improved => best_params = model.params.clone(),
            Verdict::Continue => {}
            Verdict::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    model.params = best_params;
    let (best_epoch, best_val) = stopper.best();
    let test = evaluate(&model, &data.test, cfg.batch_size)?;
    let record = RunRecord {
        dataset: data.name.clone(),
        config_hash: config_hash(&model_cfg, cfg),
        seed,
        model: model_cfg,
        train: cfg.clone(),
        epochs,
        best_epoch,
        best_val,
        best_params: model.params.fingerprint(),
        checkpoint: None,
        stopped_early,
        test,
        steps: adam.steps(),
        alpha_trajectory: if alpha_index.is_some() { trajectory } else { Vec::new() },
    };
    Ok((model, record))
}

/// Like [`train`] but requires an alpha-parameterized learnable mask.
pub fn train_learnable_alpha(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainData,
    seed: u64,
) -> Result<(Powerformer, RunRecord)> {
    let m = &model_cfg.mask;
    if !m.learnable || !m.family.has_alpha() {
        return Err(Error::Config {
            key: "mask".into(),
            reason: format!("`{}` is not a learnable power-law mask", m.label()),
        });
    }
    train(model_cfg, cfg, data, seed)
}

/// One line of the results grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub dataset: String,
    pub seq_len: usize,
    pub pred_len: usize,
    pub mask: String,
    pub seeds: usize,
    pub mse: f64,
    pub mse_std: f64,
    pub mae: f64,
    pub mae_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Seed-averaged metrics per (dataset, look-back, horizon, mask).
pub fn aggregate(records: &[RunRecord]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(String, usize, usize, String), Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.dataset.clone(), r.model.seq_len, r.model.pred_len, r.mask_label()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((dataset, seq_len, pred_len, mask), runs)| {
            let (mse, mse_std) = mean_std(&runs.iter().map(|r| r.test.mse).collect::<Vec<_>>());
            let (mae, mae_std) = mean_std(&runs.iter().map(|r| r.test.mae).collect::<Vec<_>>());
            AggregateRow {
                dataset,
                seq_len,
                pred_len,
                mask,
                seeds: runs.len(),
                mse,
                mse_std,
                mae,
                mae_std,
            }
        })
        .collect()
}

/// Best-mask row per horizon for one dataset and look-back.
pub fn select_masks<'a>(rows: &'a [AggregateRow], dataset: &str, seq_len: usize) -> BTreeMap<usize, &'a AggregateRow> {
    let mut best: BTreeMap<usize, &AggregateRow> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.dataset == dataset && r.seq_len == seq_len) {
        let slot = best.entry(r.pred_len).or_insert(r);
        if r.mse < slot.mse {
            *slot = r;
        }
    }
    best
}

/// Look-back whose best-mask MSE, averaged over horizons, is lowest.
pub fn select_seq_len(rows: &[AggregateRow], dataset: &str) -> Option<usize> {
    let seqs: BTreeSet<usize> = rows.iter().filter(|r| r.dataset == dataset).map(|r| r.seq_len).collect();
    seqs.into_iter()
        .map(|s| {
            let best = select_masks(rows, dataset, s);
            let avg = best.values().map(|r| r.mse).sum::<f64>() / best.len() as f64;
            (s, avg)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(s, _)| s)
}

/// Requested combinations of the evaluation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolGrid {
    pub seq_lens: Vec<usize>,
    pub pred_lens: Vec<usize>,
    pub masks: Vec<MaskSpec>,
    pub seeds: Vec<u64>,
}

impl ProtocolGrid {
    pub fn new(masks: Vec<MaskSpec>) -> Self {
        Self {
            seq_lens: SEQ_LENS.to_vec(),
            pred_lens: PRED_LENS.to_vec(),
            masks,
            seeds: SEEDS.to_vec(),
        }
    }

    /// Combinations with no matching record, as `seq/pred/mask/seed` labels.
    pub fn missing(&self, dataset: &str, records: &[RunRecord]) -> Vec<String> {
        let have: BTreeSet<(usize, usize, String, u64)> = records
            .iter()
            .filter(|r| r.dataset == dataset)
            .map(|r| (r.model.seq_len, r.model.pred_len, r.mask_label(), r.seed))
            .collect();
        let mut out = Vec::new();
        for &s in &self.seq_lens {
            for &p in &self.pred_lens {
                for m in &self.masks {
                    for &seed in &self.seeds {
                        if !have.contains(&(s, p, m.label(), seed)) {
                            out.push(format!("seq_len={s} pred_len={p} mask={} seed={seed}", m.label()));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Trains every grid combination on `ds`.
pub fn run_grid(
    ds: &RawDataset,
    base: &ModelConfig,
    cfg: &TrainConfig,
    grid: &ProtocolGrid,
    mut on_record: impl FnMut(&Powerformer, &RunRecord) -> Result<()>,
) -> Result<Vec<RunRecord>> {
    let mut records = Vec::new();
    for &seq_len in &grid.seq_lens {
        for &pred_len in &grid.pred_lens {
            let data = TrainData::from_dataset(ds, seq_len, pred_len, cfg)?;
            for mask in &grid.masks {
                let model_cfg = ModelConfig {
                    seq_len,
                    pred_len,
                    mask: *mask,
                    ..base.clone()
                };
                for &seed in &grid.seeds {
                    let (model, record) = train(&model_cfg, cfg, &data, seed)?;
                    on_record(&model, &record)?;
                    records.push(record);
                }
            }
        }
    }
    Ok(records)
}

/// One row of the published-style table: a dataset and horizon with the
/// selected look-back and mask.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub dataset: String,
    pub pred_len: usize,
    pub seq_len: usize,
    pub mask: String,
    pub seeds: usize,
    pub mse: f64,
    pub mse_std: f64,
    pub mae: f64,
    pub mae_std: f64,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolReport {
    pub rows: Vec<AggregateRow>,
    pub table: Vec<TableRow>,
    pub missing: Vec<String>,
}

/// Aggregates records, applies the selection rules and lists any gaps in `grid`.
pub fn evaluate_protocol(records: &[RunRecord], grid: Option<&ProtocolGrid>) -> Result<ProtocolReport> {
    if records.is_empty() {
        return Err(Error::Empty("no run records to evaluate".into()));
    }
    let rows = aggregate(records);
    let datasets: BTreeSet<&str> = rows.iter().map(|r| r.dataset.as_str()).collect();
    let mut table = Vec::new();
    let mut missing = Vec::new();
    for ds in datasets {
        if let Some(g) = grid {
            missing.extend(g.missing(ds, records).into_iter().map(|m| format!("{ds}: {m}")));
        }
        let seq = select_seq_len(&rows, ds).expect("dataset has rows");
        for (pred_len, r) in select_masks(&rows, ds, seq) {
            table.push(TableRow {
                dataset: ds.to_string(),
                pred_len,
                seq_len: seq,
                mask: r.mask.clone(),
                seeds: r.seeds,
                mse: r.mse,
                mse_std: r.mse_std,
                mae: r.mae,
                mae_std: r.mae_std,
                note: if r.seeds == 1 { "single seed".into() } else { String::new() },
            });
        }
    }
    Ok(ProtocolReport { rows, table, missing })
}

fn write_rows<W: Write, T: Serialize>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Columns `dataset, pred_len, seq_len, mask, seeds, mse, mse_std, mae, mae_std, note`.
pub fn write_table_csv<W: Write>(table: &[TableRow], out: W) -> Result<()> {
    write_rows(table, out)
}

/// Every aggregated grid cell.
pub fn write_grid_csv<W: Write>(rows: &[AggregateRow], out: W) -> Result<()> {
    write_rows(rows, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Synthetic;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            seq_len: 32,
            pred_len: 8,
            patch_len: 8,
            stride: 4,
            layers: 1,
            embed_width: 8,
            heads: 2,
            ff_width: 16,
            dropout: 0.1,
            head_dropout: 0.1,
            mask: MaskSpec::weight_power_law(1.0),
            banded_tau: None,
            seed: 0,
        }
    }

    fn tiny_train() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 16,
            lr: 1e-3,
            window_stride: 8,
            eval_stride: 8,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(cfg: &TrainConfig) -> TrainData {
        let ds = Synthetic::SineMixture.generate(600, 4);
        TrainData::from_dataset(&ds, 32, 8, cfg).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let cfg = TrainConfig { lr: 0.0, epochs: 1, ..tiny_train() };
        let data = tiny_data(&cfg);
        let (model, record) = train(&tiny_model(), &cfg, &data, 5).unwrap();
        let fresh = Powerformer::new(ModelConfig { seed: 5, ..tiny_model() }).unwrap();
        assert_eq!(model.params.fingerprint(), fresh.params.fingerprint());
        assert!(record.steps > 0);
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = tiny_train();
        let data = tiny_data(&cfg);
        let (_, a) = train(&tiny_model(), &cfg, &data, 2021).unwrap();
        let (_, b) = train(&tiny_model(), &cfg, &data, 2021).unwrap();
        assert_eq!(a, b);
        let (_, c) = train(&tiny_model(), &cfg, &data, 1776).unwrap();
        assert_ne!(a.best_params, c.best_params);
    }

    #[test]
    fn stopping_rule() {
        let mut s = EarlyStopping::new(Some(1));
        assert_eq!(s.update(1, 1.0), Verdict::Improved);
        assert_eq!(s.update(2, 1.5), Verdict::Stop);
        let mut s = EarlyStopping::new(None);
        s.update(1, 1.0);
        assert!((2..50).all(|e| s.update(e, 2.0) == Verdict::Continue));
        let mut s = EarlyStopping::new(Some(2));
        s.update(1, 1.0);
        assert_eq!(s.update(2, 1.0), Verdict::Continue);
        assert_eq!(s.update(3, 0.5), Verdict::Improved);
        assert_eq!(s.best(), (3, 0.5));
    }

    #[test]
    fn alpha_controller_respects_cap_and_floor() {
        let cfg = TrainConfig { alpha_lr: 0.5, drift_cap: Some(0.2), ..TrainConfig::default() };
        let mut ctl = AlphaController::new(1.0, &cfg);
        let mut a = 1.0;
        for _ in 0..50 {
            a = ctl.step(a, 10.0).unwrap();
            assert!(a >= 0.8 - 1e-15);
        }
        assert_eq!(a, 0.8);
        let cfg = TrainConfig { alpha_lr: 0.5, drift_cap: Some(5.0), ..TrainConfig::default() };
        let mut ctl = AlphaController::new(0.01, &cfg);
        let a = ctl.step(0.01, 1e6).unwrap();
        assert_eq!(a, MIN_ALPHA);
        assert_eq!(ctl.floor_hits, 1);
        let before = ctl.lr();
        ctl.end_epoch();
        assert!((ctl.lr() - 0.9 * before).abs() < 1e-15);
    }

    #[test]
    fn learnable_mode_needs_power_law() {
        let cfg = tiny_train();
        let data = tiny_data(&cfg);
        assert!(train_learnable_alpha(&tiny_model(), &cfg, &data, 1).is_err());
        let mut m = tiny_model();
        m.mask = MaskSpec::butterworth(2, 5.0);
        assert!(train_learnable_alpha(&m, &cfg, &data, 1).is_err());
    }

    fn record(seq: usize, pred: usize, mask: MaskSpec, seed: u64, mse: f64) -> RunRecord {
        RunRecord {
            dataset: "toy".into(),
            config_hash: String::new(),
            seed,
            model: ModelConfig { seq_len: seq, pred_len: pred, mask, ..ModelConfig::default() },
            train: TrainConfig::default(),
            epochs: Vec::new(),
            best_epoch: 1,
            best_val: 0.0,
            best_params: String::new(),
            checkpoint: None,
            stopped_early: false,
            test: Metrics { mse, mae: mse / 2.0 },
            steps: 0,
            alpha_trajectory: Vec::new(),
        }
    }

    #[test]
    fn single_run_is_flagged() {
        let r = evaluate_protocol(&[record(336, 96, MaskSpec::weight_power_law(1.0), 2021, 0.4)], None).unwrap();
        assert_eq!(r.table.len(), 1);
        assert_eq!(r.table[0].seeds, 1);
        assert_eq!(r.table[0].note, "single seed");
    }

    #[test]
    fn identical_seeds_have_zero_spread() {
        let recs: Vec<_> = SEEDS.iter().map(|&s| record(336, 96, MaskSpec::none(), s, 0.25)).collect();
        let rows = aggregate(&recs);
        assert_eq!(rows.len(), 1);
        assert_eq!((rows[0].mse, rows[0].mse_std, rows[0].seeds), (0.25, 0.0, 3));
    }

    #[test]
    fn mask_selection_is_argmin() {
        let recs = vec![
            record(336, 96, MaskSpec::weight_power_law(0.5), 2021, 0.30),
            record(336, 96, MaskSpec::weight_power_law(1.0), 2021, 0.28),
        ];
        let rows = aggregate(&recs);
        assert_eq!(select_masks(&rows, "toy", 336)[&96].mask, "pl_1");
    }

    #[test]
    fn missing_runs_are_listed() {
        let grid = ProtocolGrid {
            seq_lens: vec![336],
            pred_lens: vec![96, 192],
            masks: vec![MaskSpec::none()],
            seeds: vec![2021],
        };
        let recs = vec![record(336, 96, MaskSpec::none(), 2021, 0.3)];
        let report = evaluate_protocol(&recs, Some(&grid)).unwrap();
        assert_eq!(report.missing, vec!["toy: seq_len=336 pred_len=192 mask=none seed=2021".to_string()]);
        assert!(evaluate_protocol(&[], None).is_err());
    }

    #[test]
    fn config_hash_ignores_seed() {
        let a = tiny_model();
        let b = ModelConfig { seed: 99, ..tiny_model() };
        let t = tiny_train();
        assert_eq!(config_hash(&a, &t), config_hash(&b, &t));
        let c = ModelConfig { mask: MaskSpec::none(), ..tiny_model() };
        assert_ne!(config_hash(&a, &t), config_hash(&c, &t));
    }
}
