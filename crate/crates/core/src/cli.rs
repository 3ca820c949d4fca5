//! Config files, run manifests and the subcommands behind the
//! `powerformer` binary.
//!
//! # Config grammar
//!
//! One `key = value` pair per line. Blank lines and text after `#` are
//! ignored; keys are case-sensitive and may appear once. Values are bare
//! (no quotes); lists are comma separated.
//!
//! ```text
//! # hourly ETT with a weight power-law mask
//! preset    = etth1
//! dataset   = data/ETTh1.csv
//! seq_len   = 336
//! pred_len  = 96
//! mask      = pl
//! alpha     = 0.5
//! seeds     = 2021, 1776
//! ```
//!
//! Resolution order: preset defaults, then the file, then command-line flags.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis;
use crate::data::{self, RawDataset, Synthetic};
use crate::error::{Error, Result};
use crate::masks::{self, MaskFamily, MaskSpec};
use crate::model::{Checkpoint, ModelConfig, Powerformer};
use crate::training::{self, TrainConfig, TrainData};

/// Every key accepted in config files and `--set`.
pub const KEYS: [&str; 33] = [
    "preset",
    "dataset",
    "synthetic",
    "synthetic_len",
    "synthetic_seed",
    "out_dir",
    "seq_len",
    "pred_len",
    "patch_len",
    "stride",
    "layers",
    "embed_width",
    "heads",
    "ff_width",
    "dropout",
    "head_dropout",
    "mask",
    "alpha",
    "order",
    "critical_time",
    "learnable",
    "banded_tau",
    "epochs",
    "patience",
    "lr",
    "batch_size",
    "seeds",
    "seed",
    "alpha_lr",
    "alpha_lr_decay",
    "drift_cap",
    "window_stride",
    "eval_stride",
];

fn config_err(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

/// Parses the flat `key = value` grammar.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| config_err(line, format!("line {}: expected `key = value`", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(config_err(k, format!("line {}: empty key or value", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(config_err(k, format!("line {}: duplicate key", n + 1)));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub fn read_config(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err("config", format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Where the series comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Csv { path: PathBuf },
    Synthetic { generator: Synthetic, len: usize, seed: u64 },
}

impl DataSource {
    pub fn load(&self) -> Result<RawDataset> {
        match self {
            Self::Csv { path } => {
                if !path.exists() {
                    return Err(Error::Data(format!("dataset not found: {}", path.display())));
                }
                data::load_csv(path)
            }
            Self::Synthetic { generator, len, seed } => Ok(generator.generate(*len, *seed)),
        }
    }
}

/// A fully resolved run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub data: DataSource,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| config_err(key, format!("cannot parse `{v}`")))
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    match v {
        "none" | "-" | "off" => Ok(None),
        _ => parse(key, v).map(Some),
    }
}

impl RunConfig {
    /// Applies `layers` in order; later layers win.
    pub fn resolve(layers: &[&[(String, String)]]) -> Result<Self> {
        let mut merged: BTreeMap<String, String> = BTreeMap::new();
        for layer in layers {
            for (k, v) in layer.iter() {
                if !KEYS.contains(&k.as_str()) {
                    return Err(config_err(k, "unknown key"));
                }
                merged.insert(k.clone(), v.clone());
            }
        }
        let get = |k: &str| merged.get(k).map(String::as_str);
        let preset = get("preset").unwrap_or("etth1").to_ascii_lowercase();
        let seq_len = get("seq_len").map(|v| parse("seq_len", v)).transpose()?.unwrap_or(336);
        let pred_len = get("pred_len").map(|v| parse("pred_len", v)).transpose()?.unwrap_or(96);
        let mut model = ModelConfig::preset(&preset, seq_len, pred_len)?;
        let mut train = TrainConfig::preset(&preset)?;

        let data = match (get("dataset"), get("synthetic")) {
            (Some(_), Some(_)) => return Err(config_err("synthetic", "set either `dataset` or `synthetic`, not both")),
            (Some(p), None) => DataSource::Csv { path: PathBuf::from(p) },
            (None, Some(g)) => DataSource::Synthetic {
                generator: g.parse()?,
                len: get("synthetic_len").map(|v| parse("synthetic_len", v)).transpose()?.unwrap_or(4000),
                seed: get("synthetic_seed").map(|v| parse("synthetic_seed", v)).transpose()?.unwrap_or(7),
            },
            (None, None) => return Err(config_err("dataset", "no `dataset` path or `synthetic` generator given")),
        };
        let out_dir = PathBuf::from(get("out_dir").unwrap_or("runs"));

        for (k, v) in &merged {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "patch_len" => model.patch_len = parse(k, v)?,
                "stride" => model.stride = parse(k, v)?,
                "layers" => model.layers = parse(k, v)?,
                "embed_width" => model.embed_width = parse(k, v)?,
                "heads" => model.heads = parse(k, v)?,
                "ff_width" => model.ff_width = parse(k, v)?,
                "dropout" => model.dropout = parse(k, v)?,
                "head_dropout" => model.head_dropout = parse(k, v)?,
                "banded_tau" => model.banded_tau = parse_opt(k, v)?,
                "epochs" => train.epochs = parse(k, v)?,
                "patience" => train.patience = parse_opt(k, v)?,
                "lr" => train.lr = parse(k, v)?,
                "batch_size" => train.batch_size = parse(k, v)?,
                "alpha_lr" => train.alpha_lr = parse(k, v)?,
                "alpha_lr_decay" => train.alpha_lr_decay = parse(k, v)?,
                "drift_cap" => train.drift_cap = parse_opt(k, v)?,
                "window_stride" => train.window_stride = parse(k, v)?,
                "eval_stride" => train.eval_stride = parse(k, v)?,
                "seeds" => {
                    train.seeds = v
                        .split(',')
                        .map(|s| parse("seeds", s.trim()))
                        .collect::<Result<_>>()?
                }
                _ => {}
            }
        }
        if let Some(v) = get("seed") {
            train.seeds = vec![parse("seed", v)?];
        }
        model.seed = train.seeds.first().copied().unwrap_or(model.seed);
        model.mask = resolve_mask(&merged, model.mask)?;
        model.validate()?;
        train.validate()?;
        Ok(Self {
            preset,
            data,
            out_dir,
            model,
            train,
        })
    }

    /// Hash of everything but the seeds.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.model.seed = 0;
        c.train.seeds.clear();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        Sha256::digest(json).iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out_dir.join(format!("{}-{seed}", self.hash()))
    }
}

fn resolve_mask(map: &BTreeMap<String, String>, base: MaskSpec) -> Result<MaskSpec> {
    let get = |k: &str| map.get(k).map(String::as_str);
    let mut spec = match get("mask") {
        None => base,
        Some(v) => match v.parse::<MaskFamily>() {
            Ok(MaskFamily::None) => MaskSpec::none(),
            Ok(MaskFamily::WeightPowerLaw) => MaskSpec::weight_power_law(base.alpha),
            Ok(MaskFamily::SimilarityPowerLaw) => MaskSpec::similarity_power_law(base.alpha),
            Ok(MaskFamily::Butterworth) => MaskSpec::butterworth(2, 10.0),
            Err(_) => v.parse::<MaskSpec>()?,
        },
    };
    if let Some(v) = get("alpha") {
        spec.alpha = parse("alpha", v)?;
    }
    if let Some(v) = get("order") {
        spec.order = parse("order", v)?;
    }
    if let Some(v) = get("critical_time") {
        spec.critical_time = parse("critical_time", v)?;
    }
    if let Some(v) = get("learnable") {
        spec.learnable = parse("learnable", v)?;
    }
    spec.validate().map_err(|e| config_err("mask", e.to_string()))?;
    Ok(spec)
}

/// Paths written for one run, relative to the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint: String,
    pub record: String,
    pub manifest: String,
}

impl Default for Artifacts {
    fn default() -> Self {
        Self {
            checkpoint: "checkpoint.bin".into(),
            record: "run_record.json".into(),
            manifest: "manifest.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub timestamp: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: RunConfig,
    pub artifacts: Artifacts,
}

impl RunManifest {
    pub fn new(config: &RunConfig, seed: u64) -> Self {
        let mut config = config.clone();
        config.model.seed = seed;
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            seed,
            config_hash: config.hash(),
            config,
            artifacts: Artifacts::default(),
        }
    }

    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Process exit status for an error: 1 configuration, 2 data or missing
/// artifacts, 3 divergence.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } | Error::Shape { .. } | Error::Contract(_) => 1,
        Error::Divergence { .. } => 3,
        _ => 2,
    }
}

#[derive(Debug, Parser)]
#[command(name = "powerformer", version, about = "Decay-masked attention forecaster")]
pub struct Cli {
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per seed and write checkpoints, records and manifests.
    Train(TrainArgs),
    /// Aggregate run records into the results table.
    Evaluate(EvaluateArgs),
    /// Histogram attention scores and weights of a trained run.
    Analyze(AnalyzeArgs),
    /// Lag autocorrelation of every channel.
    Autocorr(AutocorrArgs),
    /// Print a rendered mask.
    MaskDump(MaskDumpArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub preset: Option<String>,
    /// CSV with a leading date column.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Synthetic generator: sine_mixture, ar1, sine_trend, white_noise.
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Mask family (none, pl, spl, bw) or a label such as `pl_0.5`.
    #[arg(long)]
    pub mask: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Overrides {
    pub fn pairs(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("preset", self.preset.clone());
        push("dataset", self.dataset.as_ref().map(|p| p.display().to_string()));
        push("synthetic", self.synthetic.clone());
        push("seed", self.seed.map(|v| v.to_string()));
        push("mask", self.mask.clone());
        push("alpha", self.alpha.map(|v| v.to_string()));
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("out_dir", self.out_dir.as_ref().map(|p| p.display().to_string()));
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| config_err(s, "expected --set key=value"))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory holding run directories.
    #[arg(long)]
    pub runs: PathBuf,
    /// Table CSV; defaults to `<runs>/metrics.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub bins: usize,
    /// Output directory; defaults to `<run>/analysis`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AutocorrArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long, default_value_t = 4000)]
    pub len: usize,
    #[arg(long, default_value_t = 200)]
    pub max_lag: usize,
    /// CSV path; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MaskDumpArgs {
    /// Mask family (none, pl, spl, bw) or a label such as `bw2_10`.
    #[arg(long, default_value = "pl")]
    pub mask: String,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub order: Option<usize>,
    #[arg(long)]
    pub critical_time: Option<f64>,
    /// Number of patch tokens.
    #[arg(long, short = 'p')]
    pub size: usize,
    /// Write the per-lag profile instead of the full matrix.
    #[arg(long)]
    pub profile: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| Error::io(p, e))?),
        None => Box::new(std::io::stdout().lock()),
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&a),
        Command::Analyze(a) => cmd_analyze(&a).map(|_| ()),
        Command::Autocorr(a) => cmd_autocorr(&a),
        Command::MaskDump(a) => cmd_mask_dump(&a),
    }
}

/// Trains every seed and returns the run directories.
pub fn cmd_train(args: &TrainArgs) -> Result<Vec<PathBuf>> {
    let file = match &args.config {
        Some(p) => read_config(p)?,
        None => Vec::new(),
    };
    let cli = args.overrides.pairs()?;
    let config = RunConfig::resolve(&[&file, &cli])?;
    let ds = config.data.load()?;
    let data = TrainData::from_dataset(&ds, config.model.seq_len, config.model.pred_len, &config.train)?;
    let mut dirs = Vec::new();
    for &seed in &config.train.seeds {
        let (model, mut record) = training::train(&config.model, &config.train, &data, seed)?;
        let dir = config.run_dir(seed);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let manifest = RunManifest::new(&config, seed);
        record.checkpoint = Some(manifest.artifacts.checkpoint.clone());
        model.checkpoint(record.steps).save(&dir.join(&manifest.artifacts.checkpoint))?;
        write_file(&dir.join(&manifest.artifacts.record), serde_json::to_string_pretty(&record)?.as_bytes())?;
        write_file(&dir.join(&manifest.artifacts.manifest), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        println!(
            "{} seed {seed}: test mse {:.6} mae {:.6} (best epoch {}) -> {}",
            record.mask_label(),
            record.test.mse,
            record.test.mae,
            record.best_epoch,
            dir.display()
        );
        dirs.push(dir);
    }
    Ok(dirs)
}

/// Run records under `root`, one per subdirectory; each must keep its checkpoint.
pub fn load_records(root: &Path) -> Result<Vec<training::RunRecord>> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("run_record.json").is_file())
        .collect();
    dirs.sort();
    let mut records = Vec::new();
    for dir in dirs {
        let path = dir.join("run_record.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let record: training::RunRecord = serde_json::from_str(&text)?;
        let ckpt = dir.join(record.checkpoint.as_deref().unwrap_or("checkpoint.bin"));
        if !ckpt.is_file() {
            return Err(Error::Data(format!("missing checkpoint {}", ckpt.display())));
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Data(format!("no run records under {}", root.display())));
    }
    Ok(records)
}

/// Grid spanned by the records of each dataset.
fn inferred_grid(records: &[training::RunRecord]) -> training::ProtocolGrid {
    let mut seq: Vec<usize> = records.iter().map(|r| r.model.seq_len).collect();
    let mut pred: Vec<usize> = records.iter().map(|r| r.model.pred_len).collect();
    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    let mut masks: Vec<MaskSpec> = Vec::new();
    for r in records {
        if !masks.iter().any(|m| m.label() == r.mask_label()) {
            masks.push(r.model.mask);
        }
    }
    for v in [&mut seq, &mut pred] {
        v.sort_unstable();
        v.dedup();
    }
    seeds.sort_unstable();
    seeds.dedup();
    training::ProtocolGrid {
        seq_lens: seq,
        pred_lens: pred,
        masks,
        seeds,
    }
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let records = load_records(&args.runs)?;
    let grid = inferred_grid(&records);
    let report = training::evaluate_protocol(&records, Some(&grid))?;
    for m in &report.missing {
        eprintln!("missing run: {m}");
    }
    let out = args.out.clone().unwrap_or_else(|| args.runs.join("metrics.csv"));
    training::write_table_csv(&report.table, output(Some(&out))?)?;
    let grid_path = out.with_file_name("grid.csv");
    training::write_grid_csv(&report.rows, output(Some(&grid_path))?)?;
    let mut summary = String::new();
    for r in &report.table {
        let _ = writeln!(
            summary,
            "{} T_pred={} T_seq={} {}: mse {:.4} ± {:.4}, mae {:.4} ± {:.4} ({} seeds)",
            r.dataset, r.pred_len, r.seq_len, r.mask, r.mse, r.mse_std, r.mae, r.mae_std, r.seeds
        );
    }
    print!("{summary}");
    println!("wrote {} and {}", out.display(), grid_path.display());
    Ok(())
}

/// Writes histograms for the test split of a trained run.
pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<analysis::AnalysisManifest> {
    let manifest = RunManifest::load(&args.run)?;
    let model = Powerformer::from_checkpoint(Checkpoint::load(&args.run.join(&manifest.artifacts.checkpoint))?)?;
    let cfg = &manifest.config;
    let ds = cfg.data.load()?;
    let data = TrainData::from_dataset(&ds, model.config.seq_len, model.config.pred_len, &cfg.train)?;
    let dist = analysis::collect_distributions(&model, &data.test, args.bins, cfg.train.batch_size)?;
    let out = args.out.clone().unwrap_or_else(|| args.run.join("analysis"));
    let report = analysis::write_distributions(&out, &dist)?;
    for m in report.modes.iter().filter(|m| m.tag.ends_with("/all")) {
        println!("{}: {} mode(s), bimodal={}", m.tag, m.modes.len(), m.bimodal);
    }
    println!("mask effect (total variation) {:.4}; wrote {}", report.mask_effect_tv, out.display());
    Ok(report)
}

pub fn cmd_autocorr(args: &AutocorrArgs) -> Result<()> {
    let source = match (&args.dataset, &args.synthetic) {
        (Some(p), None) => DataSource::Csv { path: p.clone() },
        (None, Some(g)) => DataSource::Synthetic {
            generator: g.parse()?,
            len: args.len,
            seed: 7,
        },
        _ => return Err(config_err("dataset", "give exactly one of --dataset or --synthetic")),
    };
    let ds = source.load()?;
    let curves = data::autocorrelation_by_lag(&ds, args.max_lag)?;
    data::write_autocorr_csv(&ds.channel_names, &curves, output(args.out.as_deref())?)
}

pub fn mask_spec_from_args(args: &MaskDumpArgs) -> Result<MaskSpec> {
    let map: BTreeMap<String, String> = [
        Some(("mask", args.mask.clone())),
        args.alpha.map(|v| ("alpha", v.to_string())),
        args.order.map(|v| ("order", v.to_string())),
        args.critical_time.map(|v| ("critical_time", v.to_string())),
    ]
    .into_iter()
    .flatten()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    resolve_mask(&map, MaskSpec::weight_power_law(1.0))
}

pub fn cmd_mask_dump(args: &MaskDumpArgs) -> Result<()> {
    let spec = mask_spec_from_args(args)?;
    let out = output(args.out.as_deref())?;
    if args.profile {
        masks::write_profile_csv(&spec, args.size, out)
    } else {
        masks::combined_mask(&spec, args.size)?.write_csv(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(items: &[(&str, &str)]) -> Vec<(String, String)> {
        items.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn grammar() {
        let p = parse_config("# comment\n\npreset = ettm1  # trailing\nseeds = 1, 2\n").unwrap();
        assert_eq!(p, pairs(&[("preset", "ettm1"), ("seeds", "1, 2")]));
        assert!(matches!(parse_config("oops"), Err(Error::Config { .. })));
        match parse_config("lr = 1\nlr = 2") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "lr"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn precedence_flag_over_file_over_preset() {
        let file = pairs(&[("synthetic", "sine"), ("mask", "spl"), ("alpha", "0.25"), ("epochs", "7")]);
        let cli = pairs(&[("mask", "pl"), ("alpha", "1.0"), ("seed", "2021")]);
        let c = RunConfig::resolve(&[&file, &cli]).unwrap();
        assert_eq!(c.model.mask, MaskSpec::weight_power_law(1.0));
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.seeds, vec![2021]);
        // untouched keys keep preset values
        assert_eq!(c.model.embed_width, 16);
        assert_eq!(c.train.batch_size, 128);
    }

    #[test]
    fn errors_name_the_key() {
        let bad = |items: &[(&str, &str)]| match RunConfig::resolve(&[&pairs(items)]) {
            Err(Error::Config { key, .. }) => key,
            other => panic!("{other:?}"),
        };
        assert_eq!(bad(&[("synthetic", "sine"), ("heads", "three")]), "heads");
        assert_eq!(bad(&[("synthetic", "sine"), ("colour", "red")]), "colour");
        assert_eq!(bad(&[("preset", "etth1")]), "dataset");
        assert_eq!(bad(&[("synthetic", "sine"), ("mask", "bw"), ("learnable", "true")]), "mask");
    }

    #[test]
    fn hash_ignores_seed_and_output() {
        let a = RunConfig::resolve(&[&pairs(&[("synthetic", "sine"), ("seed", "1")])]).unwrap();
        let b = RunConfig::resolve(&[&pairs(&[("synthetic", "sine"), ("seed", "2"), ("out_dir", "x")])]).unwrap();
        assert_eq!(a.hash(), b.hash());
        assert!(a.run_dir(1).ends_with(format!("{}-1", a.hash())));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&config_err("k", "r")), 1);
        assert_eq!(exit_code(&Error::Data("x".into())), 2);
        assert_eq!(
            exit_code(&Error::Divergence {
                epoch: 1,
                step: 0,
                detail: String::new()
            }),
            3
        );
    }
}
