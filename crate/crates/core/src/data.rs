//! Dataset ingestion, chronological splits, global standardization,
//! supervised windows, lag autocorrelation and seeded synthetic series.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::STD_FLOOR;

/// Per-step phase noise of the sine mixture; makes its autocorrelation decay.
const PHASE_DIFFUSION: f64 = 0.01;

const TIMESTAMP_COLUMNS: [&str; 3] = ["date", "time", "timestamp"];

/// A multivariate series stored channel by channel.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDataset {
    pub name: String,
    pub channel_names: Vec<String>,
    pub timestamps: Option<Vec<String>>,
    /// `channels[c][t]`.
    pub channels: Vec<Vec<f64>>,
}

impl RawDataset {
    pub fn from_channels(name: &str, channels: Vec<Vec<f64>>) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        if channels.is_empty() || len == 0 {
            return Err(Error::Empty(format!("dataset `{name}` has no values")));
        }
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::Data(format!("dataset `{name}` has ragged channels")));
        }
        Ok(Self {
            name: name.to_string(),
            channel_names: (0..channels.len()).map(|c| format!("ch{c}")).collect(),
            timestamps: None,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.channels.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// `(rows, channels)`.
    pub fn shape(&self) -> (usize, usize) {
        (self.len(), self.num_channels())
    }
}

/// Reads a headed CSV. A leading `date`-like column is kept as text; every
/// other column must parse as a number.
pub fn load_csv(path: impl AsRef<Path>) -> Result<RawDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Empty(format!("{}: no header row", path.display())));
    }
    let has_time = TIMESTAMP_COLUMNS.contains(&header[0].to_ascii_lowercase().as_str());
    let first = usize::from(has_time);
    let names = header[first..].to_vec();
    if names.is_empty() {
        return Err(Error::Data(format!("{}: no numeric columns", path.display())));
    }

    let mut channels = vec![Vec::new(); names.len()];
    let mut stamps = Vec::new();
    let mut first_bad: Option<Error> = None;
    let mut bad_rows = 0usize;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        // row numbers are 1-based and count the header
        let row = r + 2;
        if has_time {
            stamps.push(record.get(0).unwrap_or_default().to_string());
        }
        let mut row_bad = false;
        for (c, name) in names.iter().enumerate() {
            let column = c + first;
            let cell = record.get(column).map(str::trim).unwrap_or("");
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => channels[c].push(v),
                parsed => {
                    row_bad = true;
                    if first_bad.is_none() {
                        let reason = match parsed {
                            _ if cell.is_empty() => "missing value".to_string(),
                            Ok(_) => format!("non-finite value `{cell}`"),
                            Err(_) => format!("cannot parse `{cell}`"),
                        };
                        first_bad = Some(Error::Cell {
                            path: path.to_path_buf(),
                            row,
                            column: column + 1,
                            name: name.clone(),
                            reason,
                        });
                    }
                }
            }
        }
        bad_rows += usize::from(row_bad);
    }
    if let Some(Error::Cell { path, row, column, name, reason }) = first_bad {
        return Err(Error::Cell {
            path,
            row,
            column,
            name,
            reason: format!("{reason}; {bad_rows} row(s) rejected"),
        });
    }
    if channels[0].is_empty() {
        return Err(Error::Empty(format!("{}: no data rows", path.display())));
    }
    let name = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    log::info!("loaded {}: {} rows x {} channels", path.display(), channels[0].len(), names.len());
    Ok(RawDataset {
        name,
        channel_names: names,
        timestamps: has_time.then_some(stamps),
        channels,
    })
}

/// Chronological borders. Validation and test ranges start `seq_len` steps
/// before their first target so that every window has full look-back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

/// Hours in the 12/4/4 month split of the hourly ETT sets.
const ETT_MONTH_HOURS: usize = 30 * 24;

impl SplitSpec {
    fn ett(seq_len: usize, steps_per_hour: usize) -> Self {
        let m = ETT_MONTH_HOURS * steps_per_hour;
        let (a, b, c) = (12 * m, 16 * m, 20 * m);
        Self {
            train: 0..a,
            val: a.saturating_sub(seq_len)..b,
            test: b.saturating_sub(seq_len)..c,
        }
    }

    /// 8640/2880/2880 hourly steps.
    pub fn ett_hourly(seq_len: usize) -> Self {
        Self::ett(seq_len, 1)
    }

    /// The hourly borders at 15-minute resolution.
    pub fn ett_minute(seq_len: usize) -> Self {
        Self::ett(seq_len, 4)
    }

    /// Chronological fractions; the test share takes the remainder.
    pub fn ratio(len: usize, seq_len: usize, train: f64, test: f64) -> Result<Self> {
        if !(train > 0.0 && test > 0.0 && train + test < 1.0) {
            return Err(Error::contract(format!("invalid split fractions {train}/{test}")));
        }
        let n_train = (len as f64 * train) as usize;
        let n_test = (len as f64 * test) as usize;
        let spec = Self {
            train: 0..n_train,
            val: n_train.saturating_sub(seq_len)..len - n_test,
            test: (len - n_test).saturating_sub(seq_len)..len,
        };
        spec.validate(len)?;
        Ok(spec)
    }

    /// ETT borders for `etth*`/`ettm*` names, otherwise 70/10/20.
    pub fn for_dataset(name: &str, len: usize, seq_len: usize) -> Result<Self> {
        let lower = name.to_ascii_lowercase();
        let spec = if lower.starts_with("etth") {
            Self::ett_hourly(seq_len)
        } else if lower.starts_with("ettm") {
            Self::ett_minute(seq_len)
        } else {
            return Self::ratio(len, seq_len, 0.7, 0.2);
        };
        spec.validate(len)?;
        Ok(spec)
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        let ranges = [&self.train, &self.val, &self.test];
        if ranges.iter().any(|r| r.start >= r.end) {
            return Err(Error::Data(format!("empty split in {self:?}")));
        }
        if self.test.end > len {
            return Err(Error::Data(format!(
                "split ends at {} but the series has {len} steps",
                self.test.end
            )));
        }
        if self.val.end > self.test.end || self.train.end > self.val.end {
            return Err(Error::Data(format!("split borders out of order: {self:?}")));
        }
        Ok(())
    }
}

/// Per-channel train-split statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GlobalStats {
    pub fn standardize(&self, channel: usize, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| (v - self.mean[channel]) / self.std[channel]).collect()
    }

    pub fn destandardize(&self, channel: usize, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| v * self.std[channel] + self.mean[channel]).collect()
    }
}

/// A standardized split: `channels[c]` covers `range` of the raw series.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub range: Range<usize>,
    pub channels: Vec<Vec<f64>>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.range.len()
    }

    pub fn is_empty(&self) -> bool {
        self.range.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub stats: GlobalStats,
}

/// Standardizes every split with statistics of the training range only.
pub fn split_and_standardize(ds: &RawDataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate(ds.len())?;
    if spec.train.len() < 2 {
        return Err(Error::Data(format!(
            "training split has {} step(s); at least 2 are needed",
            spec.train.len()
        )));
    }
    let mut stats = GlobalStats {
        mean: Vec::new(),
        std: Vec::new(),
    };
    for ch in &ds.channels {
        let train = &ch[spec.train.clone()];
        let n = train.len() as f64;
        let mean = train.iter().sum::<f64>() / n;
        let var = train.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        stats.mean.push(mean);
        stats.std.push(var.sqrt().max(STD_FLOOR));
    }
    let cut = |range: &Range<usize>| Split {
        range: range.clone(),
        channels: ds
            .channels
            .iter()
            .enumerate()
            .map(|(c, ch)| stats.standardize(c, &ch[range.clone()]))
            .collect(),
    };
    Ok(Splits {
        train: cut(&spec.train),
        val: cut(&spec.val),
        test: cut(&spec.test),
        stats,
    })
}

/// Supervised `(look-back, horizon)` pairs over one split, channel by channel.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    channels: Vec<Vec<f64>>,
    pub seq_len: usize,
    pub pred_len: usize,
    /// `(start, channel)` with start relative to the split.
    pub index: Vec<(usize, usize)>,
}

/// Windows per channel for a split of `len` steps.
pub fn window_count(len: usize, seq_len: usize, pred_len: usize) -> usize {
    (len + 1).saturating_sub(seq_len + pred_len)
}

impl WindowedDataset {
    pub fn new(split: &Split, seq_len: usize, pred_len: usize) -> Result<Self> {
        Self::with_stride(split, seq_len, pred_len, 1)
    }

    /// Keeps every `stride`-th window start.
    pub fn with_stride(split: &Split, seq_len: usize, pred_len: usize, stride: usize) -> Result<Self> {
        if stride == 0 || seq_len == 0 || pred_len == 0 {
            return Err(Error::contract("window lengths and stride must be positive"));
        }
        let per_channel = window_count(split.len(), seq_len, pred_len);
        if per_channel == 0 {
            return Err(Error::Data(format!(
                "split of {} steps is shorter than look-back {seq_len} plus horizon {pred_len}",
                split.len()
            )));
        }
        let index = (0..split.channels.len())
            .flat_map(|c| (0..per_channel).step_by(stride).map(move |s| (s, c)))
            .collect();
        Ok(Self {
            channels: split.channels.clone(),
            seq_len,
            pred_len,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    /// Look-back and horizon slices of example `i`.
    pub fn example(&self, i: usize) -> (&[f64], &[f64]) {
        let (start, c) = self.index[i];
        let ch = &self.channels[c];
        let mid = start + self.seq_len;
        (&ch[start..mid], &ch[mid..mid + self.pred_len])
    }
}

/// Pearson correlation of two equal-length slices; NaN when either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        f64::NAN
    } else {
        sab / (saa * sbb).sqrt()
    }
}

/// `result[c][lag]` is the correlation between `x[t]` and `x[t + lag]`.
pub fn autocorrelation_by_lag(ds: &RawDataset, max_lag: usize) -> Result<Vec<Vec<f64>>> {
    let len = ds.len();
    if max_lag + 1 >= len {
        return Err(Error::contract(format!(
            "max lag {max_lag} needs at least {} steps, series has {len}",
            max_lag + 2
        )));
    }
    Ok(ds
        .channels
        .iter()
        .map(|x| (0..=max_lag).map(|l| pearson(&x[..len - l], &x[l..])).collect())
        .collect())
}

/// Columns `channel, lag, correlation`.
pub fn write_autocorr_csv<W: Write>(names: &[String], curves: &[Vec<f64>], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["channel", "lag", "correlation"])?;
    for (name, curve) in names.iter().zip(curves) {
        for (lag, r) in curve.iter().enumerate() {
            w.write_record([name.clone(), lag.to_string(), r.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Writes channels to a CSV with a leading `date` column of step indices.
pub fn write_csv<W: Write>(ds: &RawDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["date".to_string()];
    header.extend(ds.channel_names.iter().cloned());
    w.write_record(&header)?;
    for t in 0..ds.len() {
        let stamp = ds
            .timestamps
            .as_ref()
            .map_or_else(|| t.to_string(), |s| s[t].clone());
        let mut row = vec![stamp];
        row.extend(ds.channels.iter().map(|c| c[t].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Seeded synthetic series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Synthetic {
    /// Three channels of phase-diffusing sinusoid mixtures plus AR(1) noise.
    SineMixture,
    /// One AR(1) channel with coefficient 0.9.
    Ar1,
    /// A daily sinusoid riding on a linear trend.
    SineTrend,
    /// Independent standard normal draws.
    WhiteNoise,
}

impl std::str::FromStr for Synthetic {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine_mixture" | "sine" => Ok(Self::SineMixture),
            "ar1" => Ok(Self::Ar1),
            "sine_trend" => Ok(Self::SineTrend),
            "white_noise" | "noise" => Ok(Self::WhiteNoise),
            other => Err(Error::Config {
                key: "synthetic".into(),
                reason: format!("unknown generator `{other}`"),
            }),
        }
    }
}

impl Synthetic {
    pub fn name(self) -> &'static str {
        match self {
            Self::SineMixture => "sine_mixture",
            Self::Ar1 => "ar1",
            Self::SineTrend => "sine_trend",
            Self::WhiteNoise => "white_noise",
        }
    }

    pub fn generate(self, len: usize, seed: u64) -> RawDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut noise = move || normal.sample(&mut rng);
        let tau = std::f64::consts::TAU;
        let channels = match self {
            Self::SineMixture => {
                // (amplitude, period) pairs per channel
                let mixes: [[(f64, f64); 2]; 3] = [
                    [(1.0, 24.0), (0.5, 12.0)],
                    [(1.0, 48.0), (0.3, 8.0)],
                    [(0.8, 32.0), (0.6, 16.0)],
                ];
                mixes
                    .iter()
                    .enumerate()
                    .map(|(c, mix)| {
                        let mut phase = [c as f64 * 0.7, c as f64 * 1.3];
                        let mut ar = 0.0;
                        (0..len)
                            .map(|_| {
                                let mut v = 0.0;
                                for (ph, (a, p)) in phase.iter_mut().zip(mix) {
                                    v += a * ph.sin();
                                    *ph += tau / p + PHASE_DIFFUSION * noise();
                                }
                                ar = 0.95 * ar + 0.03 * noise();
                                v + ar
                            })
                            .collect()
                    })
                    .collect()
            }
            Self::Ar1 => {
                let mut x = 0.0;
                vec![(0..len)
                    .map(|_| {
                        x = 0.9 * x + noise();
                        x
                    })
                    .collect()]
            }
            Self::SineTrend => vec![(0..len)
                .map(|t| {
                    let t = t as f64;
                    (tau * t / 24.0).sin() + 0.001 * t + 0.05 * noise()
                })
                .collect()],
            Self::WhiteNoise => vec![(0..len).map(|_| noise()).collect()],
        };
        let mut ds = RawDataset::from_channels(self.name(), channels).expect("non-empty");
        ds.name = self.name().to_string();
        ds
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_small_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "tiny.csv", "date,a,b\n2020-01-01,1,2\n2020-01-02,3,4\n2020-01-03,5,6.5\n");
        let ds = load_csv(&p).unwrap();
        assert_eq!(ds.shape(), (3, 2));
        assert_eq!(ds.channels[1], vec![2.0, 4.0, 6.5]);
        assert_eq!(ds.timestamps.unwrap()[2], "2020-01-03");
    }

    #[test]
    fn blank_cell_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "gap.csv", "date,a,b\n1,1,2\n2,,4\n3,5,\n");
        match load_csv(&p) {
            Err(Error::Cell { row, column, name, reason, .. }) => {
                assert_eq!((row, column, name.as_str()), (3, 2, "a"));
                assert!(reason.contains("2 row(s)"), "{reason}");
            }
            other => panic!("expected a cell error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_csv(write(&dir, "empty.csv", "")).is_err());
        assert!(load_csv(write(&dir, "header.csv", "date,a\n")).is_err());
    }

    #[test]
    fn ett_borders() {
        let s = SplitSpec::ett_hourly(336);
        assert_eq!((s.train.len(), s.val.end - s.train.end, s.test.end - s.val.end), (8640, 2880, 2880));
        assert_eq!(s.val.start, 8640 - 336);
        assert_eq!(SplitSpec::ett_minute(96).test.end, 4 * 14400);
        assert!(SplitSpec::for_dataset("ETTh1", 17420, 336).is_ok());
        assert!(SplitSpec::for_dataset("ETTh1", 1000, 336).is_err());
    }

    #[test]
    fn ratio_split_covers_series() {
        let s = SplitSpec::ratio(1000, 50, 0.7, 0.2).unwrap();
        assert_eq!(s.train, 0..700);
        assert_eq!(s.val, 650..800);
        assert_eq!(s.test, 750..1000);
    }

    #[test]
    fn standardization_uses_train_statistics() {
        let ds = Synthetic::SineTrend.generate(2000, 3);
        let spec = SplitSpec::ratio(2000, 96, 0.7, 0.2).unwrap();
        let s = split_and_standardize(&ds, &spec).unwrap();
        let t = &s.train.channels[0];
        let n = t.len() as f64;
        let mean = t.iter().sum::<f64>() / n;
        let std = (t.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-10 && (std - 1.0).abs() < 1e-10);
        // the trend pushes later splits above the training mean
        assert!(s.test.channels[0].iter().sum::<f64>() > 0.0);
    }

    #[test]
    fn constant_channel_collapses_to_zero() {
        let ds = RawDataset::from_channels("c", vec![vec![4.0; 100]]).unwrap();
        let s = split_and_standardize(&ds, &SplitSpec::ratio(100, 10, 0.7, 0.2).unwrap()).unwrap();
        assert_eq!(s.stats.std[0], STD_FLOOR);
        assert!(s.val.channels[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_stats_leave_values_alone() {
        let stats = GlobalStats { mean: vec![0.0], std: vec![1.0] };
        assert_eq!(stats.standardize(0, &[1.5, -2.0]), vec![1.5, -2.0]);
    }

    #[test]
    fn window_counts_match_closed_form() {
        let ds = Synthetic::SineMixture.generate(600, 1);
        let spec = SplitSpec::ratio(600, 48, 0.7, 0.2).unwrap();
        let s = split_and_standardize(&ds, &spec).unwrap();
        for split in [&s.train, &s.val, &s.test] {
            let w = WindowedDataset::new(split, 48, 12).unwrap();
            assert_eq!(w.len(), 3 * (split.len() - 48 - 12 + 1));
            for i in 0..w.len() {
                let (start, _) = w.index[i];
                assert!(split.range.start + start + 60 <= split.range.end);
            }
        }
        let strided = WindowedDataset::with_stride(&s.train, 48, 12, 10).unwrap();
        assert_eq!(strided.len(), 3 * (420usize - 59).div_ceil(10));
    }

    #[test]
    fn no_label_crosses_validation_border() {
        let spec = SplitSpec::ratio(1000, 40, 0.7, 0.2).unwrap();
        let last_label = spec.train.start + window_count(spec.train.len(), 40, 10) - 1 + 50;
        assert!(last_label <= spec.train.end);
        assert!(spec.test.end <= 1000);
    }

    #[test]
    fn autocorrelation_of_sine() {
        let x: Vec<f64> = (0..2400).map(|t| (std::f64::consts::TAU * t as f64 / 24.0).sin()).collect();
        let ds = RawDataset::from_channels("sine", vec![x]).unwrap();
        let r = &autocorrelation_by_lag(&ds, 48).unwrap()[0];
        assert!((r[0] - 1.0).abs() < 1e-12);
        assert!(r[24] > 0.999 && r[12] < -0.999);
        assert!(autocorrelation_by_lag(&ds, 2399).is_err());
    }

    #[test]
    fn white_noise_is_uncorrelated() {
        let ds = Synthetic::WhiteNoise.generate(10_000, 7);
        let r = &autocorrelation_by_lag(&ds, 50).unwrap()[0];
        assert!(r[1..].iter().all(|v| v.abs() < 0.1));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Synthetic::SineMixture.generate(50, 2);
        let p = dir.path().join("sine.csv");
        write_csv(&ds, std::fs::File::create(&p).unwrap()).unwrap();
        let back = load_csv(&p).unwrap();
        assert_eq!(back.channels, ds.channels);
    }

    #[test]
    fn generators_are_seeded() {
        for g in [Synthetic::SineMixture, Synthetic::Ar1, Synthetic::SineTrend, Synthetic::WhiteNoise] {
            assert_eq!(g.generate(64, 9), g.generate(64, 9));
            assert_ne!(g.generate(64, 9).channels, g.generate(64, 10).channels);
        }
    }
}
