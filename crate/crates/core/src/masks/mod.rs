//! Causal and decay masks added to attention scores.
//!
//! A decay mask places `f(i - j)` at every causal-valid entry `j <= i`, where
//! the lag is measured in patch tokens. All families are non-positive and
//! non-increasing in the lag, and zero on the diagonal.

pub mod butterworth;

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use butterworth::butterworth_gain;

/// Lower bound applied to a learned decay constant.
pub const MIN_ALPHA: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFamily {
    None,
    WeightPowerLaw,
    SimilarityPowerLaw,
    Butterworth,
}

impl MaskFamily {
    pub fn short_name(self) -> &'static str {
        match self {
            MaskFamily::None => "none",
            MaskFamily::WeightPowerLaw => "pl",
            MaskFamily::SimilarityPowerLaw => "spl",
            MaskFamily::Butterworth => "bw",
        }
    }

    pub fn has_alpha(self) -> bool {
        matches!(self, MaskFamily::WeightPowerLaw | MaskFamily::SimilarityPowerLaw)
    }
}

impl FromStr for MaskFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "causal" => Ok(MaskFamily::None),
            "pl" | "weight_power_law" => Ok(MaskFamily::WeightPowerLaw),
            "spl" | "similarity_power_law" => Ok(MaskFamily::SimilarityPowerLaw),
            "bw" | "butterworth" => Ok(MaskFamily::Butterworth),
            other => Err(Error::Config {
                key: "mask".into(),
                reason: format!("unknown mask family `{other}`"),
            }),
        }
    }
}

/// Declarative description of a decay mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub family: MaskFamily,
    /// Decay constant for the power-law families.
    pub alpha: f64,
    /// Butterworth order (1 or 2).
    pub order: usize,
    /// Butterworth critical time in patch-index units.
    pub critical_time: f64,
    /// Train `alpha` alongside the network weights.
    pub learnable: bool,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self::none()
    }
}

impl MaskSpec {
    pub fn none() -> Self {
        Self {
            family: MaskFamily::None,
            alpha: 0.0,
            order: 1,
            critical_time: 1.0,
            learnable: false,
        }
    }

    pub fn weight_power_law(alpha: f64) -> Self {
        Self {
            family: MaskFamily::WeightPowerLaw,
            alpha,
            ..Self::none()
        }
    }

    pub fn similarity_power_law(alpha: f64) -> Self {
        Self {
            family: MaskFamily::SimilarityPowerLaw,
            alpha,
            ..Self::none()
        }
    }

    pub fn butterworth(order: usize, critical_time: f64) -> Self {
        Self {
            family: MaskFamily::Butterworth,
            order,
            critical_time,
            ..Self::none()
        }
    }

    pub fn learnable(mut self) -> Self {
        self.learnable = true;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            MaskFamily::None => {}
            MaskFamily::WeightPowerLaw | MaskFamily::SimilarityPowerLaw => {
                if !self.alpha.is_finite() || self.alpha <= 0.0 {
                    return Err(Error::contract(format!("alpha must be positive, got {}", self.alpha)));
                }
            }
            MaskFamily::Butterworth => {
                if !(1..=2).contains(&self.order) {
                    return Err(Error::contract(format!("Butterworth order {} not in {{1, 2}}", self.order)));
                }
                if self.critical_time.is_nan() || self.critical_time <= 0.0 {
                    return Err(Error::contract(format!(
                        "critical time must be positive, got {}",
                        self.critical_time
                    )));
                }
                if self.learnable {
                    return Err(Error::contract("Butterworth masks are not learnable"));
                }
            }
        }
        Ok(())
    }

    /// Decay contribution at one lag.
    pub fn decay(&self, dt: i64) -> Result<f64> {
        match self.family {
            MaskFamily::None => {
                check_lag(dt)?;
                Ok(0.0)
            }
            MaskFamily::WeightPowerLaw => weight_power_law(dt, self.alpha),
            MaskFamily::SimilarityPowerLaw => similarity_power_law(dt, self.alpha),
            MaskFamily::Butterworth => {
                check_lag(dt)?;
                Ok(butterworth_gain(self.order, self.critical_time, &[dt as f64])?[0])
            }
        }
    }

    /// Short label such as `pl_0.5`, `spl_1`, `bw2_10` or `none`.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for MaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let learn = if self.learnable { "_learn" } else { "" };
        match self.family {
            MaskFamily::None => write!(f, "none"),
            MaskFamily::WeightPowerLaw => write!(f, "pl_{}{learn}", self.alpha),
            MaskFamily::SimilarityPowerLaw => write!(f, "spl_{}{learn}", self.alpha),
            MaskFamily::Butterworth => write!(f, "bw{}_{}", self.order, self.critical_time),
        }
    }
}

impl FromStr for MaskSpec {
    type Err = Error;

    /// Parses the [`fmt::Display`] form back into a spec.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |reason: String| Error::Config {
            key: "mask".into(),
            reason,
        };
        let (s, learnable) = match s.strip_suffix("_learn") {
            Some(rest) => (rest, true),
            None => (s, false),
        };
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad(format!("bad number `{v}` in `{s}`")));
        let spec = if s == "none" {
            MaskSpec::none()
        } else if let Some(a) = s.strip_prefix("pl_") {
            MaskSpec::weight_power_law(num(a)?)
        } else if let Some(a) = s.strip_prefix("spl_") {
            MaskSpec::similarity_power_law(num(a)?)
        } else if let Some(rest) = s.strip_prefix("bw") {
            let (order, tc) = rest
                .split_once('_')
                .ok_or_else(|| bad(format!("expected bw<order>_<t_c>, got `{s}`")))?;
            let order = order.parse().map_err(|_| bad(format!("bad order in `{s}`")))?;
            MaskSpec::butterworth(order, num(tc)?)
        } else {
            return Err(bad(format!("unrecognised mask label `{s}`")));
        };
        let spec = MaskSpec { learnable, ..spec };
        spec.validate()?;
        Ok(spec)
    }
}

fn check_lag(dt: i64) -> Result<()> {
    if dt < 0 {
        return Err(Error::contract(format!("lag must be non-negative, got {dt}")));
    }
    Ok(())
}

/// `-alpha * ln(dt)`, with the self and adjacent lags left at zero.
pub fn weight_power_law(dt: i64, alpha: f64) -> Result<f64> {
    check_lag(dt)?;
    if dt <= 1 {
        return Ok(0.0);
    }
    Ok(-alpha * (dt as f64).ln())
}

/// `-(dt^alpha)`.
pub fn similarity_power_law(dt: i64, alpha: f64) -> Result<f64> {
    check_lag(dt)?;
    if dt == 0 {
        return Ok(0.0);
    }
    Ok(-(dt as f64).powf(alpha))
}

/// Derivative of the decay contribution with respect to `alpha`.
pub fn alpha_derivative(family: MaskFamily, dt: i64, alpha: f64) -> f64 {
    match family {
        MaskFamily::WeightPowerLaw if dt >= 2 => -(dt as f64).ln(),
        MaskFamily::SimilarityPowerLaw if dt >= 2 => {
            let t = dt as f64;
            -t.powf(alpha) * t.ln()
        }
        _ => 0.0,
    }
}

/// Square additive mask over `size` patch tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMask {
    size: usize,
    values: Vec<f64>,
}

impl ScoreMask {
    pub fn from_values(size: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::shape("ScoreMask", &[size, size], &[values.len()]));
        }
        Ok(Self { size, values })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.size, self.size], self.values.clone()).expect("square mask")
    }

    /// Writes `i,j,value` rows; `-inf` is written literally.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["i", "j", "value"])?;
        for i in 0..self.size {
            for j in 0..self.size {
                w.write_record([i.to_string(), j.to_string(), format_score(self.at(i, j))])?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

pub(crate) fn format_score(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v}")
    }
}

/// `-inf` strictly above the diagonal, 0 elsewhere.
pub fn causal_mask(size: usize) -> Result<ScoreMask> {
    if size == 0 {
        return Err(Error::Empty("causal mask over zero tokens".into()));
    }
    let mut values = vec![0.0; size * size];
    for i in 0..size {
        for j in i + 1..size {
            values[i * size + j] = f64::NEG_INFINITY;
        }
    }
    Ok(ScoreMask { size, values })
}

/// `-inf` at lags `>= tau` (inside the causal triangle) and 0 elsewhere.
pub fn band_mask(size: usize, tau: usize) -> Result<ScoreMask> {
    if tau == 0 {
        return Err(Error::contract("band cutoff must be at least 1"));
    }
    if size == 0 {
        return Err(Error::Empty("band mask over zero tokens".into()));
    }
    let mut values = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..=i {
            if i - j >= tau {
                values[i * size + j] = f64::NEG_INFINITY;
            }
        }
    }
    Ok(ScoreMask { size, values })
}

/// Decay contributions `f(i - j)` for `j <= i`; zero above the diagonal.
pub fn render_decay_mask(spec: &MaskSpec, size: usize) -> Result<ScoreMask> {
    if size == 0 {
        return Err(Error::Empty("decay mask over zero tokens".into()));
    }
    spec.validate()?;
    let profile = lag_profile(spec, size)?;
    let mut values = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..=i {
            values[i * size + j] = profile[i - j];
        }
    }
    Ok(ScoreMask { size, values })
}

/// Decay contribution for every lag `0..size`.
pub fn lag_profile(spec: &MaskSpec, size: usize) -> Result<Vec<f64>> {
    spec.validate()?;
    match spec.family {
        MaskFamily::Butterworth => {
            let lags: Vec<f64> = (0..size).map(|l| l as f64).collect();
            butterworth_gain(spec.order, spec.critical_time, &lags)
        }
        _ => (0..size as i64).map(|dt| spec.decay(dt)).collect(),
    }
}

/// `d mask / d alpha` laid out like [`render_decay_mask`].
pub fn render_alpha_derivative(spec: &MaskSpec, size: usize) -> Vec<f64> {
    let mut values = vec![0.0; size * size];
    for i in 0..size {
        for j in 0..=i {
            values[i * size + j] = alpha_derivative(spec.family, (i - j) as i64, spec.alpha);
        }
    }
    values
}

/// Elementwise sum with `-inf` absorbing.
pub fn compose(a: &ScoreMask, b: &ScoreMask) -> Result<ScoreMask> {
    if a.size != b.size {
        return Err(Error::shape("compose", &[a.size, a.size], &[b.size, b.size]));
    }
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| {
            if *x == f64::NEG_INFINITY || *y == f64::NEG_INFINITY {
                f64::NEG_INFINITY
            } else {
                x + y
            }
        })
        .collect();
    Ok(ScoreMask { size: a.size, values })
}

/// Causal mask composed with the rendered decay mask.
pub fn combined_mask(spec: &MaskSpec, size: usize) -> Result<ScoreMask> {
    compose(&causal_mask(size)?, &render_decay_mask(spec, size)?)
}

/// Writes `lag,score,weight_factor` rows for lags `0..size`.
pub fn write_profile_csv<W: Write>(spec: &MaskSpec, size: usize, out: W) -> Result<()> {
    let profile = lag_profile(spec, size)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["lag", "score", "weight_factor"])?;
    for (lag, f) in profile.iter().enumerate() {
        w.write_record([lag.to_string(), format!("{f}"), format!("{}", f.exp())])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct CacheKey {
    family: MaskFamily,
    alpha: u64,
    order: usize,
    critical_time: u64,
    size: usize,
}

/// Memoizes combined masks per `(spec, size)`.
#[derive(Debug, Default)]
pub struct MaskCache {
    entries: Mutex<HashMap<CacheKey, Arc<ScoreMask>>>,
}

impl MaskCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, spec: &MaskSpec, size: usize) -> Result<Arc<ScoreMask>> {
        let key = CacheKey {
            family: spec.family,
            alpha: spec.alpha.to_bits(),
            order: spec.order,
            critical_time: spec.critical_time.to_bits(),
            size,
        };
        if let Some(m) = self.entries.lock().expect("mask cache poisoned").get(&key) {
            return Ok(Arc::clone(m));
        }
        let mask = Arc::new(combined_mask(spec, size)?);
        self.entries
            .lock()
            .expect("mask cache poisoned")
            .insert(key, Arc::clone(&mask));
        Ok(mask)
    }
}
