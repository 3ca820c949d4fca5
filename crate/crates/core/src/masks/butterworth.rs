//! Digital lowpass Butterworth design and the lag-domain gain curve built
//! from its frequency response.
//!
//! Design path: analog prototype poles, prewarped cutoff, bilinear transform
//! to `(b, a)` polynomials, then `H(e^{iw})` on a 512-point grid over
//! `[0, pi)`. The grid is mapped to lags with `t = t_c * w / 2` and the
//! score contribution is `5 * ln|H|`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// Nyquist-normalized cutoff used for every mask.
pub const CUTOFF: f64 = 0.8;
/// Number of frequency samples, matching the usual `freqz` default.
pub const GRID_POINTS: usize = 512;
/// Multiplier applied to `ln|H|`.
pub const GAIN_SCALE: f64 = 5.0;

/// Transfer function coefficients in powers of `z^-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DigitalFilter {
    pub b: Vec<f64>,
    pub a: Vec<f64>,
}

impl DigitalFilter {
    /// `H(e^{iw})`.
    pub fn response(&self, w: f64) -> Complex64 {
        let eval = |coeffs: &[f64]| {
            coeffs
                .iter()
                .enumerate()
                .map(|(m, c)| Complex64::from_polar(*c, -w * m as f64))
                .sum::<Complex64>()
        };
        eval(&self.b) / eval(&self.a)
    }
}

fn poly_from_roots(roots: &[Complex64]) -> Vec<Complex64> {
    let mut coeffs = vec![Complex64::new(1.0, 0.0)];
    for r in roots {
        let mut next = vec![Complex64::new(0.0, 0.0); coeffs.len() + 1];
        for (i, c) in coeffs.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c * r;
        }
        coeffs = next;
    }
    coeffs
}

/// Designs an order-`order` digital lowpass with Nyquist-normalized `cutoff`.
pub fn design_lowpass(order: usize, cutoff: f64) -> Result<DigitalFilter> {
    if order == 0 {
        return Err(Error::contract("Butterworth order must be positive"));
    }
    if !(cutoff > 0.0 && cutoff < 1.0) {
        return Err(Error::contract(format!("cutoff {cutoff} outside (0, 1)")));
    }
    let n = order as f64;
    // sampling rate 2 so that the Nyquist frequency is 1
    let fs = 2.0;
    let warped = 2.0 * fs * (PI * cutoff / fs).tan();

    let analog_poles: Vec<Complex64> = (1..=order)
        .map(|k| Complex64::from_polar(1.0, PI * (2.0 * k as f64 + n - 1.0) / (2.0 * n)) * warped)
        .collect();
    let analog_gain = warped.powi(order as i32);

    let fs2 = 2.0 * fs;
    let poles: Vec<Complex64> = analog_poles.iter().map(|p| (fs2 + p) / (fs2 - p)).collect();
    let zeros = vec![Complex64::new(-1.0, 0.0); order];
    let denom: Complex64 = analog_poles.iter().map(|p| fs2 - p).product();
    let gain = analog_gain * (Complex64::new(1.0, 0.0) / denom).re;

    let b = poly_from_roots(&zeros).iter().map(|c| gain * c.re).collect();
    let a = poly_from_roots(&poles).iter().map(|c| c.re).collect();
    Ok(DigitalFilter { b, a })
}

/// Frequencies `pi * k / GRID_POINTS` for `k` in `0..GRID_POINTS`.
pub fn frequency_grid() -> Vec<f64> {
    (0..GRID_POINTS).map(|k| PI * k as f64 / GRID_POINTS as f64).collect()
}

/// Gain curve sampled on the lag axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GainCurve {
    pub time: Vec<f64>,
    pub gain: Vec<f64>,
}

impl GainCurve {
    pub fn new(order: usize, critical_time: f64) -> Result<Self> {
        check_params(order, critical_time)?;
        let filter = design_lowpass(order, CUTOFF)?;
        let grid = frequency_grid();
        let time = grid.iter().map(|w| critical_time * w / 2.0).collect();
        let gain = grid.iter().map(|w| GAIN_SCALE * filter.response(*w).norm().ln()).collect();
        Ok(Self { time, gain })
    }

    /// Linear interpolation on the lag axis; flat beyond the last sample.
    pub fn interpolate(&self, lag: f64) -> f64 {
        let last = self.time.len() - 1;
        if lag >= self.time[last] {
            return self.gain[last];
        }
        if lag <= self.time[0] {
            return self.gain[0];
        }
        let hi = self.time.partition_point(|t| *t <= lag);
        let lo = hi - 1;
        let frac = (lag - self.time[lo]) / (self.time[hi] - self.time[lo]);
        self.gain[lo] + frac * (self.gain[hi] - self.gain[lo])
    }
}

fn check_params(order: usize, critical_time: f64) -> Result<()> {
    if !(1..=2).contains(&order) {
        return Err(Error::contract(format!("Butterworth order {order} not in {{1, 2}}")));
    }
    if !critical_time.is_finite() || critical_time <= 0.0 {
        return Err(Error::contract(format!("critical time {critical_time} must be positive")));
    }
    Ok(())
}

/// Score contributions at the requested lags.
pub fn butterworth_gain(order: usize, critical_time: f64, lags: &[f64]) -> Result<Vec<f64>> {
    let curve = GainCurve::new(order, critical_time)?;
    Ok(lags.iter().map(|l| curve.interpolate(*l)).collect())
}

/// Score contribution evaluated directly from the filter response at
/// `w = 2 * lag / t_c`, without the sampled grid.
pub fn butterworth_gain_exact(order: usize, critical_time: f64, lag: f64) -> Result<f64> {
    check_params(order, critical_time)?;
    let filter = design_lowpass(order, CUTOFF)?;
    let w = (2.0 * lag / critical_time).min(PI);
    Ok(GAIN_SCALE * filter.response(w).norm().ln())
}

/// Lag at which the response crosses the half-power point.
pub fn cutoff_lag(critical_time: f64) -> f64 {
    critical_time * CUTOFF * PI / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc_gain_is_exactly_zero() {
        for order in [1, 2] {
            for tc in [2.0, 5.0, 10.0, 15.0, 20.0] {
                assert_eq!(butterworth_gain(order, tc, &[0.0]).unwrap()[0], 0.0);
            }
        }
    }

    #[test]
    fn half_power_at_cutoff() {
        let expected = GAIN_SCALE * (1.0 / 2f64.sqrt()).ln();
        for order in [1, 2] {
            let g = butterworth_gain_exact(order, 10.0, cutoff_lag(10.0)).unwrap();
            assert!((g - expected).abs() < 1e-9, "{g}");
        }
    }

    #[test]
    fn curve_is_non_increasing() {
        for order in [1, 2] {
            let c = GainCurve::new(order, 7.0).unwrap();
            assert!(c.gain.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(butterworth_gain(3, 10.0, &[1.0]).is_err());
        assert!(butterworth_gain(1, 0.0, &[1.0]).is_err());
        assert!(butterworth_gain(0, 1.0, &[1.0]).is_err());
    }

    #[test]
    fn flat_extrapolation_past_grid() {
        let c = GainCurve::new(2, 2.0).unwrap();
        let last = *c.gain.last().unwrap();
        assert_eq!(c.interpolate(100.0), last);
    }
}
