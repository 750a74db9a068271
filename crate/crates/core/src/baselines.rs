//! Reference predictors: the normalized trace itself, and moving-average
//! smoothing followed by the inverse of an exponential calcium kernel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest value a raw-trace prediction may take.
pub const RAW_FLOOR: f64 = 1e-8;

/// Low-pass cutoffs (Hz) searched by the harness.
pub const DECONV_CUTOFFS_HZ: [f64; 11] = [1.0, 2.0, 3.0, 5.0, 7.0, 10.0, 15.0, 20.0, 30.0, 50.0, 100.0];
/// Decay constants (s) searched by the harness.
pub const DECONV_TAUS_S: [f64; 6] = [0.05, 0.1, 0.25, 0.5, 1.0, 2.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeconvConfig {
    pub smooth_cutoff_hz: f64,
    pub tau_s: f64,
    pub nonneg_clip: bool,
}

impl Default for DeconvConfig {
    fn default() -> Self {
        DeconvConfig {
            smooth_cutoff_hz: 5.0,
            tau_s: 0.5,
            nonneg_clip: true,
        }
    }
}

impl DeconvConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.smooth_cutoff_hz > 0.0 && self.smooth_cutoff_hz.is_finite())
            || !(self.tau_s > 0.0 && self.tau_s.is_finite())
        {
            return Err(Error::InvalidInput(format!(
                "deconvolution cutoff and tau must be positive, got {} Hz and {} s",
                self.smooth_cutoff_hz, self.tau_s
            )));
        }
        Ok(())
    }

    /// Moving-average width in bins at `bin_rate_hz`.
    pub fn smoothing_width(&self, bin_rate_hz: f64) -> usize {
        ((bin_rate_hz / self.smooth_cutoff_hz).round() as usize).max(1)
    }
}

/// Every cutoff/tau combination of the search grid, clipping on.
pub fn deconv_grid() -> Vec<DeconvConfig> {
    DECONV_CUTOFFS_HZ
        .iter()
        .flat_map(|&c| {
            DECONV_TAUS_S.iter().map(move |&t| DeconvConfig {
                smooth_cutoff_hz: c,
                tau_s: t,
                nonneg_clip: true,
            })
        })
        .collect()
}

/// The normalized trace, shifted up when needed so every value is at least
/// [`RAW_FLOOR`].
pub fn raw_predict(normalized: &[f64]) -> Vec<f64> {
    let min = normalized.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = if min < RAW_FLOOR { RAW_FLOOR - min } else { 0.0 };
    normalized.iter().map(|v| v + shift).collect()
}

/// Centered moving average; the trace is extended by repeating its end values.
pub fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let n = x.len();
    if width <= 1 || n == 0 {
        return x.to_vec();
    }
    let left = width / 2;
    let at = |i: isize| x[i.clamp(0, n as isize - 1) as usize];
    let mut sum: f64 = (0..width).map(|j| at(j as isize - left as isize)).sum();
    let mut out = Vec::with_capacity(n);
    out.push(sum / width as f64);
    for t in 1..n {
        let t = t as isize;
        sum += at(t - left as isize + width as isize - 1) - at(t - left as isize - 1);
        out.push(sum / width as f64);
    }
    out
}

/// Inverse of the first-order filter `y_t = d y_{t-1} + s_t`, `y_{-1} = 0`.
pub fn inverse_exponential(y: &[f64], decay: f64) -> Vec<f64> {
    let mut prev = 0.0;
    y.iter()
        .map(|&v| {
            let s = v - decay * prev;
            prev = v;
            s
        })
        .collect()
}

/// Forward exponential filter, the inverse of [`inverse_exponential`].
pub fn convolve_exponential(s: &[f64], decay: f64) -> Vec<f64> {
    let mut y = 0.0;
    s.iter()
        .map(|&v| {
            y = decay * y + v;
            y
        })
        .collect()
}

pub fn deconvolve(normalized: &[f64], bin_rate_hz: f64, cfg: &DeconvConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !(bin_rate_hz > 0.0) {
        return Err(Error::InvalidInput(format!("nonpositive bin rate {bin_rate_hz}")));
    }
    let smoothed = moving_average(normalized, cfg.smoothing_width(bin_rate_hz));
    let decay = (-1.0 / (bin_rate_hz * cfg.tau_s)).exp();
    let mut s = inverse_exponential(&smoothed, decay);
    if cfg.nonneg_clip {
        s.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(s)
}
