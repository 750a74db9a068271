//! Robust linear detrending and percentile normalization of fluorescence.
//!
//! The trend model is `F_t = a t + b + e_t` where the residual `e_t` follows a
//! zero-mean Gaussian scale mixture `sum_k pi_k N(0, sigma_k^2)`. Parameters
//! are fit by expectation-conditional-maximization: the E-step computes
//! component responsibilities, then `(a, b)` are solved by weighted least
//! squares with per-sample precisions `sum_k r_tk / sigma_k^2`, followed by the
//! closed-form weight and scale updates. Each conditional step maximizes the
//! expected complete-data log-likelihood, so the observed log-likelihood never
//! decreases. `t` is the sample index, so the slope is in units per bin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{percentile_sorted, sorted_copy, std_dev};

pub const DEFAULT_COMPONENTS: usize = 3;
pub const MAX_EM_ITERATIONS: usize = 500;
/// Stop once the per-sample log-likelihood improves by less than this.
pub const EM_TOLERANCE: f64 = 1e-8;
pub const LOW_PERCENTILE: f64 = 5.0;
pub const HIGH_PERCENTILE: f64 = 80.0;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetrendFit {
    pub slope_a: f64,
    pub intercept_b: f64,
    pub mixture_weights_pi: Vec<f64>,
    pub mixture_sigmas: Vec<f64>,
    /// Final average log-likelihood per sample.
    pub loglik: f64,
    /// Per-sample log-likelihood at the start of every EM iteration, plus the final value.
    pub loglik_history: Vec<f64>,
    pub iterations: usize,
    /// Set when any scale sits at the lower floor, e.g. for noiseless or constant input.
    pub sigma_floored: bool,
    pub n_samples: usize,
}

/// Weighted least squares line through `(t, y)`; centered for conditioning.
fn weighted_line(y: &[f64], w: &[f64]) -> Option<(f64, f64)> {
    let sw: f64 = w.iter().sum();
    if !(sw > 0.0) {
        return None;
    }
    let t_bar = w.iter().enumerate().map(|(t, wi)| wi * t as f64).sum::<f64>() / sw;
    let y_bar = w.iter().zip(y).map(|(wi, yi)| wi * yi).sum::<f64>() / sw;
    let mut stt = 0.0;
    let mut sty = 0.0;
    for (t, (wi, yi)) in w.iter().zip(y).enumerate() {
        let dt = t as f64 - t_bar;
        stt += wi * dt * dt;
        sty += wi * dt * (yi - y_bar);
    }
    if !(stt > 0.0) {
        return None;
    }
    let a = sty / stt;
    Some((a, y_bar - a * t_bar))
}

/// Log-density of each component at residual `e`, including log weight.
fn component_logs(e: f64, log_pi: &[f64], sigmas: &[f64], out: &mut [f64]) {
    for k in 0..sigmas.len() {
        let z = e / sigmas[k];
        out[k] = log_pi[k] - sigmas[k].ln() - LN_SQRT_2PI - 0.5 * z * z;
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Maximum-likelihood line with Gaussian-scale-mixture residuals.
///
/// Initialization is deterministic: OLS line, scales `{0.5, 1, 2} x` residual
/// std for three components, uniform weights.
pub fn fit_gsm_trend(fluor: &[f64], n_components: usize) -> Result<DetrendFit> {
    let n = fluor.len();
    if n < 10 {
        return Err(Error::InvalidInput(format!(
            "trend fit needs at least 10 samples, got {n}"
        )));
    }
    if n_components < 1 {
        return Err(Error::InvalidInput("n_components must be >= 1".into()));
    }
    if fluor.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite fluorescence".into()));
    }

    let sigma_floor = 1e-6 * (std_dev(fluor) + 1e-12);
    let (mut a, mut b) = weighted_line(fluor, &vec![1.0; n]).expect("n >= 10 gives a nondegenerate design");
    let mut resid: Vec<f64> = (0..n).map(|t| fluor[t] - a * t as f64 - b).collect();
    let resid_std = (resid.iter().map(|e| e * e).sum::<f64>() / n as f64).sqrt();

    let k_count = n_components;
    let mut sigmas: Vec<f64> = (0..k_count)
        .map(|k| {
            let spread = 2f64.powf(k as f64 - (k_count as f64 - 1.0) / 2.0);
            (spread * resid_std).max(sigma_floor)
        })
        .collect();
    let mut pis = vec![1.0 / k_count as f64; k_count];

    let mut resp = vec![0.0; n * k_count];
    let mut logs = vec![0.0; k_count];
    let mut weights = vec![0.0; n];
    let mut history = Vec::new();
    let mut loglik = f64::NEG_INFINITY;
    let mut iterations = 0;

    loop {
        // E-step and log-likelihood at the current parameters
        let log_pi: Vec<f64> = pis.iter().map(|p| p.ln()).collect();
        let mut ll = 0.0;
        for t in 0..n {
            component_logs(resid[t], &log_pi, &sigmas, &mut logs);
            let lse = log_sum_exp(&logs);
            ll += lse;
            for k in 0..k_count {
                resp[t * k_count + k] = (logs[k] - lse).exp();
            }
        }
        let ll = ll / n as f64;
        history.push(ll);
        let improved = ll - loglik;
        loglik = ll;
        if iterations >= MAX_EM_ITERATIONS || (iterations > 0 && improved < EM_TOLERANCE) {
            break;
        }
        iterations += 1;

        // CM-step 1: line given responsibilities and current scales
        for t in 0..n {
            weights[t] = (0..k_count)
                .map(|k| resp[t * k_count + k] / (sigmas[k] * sigmas[k]))
                .sum();
        }
        if let Some((na, nb)) = weighted_line(fluor, &weights) {
            a = na;
            b = nb;
        }
        for t in 0..n {
            resid[t] = fluor[t] - a * t as f64 - b;
        }

        // CM-step 2: weights and scales given the new residuals
        for k in 0..k_count {
            let rk: f64 = (0..n).map(|t| resp[t * k_count + k]).sum();
            pis[k] = rk / n as f64;
            if rk > 0.0 {
                let s2 = (0..n)
                    .map(|t| resp[t * k_count + k] * resid[t] * resid[t])
                    .sum::<f64>()
                    / rk;
                sigmas[k] = s2.sqrt().max(sigma_floor);
            }
        }
        let total: f64 = pis.iter().sum();
        for p in &mut pis {
            *p /= total;
        }
    }

    let sigma_floored = sigmas.iter().any(|&s| s <= sigma_floor * (1.0 + 1e-12));
    if sigma_floored {
        log::debug!("GSM trend fit: scale floor {sigma_floor:e} engaged");
    }
    Ok(DetrendFit {
        slope_a: a,
        intercept_b: b,
        mixture_weights_pi: pis,
        mixture_sigmas: sigmas,
        loglik,
        loglik_history: history,
        iterations,
        sigma_floored,
        n_samples: n,
    })
}

/// `F_t - a t - b`.
pub fn detrend(fluor: &[f64], fit: &DetrendFit) -> Vec<f64> {
    fluor
        .iter()
        .enumerate()
        .map(|(t, f)| f - fit.slope_a * t as f64 - fit.intercept_b)
        .collect()
}

/// Affine map sending the 5th percentile to 0 and the 80th to 1.
pub fn percentile_normalize(fluor: &[f64]) -> Result<Vec<f64>> {
    if fluor.len() < 2 {
        return Err(Error::InvalidInput("normalization needs at least 2 samples".into()));
    }
    let sorted = sorted_copy(fluor);
    let lo = percentile_sorted(&sorted, LOW_PERCENTILE);
    let hi = percentile_sorted(&sorted, HIGH_PERCENTILE);
    let range = hi - lo;
    if !(range > 0.0) {
        return Err(Error::Degenerate("degenerate dynamic range".into()));
    }
    Ok(fluor.iter().map(|f| (f - lo) / range).collect())
}

/// Detrend then normalize, as applied to every trace before feature extraction.
pub fn preprocess_trace(fluor: &[f64]) -> Result<(Vec<f64>, DetrendFit)> {
    let fit = fit_gsm_trend(fluor, DEFAULT_COMPONENTS)?;
    let normalized = percentile_normalize(&detrend(fluor, &fit))?;
    Ok((normalized, fit))
}
