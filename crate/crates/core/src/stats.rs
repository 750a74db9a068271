//! Small numerical helpers shared across modules.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Standard error of the mean with the sample (n - 1) variance; 0 for n < 2.
pub fn sem(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// `ln(k!)`.
pub fn ln_factorial(k: u32) -> f64 {
    if k < 2 {
        0.0
    } else {
        ln_gamma(k as f64 + 1.0)
    }
}

/// Percentile of already sorted data, interpolating linearly between the
/// closest ranks (`pos = p/100 * (n-1)`).
pub fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if hi == lo {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Ranks (1-based) with ties sharing their average rank. Returned doubled so
/// that half ranks stay integral.
pub(crate) fn doubled_midranks(values: &[f64]) -> Vec<u64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i + 1;
        while j < n && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j, average (i + 1 + j) / 2, doubled
        let r2 = (i + 1 + j) as u64;
        for &idx in &order[i..j] {
            ranks[idx] = r2;
        }
        i = j;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignedRankTest {
    /// Number of nonzero paired differences.
    pub n: usize,
    /// Sum of ranks of positive differences.
    pub w_plus: f64,
    /// One-sided p-value for the alternative "differences tend to be positive".
    pub p_value: f64,
    pub exact: bool,
}

/// Largest sample size evaluated with the exact null distribution.
pub const SIGNED_RANK_EXACT_MAX_N: usize = 25;

/// One-sided Wilcoxon signed-rank test of `diffs > 0`.
///
/// Zero differences are discarded; tied magnitudes get midranks. The exact
/// null distribution (enumerated over sign assignments by dynamic
/// programming) is used for `n <= 25`, a tie-corrected normal approximation
/// with continuity correction above.
pub fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<SignedRankTest> {
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::InvalidInput("non-finite paired difference".into()));
    }
    let nz: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    let n = nz.len();
    if n == 0 {
        return Ok(SignedRankTest {
            n: 0,
            w_plus: 0.0,
            p_value: 1.0,
            exact: true,
        });
    }
    let mags: Vec<f64> = nz.iter().map(|d| d.abs()).collect();
    let ranks2 = doubled_midranks(&mags);
    let w_plus2: u64 = nz
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let w_plus = w_plus2 as f64 / 2.0;

    if n <= SIGNED_RANK_EXACT_MAX_N {
        // counts[s] = number of sign patterns with doubled positive-rank sum s
        let total: u64 = ranks2.iter().sum();
        let mut counts = vec![0f64; total as usize + 1];
        counts[0] = 1.0;
        let mut reach = 0usize;
        for &r in &ranks2 {
            let r = r as usize;
            for s in (0..=reach).rev() {
                if counts[s] != 0.0 {
                    counts[s + r] += counts[s];
                }
            }
            reach += r;
        }
        let upper: f64 = counts[w_plus2 as usize..].iter().sum();
        let p_value = upper / 2f64.powi(n as i32);
        return Ok(SignedRankTest {
            n,
            w_plus,
            p_value,
            exact: true,
        });
    }

    let nf = n as f64;
    let mean_w = nf * (nf + 1.0) / 4.0;
    // tie correction: sum over tie groups of (t^3 - t) / 48
    let mut sorted = ranks2.clone();
    sorted.sort_unstable();
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += (t * t * t - t) / 48.0;
        i = j;
    }
    let var_w = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let z = (w_plus - mean_w - 0.5) / var_w.sqrt();
    Ok(SignedRankTest {
        n,
        w_plus,
        p_value: upper_normal_tail(z),
        exact: false,
    })
}

fn upper_normal_tail(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(z / std::f64::consts::SQRT_2)
}
