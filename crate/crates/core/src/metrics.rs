//! Evaluation metrics: correlation, information gain, marginal entropy and AUC.
//!
//! All metrics take predicted rates and observed counts on the same bins.
//! Information quantities are reported in bits per bin.

use std::f64::consts::LN_2;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{rebin_counts, rebin_factor, rebin_rates};
use crate::stats::{doubled_midranks, ln_factorial, mean, sem, sorted_copy};

pub const DEFAULT_EVAL_RATE_HZ: f64 = 25.0;
pub const DEFAULT_N_KNOTS: usize = 10;
/// Lower bound applied to calibrated rates.
pub const RATE_FLOOR: f64 = 1e-8;

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch { expected: a, got: b });
    }
    if a == 0 {
        return Err(Error::InvalidInput("empty sequence".into()));
    }
    Ok(())
}

fn mean_count(counts: &[u32]) -> Result<f64> {
    let total: u64 = counts.iter().map(|&k| k as u64).sum();
    if total == 0 {
        return Err(Error::Degenerate("zero-rate cell".into()));
    }
    Ok(total as f64 / counts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub r: f64,
    /// One side had zero variance; `r` is then reported as 0.
    pub degenerate: bool,
}

/// Pearson correlation between predictions and counts.
pub fn correlation(pred: &[f64], counts: &[u32]) -> Result<Correlation> {
    check_aligned(pred.len(), counts.len())?;
    if pred.len() < 2 {
        return Err(Error::InvalidInput("correlation needs at least 2 bins".into()));
    }
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mc = counts.iter().map(|&k| k as f64).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &k) in pred.iter().zip(counts) {
        let (dx, dy) = (p - mp, k as f64 - mc);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(Correlation { r: 0.0, degenerate: true });
    }
    Ok(Correlation {
        r: (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Entropy of the counts under a constant-rate Poisson model at their mean.
pub fn marginal_entropy(counts: &[u32]) -> Result<f64> {
    let lam = mean_count(counts)?;
    let lf = counts.iter().map(|&k| ln_factorial(k)).sum::<f64>() / counts.len() as f64;
    Ok((lf - lam * lam.ln() + lam) / LN_2)
}

/// A map applied to predicted rates before computing information gain.
pub trait RateTransform {
    fn apply(&self, x: f64) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl RateTransform for Identity {
    fn apply(&self, x: f64) -> f64 {
        x
    }
}

/// Nondecreasing piecewise-linear map, constant beyond the end knots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneCalibration {
    pub knots_x: Vec<f64>,
    pub knots_y: Vec<f64>,
}

impl MonotoneCalibration {
    pub fn new(knots_x: Vec<f64>, knots_y: Vec<f64>) -> Result<Self> {
        if knots_x.is_empty() || knots_x.len() != knots_y.len() {
            return Err(Error::InvalidInput("calibration needs matching, nonempty knots".into()));
        }
        if knots_x.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidInput("calibration knots_x must increase".into()));
        }
        if knots_y.windows(2).any(|w| w[1] < w[0]) || knots_y.iter().any(|y| !(*y >= 0.0)) {
            return Err(Error::InvalidInput(
                "calibration knots_y must be nonnegative and nondecreasing".into(),
            ));
        }
        Ok(MonotoneCalibration { knots_x, knots_y })
    }

    pub fn constant(x: f64, y: f64) -> Self {
        MonotoneCalibration {
            knots_x: vec![x],
            knots_y: vec![y],
        }
    }

    /// Segment index `j` and weight `u` so that the value is
    /// `(1 - u) y_j + u y_{j+1}` (`u = 0` outside the knot range).
    fn locate(&self, x: f64) -> (usize, f64) {
        let kx = &self.knots_x;
        let last = kx.len() - 1;
        if x <= kx[0] {
            return (0, 0.0);
        }
        if x >= kx[last] {
            return (last, 0.0);
        }
        let j = kx.partition_point(|&k| k <= x) - 1;
        (j, (x - kx[j]) / (kx[j + 1] - kx[j]))
    }
}

impl RateTransform for MonotoneCalibration {
    fn apply(&self, x: f64) -> f64 {
        let (j, u) = self.locate(x);
        let y = if u == 0.0 {
            self.knots_y[j]
        } else {
            (1.0 - u) * self.knots_y[j] + u * self.knots_y[j + 1]
        };
        y.max(RATE_FLOOR)
    }
}

/// Average Poisson log-likelihood ratio of calibrated predictions against the
/// constant mean-rate model, in bits per bin.
pub fn information_gain(pred: &[f64], counts: &[u32], calib: &dyn RateTransform) -> Result<f64> {
    check_aligned(pred.len(), counts.len())?;
    let lam = mean_count(counts)?;
    let n = pred.len() as f64;
    let mut acc = 0.0;
    for (&p, &k) in pred.iter().zip(counts) {
        let mu = calib.apply(p).max(RATE_FLOOR);
        if k > 0 {
            acc += k as f64 * (mu / lam).ln();
        }
        acc -= mu - lam;
    }
    Ok(acc / n / LN_2)
}

/// Area under the ROC curve for separating bins with at least one spike from
/// empty bins; ties count one half.
pub fn auc(pred: &[f64], counts: &[u32]) -> Result<f64> {
    check_aligned(pred.len(), counts.len())?;
    let n_pos = counts.iter().filter(|&&k| k > 0).count() as u64;
    let n_neg = counts.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Degenerate("AUC undefined for single-class input".into()));
    }
    let ranks2 = doubled_midranks(pred);
    let pos_sum2: u64 = ranks2
        .iter()
        .zip(counts)
        .filter(|(_, &k)| k > 0)
        .map(|(&r, _)| r)
        .sum();
    // doubled Mann-Whitney U
    let u2 = pos_sum2 - n_pos * (n_pos + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Summed information gain over summed marginal entropy.
pub fn relative_information_gain(info_gain: &[f64], entropy: &[f64]) -> Result<f64> {
    check_aligned(info_gain.len(), entropy.len())?;
    let h: f64 = entropy.iter().sum();
    if !(h > 0.0) {
        return Err(Error::Degenerate("zero entropy sum".into()));
    }
    Ok(info_gain.iter().sum::<f64>() / h)
}

/// Sums 100 Hz-style rates and counts into bins of `eval_rate_hz`.
pub fn rebin_pair(
    pred: &[f64],
    counts: &[u32],
    bin_rate_hz: f64,
    eval_rate_hz: f64,
) -> Result<(Vec<f64>, Vec<u32>)> {
    if pred.len() != counts.len() {
        return Err(Error::DimensionMismatch {
            expected: pred.len(),
            got: counts.len(),
        });
    }
    let factor = rebin_factor(bin_rate_hz, eval_rate_hz)?;
    Ok((rebin_rates(pred, factor)?, rebin_counts(counts, factor)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub cell_id: String,
    pub n_bins: usize,
    pub correlation: f64,
    pub correlation_degenerate: bool,
    pub info_gain_bits_per_bin: f64,
    pub marginal_entropy_bits_per_bin: f64,
    /// Absent when every bin, or no bin, contains a spike.
    pub auc: Option<f64>,
}

/// Metrics for one cell on bins that are already at the evaluation rate.
pub fn cell_metrics(
    cell_id: &str,
    pred: &[f64],
    counts: &[u32],
    calib: &dyn RateTransform,
) -> Result<CellMetrics> {
    let corr = correlation(pred, counts)?;
    let auc = match auc(pred, counts) {
        Ok(a) => Some(a),
        Err(Error::Degenerate(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(CellMetrics {
        cell_id: cell_id.to_string(),
        n_bins: pred.len(),
        correlation: corr.r,
        correlation_degenerate: corr.degenerate,
        info_gain_bits_per_bin: information_gain(pred, counts, calib)?,
        marginal_entropy_bits_per_bin: marginal_entropy(counts)?,
        auc,
    })
}

/// Rebins to `eval_rate_hz`, then computes the metrics of one cell.
pub fn evaluate(
    cell_id: &str,
    pred: &[f64],
    counts: &[u32],
    bin_rate_hz: f64,
    eval_rate_hz: f64,
    calib: &dyn RateTransform,
) -> Result<CellMetrics> {
    let (p, k) = rebin_pair(pred, counts, bin_rate_hz, eval_rate_hz)?;
    cell_metrics(cell_id, &p, &k, calib)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sem: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        (!values.is_empty()).then(|| Summary {
            mean: mean(values),
            sem: sem(values),
            n: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub dataset_id: String,
    /// Number of training cells, for reports from training-set-size sweeps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_size: Option<usize>,
    pub eval_rate_hz: f64,
    pub per_cell: Vec<CellMetrics>,
    pub relative_info_gain: f64,
    pub calibration: MonotoneCalibration,
    pub correlation: Option<Summary>,
    pub info_gain: Option<Summary>,
    pub auc: Option<Summary>,
}

impl MetricsReport {
    /// Fits one calibration to all cells' predictions (already at the
    /// evaluation rate) and scores every cell with it.
    pub fn build(
        method: &str,
        dataset_id: &str,
        eval_rate_hz: f64,
        cells: &[(String, Vec<f64>, Vec<u32>)],
        n_knots: usize,
    ) -> Result<Self> {
        let preds: Vec<&[f64]> = cells.iter().map(|c| c.1.as_slice()).collect();
        let counts: Vec<&[u32]> = cells.iter().map(|c| c.2.as_slice()).collect();
        let calibration = fit_calibration(&preds, &counts, n_knots)?;
        let per_cell = cells
            .iter()
            .map(|(id, p, k)| cell_metrics(id, p, k, &calibration))
            .collect::<Result<Vec<_>>>()?;
        Self::from_cells(method, dataset_id, eval_rate_hz, per_cell, calibration)
    }

    pub fn from_cells(
        method: &str,
        dataset_id: &str,
        eval_rate_hz: f64,
        per_cell: Vec<CellMetrics>,
        calibration: MonotoneCalibration,
    ) -> Result<Self> {
        let ig: Vec<f64> = per_cell.iter().map(|c| c.info_gain_bits_per_bin).collect();
        let hm: Vec<f64> = per_cell.iter().map(|c| c.marginal_entropy_bits_per_bin).collect();
        let corr: Vec<f64> = per_cell.iter().map(|c| c.correlation).collect();
        let aucs: Vec<f64> = per_cell.iter().filter_map(|c| c.auc).collect();
        Ok(MetricsReport {
            method: method.to_string(),
            dataset_id: dataset_id.to_string(),
            train_size: None,
            eval_rate_hz,
            relative_info_gain: relative_information_gain(&ig, &hm)?,
            correlation: Summary::of(&corr),
            info_gain: Summary::of(&ig),
            auc: Summary::of(&aucs),
            per_cell,
            calibration,
        })
    }
}

/// Precomputed per-bin terms of the summed information gain as a function of
/// the knot heights.
struct CalibrationProblem {
    n_knots: usize,
    /// (segment, weight, k / T, 1 / T) per pooled bin.
    points: Vec<(usize, f64, f64, f64)>,
    /// Sum over cells of `lambda - lambda ln lambda`.
    constant: f64,
}

impl CalibrationProblem {
    fn heights(z: &[f64]) -> Vec<f64> {
        z.iter()
            .scan(0.0, |acc, v| {
                *acc += v;
                Some(*acc)
            })
            .collect()
    }

    /// Summed information gain in nats; `grad` receives its derivative with
    /// respect to `z = (base, increments...)`.
    fn value_grad(&self, z: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let y = Self::heights(z);
        let mut total = self.constant;
        // derivative with respect to each knot height, mapped to z below
        let mut dy = vec![0.0; self.n_knots];
        for &(j, u, wk, w1) in &self.points {
            let raw = if u == 0.0 { y[j] } else { (1.0 - u) * y[j] + u * y[j + 1] };
            let mu = raw.max(RATE_FLOOR);
            if wk > 0.0 {
                total += wk * mu.ln();
            }
            total -= w1 * mu;
            if raw > RATE_FLOOR {
                let c = wk / mu - w1;
                dy[j] += c * (1.0 - u);
                if u != 0.0 {
                    dy[j + 1] += c * u;
                }
            }
        }
        if let Some(g) = grad {
            // dz_i = sum_{j >= i} dy_j
            let mut acc = 0.0;
            for i in (0..self.n_knots).rev() {
                acc += dy[i];
                g[i] = acc;
            }
        }
        total
    }
}

fn increments(y: &[f64]) -> Vec<f64> {
    let mut z = Vec::with_capacity(y.len());
    z.push(y[0].max(0.0));
    for w in y.windows(2) {
        z.push((w[1] - w[0]).max(0.0));
    }
    z
}

/// Maximizes a concave function over the nonnegative orthant with a
/// projected BFGS method. Returns the maximizer.
fn projected_bfgs(problem: &CalibrationProblem, z0: Vec<f64>) -> Vec<f64> {
    let n = z0.len();
    // work with f = -value
    let eval = |z: &[f64], g: &mut [f64]| {
        let v = problem.value_grad(z, Some(g));
        g.iter_mut().for_each(|gi| *gi = -*gi);
        -v
    };
    let mut z = z0;
    let mut g = vec![0.0; n];
    let mut f = eval(&z, &mut g);
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut fresh = true;
    for _ in 0..500 {
        let free: Vec<usize> = (0..n).filter(|&i| z[i] > 0.0 || g[i] < 0.0).collect();
        let pg: f64 = free.iter().fold(0.0, |m, &i| m.max(g[i].abs()));
        if free.is_empty() || pg < 1e-12 {
            break;
        }
        let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| h[(free[a], free[b])]);
        let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
        let df = -(hf * gf);
        let mut d = vec![0.0; n];
        for (a, &i) in free.iter().enumerate() {
            d[i] = df[a];
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let zn: Vec<f64> = z.iter().zip(&d).map(|(zi, di)| (zi + alpha * di).max(0.0)).collect();
            let mut gn = vec![0.0; n];
            let fn_ = eval(&zn, &mut gn);
            let decrease: f64 = g.iter().zip(zn.iter().zip(&z)).map(|(gi, (a, b))| gi * (a - b)).sum();
            if fn_.is_finite() && fn_ <= f + 1e-4 * decrease && decrease < 0.0 {
                accepted = Some((zn, gn, fn_));
                break;
            }
            alpha *= 0.5;
        }
        let Some((zn, gn, fn_)) = accepted else {
            if fresh {
                break;
            }
            h = DMatrix::identity(n, n);
            fresh = true;
            continue;
        };
        let s = DVector::from_iterator(n, zn.iter().zip(&z).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, gn.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if sy > 1e-14 * s.norm() * y.norm() {
            if fresh {
                h *= sy / y.dot(&y);
            }
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let a = &i - rho * &s * y.transpose();
            let b = &i - rho * &y * s.transpose();
            h = a * &h * b + rho * &s * s.transpose();
            fresh = false;
        }
        let rel = (f - fn_) / f.abs().max(1.0);
        z = zn;
        g = gn;
        f = fn_;
        if rel < 1e-13 {
            break;
        }
    }
    z
}

/// Fits a monotone piecewise-linear calibration maximizing the summed
/// information gain over cells.
///
/// Knots sit at `n_knots` rank quantiles of the pooled predictions. If every
/// prediction is equal, the result is the constant that maximizes the summed
/// gain, the mean of the per-cell rates. The fit never does worse than the
/// identity map through the knots.
pub fn fit_calibration(
    preds: &[&[f64]],
    counts: &[&[u32]],
    n_knots: usize,
) -> Result<MonotoneCalibration> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("calibration needs at least one cell".into()));
    }
    if preds.len() != counts.len() {
        return Err(Error::DimensionMismatch {
            expected: preds.len(),
            got: counts.len(),
        });
    }
    if n_knots < 2 {
        return Err(Error::InvalidInput("calibration needs at least 2 knots".into()));
    }
    let mut lambdas = Vec::with_capacity(preds.len());
    for (p, k) in preds.iter().zip(counts) {
        check_aligned(p.len(), k.len())?;
        lambdas.push(mean_count(k)?);
    }
    let pooled: Vec<f64> = preds.iter().flat_map(|p| p.iter().copied()).collect();
    if pooled.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite prediction".into()));
    }
    let sorted = sorted_copy(&pooled);
    let mut knots_x: Vec<f64> = (0..n_knots)
        .map(|i| {
            let pos = i as f64 / (n_knots - 1) as f64 * (sorted.len() - 1) as f64;
            sorted[pos.round() as usize]
        })
        .collect();
    knots_x.dedup();
    if knots_x.len() < 2 {
        return Ok(MonotoneCalibration::constant(knots_x[0], mean(&lambdas)));
    }

    let proto = MonotoneCalibration {
        knots_x: knots_x.clone(),
        knots_y: vec![0.0; knots_x.len()],
    };
    let mut points = Vec::with_capacity(pooled.len());
    let mut constant = 0.0;
    for ((p, k), &lam) in preds.iter().zip(counts).zip(&lambdas) {
        let inv_t = 1.0 / p.len() as f64;
        constant += lam - lam * lam.ln();
        for (&x, &c) in p.iter().zip(k.iter()) {
            let (j, u) = proto.locate(x);
            points.push((j, u, c as f64 * inv_t, inv_t));
        }
    }
    let problem = CalibrationProblem {
        n_knots: knots_x.len(),
        points,
        constant,
    };

    let identity_y: Vec<f64> = knots_x.iter().map(|x| x.max(0.0)).collect();
    let z_identity = increments(&identity_y);
    let mut z_const = vec![0.0; knots_x.len()];
    z_const[0] = mean(&lambdas);
    let v_identity = problem.value_grad(&z_identity, None);
    let v_const = problem.value_grad(&z_const, None);
    let start = if v_identity >= v_const { z_identity.clone() } else { z_const };
    let z = projected_bfgs(&problem, start);
    let z = if problem.value_grad(&z, None) >= v_identity {
        z
    } else {
        log::warn!("calibration fit fell back to the identity map");
        z_identity
    };
    MonotoneCalibration::new(knots_x, CalibrationProblem::heights(&z))
}

/// Summed information gain (bits per bin) of `calib` over the given cells.
pub fn summed_information_gain(
    preds: &[&[f64]],
    counts: &[&[u32]],
    calib: &dyn RateTransform,
) -> Result<f64> {
    preds
        .iter()
        .zip(counts)
        .map(|(p, k)| information_gain(p, k, calib))
        .sum()
}
