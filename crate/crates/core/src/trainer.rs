//! Maximum-likelihood training with limited-memory BFGS.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, PcaBasis};
use crate::models::{
    FlatModel, ModelEnsemble, ModelKind, ModelShape, PoissonObjective, PREPROCESSING_TAG,
};
use crate::FORMAT_VERSION;

/// Wolfe sufficient-decrease constant.
pub const WOLFE_C1: f64 = 1e-4;
/// Wolfe curvature constant.
pub const WOLFE_C2: f64 = 0.9;
pub const RELATIVE_DECREASE_TOL: f64 = 1e-10;
/// Step halvings tried when the objective turns non-finite.
pub const MAX_HALVINGS: usize = 30;
const MAX_LINE_SEARCH_EVALS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub n_members: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub lbfgs_memory: usize,
    pub init_scale: f64,
    pub seed: u64,
    /// STM mixture components `K`.
    pub components: usize,
    /// STM quadratic features `M`.
    pub quadratic: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    /// Ridge weight on non-offset parameters; 0 disables it.
    pub ridge: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            kind: ModelKind::Stm,
            n_members: 4,
            max_iters: 1000,
            grad_tol: 1e-6,
            lbfgs_memory: 10,
            init_scale: 0.1,
            seed: 0,
            components: 3,
            quadratic: 2,
            hidden1: 10,
            hidden2: 5,
            ridge: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn for_kind(kind: ModelKind) -> Self {
        TrainConfig {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("train config: {m}")));
        if self.n_members < 1 {
            return bad("n_members must be at least 1");
        }
        if !(self.grad_tol > 0.0) {
            return bad("grad_tol must be positive");
        }
        if self.lbfgs_memory < 1 {
            return bad("lbfgs_memory must be at least 1");
        }
        if !(self.init_scale >= 0.0) || !(self.ridge >= 0.0) {
            return bad("init_scale and ridge must be nonnegative");
        }
        Ok(())
    }

    pub fn shape(&self, dim: usize) -> ModelShape {
        match self.kind {
            ModelKind::Stm => ModelShape::Stm {
                dim,
                components: self.components,
                quadratic: self.quadratic,
            },
            ModelKind::Lnp => ModelShape::Lnp { dim },
            ModelKind::Mlnn => ModelShape::Mlnn {
                dim,
                hidden1: self.hidden1,
                hidden2: self.hidden2,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    RelativeDecrease,
    MaxIterations,
    /// No step along the search direction decreased the objective.
    LineSearchStalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad_sup_norm: f64,
    pub iterations: usize,
    /// Objective at the start and after every accepted step.
    pub history: Vec<f64>,
    pub termination: Termination,
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Trial {
    alpha: f64,
    f: f64,
    g: Vec<f64>,
    dg: f64,
}

struct LineSearch<'a, F> {
    objective: &'a mut F,
    x: &'a [f64],
    d: &'a [f64],
    f0: f64,
    dg0: f64,
    evals: usize,
    xt: Vec<f64>,
}

impl<F: FnMut(&[f64], &mut [f64]) -> f64> LineSearch<'_, F> {
    /// Evaluates at `alpha`, halving toward `floor` while the result is non-finite.
    fn eval(&mut self, mut alpha: f64, floor: f64) -> Result<Trial> {
        let mut g = vec![0.0; self.x.len()];
        for _ in 0..=MAX_HALVINGS {
            self.evals += 1;
            for ((xt, &x), &d) in self.xt.iter_mut().zip(self.x).zip(self.d) {
                *xt = x + alpha * d;
            }
            let f = (self.objective)(&self.xt, &mut g);
            if f.is_finite() && g.iter().all(|v| v.is_finite()) {
                let dg = dot(&g, self.d);
                return Ok(Trial { alpha, f, g, dg });
            }
            alpha = floor + 0.5 * (alpha - floor);
        }
        Err(Error::Numerical(format!(
            "objective not finite after {MAX_HALVINGS} step halvings (step {alpha:e})"
        )))
    }

    fn armijo_fails(&self, t: &Trial) -> bool {
        t.f > self.f0 + WOLFE_C1 * t.alpha * self.dg0
    }

    fn curvature_ok(&self, t: &Trial) -> bool {
        t.dg.abs() <= -WOLFE_C2 * self.dg0
    }

    /// Strong-Wolfe search: bracketing followed by zoom with cubic interpolation.
    fn search(&mut self, alpha0: f64) -> Result<Option<Trial>> {
        let mut prev = Trial {
            alpha: 0.0,
            f: self.f0,
            g: Vec::new(),
            dg: self.dg0,
        };
        let mut alpha = alpha0;
        let mut first = true;
        while self.evals < MAX_LINE_SEARCH_EVALS {
            let t = self.eval(alpha, prev.alpha)?;
            if self.armijo_fails(&t) || (!first && t.f >= prev.f) {
                return self.zoom(prev, t);
            }
            if self.curvature_ok(&t) {
                return Ok(Some(t));
            }
            if t.dg >= 0.0 {
                return self.zoom(t, prev);
            }
            first = false;
            alpha = t.alpha * 2.0;
            prev = t;
        }
        Ok(self.best_of(prev))
    }

    fn zoom(&mut self, mut lo: Trial, mut hi: Trial) -> Result<Option<Trial>> {
        while self.evals < MAX_LINE_SEARCH_EVALS {
            let alpha = interpolate(&lo, &hi);
            if (alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1e-300) {
                break;
            }
            let t = self.eval(alpha, lo.alpha)?;
            if self.armijo_fails(&t) || t.f >= lo.f {
                hi = t;
            } else {
                if self.curvature_ok(&t) {
                    return Ok(Some(t));
                }
                if t.dg * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = t;
            }
            if (hi.alpha - lo.alpha).abs() <= 1e-14 * hi.alpha.abs().max(lo.alpha.abs()) {
                break;
            }
        }
        Ok(self.best_of(lo))
    }

    /// Accepts a point that satisfies sufficient decrease even if the
    /// curvature condition could not be met within the budget.
    fn best_of(&self, t: Trial) -> Option<Trial> {
        (t.alpha > 0.0 && t.f < self.f0 && !self.armijo_fails(&t)).then_some(t)
    }
}

/// Minimizer of the cubic through both end points, kept inside the middle
/// 80% of the bracket; falls back to bisection.
fn interpolate(lo: &Trial, hi: &Trial) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let width = b - a;
    let d1 = lo.dg + hi.dg - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.dg * hi.dg;
    let mid = 0.5 * (a + b);
    if !(disc >= 0.0) {
        return mid;
    }
    let d2 = width.signum() * disc.sqrt();
    let denom = hi.dg - lo.dg + 2.0 * d2;
    if denom == 0.0 || !denom.is_finite() {
        return mid;
    }
    let c = b - width * (hi.dg + d2 - d1) / denom;
    let (left, right) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * width.abs();
    if c.is_finite() && c >= left + margin && c <= right - margin {
        c
    } else {
        mid
    }
}

/// Minimizes `objective` from `init` with L-BFGS.
///
/// `objective(x, g)` returns the value and writes the gradient into `g`.
/// Stops when the gradient sup-norm drops below `cfg.grad_tol`, when an
/// accepted step lowers the objective by less than `1e-10` relative to
/// `max(|f|, 1)`, or after `cfg.max_iters` iterations.
pub fn minimize<F>(mut objective: F, init: &[f64], cfg: &TrainConfig) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = init.len();
    let mut x = init.to_vec();
    let mut g = vec![0.0; n];
    let mut f = objective(&x, &mut g);
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("objective not finite at the initial point".into()));
    }
    let memory = cfg.lbfgs_memory.max(1);
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(memory);
    let mut history = vec![f];
    let mut d = vec![0.0; n];
    let mut alpha_buf = vec![0.0; memory];
    let mut iterations = 0;

    let termination = loop {
        if sup_norm(&g) < cfg.grad_tol {
            break Termination::GradientTolerance;
        }
        if iterations >= cfg.max_iters {
            break Termination::MaxIterations;
        }

        // two-loop recursion
        d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
        for (i, (s, y, rho)) in pairs.iter().enumerate().rev() {
            let a = rho * dot(s, &d);
            alpha_buf[i] = a;
            d.iter_mut().zip(y).for_each(|(di, yi)| *di -= a * yi);
        }
        if let Some((s, y, _)) = pairs.back() {
            let gamma = dot(s, y) / dot(y, y);
            d.iter_mut().for_each(|di| *di *= gamma);
        }
        for (i, (s, y, rho)) in pairs.iter().enumerate() {
            let b = rho * dot(y, &d);
            let a = alpha_buf[i];
            d.iter_mut().zip(s).for_each(|(di, si)| *di += (a - b) * si);
        }
        let mut dg0 = dot(&d, &g);
        if !(dg0 < 0.0) {
            pairs.clear();
            d.iter_mut().zip(&g).for_each(|(di, gi)| *di = -gi);
            dg0 = dot(&d, &g);
        }
        let alpha0 = if pairs.is_empty() {
            (1.0 / dot(&g, &g).sqrt()).min(1.0)
        } else {
            1.0
        };

        let step = LineSearch {
            objective: &mut objective,
            x: &x,
            d: &d,
            f0: f,
            dg0,
            evals: 0,
            xt: vec![0.0; n],
        }
        .search(alpha0)?;
        let Some(t) = step else {
            if pairs.is_empty() {
                break Termination::LineSearchStalled;
            }
            // retry once along steepest descent
            pairs.clear();
            continue;
        };
        iterations += 1;
        debug_assert!(t.f <= f, "accepted step increased the objective");
        let s: Vec<f64> = d.iter().map(|di| t.alpha * di).collect();
        let y: Vec<f64> = t.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        x.iter_mut().zip(&s).for_each(|(xi, si)| *xi += si);
        let f_old = f;
        f = t.f;
        g = t.g;
        history.push(f);
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() && sy > 0.0 {
            if pairs.len() == memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        if (f_old - f) / f_old.abs().max(f.abs()).max(1.0) < RELATIVE_DECREASE_TOL {
            break Termination::RelativeDecrease;
        }
    };

    Ok(Minimum {
        grad_sup_norm: sup_norm(&g),
        x,
        value: f,
        iterations,
        history,
        termination,
    })
}

/// Random starting parameters.
///
/// Weights are iid `N(0, init_scale^2)`. Offsets are set so that with zero
/// weights the rate equals `mean_count`: STM splits it evenly over the `K`
/// components, ML-NN hidden offsets start at 0.
pub fn random_init(shape: ModelShape, init_scale: f64, mean_count: f64, seed: u64) -> FlatModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta: Vec<f64> = (0..shape.n_params())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            init_scale * z
        })
        .collect();
    let mask = shape.offset_mask();
    let log_mean = |m: f64| m.max(1e-6).ln();
    match shape {
        ModelShape::Stm { components, .. } => {
            let b = log_mean(mean_count / components as f64);
            for (t, &o) in theta.iter_mut().zip(&mask) {
                if o {
                    *t = b;
                }
            }
        }
        ModelShape::Lnp { .. } | ModelShape::Mlnn { .. } => {
            for (t, &o) in theta.iter_mut().zip(&mask) {
                if o {
                    *t = 0.0;
                }
            }
            let last = theta.len() - 1;
            theta[last] = log_mean(mean_count);
        }
    }
    FlatModel { shape, theta }
}

/// Outcome of one member's optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberLog {
    pub member: usize,
    pub seed: u64,
    pub iterations: usize,
    pub final_objective: f64,
    pub grad_sup_norm: f64,
    pub termination: Option<Termination>,
    pub objective_history: Vec<f64>,
    /// Set when the member aborted; it is then left out of the ensemble.
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub ensemble: ModelEnsemble,
    pub logs: Vec<MemberLog>,
}

/// Trains `cfg.n_members` independently initialized members (seeds
/// `cfg.seed + i`) and combines them into an ensemble.
pub fn train(
    features: &FeatureMatrix,
    counts: &[u32],
    cfg: &TrainConfig,
    pca_basis: PcaBasis,
) -> Result<Trained> {
    cfg.validate()?;
    if features.n_rows() != counts.len() {
        return Err(Error::DimensionMismatch {
            expected: features.n_rows(),
            got: counts.len(),
        });
    }
    if pca_basis.n_kept() != features.dim() {
        return Err(Error::DimensionMismatch {
            expected: pca_basis.n_kept(),
            got: features.dim(),
        });
    }
    let total: u64 = counts.iter().map(|&k| k as u64).sum();
    if total == 0 {
        return Err(Error::InvalidInput("training counts are all zero".into()));
    }
    let mean_count = total as f64 / counts.len() as f64;
    let shape = cfg.shape(features.dim());
    let objective = PoissonObjective::new(shape, features, counts, cfg.ridge)?;

    let results: Vec<(MemberLog, Option<FlatModel>)> = (0..cfg.n_members)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i as u64);
            let init = random_init(shape, cfg.init_scale, mean_count, seed);
            match minimize(|th, g| objective.value_grad(th, g), &init.theta, cfg) {
                Ok(m) => {
                    log::debug!(
                        "member {i}: {} iterations, objective {:.6}, {:?}",
                        m.iterations,
                        m.value,
                        m.termination
                    );
                    let log = MemberLog {
                        member: i,
                        seed,
                        iterations: m.iterations,
                        final_objective: m.value,
                        grad_sup_norm: m.grad_sup_norm,
                        termination: Some(m.termination),
                        objective_history: m.history,
                        error: None,
                    };
                    (log, Some(FlatModel { shape, theta: m.x }))
                }
                Err(e) => {
                    log::warn!("member {i} aborted: {e}");
                    let log = MemberLog {
                        member: i,
                        seed,
                        iterations: 0,
                        final_objective: f64::NAN,
                        grad_sup_norm: f64::NAN,
                        termination: None,
                        objective_history: Vec::new(),
                        error: Some(e.to_string()),
                    };
                    (log, None)
                }
            }
        })
        .collect();

    let mut logs = Vec::with_capacity(results.len());
    let mut members = Vec::new();
    for (log, model) in results {
        if let Some(m) = model {
            members.push(m.to_params());
        }
        logs.push(log);
    }
    if members.is_empty() {
        return Err(Error::TrainingFailed(
            logs.iter()
                .map(|l| format!("member {}: {}", l.member, l.error.as_deref().unwrap_or("?")))
                .collect(),
        ));
    }
    let ensemble = ModelEnsemble {
        format_version: FORMAT_VERSION,
        kind: cfg.kind,
        bin_rate_hz: features.bin_rate_hz,
        window_ms: features.window_ms,
        preprocessing: PREPROCESSING_TAG.to_string(),
        pca_basis,
        members,
        train_config: Some(cfg.clone()),
    };
    Ok(Trained { ensemble, logs })
}
