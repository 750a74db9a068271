//! Poisson rate models over projected fluorescence windows.
//!
//! Three rate functions are supported, all denominated in expected spikes per
//! model bin:
//!
//! * spike-triggered mixture (STM):
//!   `sum_k exp(sum_m beta_km (u_m . x)^2 + w_k . x + b_k)`
//! * linear-nonlinear-Poisson (LNP): `exp(w . x + b)`
//! * two-hidden-layer rectifier network (ML-NN):
//!   `exp(w3 . g(W2 g(W1 x + b1) + b2) + b3)` with `g = max(0, .)`
//!
//! Every exponent is clamped to `[-30, 30]` before `exp`; the clamped value
//! has zero derivative. Parameter sets have a nested, named representation
//! ([`ModelParams`]) used for files and a flat vector representation
//! ([`FlatModel`]) used by the optimizer.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, PcaBasis};
use crate::signal_io::{read_json, write_json};
use crate::stats::ln_factorial;
use crate::trainer::TrainConfig;
use crate::FORMAT_VERSION;

pub const EXPONENT_CLAMP: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Stm,
    Lnp,
    Mlnn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Stm => "stm",
            ModelKind::Lnp => "lnp",
            ModelKind::Mlnn => "mlnn",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "stm" => Ok(ModelKind::Stm),
            "lnp" => Ok(ModelKind::Lnp),
            "mlnn" | "ml-nn" => Ok(ModelKind::Mlnn),
            other => Err(Error::InvalidInput(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Dimensions of a parameter set; fixes the layout of the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelShape {
    Stm { dim: usize, components: usize, quadratic: usize },
    Lnp { dim: usize },
    Mlnn { dim: usize, hidden1: usize, hidden2: usize },
}

impl ModelShape {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelShape::Stm { .. } => ModelKind::Stm,
            ModelShape::Lnp { .. } => ModelKind::Lnp,
            ModelShape::Mlnn { .. } => ModelKind::Mlnn,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            ModelShape::Stm { dim, .. } | ModelShape::Lnp { dim } | ModelShape::Mlnn { dim, .. } => dim,
        }
    }

    pub fn n_params(&self) -> usize {
        match *self {
            ModelShape::Stm { dim, components: k, quadratic: m } => k * dim + m * dim + k * m + k,
            ModelShape::Lnp { dim } => dim + 1,
            ModelShape::Mlnn { dim, hidden1, hidden2 } => {
                hidden1 * dim + hidden1 + hidden2 * hidden1 + hidden2 + hidden2 + 1
            }
        }
    }

    /// Mask of flat entries that are offsets (excluded from ridge penalties).
    pub fn offset_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_params()];
        match *self {
            ModelShape::Stm { components: k, .. } => {
                let n = mask.len();
                mask[n - k..].iter_mut().for_each(|m| *m = true);
            }
            ModelShape::Lnp { dim } => mask[dim] = true,
            ModelShape::Mlnn { dim, hidden1, hidden2 } => {
                let b1 = hidden1 * dim;
                mask[b1..b1 + hidden1].iter_mut().for_each(|m| *m = true);
                let b2 = b1 + hidden1 + hidden2 * hidden1;
                mask[b2..b2 + hidden2].iter_mut().for_each(|m| *m = true);
                let n = mask.len();
                mask[n - 1] = true;
            }
        }
        mask
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ModelShape::Stm { dim, components, .. } => dim >= 1 && components >= 1,
            ModelShape::Lnp { dim } => dim >= 1,
            ModelShape::Mlnn { dim, hidden1, hidden2 } => dim >= 1 && hidden1 >= 1 && hidden2 >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid model shape {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StmParams {
    /// `K x D` linear filters.
    pub w: Vec<Vec<f64>>,
    /// `M x D` quadratic filters.
    pub u: Vec<Vec<f64>>,
    /// `K x M` quadratic weights.
    pub beta: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LnpParams {
    pub w: Vec<f64>,
    pub b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlnnParams {
    pub w1: Vec<Vec<f64>>,
    pub b1: Vec<f64>,
    pub w2: Vec<Vec<f64>>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelParams {
    Stm(StmParams),
    Mlnn(MlnnParams),
    Lnp(LnpParams),
}

fn flatten_rows(rows: &[Vec<f64>], cols: usize, out: &mut Vec<f64>) -> Result<()> {
    for r in rows {
        if r.len() != cols {
            return Err(Error::DimensionMismatch {
                expected: cols,
                got: r.len(),
            });
        }
        out.extend_from_slice(r);
    }
    Ok(())
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

fn take_rows(flat: &[f64], pos: &mut usize, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let out = (0..rows)
        .map(|r| flat[*pos + r * cols..*pos + (r + 1) * cols].to_vec())
        .collect();
    *pos += rows * cols;
    out
}

fn take_vec(flat: &[f64], pos: &mut usize, len: usize) -> Vec<f64> {
    let out = flat[*pos..*pos + len].to_vec();
    *pos += len;
    out
}

impl ModelParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelParams::Stm(_) => ModelKind::Stm,
            ModelParams::Lnp(_) => ModelKind::Lnp,
            ModelParams::Mlnn(_) => ModelKind::Mlnn,
        }
    }

    pub fn shape(&self) -> Result<ModelShape> {
        let shape = match self {
            ModelParams::Stm(p) => {
                let k = p.w.len();
                let dim = p.w.first().map_or(0, Vec::len);
                ModelShape::Stm {
                    dim,
                    components: k,
                    quadratic: p.u.len(),
                }
            }
            ModelParams::Lnp(p) => ModelShape::Lnp { dim: p.w.len() },
            ModelParams::Mlnn(p) => ModelShape::Mlnn {
                dim: p.w1.first().map_or(0, Vec::len),
                hidden1: p.w1.len(),
                hidden2: p.w2.len(),
            },
        };
        shape.validate()?;
        Ok(shape)
    }

    /// Flat parameter vector; fails if the nested arrays are inconsistent.
    pub fn to_flat(&self) -> Result<FlatModel> {
        let shape = self.shape()?;
        let mut theta = Vec::with_capacity(shape.n_params());
        match (self, shape) {
            (ModelParams::Stm(p), ModelShape::Stm { dim, components: k, quadratic: m }) => {
                flatten_rows(&p.w, dim, &mut theta)?;
                flatten_rows(&p.u, dim, &mut theta)?;
                check_len(k, p.beta.len())?;
                flatten_rows(&p.beta, m, &mut theta)?;
                check_len(k, p.b.len())?;
                theta.extend_from_slice(&p.b);
            }
            (ModelParams::Lnp(p), ModelShape::Lnp { .. }) => {
                theta.extend_from_slice(&p.w);
                theta.push(p.b);
            }
            (ModelParams::Mlnn(p), ModelShape::Mlnn { dim, hidden1, hidden2 }) => {
                flatten_rows(&p.w1, dim, &mut theta)?;
                check_len(hidden1, p.b1.len())?;
                theta.extend_from_slice(&p.b1);
                flatten_rows(&p.w2, hidden1, &mut theta)?;
                check_len(hidden2, p.b2.len())?;
                theta.extend_from_slice(&p.b2);
                check_len(hidden2, p.w3.len())?;
                theta.extend_from_slice(&p.w3);
                theta.push(p.b3);
            }
            _ => unreachable!("shape derived from params"),
        }
        check_len(shape.n_params(), theta.len())?;
        Ok(FlatModel { shape, theta })
    }

    pub fn from_flat(shape: ModelShape, theta: &[f64]) -> Result<Self> {
        shape.validate()?;
        check_len(shape.n_params(), theta.len())?;
        let mut pos = 0;
        Ok(match shape {
            ModelShape::Stm { dim, components: k, quadratic: m } => ModelParams::Stm(StmParams {
                w: take_rows(theta, &mut pos, k, dim),
                u: take_rows(theta, &mut pos, m, dim),
                beta: take_rows(theta, &mut pos, k, m),
                b: take_vec(theta, &mut pos, k),
            }),
            ModelShape::Lnp { dim } => ModelParams::Lnp(LnpParams {
                w: take_vec(theta, &mut pos, dim),
                b: theta[dim],
            }),
            ModelShape::Mlnn { dim, hidden1, hidden2 } => ModelParams::Mlnn(MlnnParams {
                w1: take_rows(theta, &mut pos, hidden1, dim),
                b1: take_vec(theta, &mut pos, hidden1),
                w2: take_rows(theta, &mut pos, hidden2, hidden1),
                b2: take_vec(theta, &mut pos, hidden2),
                w3: take_vec(theta, &mut pos, hidden2),
                b3: theta[theta.len() - 1],
            }),
        })
    }

    pub fn rate(&self, x: &[f64]) -> Result<f64> {
        self.to_flat()?.rate(x)
    }
}

/// Expected spikes per bin for one parameter set.
pub fn rate(params: &ModelParams, x: &[f64]) -> Result<f64> {
    params.rate(x)
}

#[inline]
fn clamp_exp(a: f64) -> (f64, bool) {
    if a > EXPONENT_CLAMP {
        (EXPONENT_CLAMP.exp(), false)
    } else if a < -EXPONENT_CLAMP {
        ((-EXPONENT_CLAMP).exp(), false)
    } else {
        (a.exp(), true)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Per-row scratch space, sized for a shape.
#[derive(Debug, Clone)]
pub struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    d: Vec<f64>,
}

impl Scratch {
    pub fn new(shape: &ModelShape) -> Self {
        let (n1, n2) = match *shape {
            ModelShape::Stm { components, quadratic, .. } => (components, quadratic),
            ModelShape::Lnp { .. } => (0, 0),
            ModelShape::Mlnn { hidden1, hidden2, .. } => (hidden1, hidden2),
        };
        Scratch {
            a: vec![0.0; n1],
            b: vec![0.0; n2],
            c: vec![0.0; n1],
            d: vec![0.0; n2],
        }
    }
}

/// Parameters as one flat vector plus the layout needed to read it.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatModel {
    pub shape: ModelShape,
    pub theta: Vec<f64>,
}

impl FlatModel {
    pub fn new(shape: ModelShape, theta: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        check_len(shape.n_params(), theta.len())?;
        Ok(FlatModel { shape, theta })
    }

    pub fn to_params(&self) -> ModelParams {
        ModelParams::from_flat(self.shape, &self.theta).expect("flat model has a consistent layout")
    }

    pub fn rate(&self, x: &[f64]) -> Result<f64> {
        check_len(self.shape.dim(), x.len())?;
        let mut scratch = Scratch::new(&self.shape);
        Ok(row_rate(&self.shape, &self.theta, x, &mut scratch))
    }

    pub fn log_rate(&self, x: &[f64]) -> Result<f64> {
        self.rate(x).map(f64::ln)
    }
}

/// Rate at `x`.
pub(crate) fn row_rate(shape: &ModelShape, theta: &[f64], x: &[f64], s: &mut Scratch) -> f64 {
    row_eval(shape, theta, x, s, None::<(fn(f64) -> f64, &mut [f64])>)
}

/// Rate at `x`; also adds `coef(rate) * d rate / d theta` to `g`.
pub(crate) fn row_rate_grad(
    shape: &ModelShape,
    theta: &[f64],
    x: &[f64],
    s: &mut Scratch,
    coef: impl FnOnce(f64) -> f64,
    g: &mut [f64],
) -> f64 {
    row_eval(shape, theta, x, s, Some((coef, g)))
}

fn row_eval<F: FnOnce(f64) -> f64>(
    shape: &ModelShape,
    theta: &[f64],
    x: &[f64],
    s: &mut Scratch,
    grad: Option<(F, &mut [f64])>,
) -> f64 {
    match *shape {
        ModelShape::Lnp { dim } => {
            let (w, b) = (&theta[..dim], theta[dim]);
            let (lambda, live) = clamp_exp(dot(w, x) + b);
            if let Some((coef, g)) = grad {
                if live {
                    let c = coef(lambda) * lambda;
                    axpy(c, x, &mut g[..dim]);
                    g[dim] += c;
                }
            }
            lambda
        }
        ModelShape::Stm { dim, components: k, quadratic: m } => {
            let (w, rest) = theta.split_at(k * dim);
            let (u, rest) = rest.split_at(m * dim);
            let (beta, b) = rest.split_at(k * m);
            let q = &mut s.b;
            for j in 0..m {
                q[j] = dot(&u[j * dim..(j + 1) * dim], x);
            }
            let e = &mut s.a;
            let mut lambda = 0.0;
            for c in 0..k {
                let mut a = dot(&w[c * dim..(c + 1) * dim], x) + b[c];
                for j in 0..m {
                    a += beta[c * m + j] * q[j] * q[j];
                }
                let (ec, live) = clamp_exp(a);
                lambda += ec;
                e[c] = if live { ec } else { 0.0 };
            }
            if let Some((coef, g)) = grad {
                let coef = coef(lambda);
                let (gw, rest) = g.split_at_mut(k * dim);
                let (gu, rest) = rest.split_at_mut(m * dim);
                let (gbeta, gb) = rest.split_at_mut(k * m);
                for c in 0..k {
                    let ce = coef * e[c];
                    if ce == 0.0 {
                        continue;
                    }
                    axpy(ce, x, &mut gw[c * dim..(c + 1) * dim]);
                    gb[c] += ce;
                    for j in 0..m {
                        gbeta[c * m + j] += ce * q[j] * q[j];
                    }
                }
                for j in 0..m {
                    let mut s_j = 0.0;
                    for c in 0..k {
                        s_j += e[c] * beta[c * m + j];
                    }
                    let f = coef * s_j * 2.0 * q[j];
                    if f != 0.0 {
                        axpy(f, x, &mut gu[j * dim..(j + 1) * dim]);
                    }
                }
            }
            lambda
        }
        ModelShape::Mlnn { dim, hidden1: h1n, hidden2: h2n } => {
            let (w1, rest) = theta.split_at(h1n * dim);
            let (b1, rest) = rest.split_at(h1n);
            let (w2, rest) = rest.split_at(h2n * h1n);
            let (b2, rest) = rest.split_at(h2n);
            let (w3, b3) = rest.split_at(h2n);
            let h1 = &mut s.a;
            for l in 0..h1n {
                h1[l] = (dot(&w1[l * dim..(l + 1) * dim], x) + b1[l]).max(0.0);
            }
            let h2 = &mut s.b;
            for j in 0..h2n {
                h2[j] = (dot(&w2[j * h1n..(j + 1) * h1n], h1) + b2[j]).max(0.0);
            }
            let (lambda, live) = clamp_exp(dot(w3, h2) + b3[0]);
            if let Some((coef, g)) = grad {
                if live {
                    let d_eta = coef(lambda) * lambda;
                    let (gw1, rest) = g.split_at_mut(h1n * dim);
                    let (gb1, rest) = rest.split_at_mut(h1n);
                    let (gw2, rest) = rest.split_at_mut(h2n * h1n);
                    let (gb2, rest) = rest.split_at_mut(h2n);
                    let (gw3, gb3) = rest.split_at_mut(h2n);
                    axpy(d_eta, h2, gw3);
                    gb3[0] += d_eta;
                    let dz2 = &mut s.d;
                    for j in 0..h2n {
                        // subgradient 0 at the kink
                        dz2[j] = if h2[j] > 0.0 { d_eta * w3[j] } else { 0.0 };
                    }
                    let dz1 = &mut s.c;
                    dz1.iter_mut().for_each(|v| *v = 0.0);
                    for j in 0..h2n {
                        if dz2[j] == 0.0 {
                            continue;
                        }
                        axpy(dz2[j], h1, &mut gw2[j * h1n..(j + 1) * h1n]);
                        gb2[j] += dz2[j];
                        axpy(dz2[j], &w2[j * h1n..(j + 1) * h1n], dz1);
                    }
                    for l in 0..h1n {
                        if h1[l] > 0.0 && dz1[l] != 0.0 {
                            axpy(dz1[l], x, &mut gw1[l * dim..(l + 1) * dim]);
                            gb1[l] += dz1[l];
                        }
                    }
                }
            }
            lambda
        }
    }
}

/// Average Poisson log-likelihood per bin, in nats.
pub fn poisson_log_likelihood(rates: &[f64], counts: &[u32]) -> Result<f64> {
    check_len(rates.len(), counts.len())?;
    if rates.is_empty() {
        return Err(Error::InvalidInput("empty rate sequence".into()));
    }
    let mut total = 0.0;
    for (t, (&lambda, &k)) in rates.iter().zip(counts).enumerate() {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidInput(format!("nonpositive rate {lambda} at bin {t}")));
        }
        total += k as f64 * lambda.ln() - lambda - ln_factorial(k);
    }
    Ok(total / rates.len() as f64)
}

/// Negative average log-likelihood of a parameter vector, with an optional
/// ridge penalty on the non-offset parameters.
pub struct PoissonObjective<'a> {
    pub shape: ModelShape,
    features: &'a FeatureMatrix,
    counts: &'a [u32],
    ridge: f64,
    mean_ln_factorial: f64,
    offset_mask: Vec<bool>,
}

impl<'a> PoissonObjective<'a> {
    pub fn new(
        shape: ModelShape,
        features: &'a FeatureMatrix,
        counts: &'a [u32],
        ridge: f64,
    ) -> Result<Self> {
        shape.validate()?;
        check_len(features.n_rows(), counts.len())?;
        check_len(shape.dim(), features.dim())?;
        if counts.is_empty() {
            return Err(Error::InvalidInput("no training bins".into()));
        }
        let mean_ln_factorial =
            counts.iter().map(|&k| ln_factorial(k)).sum::<f64>() / counts.len() as f64;
        Ok(PoissonObjective {
            shape,
            features,
            counts,
            ridge,
            mean_ln_factorial,
            offset_mask: shape.offset_mask(),
        })
    }

    /// Value, writing the gradient with respect to `theta` into `grad`.
    pub fn value_grad(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut scratch = Scratch::new(&self.shape);
        let n = self.counts.len() as f64;
        let mut ll = 0.0;
        for (t, &k) in self.counts.iter().enumerate() {
            let kf = k as f64;
            // d(k ln l - l)/dtheta = (k/l - 1) dl/dtheta
            let lambda = row_rate_grad(
                &self.shape,
                theta,
                self.features.row(t),
                &mut scratch,
                |l| kf / l - 1.0,
                grad,
            );
            ll += kf * lambda.ln() - lambda;
        }
        let mut value = -(ll / n - self.mean_ln_factorial);
        for g in grad.iter_mut() {
            *g = -*g / n;
        }
        if self.ridge > 0.0 {
            for ((g, &th), &is_offset) in grad.iter_mut().zip(theta).zip(&self.offset_mask) {
                if !is_offset {
                    value += self.ridge * th * th;
                    *g += 2.0 * self.ridge * th;
                }
            }
        }
        value
    }

    pub fn value(&self, theta: &[f64]) -> f64 {
        let mut scratch = Scratch::new(&self.shape);
        let mut ll = 0.0;
        for (t, &k) in self.counts.iter().enumerate() {
            let lambda = row_rate(&self.shape, theta, self.features.row(t), &mut scratch);
            ll += k as f64 * lambda.ln() - lambda;
        }
        let mut value = -(ll / self.counts.len() as f64 - self.mean_ln_factorial);
        if self.ridge > 0.0 {
            for (&th, &is_offset) in theta.iter().zip(&self.offset_mask) {
                if !is_offset {
                    value += self.ridge * th * th;
                }
            }
        }
        value
    }
}

/// Gradient of the average log-likelihood with respect to every parameter.
pub fn gradient(params: &ModelParams, features: &FeatureMatrix, counts: &[u32]) -> Result<ModelParams> {
    let flat = params.to_flat()?;
    let objective = PoissonObjective::new(flat.shape, features, counts, 0.0)?;
    let mut g = vec![0.0; flat.theta.len()];
    objective.value_grad(&flat.theta, &mut g);
    g.iter_mut().for_each(|v| *v = -*v);
    ModelParams::from_flat(flat.shape, &g)
}

/// Members of one kind, combined by geometric averaging of their rates,
/// together with the feature pipeline they were trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEnsemble {
    pub format_version: u32,
    pub kind: ModelKind,
    pub bin_rate_hz: f64,
    pub window_ms: f64,
    /// Identifies the fluorescence preprocessing the model expects.
    pub preprocessing: String,
    pub pca_basis: PcaBasis,
    pub members: Vec<ModelParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<TrainConfig>,
}

pub const PREPROCESSING_TAG: &str = "gsm_detrend3+pct5_80";

impl ModelEnsemble {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported model format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let first = self
            .members
            .first()
            .ok_or_else(|| Error::InvalidInput("ensemble has no members".into()))?
            .to_flat()?
            .shape;
        for m in &self.members {
            if m.kind() != self.kind {
                return Err(Error::InvalidInput(format!(
                    "member of kind {} in a {} ensemble",
                    m.kind(),
                    self.kind
                )));
            }
            if m.to_flat()?.shape != first {
                return Err(Error::InvalidInput("ensemble members differ in shape".into()));
            }
        }
        check_len(self.pca_basis.n_kept(), first.dim())
    }

    pub fn flat_members(&self) -> Result<Vec<FlatModel>> {
        self.members.iter().map(ModelParams::to_flat).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: ModelEnsemble = read_json(path.as_ref())?;
        m.validate()?;
        Ok(m)
    }

    /// Geometric-mean rate at one feature vector.
    pub fn rate(&self, x: &[f64]) -> Result<f64> {
        ensemble_rate(&self.flat_members()?, x)
    }

    /// Geometric-mean rate for every row of a feature matrix.
    pub fn predict(&self, features: &FeatureMatrix) -> Result<Vec<f64>> {
        let flats = self.flat_members()?;
        let shape = flats[0].shape;
        check_len(shape.dim(), features.dim())?;
        let mut scratch = Scratch::new(&shape);
        let inv = 1.0 / flats.len() as f64;
        Ok((0..features.n_rows())
            .map(|t| {
                let x = features.row(t);
                let mean_log: f64 = flats
                    .iter()
                    .map(|f| row_rate(&f.shape, &f.theta, x, &mut scratch).ln())
                    .sum::<f64>()
                    * inv;
                mean_log.exp()
            })
            .collect())
    }
}

/// `exp(mean_i ln rate_i(x))`.
pub fn ensemble_rate(members: &[FlatModel], x: &[f64]) -> Result<f64> {
    if members.is_empty() {
        return Err(Error::InvalidInput("ensemble has no members".into()));
    }
    let mut acc = 0.0;
    for m in members {
        acc += m.log_rate(x)?;
    }
    Ok((acc / members.len() as f64).exp())
}

/// Independent Poisson draw per bin; zero rates give zero counts.
pub fn sample_spike_train(rates: &[f64], seed: u64) -> Result<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rates
        .iter()
        .enumerate()
        .map(|(t, &lambda)| {
            if lambda == 0.0 {
                Ok(0)
            } else {
                let dist = Poisson::new(lambda).map_err(|_| {
                    Error::InvalidInput(format!("invalid rate {lambda} at bin {t}"))
                })?;
                Ok(dist.sample(&mut rng) as u32)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::RowMatrix;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn features(rows: Vec<Vec<f64>>) -> FeatureMatrix {
        FeatureMatrix {
            data: RowMatrix::from_rows(&rows).unwrap(),
            bin_rate_hz: 100.0,
            window_ms: 1000.0,
        }
    }

    fn randn(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
            .collect()
    }

    #[test]
    fn simple_rates() {
        let lnp = ModelParams::Lnp(LnpParams { w: vec![0.0; 3], b: 0.0 });
        assert_eq!(rate(&lnp, &[1.0, 2.0, 3.0]).unwrap(), 1.0);
        let stm = ModelParams::Stm(StmParams {
            w: vec![vec![0.0; 2]],
            u: vec![],
            beta: vec![vec![]],
            b: vec![2f64.ln()],
        });
        assert!((rate(&stm, &[0.3, -1.0]).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(rate(&lnp, &[1.0]), Err(Error::DimensionMismatch { .. })));
    }

    /// Direct transcription of the STM rate formula.
    fn stm_oracle(p: &StmParams, x: &[f64]) -> f64 {
        let mut total = 0.0;
        for k in 0..p.w.len() {
            let mut a = p.b[k];
            for i in 0..x.len() {
                a += p.w[k][i] * x[i];
            }
            for m in 0..p.u.len() {
                let mut q = 0.0;
                for i in 0..x.len() {
                    q += p.u[m][i] * x[i];
                }
                a += p.beta[k][m] * q * q;
            }
            total += a.exp();
        }
        total
    }

    #[test]
    fn stm_rate_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let shape = ModelShape::Stm { dim: 6, components: 3, quadratic: 2 };
        for _ in 0..50 {
            let theta = randn(&mut rng, shape.n_params(), 0.3);
            let x = randn(&mut rng, 6, 1.0);
            let p = ModelParams::from_flat(shape, &theta).unwrap();
            let ModelParams::Stm(ref stm) = p else { unreachable!() };
            let got = rate(&p, &x).unwrap();
            let want = stm_oracle(stm, &x);
            assert!((got - want).abs() <= 1e-12 * want, "{got} vs {want}");
        }
    }

    #[test]
    fn stm_without_quadratics_nests_lnp() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let w = randn(&mut rng, 5, 0.5);
            let b: f64 = rng.random_range(-2.0..1.0);
            let x = randn(&mut rng, 5, 1.0);
            let lnp = ModelParams::Lnp(LnpParams { w: w.clone(), b });
            let stm = ModelParams::Stm(StmParams {
                w: vec![w],
                u: vec![],
                beta: vec![vec![]],
                b: vec![b],
            });
            let (a, c) = (rate(&lnp, &x).unwrap(), rate(&stm, &x).unwrap());
            assert!((a - c).abs() <= 1e-12 * a);
        }
    }

    #[test]
    fn exponent_clamp_keeps_rates_finite() {
        let lnp = ModelParams::Lnp(LnpParams { w: vec![1e3], b: 0.0 });
        let hi = rate(&lnp, &[1.0]).unwrap();
        let lo = rate(&lnp, &[-1.0]).unwrap();
        assert_eq!(hi, 30f64.exp());
        assert_eq!(lo, (-30f64).exp());
        assert!(lo > 0.0);
    }

    #[test]
    fn log_likelihood_examples() {
        assert!((poisson_log_likelihood(&[1.0], &[0]).unwrap() + 1.0).abs() < 1e-15);
        let v = poisson_log_likelihood(&[2.0], &[2]).unwrap();
        assert!((v - (2f64.ln() - 2.0)).abs() < 1e-14);
        assert!(poisson_log_likelihood(&[0.0], &[1]).is_err());
        assert!(poisson_log_likelihood(&[1.0, 2.0], &[1]).is_err());
    }

    #[test]
    fn log_likelihood_matches_pmf_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rates: Vec<f64> = (0..300).map(|_| rng.random_range(0.01..6.0)).collect();
        let counts: Vec<u32> = (0..300).map(|_| rng.random_range(0..12)).collect();
        let oracle = rates
            .iter()
            .zip(&counts)
            .map(|(&l, &k)| {
                let mut pmf = (-l as f64).exp();
                for i in 1..=k {
                    pmf *= l / i as f64;
                }
                pmf.ln()
            })
            .sum::<f64>()
            / 300.0;
        let got = poisson_log_likelihood(&rates, &counts).unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn intercept_stationary_at_log_mean_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut rows: Vec<Vec<f64>> = (0..500).map(|_| randn(&mut rng, 3, 1.0)).collect();
        for j in 0..3 {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / 500.0;
            rows.iter_mut().for_each(|r| r[j] -= m);
        }
        let counts: Vec<u32> = (0..500).map(|_| rng.random_range(0..4)).collect();
        let mean = counts.iter().sum::<u32>() as f64 / 500.0;
        let p = ModelParams::Lnp(LnpParams { w: vec![0.0; 3], b: mean.ln() });
        let g = gradient(&p, &features(rows), &counts).unwrap();
        let ModelParams::Lnp(g) = g else { unreachable!() };
        assert!(g.b.abs() < 1e-10, "{}", g.b);
    }

    #[test]
    fn flat_round_trip_and_shape_errors() {
        let shape = ModelShape::Mlnn { dim: 4, hidden1: 3, hidden2: 2 };
        let theta: Vec<f64> = (0..shape.n_params()).map(|i| i as f64).collect();
        let p = ModelParams::from_flat(shape, &theta).unwrap();
        let back = p.to_flat().unwrap();
        assert_eq!(back.shape, shape);
        assert_eq!(back.theta, theta);
        assert!(ModelParams::from_flat(shape, &theta[1..]).is_err());

        let bad = ModelParams::Stm(StmParams {
            w: vec![vec![0.0; 2], vec![0.0; 3]],
            u: vec![],
            beta: vec![vec![], vec![]],
            b: vec![0.0, 0.0],
        });
        assert!(bad.to_flat().is_err());
    }

    #[test]
    fn member_json_is_unambiguous() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for shape in [
            ModelShape::Stm { dim: 3, components: 2, quadratic: 1 },
            ModelShape::Lnp { dim: 3 },
            ModelShape::Mlnn { dim: 3, hidden1: 2, hidden2: 2 },
        ] {
            let p = ModelParams::from_flat(shape, &randn(&mut rng, shape.n_params(), 1.0)).unwrap();
            let text = serde_json::to_string(&p).unwrap();
            let back: ModelParams = serde_json::from_str(&text).unwrap();
            assert_eq!(back, p);
        }
    }

    #[test]
    fn geometric_ensemble() {
        let m = |b: f64| FlatModel::new(ModelShape::Lnp { dim: 1 }, vec![0.0, b]).unwrap();
        let x = [0.7];
        let single = ensemble_rate(&[m(0.4)], &x).unwrap();
        assert!((single - 0.4f64.exp()).abs() < 1e-15);
        let two = ensemble_rate(&[m(0.0), m(4f64.ln())], &x).unwrap();
        assert!((two - 2.0).abs() < 1e-14);
        assert!(ensemble_rate(&[], &x).is_err());
    }

    #[test]
    fn sampling() {
        assert_eq!(sample_spike_train(&[0.0; 100], 1).unwrap(), vec![0; 100]);
        let rates = vec![3.0; 100_000];
        let a = sample_spike_train(&rates, 42).unwrap();
        let b = sample_spike_train(&rates, 42).unwrap();
        assert_eq!(a, b);
        let mean = a.iter().map(|&c| c as f64).sum::<f64>() / 1e5;
        assert!((mean - 3.0).abs() < 3.0 * (3.0f64 / 1e5).sqrt(), "{mean}");
        assert!(sample_spike_train(&[-1.0], 0).is_err());
    }

    /// Average log-likelihood gradient against central differences.
    fn max_fd_error(shape: ModelShape, rng: &mut ChaCha8Rng) -> f64 {
        let dim = shape.dim();
        let n = 40;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| randn(rng, dim, 1.0)).collect();
        let counts: Vec<u32> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let feats = features(rows);
        let theta = loop {
            let th = randn(rng, shape.n_params(), 0.4);
            if !near_kink(shape, &th, &feats) {
                break th;
            }
        };
        let obj = PoissonObjective::new(shape, &feats, &counts, 0.0).unwrap();
        let mut g = vec![0.0; theta.len()];
        obj.value_grad(&theta, &mut g);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..theta.len() {
            let mut tp = theta.clone();
            tp[i] += h;
            let mut tm = theta.clone();
            tm[i] -= h;
            let fd = (obj.value(&tp) - obj.value(&tm)) / (2.0 * h);
            let err = (g[i] - fd).abs() / g[i].abs().max(fd.abs()).max(1e-3);
            worst = worst.max(err);
        }
        worst
    }

    fn near_kink(shape: ModelShape, theta: &[f64], feats: &FeatureMatrix) -> bool {
        let ModelParams::Mlnn(p) = ModelParams::from_flat(shape, theta).unwrap() else {
            return false;
        };
        for t in 0..feats.n_rows() {
            let x = feats.row(t);
            let h1: Vec<f64> = p.w1.iter().zip(&p.b1).map(|(w, b)| dot(w, x) + b).collect();
            if h1.iter().any(|v| v.abs() < 1e-3) {
                return true;
            }
            let r1: Vec<f64> = h1.iter().map(|v| v.max(0.0)).collect();
            if p.w2.iter().zip(&p.b2).any(|(w, b)| (dot(w, &r1) + b).abs() < 1e-3) {
                return true;
            }
        }
        false
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for shape in [
            ModelShape::Stm { dim: 5, components: 3, quadratic: 2 },
            ModelShape::Lnp { dim: 5 },
            ModelShape::Mlnn { dim: 5, hidden1: 10, hidden2: 5 },
        ] {
            for _ in 0..20 {
                let e = max_fd_error(shape, &mut rng);
                assert!(e < 1e-5, "{shape:?}: {e}");
            }
        }
    }
}
