//! Artificial recordings from an autoregressive calcium model.
//!
//! Per bin: `k_t ~ Poisson(lambda)`, `C_t = gamma C_{t-1} + k_t` with
//! `C_0 = 0`, and fluorescence `x_t ~ Poisson(a C_t + q C_t^2 + b)`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::{save_manifest, save_recording, DatasetManifest, Recording};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub gamma: f64,
    pub a: f64,
    pub b: f64,
    /// Weight of `C_t^2` in the fluorescence mean; 0 gives the linear model.
    pub quadratic_coeff: f64,
    pub rate_min_hz: f64,
    pub rate_max_hz: f64,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub n_cells: usize,
    pub seed: u64,
    pub dataset_id: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            gamma: 0.98,
            a: 100.0,
            b: 1.0,
            quadratic_coeff: 0.0,
            rate_min_hz: 0.0,
            rate_max_hz: 400.0,
            duration_s: 100.0,
            sample_rate_hz: 100.0,
            n_cells: 20,
            seed: 0,
            dataset_id: "synthetic".to_string(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(format!("synth config: {m}")));
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in [0, 1)");
        }
        if !(self.a > 0.0) || !(self.b >= 0.0) || !(self.quadratic_coeff >= 0.0) {
            return bad("a must be positive, b and quadratic_coeff nonnegative");
        }
        if !(self.rate_min_hz >= 0.0) || !(self.rate_min_hz < self.rate_max_hz) {
            return bad("rate bounds must satisfy 0 <= rate_min_hz < rate_max_hz");
        }
        if !(self.sample_rate_hz > 0.0) || !(self.duration_s * self.sample_rate_hz >= 1.0) {
            return bad("need a positive sample rate and at least one sample");
        }
        if self.n_cells == 0 {
            return bad("n_cells must be positive");
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }
}

/// Latent and observed sequences of one simulated cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedCell {
    pub rate_hz: f64,
    pub counts: Vec<u32>,
    pub calcium: Vec<f64>,
    pub fluorescence: Vec<f64>,
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("finite positive mean").sample(rng) as u64
}

/// Simulates one cell at a given firing rate.
pub fn simulate_cell(cfg: &SynthConfig, rate_hz: f64, rng: &mut ChaCha8Rng) -> SimulatedCell {
    let n = cfg.n_samples();
    let lam = rate_hz / cfg.sample_rate_hz;
    let mut counts = Vec::with_capacity(n);
    let mut calcium = Vec::with_capacity(n);
    let mut fluorescence = Vec::with_capacity(n);
    let mut c = 0.0;
    for _ in 0..n {
        let k = poisson(rng, lam);
        c = cfg.gamma * c + k as f64;
        let x = poisson(rng, cfg.a * c + cfg.quadratic_coeff * c * c + cfg.b);
        counts.push(k as u32);
        calcium.push(c);
        fluorescence.push(x as f64);
    }
    SimulatedCell {
        rate_hz,
        counts,
        calcium,
        fluorescence,
    }
}

/// RNG for one cell: the configured seed with the cell index as stream.
pub fn cell_rng(seed: u64, cell_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(cell_index as u64);
    rng
}

pub fn cell_id(cell_index: usize) -> String {
    format!("cell_{cell_index:03}")
}

/// Spike times at bin centers; several spikes in one bin are spread
/// symmetrically around the center so the times stay strictly increasing.
pub fn spike_times_from_counts(counts: &[u32], sample_rate_hz: f64) -> Vec<f64> {
    let width = 1.0 / sample_rate_hz;
    let mut times = Vec::new();
    for (t, &k) in counts.iter().enumerate() {
        if k == 0 {
            continue;
        }
        let center = (t as f64 + 0.5) * width;
        let step = (1e-4f64).min(width / (k as f64 + 1.0));
        for j in 0..k {
            times.push(center + (j as f64 - (k as f64 - 1.0) / 2.0) * step);
        }
    }
    times
}

/// Draws the firing rate of a cell uniformly from `(rate_min_hz, rate_max_hz]`
/// and simulates it.
pub fn generate_cell_data(cfg: &SynthConfig, cell_index: usize) -> SimulatedCell {
    let mut rng = cell_rng(cfg.seed, cell_index);
    let u: f64 = rng.random();
    let rate_hz = cfg.rate_max_hz - u * (cfg.rate_max_hz - cfg.rate_min_hz);
    simulate_cell(cfg, rate_hz, &mut rng)
}

pub fn generate_cell(cfg: &SynthConfig, cell_index: usize) -> Result<Recording> {
    cfg.validate()?;
    let sim = generate_cell_data(cfg, cell_index);
    let spikes = spike_times_from_counts(&sim.counts, cfg.sample_rate_hz);
    let mut rec = Recording::new(
        cell_id(cell_index),
        cfg.dataset_id.clone(),
        sim.fluorescence,
        cfg.sample_rate_hz,
        spikes,
    )?;
    rec.indicator = "synthetic".to_string();
    rec.meta.insert("rate_hz".into(), format!("{}", sim.rate_hz));
    rec.meta.insert("cell_index".into(), cell_index.to_string());
    Ok(rec)
}

/// Writes `cfg.n_cells` bundles and `dataset.json` under `out_dir`.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    let members: Vec<String> = (0..cfg.n_cells).map(cell_id).collect();
    (0..cfg.n_cells).into_par_iter().try_for_each(|i| {
        let rec = generate_cell(cfg, i)?;
        save_recording(&rec, out_dir.join(&members[i]))
    })?;
    let mut manifest = DatasetManifest::new(cfg.dataset_id.clone(), members);
    manifest.provenance = Some(serde_json::to_value(cfg).expect("config serializes"));
    save_manifest(out_dir, &manifest)?;
    Ok(manifest)
}
