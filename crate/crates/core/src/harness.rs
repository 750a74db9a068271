//! Experiment protocols: leave-one-out cross-validation, cross-dataset
//! generalization, frequency sweeps, model comparisons and training-set-size
//! sweeps.
//!
//! Every protocol reduces to a list of folds (training cells, held-out cells).
//! Each fold fits PCA and models on its training cells only, then predicts its
//! held-out cells at the model bin rate. Metrics are computed afterwards per
//! method, dataset and evaluation rate, with one calibration fitted to the
//! pooled held-out predictions of each group.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{deconv_grid, deconvolve, raw_predict, DeconvConfig};
use crate::error::{Error, Result};
use crate::features::{
    fit_pca_from_stats, project_trace, FeatureMatrix, PcaBasis, WindowStats, DEFAULT_VARIANCE_THRESHOLD,
    DEFAULT_WINDOW_MS,
};
use crate::metrics::{
    correlation, rebin_pair, MetricsReport, DEFAULT_EVAL_RATE_HZ, DEFAULT_N_KNOTS,
};
use crate::models::{ModelEnsemble, ModelKind};
use crate::preprocess::preprocess_trace;
use crate::signal_io::{load_dataset, rebin_factor, resample_to_common, write_file, write_json, Recording};
use crate::stats::{mean, wilcoxon_signed_rank, SignedRankTest};
use crate::trainer::{train, MemberLog, TrainConfig};
use crate::{DEFAULT_BIN_RATE_HZ, FORMAT_VERSION};

pub const RAW_METHOD: &str = "raw";
pub const DECONV_METHOD: &str = "deconv";
/// Evaluation rates of a frequency sweep when none are configured.
pub const SWEEP_RATES_HZ: [f64; 6] = [2.0, 5.0, 10.0, 25.0, 50.0, 100.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Loocv,
    CrossDataset,
    FreqSweep,
    Complexity,
    SizeSweep,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::InvalidInput(format!("unknown protocol {s:?}")))
    }
}

/// Settings shared by training and prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub bin_rate_hz: f64,
    pub window_ms: f64,
    pub variance_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            bin_rate_hz: DEFAULT_BIN_RATE_HZ,
            window_ms: DEFAULT_WINDOW_MS,
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub format_version: u32,
    pub protocol: Protocol,
    pub datasets: Vec<PathBuf>,
    /// One entry per model kind to train. Their seeds are replaced by `seed`.
    pub models: Vec<TrainConfig>,
    pub baselines: bool,
    /// Empty means 25 Hz, or the full sweep for `freq_sweep`.
    pub eval_rates_hz: Vec<f64>,
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub n_knots: usize,
    /// Training-set sizes for `size_sweep`; empty means `1..N-1`.
    pub sizes: Vec<usize>,
    /// Caps the held-out cells per size in `size_sweep`.
    pub max_test_cells: Option<usize>,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            format_version: FORMAT_VERSION,
            protocol: Protocol::Loocv,
            datasets: Vec::new(),
            models: vec![TrainConfig::for_kind(ModelKind::Stm)],
            baselines: true,
            eval_rates_hz: Vec::new(),
            seed: 0,
            pipeline: PipelineConfig::default(),
            n_knots: DEFAULT_N_KNOTS,
            sizes: Vec::new(),
            max_test_cells: None,
            output: None,
        }
    }
}

impl ExperimentSpec {
    pub fn resolved_eval_rates(&self) -> Vec<f64> {
        if !self.eval_rates_hz.is_empty() {
            self.eval_rates_hz.clone()
        } else if self.protocol == Protocol::FreqSweep {
            SWEEP_RATES_HZ.to_vec()
        } else {
            vec![DEFAULT_EVAL_RATE_HZ]
        }
    }

    /// Training configurations with the experiment seed applied.
    pub fn train_configs(&self) -> Vec<TrainConfig> {
        self.models
            .iter()
            .map(|m| TrainConfig {
                seed: self.seed,
                ..m.clone()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::InvalidInput(format!(
                "unsupported experiment format_version {}",
                self.format_version
            )));
        }
        if self.datasets.is_empty() {
            return Err(Error::InvalidInput("experiment lists no datasets".into()));
        }
        if self.models.is_empty() && !self.baselines {
            return Err(Error::InvalidInput("experiment has no methods".into()));
        }
        for m in &self.models {
            m.validate()?;
        }
        let mut kinds: Vec<ModelKind> = self.models.iter().map(|m| m.kind).collect();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != self.models.len() {
            return Err(Error::InvalidInput("each model kind may appear once".into()));
        }
        for &r in &self.resolved_eval_rates() {
            rebin_factor(self.pipeline.bin_rate_hz, r)?;
        }
        if self.n_knots < 2 {
            return Err(Error::InvalidInput("n_knots must be at least 2".into()));
        }
        Ok(())
    }

    pub fn method_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.models.iter().map(|m| m.kind.to_string()).collect();
        if self.baselines {
            names.push(RAW_METHOD.into());
            names.push(DECONV_METHOD.into());
        }
        names
    }
}

/// A recording after resampling and preprocessing.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCell {
    pub dataset_id: String,
    pub cell_id: String,
    /// Detrended, normalized fluorescence at the model bin rate.
    pub normalized: Vec<f64>,
    pub counts: Vec<u32>,
    pub window_stats: WindowStats,
}

impl PreparedCell {
    pub fn key(&self) -> String {
        format!("{}/{}", self.dataset_id, self.cell_id)
    }
}

pub fn prepare_recording(rec: &Recording, pipeline: &PipelineConfig) -> Result<PreparedCell> {
    let binned = resample_to_common(rec, pipeline.bin_rate_hz)?;
    let (normalized, _) = preprocess_trace(&binned.fluorescence)?;
    let window_stats = WindowStats::from_trace(&normalized, pipeline.window_ms, pipeline.bin_rate_hz)?;
    Ok(PreparedCell {
        dataset_id: rec.dataset_id.clone(),
        cell_id: rec.cell_id.clone(),
        normalized,
        counts: binned.spike_counts,
        window_stats,
    })
}

pub fn prepare_dataset_dirs(dirs: &[PathBuf], pipeline: &PipelineConfig) -> Result<Vec<PreparedCell>> {
    let mut recordings = Vec::new();
    for dir in dirs {
        let ds = load_dataset(dir)?;
        for mut rec in ds.recordings {
            rec.dataset_id = ds.manifest.dataset_id.clone();
            recordings.push(rec);
        }
    }
    let cells: Vec<PreparedCell> = recordings
        .par_iter()
        .map(|r| {
            prepare_recording(r, pipeline)
                .map_err(|e| Error::InvalidInput(format!("{}/{}: {e}", r.dataset_id, r.cell_id)))
        })
        .collect::<Result<_>>()?;
    let mut seen = std::collections::BTreeSet::new();
    for c in &cells {
        if !seen.insert(c.key()) {
            return Err(Error::InvalidInput(format!("duplicate cell {}", c.key())));
        }
    }
    Ok(cells)
}

/// Projects a trace with the ensemble's basis and predicts rates per bin.
pub fn predict_normalized(ensemble: &ModelEnsemble, normalized: &[f64]) -> Result<Vec<f64>> {
    let features = project_trace(&ensemble.pca_basis, normalized, ensemble.window_ms, ensemble.bin_rate_hz)?;
    ensemble.predict(&features)
}

/// Full pipeline from a recording to per-bin rates.
pub fn predict_recording(ensemble: &ModelEnsemble, rec: &Recording) -> Result<(PreparedCell, Vec<f64>)> {
    let pipeline = PipelineConfig {
        bin_rate_hz: ensemble.bin_rate_hz,
        window_ms: ensemble.window_ms,
        ..Default::default()
    };
    let cell = prepare_recording(rec, &pipeline)?;
    let rates = predict_normalized(ensemble, &cell.normalized)?;
    Ok((cell, rates))
}

/// Models fitted on one training set.
#[derive(Debug, Clone)]
pub struct FoldModels {
    pub basis: PcaBasis,
    pub ensembles: Vec<ModelEnsemble>,
    pub logs: Vec<Vec<MemberLog>>,
}

/// Fits PCA on the pooled windows of `train_cells`, then one ensemble per config.
pub fn fit_models(
    train_cells: &[&PreparedCell],
    pipeline: &PipelineConfig,
    configs: &[TrainConfig],
) -> Result<FoldModels> {
    let mut stats: Option<WindowStats> = None;
    for c in train_cells {
        match stats.as_mut() {
            None => stats = Some(c.window_stats.clone()),
            Some(s) => s.merge(&c.window_stats)?,
        }
    }
    let stats = stats.ok_or_else(|| Error::InvalidInput("no training cells".into()))?;
    let basis = fit_pca_from_stats(&stats, pipeline.variance_threshold)?;
    let mut ensembles = Vec::new();
    let mut logs = Vec::new();
    if !configs.is_empty() {
        let parts = train_cells
            .iter()
            .map(|c| project_trace(&basis, &c.normalized, pipeline.window_ms, pipeline.bin_rate_hz))
            .collect::<Result<Vec<FeatureMatrix>>>()?;
        let features = FeatureMatrix::vstack(&parts)?;
        drop(parts);
        let counts: Vec<u32> = train_cells.iter().flat_map(|c| c.counts.iter().copied()).collect();
        for cfg in configs {
            let trained = train(&features, &counts, cfg, basis.clone())?;
            ensembles.push(trained.ensemble);
            logs.push(trained.logs);
        }
    }
    Ok(FoldModels { basis, ensembles, logs })
}

/// Hex SHA-256 of the sorted training cell keys.
pub fn fold_hash(train_keys: &[String]) -> String {
    let mut keys = train_keys.to_vec();
    keys.sort();
    let mut h = Sha256::new();
    for k in &keys {
        h.update(k.as_bytes());
        h.update([0u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
struct Fold {
    train: Vec<usize>,
    test: Vec<usize>,
    train_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub index: usize,
    pub test_cells: Vec<String>,
    pub train_cells: Vec<String>,
    pub train_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deconv: Option<DeconvConfig>,
    /// Final training objective of each member, per model kind.
    pub final_objectives: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub reference: String,
    pub other: String,
    pub eval_rate_hz: f64,
    pub metric: String,
    pub cells: Vec<String>,
    /// `reference - other` per cell.
    pub differences: Vec<f64>,
    pub mean_difference: f64,
    pub test: SignedRankTest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub format_version: u32,
    /// The spec with defaults resolved; running it again reproduces the report.
    pub spec: ExperimentSpec,
    pub methods: Vec<String>,
    pub folds: Vec<FoldRecord>,
    pub results: Vec<MetricsReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub comparisons: Vec<PairedComparison>,
    pub notes: Vec<String>,
}

impl ExperimentReport {
    pub fn find(&self, method: &str, dataset_id: &str, eval_rate_hz: f64) -> Option<&MetricsReport> {
        self.results.iter().find(|r| {
            r.method == method && r.dataset_id == dataset_id && r.eval_rate_hz == eval_rate_hz && r.train_size.is_none()
        })
    }

    /// Mean per-cell correlation of a method over every dataset at a rate.
    pub fn mean_correlation(&self, method: &str, eval_rate_hz: f64) -> Option<f64> {
        self.pooled(method, eval_rate_hz, |c| Some(c.correlation))
    }

    pub fn mean_info_gain(&self, method: &str, eval_rate_hz: f64) -> Option<f64> {
        self.pooled(method, eval_rate_hz, |c| Some(c.info_gain_bits_per_bin))
    }

    fn pooled(
        &self,
        method: &str,
        eval_rate_hz: f64,
        f: impl Fn(&crate::metrics::CellMetrics) -> Option<f64>,
    ) -> Option<f64> {
        let v: Vec<f64> = self
            .results
            .iter()
            .filter(|r| r.method == method && r.eval_rate_hz == eval_rate_hz && r.train_size.is_none())
            .flat_map(|r| r.per_cell.iter().filter_map(&f))
            .collect();
        (!v.is_empty()).then(|| mean(&v))
    }
}

/// Held-out predictions of one method for one cell.
type Predictions = BTreeMap<(String, Option<usize>), BTreeMap<usize, Vec<f64>>>;

struct FoldOutput {
    record: FoldRecord,
    predictions: Vec<(String, usize, Vec<f64>)>,
}

/// Correlation of every deconvolution setting on every cell, at `eval_rate_hz`.
fn deconv_scores(cells: &[PreparedCell], pipeline: &PipelineConfig, eval_rate_hz: f64) -> Result<Vec<Vec<f64>>> {
    let grid = deconv_grid();
    cells
        .par_iter()
        .map(|c| {
            grid.iter()
                .map(|cfg| {
                    let s = deconvolve(&c.normalized, pipeline.bin_rate_hz, cfg)?;
                    let (p, k) = rebin_pair(&s, &c.counts, pipeline.bin_rate_hz, eval_rate_hz)?;
                    Ok(correlation(&p, &k)?.r)
                })
                .collect()
        })
        .collect()
}

/// Rate at which deconvolution settings are compared; fixed so that results at
/// one eval rate do not depend on which other rates are requested.
pub fn deconv_selection_rate(pipeline: &PipelineConfig) -> f64 {
    if rebin_factor(pipeline.bin_rate_hz, DEFAULT_EVAL_RATE_HZ).is_ok() {
        DEFAULT_EVAL_RATE_HZ
    } else {
        pipeline.bin_rate_hz
    }
}

/// Setting with the best mean correlation over the training cells.
fn select_deconv(scores: &[Vec<f64>], train: &[usize]) -> DeconvConfig {
    let grid = deconv_grid();
    let mut best = (f64::NEG_INFINITY, 0);
    for j in 0..grid.len() {
        let m = train.iter().map(|&i| scores[i][j]).sum::<f64>() / train.len() as f64;
        if m > best.0 {
            best = (m, j);
        }
    }
    grid[best.1]
}

fn run_fold(
    index: usize,
    fold: &Fold,
    cells: &[PreparedCell],
    spec: &ExperimentSpec,
    scores: Option<&[Vec<f64>]>,
) -> Result<FoldOutput> {
    let train_cells: Vec<&PreparedCell> = fold.train.iter().map(|&i| &cells[i]).collect();
    let train_keys: Vec<String> = train_cells.iter().map(|c| c.key()).collect();
    let configs = spec.train_configs();
    let models = fit_models(&train_cells, &spec.pipeline, &configs)?;
    let mut predictions = Vec::new();
    let mut final_objectives = BTreeMap::new();
    for (ens, logs) in models.ensembles.iter().zip(&models.logs) {
        final_objectives.insert(ens.kind.to_string(), logs.iter().map(|l| l.final_objective).collect());
        for &i in &fold.test {
            predictions.push((ens.kind.to_string(), i, predict_normalized(ens, &cells[i].normalized)?));
        }
    }
    let mut deconv = None;
    if spec.baselines {
        let cfg = select_deconv(scores.expect("scores computed when baselines are on"), &fold.train);
        for &i in &fold.test {
            predictions.push((RAW_METHOD.into(), i, raw_predict(&cells[i].normalized)));
            predictions.push((
                DECONV_METHOD.into(),
                i,
                deconvolve(&cells[i].normalized, spec.pipeline.bin_rate_hz, &cfg)?,
            ));
        }
        deconv = Some(cfg);
    }
    log::info!("fold {index}: trained on {} cells", fold.train.len());
    Ok(FoldOutput {
        record: FoldRecord {
            index,
            test_cells: fold.test.iter().map(|&i| cells[i].key()).collect(),
            train_hash: fold_hash(&train_keys),
            train_cells: train_keys,
            train_size: fold.train_size,
            deconv,
            final_objectives,
        },
        predictions,
    })
}

fn dataset_groups(cells: &[PreparedCell]) -> Vec<(String, Vec<usize>)> {
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        match groups.iter_mut().find(|g| g.0 == c.dataset_id) {
            Some(g) => g.1.push(i),
            None => groups.push((c.dataset_id.clone(), vec![i])),
        }
    }
    groups
}

fn loocv_folds(cells: &[PreparedCell]) -> Result<Vec<Fold>> {
    let mut folds = Vec::new();
    for (id, members) in dataset_groups(cells) {
        if members.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "dataset {id} has {} cell(s); leave-one-out needs at least 2",
                members.len()
            )));
        }
        for &test in &members {
            folds.push(Fold {
                train: members.iter().copied().filter(|&i| i != test).collect(),
                test: vec![test],
                train_size: None,
            });
        }
    }
    Ok(folds)
}

fn cross_dataset_folds(cells: &[PreparedCell]) -> Result<Vec<Fold>> {
    let groups = dataset_groups(cells);
    if groups.len() < 2 {
        return Err(Error::InvalidInput("cross-dataset evaluation needs at least 2 datasets".into()));
    }
    Ok(groups
        .iter()
        .map(|(id, members)| {
            let train: Vec<usize> = (0..cells.len()).filter(|i| cells[*i].dataset_id != *id).collect();
            debug_assert_eq!(train.len(), cells.len() - members.len());
            Fold {
                train,
                test: members.clone(),
                train_size: None,
            }
        })
        .collect())
}

fn size_sweep_folds(cells: &[PreparedCell], spec: &ExperimentSpec) -> Result<Vec<Fold>> {
    let groups = dataset_groups(cells);
    if groups.len() != 1 {
        return Err(Error::InvalidInput("size sweep takes exactly one dataset".into()));
    }
    let n = cells.len();
    if n < 3 {
        return Err(Error::InvalidInput(format!("size sweep needs at least 3 cells, got {n}")));
    }
    let sizes: Vec<usize> = if spec.sizes.is_empty() { (1..n).collect() } else { spec.sizes.clone() };
    if let Some(&bad) = sizes.iter().find(|&&s| s == 0 || s >= n) {
        return Err(Error::InvalidInput(format!("training size {bad} outside 1..{}", n - 1)));
    }
    let n_test = spec.max_test_cells.unwrap_or(n).clamp(1, n);
    let mut folds = Vec::new();
    for &size in &sizes {
        for test in 0..n_test {
            let others: Vec<usize> = (0..n).filter(|&i| i != test).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((size as u64) << 32) | test as u64);
            let mut train: Vec<usize> = sample(&mut rng, others.len(), size).into_iter().map(|j| others[j]).collect();
            train.sort_unstable();
            folds.push(Fold {
                train,
                test: vec![test],
                train_size: Some(size),
            });
        }
    }
    Ok(folds)
}

/// Metrics per method, dataset and rate from pooled held-out predictions.
fn assemble(
    cells: &[PreparedCell],
    predictions: &Predictions,
    spec: &ExperimentSpec,
    notes: &mut Vec<String>,
) -> Result<Vec<MetricsReport>> {
    let rates = spec.resolved_eval_rates();
    let groups = dataset_groups(cells);
    let mut jobs = Vec::new();
    for ((method, size), per_cell) in predictions {
        for (dataset_id, members) in &groups {
            let held: Vec<usize> = members.iter().copied().filter(|i| per_cell.contains_key(i)).collect();
            if held.is_empty() {
                continue;
            }
            for &rate in &rates {
                jobs.push((method.clone(), *size, dataset_id.clone(), held.clone(), rate));
            }
        }
    }
    let outputs: Vec<(MetricsReport, Vec<String>)> = jobs
        .par_iter()
        .map(|(method, size, dataset_id, held, rate)| {
            let mut rebinned = Vec::new();
            let mut skipped = Vec::new();
            for &i in held {
                let (p, k) = rebin_pair(&predictions[&(method.clone(), *size)][&i], &cells[i].counts, spec.pipeline.bin_rate_hz, *rate)?;
                if k.iter().all(|&v| v == 0) {
                    skipped.push(format!("{} has no spikes; left out of {method} metrics", cells[i].key()));
                    continue;
                }
                rebinned.push((cells[i].cell_id.clone(), p, k));
            }
            let mut report = MetricsReport::build(method, dataset_id, *rate, &rebinned, spec.n_knots)?;
            report.train_size = *size;
            Ok((report, skipped))
        })
        .collect::<Result<_>>()?;
    let mut reports = Vec::with_capacity(outputs.len());
    for (r, skipped) in outputs {
        for s in skipped {
            if !notes.contains(&s) {
                notes.push(s);
            }
        }
        reports.push(r);
    }
    let order = spec.method_names();
    reports.sort_by_key(|r| (order.iter().position(|m| *m == r.method), r.train_size));
    Ok(reports)
}

fn paired_comparisons(report: &ExperimentReport, reference: &str) -> Result<Vec<PairedComparison>> {
    let mut out = Vec::new();
    for rate in report.spec.resolved_eval_rates() {
        let scores = |method: &str| -> BTreeMap<String, f64> {
            report
                .results
                .iter()
                .filter(|r| r.method == method && r.eval_rate_hz == rate && r.train_size.is_none())
                .flat_map(|r| r.per_cell.iter().map(move |c| (format!("{}/{}", r.dataset_id, c.cell_id), c.correlation)))
                .collect()
        };
        let base = scores(reference);
        for other in report.methods.iter().filter(|m| m.as_str() != reference) {
            let o = scores(other);
            let cells: Vec<String> = base.keys().filter(|k| o.contains_key(*k)).cloned().collect();
            let differences: Vec<f64> = cells.iter().map(|k| base[k] - o[k]).collect();
            if differences.is_empty() {
                continue;
            }
            out.push(PairedComparison {
                reference: reference.to_string(),
                other: other.clone(),
                eval_rate_hz: rate,
                metric: "correlation".into(),
                mean_difference: mean(&differences),
                test: wilcoxon_signed_rank(&differences)?,
                cells,
                differences,
            });
        }
    }
    Ok(out)
}

/// Runs a protocol on cells that are already prepared.
pub fn run_prepared(spec: &ExperimentSpec, cells: &[PreparedCell]) -> Result<ExperimentReport> {
    spec.validate()?;
    let mut spec = spec.clone();
    spec.eval_rates_hz = spec.resolved_eval_rates();
    if spec.protocol == Protocol::Complexity && spec.models.len() < 2 {
        return Err(Error::InvalidInput("model comparison needs at least 2 model kinds".into()));
    }
    let folds = match spec.protocol {
        Protocol::Loocv | Protocol::FreqSweep | Protocol::Complexity => loocv_folds(cells)?,
        Protocol::CrossDataset => cross_dataset_folds(cells)?,
        Protocol::SizeSweep => size_sweep_folds(cells, &spec)?,
    };
    let scores = if spec.baselines {
        Some(deconv_scores(cells, &spec.pipeline, deconv_selection_rate(&spec.pipeline))?)
    } else {
        None
    };
    let outputs: Vec<FoldOutput> = folds
        .par_iter()
        .enumerate()
        .map(|(i, f)| run_fold(i, f, cells, &spec, scores.as_deref()))
        .collect::<Result<_>>()?;

    let mut predictions: Predictions = BTreeMap::new();
    let mut records = Vec::with_capacity(outputs.len());
    for (out, fold) in outputs.into_iter().zip(&folds) {
        for (method, i, p) in out.predictions {
            predictions.entry((method, fold.train_size)).or_default().insert(i, p);
        }
        records.push(out.record);
    }
    let mut notes = vec![
        "folds are formed per recording".to_string(),
        "deconv is a moving-average smoother followed by a first-order inverse filter; its setting is chosen per fold on training-cell correlation".to_string(),
        "aggregate errors are plain standard errors of per-cell scores".to_string(),
    ];
    let results = assemble(cells, &predictions, &spec, &mut notes)?;
    let mut report = ExperimentReport {
        format_version: FORMAT_VERSION,
        methods: spec.method_names(),
        spec,
        folds: records,
        results,
        comparisons: Vec::new(),
        notes,
    };
    if report.spec.protocol == Protocol::Complexity {
        let reference = report
            .spec
            .models
            .iter()
            .find(|m| m.kind == ModelKind::Stm)
            .unwrap_or(&report.spec.models[0])
            .kind
            .to_string();
        report.comparisons = paired_comparisons(&report, &reference)?;
    }
    Ok(report)
}

/// Loads the datasets of `spec` and runs its protocol.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let cells = prepare_dataset_dirs(&spec.datasets, &spec.pipeline)?;
    run_prepared(spec, &cells)
}

pub fn run_loocv(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    run_experiment(&ExperimentSpec { protocol: Protocol::Loocv, ..spec.clone() })
}

pub fn run_cross_dataset(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    run_experiment(&ExperimentSpec { protocol: Protocol::CrossDataset, ..spec.clone() })
}

pub fn run_freq_sweep(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    run_experiment(&ExperimentSpec { protocol: Protocol::FreqSweep, ..spec.clone() })
}

pub fn run_complexity(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    run_experiment(&ExperimentSpec { protocol: Protocol::Complexity, ..spec.clone() })
}

pub fn run_size_sweep(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    run_experiment(&ExperimentSpec { protocol: Protocol::SizeSweep, ..spec.clone() })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per method, dataset, rate and cell.
pub fn metrics_csv(report: &ExperimentReport) -> String {
    let mut s = String::from(
        "method,dataset_id,train_size,eval_rate_hz,cell_id,correlation,info_gain_bits_per_bin,marginal_entropy_bits_per_bin,auc\n",
    );
    for r in &report.results {
        for c in &r.per_cell {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.method,
                r.dataset_id,
                r.train_size.map(|v| v.to_string()).unwrap_or_default(),
                r.eval_rate_hz,
                c.cell_id,
                c.correlation,
                c.info_gain_bits_per_bin,
                c.marginal_entropy_bits_per_bin,
                opt(c.auc)
            );
        }
    }
    s
}

/// Aggregate scores per method, dataset, rate and training size.
pub fn summary_csv(report: &ExperimentReport) -> String {
    let mut s = String::from(
        "method,dataset_id,train_size,eval_rate_hz,n_cells,mean_correlation,sem_correlation,mean_info_gain,relative_info_gain,mean_auc\n",
    );
    for r in &report.results {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.dataset_id,
            r.train_size.map(|v| v.to_string()).unwrap_or_default(),
            r.eval_rate_hz,
            r.per_cell.len(),
            opt(r.correlation.map(|c| c.mean)),
            opt(r.correlation.map(|c| c.sem)),
            opt(r.info_gain.map(|c| c.mean)),
            r.relative_info_gain,
            opt(r.auc.map(|c| c.mean))
        );
    }
    s
}

fn comparisons_csv(report: &ExperimentReport) -> String {
    let mut s = String::from("reference,other,eval_rate_hz,metric,n,mean_difference,w_plus,p_value\n");
    for c in &report.comparisons {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            c.reference, c.other, c.eval_rate_hz, c.metric, c.test.n, c.mean_difference, c.test.w_plus, c.test.p_value
        );
    }
    s
}

/// Writes `report.json`, `metrics.csv`, `summary.csv` and the plot table of
/// the protocol (`score_vs_rate.csv`, `score_vs_size.csv` or
/// `comparisons.csv`). Returns the written paths.
pub fn write_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let json = dir.join("report.json");
    write_json(&json, report)?;
    written.push(json);
    let summary = summary_csv(report);
    let mut files = vec![("metrics.csv", metrics_csv(report)), ("summary.csv", summary.clone())];
    match report.spec.protocol {
        Protocol::FreqSweep => files.push(("score_vs_rate.csv", summary)),
        Protocol::SizeSweep => files.push(("score_vs_size.csv", summary)),
        Protocol::Complexity => files.push(("comparisons.csv", comparisons_csv(report))),
        Protocol::Loocv | Protocol::CrossDataset => {}
    }
    for (name, text) in files {
        let p = dir.join(name);
        write_file(&p, text.as_bytes())?;
        written.push(p);
    }
    Ok(written)
}
