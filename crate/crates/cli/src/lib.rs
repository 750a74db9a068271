//! Command implementations behind the `spikeforge` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use spikeforge::harness::{
    fit_models, predict_recording, prepare_dataset_dirs, run_experiment, write_report, ExperimentSpec,
    PipelineConfig, Protocol,
};
use spikeforge::metrics::{evaluate, Identity, MonotoneCalibration, RateTransform};
use spikeforge::models::{sample_spike_train, ModelEnsemble};
use spikeforge::preprocess::preprocess_trace;
use spikeforge::signal_io::{load_dataset, load_recording, resample_to_common};
use spikeforge::synth::{generate_dataset, SynthConfig};
use spikeforge::trainer::TrainConfig;
use spikeforge::FORMAT_VERSION;

pub const SEED_ENV: &str = "SPIKEFORGE_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] spikeforge::Error),
}

impl CliError {
    /// 1 usage, 2 data, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_numerical() => 3,
            CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Core(spikeforge::Error::InvalidInput(format!("{}: {e}", path.display())))
}

#[derive(Debug, Parser)]
#[command(name = "spikeforge", version, about = "Spike inference from calcium fluorescence traces")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalOpts {
    /// Config override, `dotted.key=value`; the value is parsed as JSON, else taken as a string.
    #[arg(long = "override", short = 'o', global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed; takes precedence over the config and SPIKEFORGE_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: logical cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "synthetic")]
        out: PathBuf,
    },
    /// Write detrended, normalized traces and binned counts for a dataset.
    Preprocess {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model ensemble on one or more datasets.
    Train {
        #[arg(long = "dataset", required = true)]
        datasets: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cell id to leave out of training; repeatable.
        #[arg(long)]
        exclude: Vec<String>,
        #[arg(long, default_value = "model.json")]
        out: PathBuf,
    },
    /// Predict rates for a recording bundle.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value = "rates.csv")]
        out: PathBuf,
        /// Write a Poisson spike-count sample instead of rates.
        #[arg(long)]
        sample: bool,
    },
    /// Score predicted rates against a bundle's spikes.
    Evaluate {
        #[arg(long)]
        rates: PathBuf,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, default_value_t = 25.0)]
        eval_rate: f64,
        /// Calibration JSON (`knots_x`, `knots_y`); identity when absent.
        #[arg(long)]
        calibration: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an experiment protocol.
    Experiment {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a model, report, dataset or bundle.
    Inspect { path: PathBuf },
}

/// Parses `a.b.c=value` and sets it inside `root`.
pub fn apply_override(root: &mut Value, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override {spec:?} is not KEY=VALUE")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::Usage(format!("override {spec:?} has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if !node.is_object() {
            return Err(CliError::Usage(format!("override {spec:?}: {part} is not inside an object")));
        }
        let obj = node.as_object_mut().expect("checked above");
        if i == parts.len() - 1 {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    unreachable!("key has at least one part")
}

/// Reads a JSON config (or `{}`), applies overrides, then the seed:
/// `--seed` wins, otherwise `SPIKEFORGE_SEED` fills a missing `seed`.
pub fn load_config_value(path: Option<&Path>, g: &GlobalOpts) -> CliResult<Value> {
    let mut v = match path {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| data_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| data_err(p, e))?
        }
        None => Value::Object(Map::new()),
    };
    if !v.is_object() {
        return Err(CliError::Usage("config must be a JSON object".into()));
    }
    for o in &g.overrides {
        apply_override(&mut v, o)?;
    }
    let obj = v.as_object_mut().expect("checked above");
    if let Some(s) = g.seed {
        obj.insert("seed".into(), s.into());
    } else if !obj.contains_key("seed") {
        if let Ok(s) = std::env::var(SEED_ENV) {
            let s: u64 = s
                .trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            obj.insert("seed".into(), s.into());
        }
    }
    Ok(v)
}

fn from_value<T: DeserializeOwned>(v: Value, what: &str) -> CliResult<T> {
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("invalid {what} config: {e}")))
}

/// A training config, with an optional `pipeline` section.
pub fn train_config_from_value(mut v: Value) -> CliResult<(TrainConfig, PipelineConfig)> {
    let pipeline = match v.as_object_mut().and_then(|o| o.remove("pipeline")) {
        Some(p) => from_value(p, "pipeline")?,
        None => PipelineConfig::default(),
    };
    let cfg: TrainConfig = from_value(v, "train")?;
    cfg.validate()?;
    Ok((cfg, pipeline))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| data_err(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub fn cmd_simulate(config: Option<&Path>, out: &Path, g: &GlobalOpts) -> CliResult<String> {
    let cfg: SynthConfig = from_value(load_config_value(config, g)?, "simulate")?;
    let manifest = generate_dataset(&cfg, out)?;
    let ds = load_dataset(out)?;
    let spikes: usize = ds.recordings.iter().map(|r| r.spike_times_s.len()).sum();
    Ok(format!(
        "wrote {} cells to {} ({} spikes, {} s per cell)",
        manifest.members.len(),
        out.display(),
        spikes,
        cfg.duration_s
    ))
}

pub fn cmd_preprocess(dataset: &Path, config: Option<&Path>, out: &Path, g: &GlobalOpts) -> CliResult<String> {
    let v = load_config_value(config, g)?;
    let mut pipeline: PipelineConfig = match v.as_object().and_then(|o| o.get("pipeline")) {
        Some(p) => from_value(p.clone(), "pipeline")?,
        None => PipelineConfig::default(),
    };
    if let Some(r) = v.get("bin_rate_hz").and_then(Value::as_f64) {
        pipeline.bin_rate_hz = r;
    }
    let ds = load_dataset(dataset)?;
    let mut fits = Map::new();
    for rec in &ds.recordings {
        let binned = resample_to_common(rec, pipeline.bin_rate_hz)?;
        let (normalized, fit) = preprocess_trace(&binned.fluorescence)?;
        let mut csv = String::from("t_s,normalized,count\n");
        for (i, (f, k)) in normalized.iter().zip(&binned.spike_counts).enumerate() {
            let _ = writeln!(csv, "{},{},{}", (i as f64 + 0.5) / pipeline.bin_rate_hz, f, k);
        }
        write_text(&out.join(format!("{}.csv", rec.cell_id)), &csv)?;
        fits.insert(rec.cell_id.clone(), serde_json::to_value(&fit).expect("serializable"));
    }
    let summary = serde_json::json!({
        "format_version": FORMAT_VERSION,
        "dataset_id": ds.manifest.dataset_id,
        "pipeline": pipeline,
        "detrend": fits,
    });
    write_text(&out.join("preprocess.json"), &to_json(&summary))?;
    Ok(format!("preprocessed {} cells into {}", ds.recordings.len(), out.display()))
}

pub fn cmd_train(
    datasets: &[PathBuf],
    config: Option<&Path>,
    exclude: &[String],
    out: &Path,
    g: &GlobalOpts,
) -> CliResult<String> {
    let (cfg, pipeline) = train_config_from_value(load_config_value(config, g)?)?;
    let cells = prepare_dataset_dirs(datasets, &pipeline)?;
    for x in exclude {
        if !cells.iter().any(|c| &c.cell_id == x || &c.key() == x) {
            return Err(CliError::Usage(format!("--exclude {x}: no such cell")));
        }
    }
    let train: Vec<_> = cells
        .iter()
        .filter(|c| !exclude.iter().any(|x| *x == c.cell_id || *x == c.key()))
        .collect();
    if train.is_empty() {
        return Err(CliError::Usage("every cell is excluded".into()));
    }
    let fold = fit_models(&train, &pipeline, std::slice::from_ref(&cfg))?;
    let ensemble = &fold.ensembles[0];
    write_text(out, &to_json(ensemble))?;
    let mut log = String::from("member,iteration,objective\n");
    for m in &fold.logs[0] {
        for (i, f) in m.objective_history.iter().enumerate() {
            let _ = writeln!(log, "{},{},{}", m.member, i, f);
        }
    }
    let log_path = out.with_file_name("train_log.csv");
    write_text(&log_path, &log)?;
    let failed = fold.logs[0].iter().filter(|l| l.error.is_some()).count();
    Ok(format!(
        "trained {} {} member(s) on {} cells ({} PCA components); wrote {} and {}{}",
        ensemble.members.len(),
        ensemble.kind,
        train.len(),
        ensemble.pca_basis.n_kept(),
        out.display(),
        log_path.display(),
        if failed > 0 { format!("; {failed} member(s) aborted") } else { String::new() }
    ))
}

pub fn cmd_infer(model: &Path, bundle: &Path, out: &Path, sample: bool, g: &GlobalOpts) -> CliResult<String> {
    let ensemble = ModelEnsemble::load(model)?;
    let rec = load_recording(bundle)?;
    let (_, rates) = predict_recording(&ensemble, &rec)?;
    let bin = ensemble.bin_rate_hz;
    let mut csv = String::new();
    if sample {
        let seed = match g.seed {
            Some(s) => s,
            None => match std::env::var(SEED_ENV) {
                Ok(s) => s.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV} is not an integer")))?,
                Err(_) => 0,
            },
        };
        let counts = sample_spike_train(&rates, seed)?;
        csv.push_str("t_s,count\n");
        for (i, k) in counts.iter().enumerate() {
            let _ = writeln!(csv, "{},{}", (i as f64 + 0.5) / bin, k);
        }
    } else {
        csv.push_str("t_s,rate_per_bin\n");
        for (i, r) in rates.iter().enumerate() {
            let _ = writeln!(csv, "{},{}", (i as f64 + 0.5) / bin, r);
        }
    }
    write_text(out, &csv)?;
    Ok(format!("wrote {} bins to {}", rates.len(), out.display()))
}

/// Reads a `t_s,<value>` CSV; returns the values and the bin rate implied by the times.
pub fn read_rates_csv(path: &Path) -> CliResult<(Vec<f64>, f64)> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split(',');
        let parse = |s: Option<&str>| -> CliResult<f64> {
            s.and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| data_err(path, format!("line {}: malformed row", i + 1)))
        };
        times.push(parse(it.next())?);
        values.push(parse(it.next())?);
    }
    if values.len() < 2 {
        return Err(data_err(path, "need at least 2 rows"));
    }
    let rate = 1.0 / (times[1] - times[0]);
    let rate = (rate * 1e6).round() / 1e6;
    Ok((values, rate))
}

pub fn cmd_evaluate(
    rates: &Path,
    bundle: &Path,
    eval_rate: f64,
    calibration: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<String> {
    let (pred, bin_rate) = read_rates_csv(rates)?;
    let rec = load_recording(bundle)?;
    let binned = resample_to_common(&rec, bin_rate)?;
    if binned.spike_counts.len() != pred.len() {
        return Err(data_err(
            rates,
            format!("{} rates for {} bins", pred.len(), binned.spike_counts.len()),
        ));
    }
    let calib: Box<dyn RateTransform> = match calibration {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| data_err(p, e))?;
            let c: MonotoneCalibration = serde_json::from_str(&text).map_err(|e| data_err(p, e))?;
            Box::new(MonotoneCalibration::new(c.knots_x, c.knots_y)?)
        }
        None => Box::new(Identity),
    };
    let m = evaluate(&rec.cell_id, &pred, &binned.spike_counts, bin_rate, eval_rate, calib.as_ref())?;
    let text = to_json(&serde_json::json!({
        "format_version": FORMAT_VERSION,
        "eval_rate_hz": eval_rate,
        "calibrated": calibration.is_some(),
        "metrics": m,
    }));
    if let Some(o) = out {
        write_text(o, &text)?;
    }
    Ok(text.trim_end().to_string())
}

pub fn cmd_experiment(config: &Path, out: Option<&Path>, g: &GlobalOpts) -> CliResult<String> {
    let mut v = load_config_value(Some(config), g)?;
    if let Some(p) = v.get("protocol").and_then(Value::as_str) {
        p.parse::<Protocol>().map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(o) = out {
        v["output"] = Value::String(o.display().to_string());
    }
    let spec: ExperimentSpec = from_value(v, "experiment")?;
    let dir = spec
        .output
        .clone()
        .ok_or_else(|| CliError::Usage("no output directory (set `output` or --out)".into()))?;
    let report = run_experiment(&spec)?;
    let files = write_report(&report, &dir)?;
    let mut msg = format!("{:?} over {} folds; wrote", report.spec.protocol, report.folds.len());
    for f in files {
        let _ = write!(msg, " {}", f.display());
    }
    for r in &report.results {
        if let Some(c) = r.correlation {
            let _ = write!(
                msg,
                "\n{:<8} {:<12} {:>6} Hz{}  corr {:.4} ± {:.4}  rel. info gain {:.4}",
                r.method,
                r.dataset_id,
                r.eval_rate_hz,
                r.train_size.map(|s| format!("  n_train {s}")).unwrap_or_default(),
                c.mean,
                c.sem,
                r.relative_info_gain
            );
        }
    }
    Ok(msg)
}

pub fn cmd_inspect(path: &Path) -> CliResult<String> {
    if path.is_dir() {
        if path.join(spikeforge::signal_io::DATASET_FILE).exists() {
            let ds = load_dataset(path)?;
            let mut s = format!("dataset {} with {} cells", ds.id(), ds.recordings.len());
            for r in &ds.recordings {
                let _ = write!(
                    s,
                    "\n  {}: {} samples at {} Hz, {} spikes",
                    r.cell_id,
                    r.fluorescence.len(),
                    r.fluor_rate_hz,
                    r.spike_times_s.len()
                );
            }
            return Ok(s);
        }
        let r = load_recording(path)?;
        return Ok(format!(
            "recording {}/{}: {} samples at {} Hz ({:.1} s), {} spikes",
            r.dataset_id,
            r.cell_id,
            r.fluorescence.len(),
            r.fluor_rate_hz,
            r.duration_s(),
            r.spike_times_s.len()
        ));
    }
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| data_err(path, e))?;
    if v.get("members").is_some() && v.get("pca_basis").is_some() {
        let m = ModelEnsemble::load(path)?;
        let shape = m.members[0].to_flat()?.shape;
        return Ok(format!(
            "{} ensemble: {} member(s), {} parameters each, {} PCA components of {}-bin windows at {} Hz",
            m.kind,
            m.members.len(),
            shape.n_params(),
            m.pca_basis.n_kept(),
            m.pca_basis.window_len(),
            m.bin_rate_hz
        ));
    }
    if v.get("results").is_some() && v.get("spec").is_some() {
        let r: spikeforge::harness::ExperimentReport = serde_json::from_value(v).map_err(|e| data_err(path, e))?;
        return Ok(format!(
            "{:?} report: methods {:?}, {} folds, {} metric groups",
            r.spec.protocol,
            r.methods,
            r.folds.len(),
            r.results.len()
        ));
    }
    Err(data_err(path, "not a model, report, dataset or bundle"))
}

/// Runs a parsed invocation and returns the text to print.
pub fn run(cli: Cli) -> CliResult<String> {
    let g = &cli.global;
    if let Some(j) = g.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be positive".into()));
        }
        // fails only if a pool already exists, e.g. when called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    match &cli.command {
        Command::Simulate { config, out } => cmd_simulate(config.as_deref(), out, g),
        Command::Preprocess { dataset, config, out } => cmd_preprocess(dataset, config.as_deref(), out, g),
        Command::Train {
            datasets,
            config,
            exclude,
            out,
        } => cmd_train(datasets, config.as_deref(), exclude, out, g),
        Command::Infer {
            model,
            bundle,
            out,
            sample,
        } => cmd_infer(model, bundle, out, *sample, g),
        Command::Evaluate {
            rates,
            bundle,
            eval_rate,
            calibration,
            out,
        } => cmd_evaluate(rates, bundle, *eval_rate, calibration.as_deref(), out.as_deref()),
        Command::Experiment { config, out } => cmd_experiment(config, out.as_deref(), g),
        Command::Inspect { path } => cmd_inspect(path),
    }
}
