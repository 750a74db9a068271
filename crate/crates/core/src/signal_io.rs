//! Recording bundles on disk, resampling onto the common bin grid, and
//! rebinning of counts/rates to coarser evaluation rates.
//!
//! A bundle is a directory holding `trace.csv` (`t_s,f`), `spikes.csv`
//! (`t_s`) and `meta.json`. A dataset is a directory of bundles plus a
//! `dataset.json` manifest naming its members.
//!
//! Fluorescence sample `i` of a trace recorded at rate `r` is taken to
//! represent the interval `[i/r, (i+1)/r)` and is timestamped at its center.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::FORMAT_VERSION;

pub const TRACE_FILE: &str = "trace.csv";
pub const SPIKES_FILE: &str = "spikes.csv";
pub const META_FILE: &str = "meta.json";
pub const DATASET_FILE: &str = "dataset.json";

/// Spike times this close (in bins) below a bin boundary are assigned to the
/// bin on the right; absorbs decimal round-off such as `0.29 * 100 < 29`.
const BOUNDARY_EPS_BINS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub cell_id: String,
    pub dataset_id: String,
    pub fluorescence: Vec<f64>,
    pub fluor_rate_hz: f64,
    pub spike_times_s: Vec<f64>,
    pub indicator: String,
    pub meta: BTreeMap<String, String>,
}

impl Recording {
    /// Builds a recording and checks its invariants.
    pub fn new(
        cell_id: impl Into<String>,
        dataset_id: impl Into<String>,
        fluorescence: Vec<f64>,
        fluor_rate_hz: f64,
        spike_times_s: Vec<f64>,
    ) -> Result<Self> {
        let rec = Recording {
            cell_id: cell_id.into(),
            dataset_id: dataset_id.into(),
            fluorescence,
            fluor_rate_hz,
            spike_times_s,
            indicator: String::new(),
            meta: BTreeMap::new(),
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn duration_s(&self) -> f64 {
        self.fluorescence.len() as f64 / self.fluor_rate_hz
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fluor_rate_hz > 0.0 && self.fluor_rate_hz.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "nonpositive sampling rate {}",
                self.fluor_rate_hz
            )));
        }
        if self.fluorescence.is_empty() {
            return Err(Error::InvalidInput("empty fluorescence trace".into()));
        }
        if let Some(i) = self.fluorescence.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite fluorescence at sample {i}")));
        }
        let duration = self.duration_s();
        for (i, &t) in self.spike_times_s.iter().enumerate() {
            if !(t >= 0.0) || !t.is_finite() {
                return Err(Error::InvalidInput(format!("spike {i}: invalid time {t}")));
            }
            if t > duration {
                return Err(Error::InvalidInput(format!(
                    "spike beyond trace end: {t} s > {duration} s"
                )));
            }
            if i > 0 && t <= self.spike_times_s[i - 1] {
                return Err(Error::InvalidInput(format!("unsorted spike times at index {i}")));
            }
        }
        Ok(())
    }
}

/// Fluorescence and spike counts on a common bin grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedRecording {
    pub cell_id: String,
    pub bin_rate_hz: f64,
    pub fluorescence: Vec<f64>,
    pub spike_counts: Vec<u32>,
}

impl BinnedRecording {
    pub fn len(&self) -> usize {
        self.spike_counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spike_counts.is_empty()
    }

    pub fn total_spikes(&self) -> u64 {
        self.spike_counts.iter().map(|&c| c as u64).sum()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MetaFile {
    cell_id: String,
    dataset_id: String,
    #[serde(default)]
    indicator: String,
    fluor_rate_hz: f64,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_f64(file: &Path, line: usize, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::parse(file, line, format!("malformed number {field:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(file, line, format!("non-finite number {field:?}")));
    }
    Ok(v)
}

/// Checks the header line and yields `(line_number, fields)` for data rows.
fn csv_rows<'a>(
    file: &'a Path,
    text: &'a str,
    header: &str,
) -> Result<impl Iterator<Item = (usize, Vec<&'a str>)> + 'a> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        Some((_, h)) => {
            return Err(Error::parse(
                file,
                1,
                format!("expected header {header:?}, found {:?}", h.trim()),
            ))
        }
        None => return Err(Error::parse(file, 1, "empty file")),
    }
    Ok(lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.split(',').collect())))
}

pub fn load_recording(bundle: impl AsRef<Path>) -> Result<Recording> {
    let bundle = bundle.as_ref();
    let meta_path = bundle.join(META_FILE);
    let meta: MetaFile =
        serde_json::from_str(&read_text(&meta_path)?).map_err(|e| Error::json(&meta_path, e))?;
    if !(meta.fluor_rate_hz > 0.0) {
        return Err(Error::parse(
            &meta_path,
            1,
            format!("nonpositive sampling rate {}", meta.fluor_rate_hz),
        ));
    }

    let trace_path = bundle.join(TRACE_FILE);
    let trace_text = read_text(&trace_path)?;
    let mut fluorescence = Vec::new();
    let mut last_t = f64::NEG_INFINITY;
    for (line, fields) in csv_rows(&trace_path, &trace_text, "t_s,f")? {
        if fields.len() != 2 {
            return Err(Error::parse(&trace_path, line, "expected 2 fields"));
        }
        let t = parse_f64(&trace_path, line, fields[0])?;
        if t <= last_t {
            return Err(Error::parse(&trace_path, line, "t_s not strictly increasing"));
        }
        last_t = t;
        fluorescence.push(parse_f64(&trace_path, line, fields[1])?);
    }
    if fluorescence.is_empty() {
        return Err(Error::parse(&trace_path, 2, "no samples"));
    }
    let duration = fluorescence.len() as f64 / meta.fluor_rate_hz;

    let spikes_path = bundle.join(SPIKES_FILE);
    let spikes_text = read_text(&spikes_path)?;
    let mut spike_times_s: Vec<f64> = Vec::new();
    for (line, fields) in csv_rows(&spikes_path, &spikes_text, "t_s")? {
        if fields.len() != 1 {
            return Err(Error::parse(&spikes_path, line, "expected 1 field"));
        }
        let t = parse_f64(&spikes_path, line, fields[0])?;
        if t < 0.0 {
            return Err(Error::parse(&spikes_path, line, "negative spike time"));
        }
        if t > duration {
            return Err(Error::parse(
                &spikes_path,
                line,
                format!("spike beyond trace end ({t} s > {duration} s)"),
            ));
        }
        if spike_times_s.last().is_some_and(|&p| t <= p) {
            return Err(Error::parse(&spikes_path, line, "unsorted spike times"));
        }
        spike_times_s.push(t);
    }

    let meta_map = meta
        .extra
        .into_iter()
        .map(|(k, v)| match v {
            serde_json::Value::String(s) => (k, s),
            other => (k, other.to_string()),
        })
        .collect();

    let rec = Recording {
        cell_id: meta.cell_id,
        dataset_id: meta.dataset_id,
        fluorescence,
        fluor_rate_hz: meta.fluor_rate_hz,
        spike_times_s,
        indicator: meta.indicator,
        meta: meta_map,
    };
    rec.validate()?;
    Ok(rec)
}

pub fn save_recording(rec: &Recording, bundle: impl AsRef<Path>) -> Result<()> {
    use std::fmt::Write;

    let bundle = bundle.as_ref();
    fs::create_dir_all(bundle).map_err(|e| Error::io(bundle, e))?;

    let mut trace = String::with_capacity(rec.fluorescence.len() * 16);
    trace.push_str("t_s,f\n");
    for (i, f) in rec.fluorescence.iter().enumerate() {
        let t = (i as f64 + 0.5) / rec.fluor_rate_hz;
        writeln!(trace, "{t},{f}").expect("write to String");
    }
    write_file(&bundle.join(TRACE_FILE), trace.as_bytes())?;

    let mut spikes = String::with_capacity(rec.spike_times_s.len() * 12);
    spikes.push_str("t_s\n");
    for t in &rec.spike_times_s {
        writeln!(spikes, "{t}").expect("write to String");
    }
    write_file(&bundle.join(SPIKES_FILE), spikes.as_bytes())?;

    let meta = MetaFile {
        cell_id: rec.cell_id.clone(),
        dataset_id: rec.dataset_id.clone(),
        indicator: rec.indicator.clone(),
        fluor_rate_hz: rec.fluor_rate_hz,
        extra: rec
            .meta
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
            .collect(),
    };
    write_json(&bundle.join(META_FILE), &meta)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::json(path, e))
}

/// Contents of `dataset.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub dataset_id: String,
    /// Bundle directory names relative to the dataset directory.
    pub members: Vec<String>,
    /// Free-form provenance, e.g. the generator configuration of synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn new(dataset_id: impl Into<String>, members: Vec<String>) -> Self {
        DatasetManifest {
            format_version: FORMAT_VERSION,
            dataset_id: dataset_id.into(),
            members,
            provenance: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub recordings: Vec<Recording>,
}

impl Dataset {
    pub fn id(&self) -> &str {
        &self.manifest.dataset_id
    }
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest: DatasetManifest = read_json(&dir.join(DATASET_FILE))?;
    if manifest.members.is_empty() {
        return Err(Error::InvalidInput(format!("{}: dataset has no members", dir.display())));
    }
    let recordings = manifest
        .members
        .iter()
        .map(|m| load_recording(dir.join(m)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        recordings,
    })
}

pub fn save_manifest(dir: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(DATASET_FILE), manifest)
}

/// Linear interpolation of the fluorescence onto bin centers and a half-open
/// histogram of spike times, on a grid of `floor(duration * target_hz)` bins.
pub fn resample_to_common(rec: &Recording, target_hz: f64) -> Result<BinnedRecording> {
    if !(target_hz > 0.0 && target_hz.is_finite()) {
        return Err(Error::InvalidInput(format!("nonpositive target rate {target_hz}")));
    }
    let n_src = rec.fluorescence.len();
    let n_bins = (rec.duration_s() * target_hz + BOUNDARY_EPS_BINS).floor() as usize;
    if n_bins == 0 {
        return Err(Error::InvalidInput(format!(
            "trace of {} s is shorter than one {} Hz bin",
            rec.duration_s(),
            target_hz
        )));
    }

    let ratio = rec.fluor_rate_hz / target_hz;
    let last = (n_src - 1) as f64;
    let fluorescence = (0..n_bins)
        .map(|j| {
            // bin center expressed in source sample index units
            let pos = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, last);
            let i0 = pos.floor() as usize;
            let frac = pos - i0 as f64;
            if frac == 0.0 || i0 + 1 >= n_src {
                rec.fluorescence[i0]
            } else {
                rec.fluorescence[i0] + frac * (rec.fluorescence[i0 + 1] - rec.fluorescence[i0])
            }
        })
        .collect();

    let mut spike_counts = vec![0u32; n_bins];
    for &t in &rec.spike_times_s {
        let idx = (t * target_hz + BOUNDARY_EPS_BINS).floor() as usize;
        if idx < n_bins {
            spike_counts[idx] += 1;
        }
    }

    Ok(BinnedRecording {
        cell_id: rec.cell_id.clone(),
        bin_rate_hz: target_hz,
        fluorescence,
        spike_counts,
    })
}

fn check_factor(factor: usize) -> Result<()> {
    if factor < 1 {
        return Err(Error::InvalidInput("rebin factor must be >= 1".into()));
    }
    Ok(())
}

/// Sums consecutive groups of `factor` counts; a trailing partial group is dropped.
pub fn rebin_counts(counts: &[u32], factor: usize) -> Result<Vec<u32>> {
    check_factor(factor)?;
    Ok(counts.chunks_exact(factor).map(|c| c.iter().sum()).collect())
}

/// Rate counterpart of [`rebin_counts`]: expected counts add under bin union.
pub fn rebin_rates(rates: &[f64], factor: usize) -> Result<Vec<f64>> {
    check_factor(factor)?;
    Ok(rates.chunks_exact(factor).map(|c| c.iter().sum()).collect())
}

/// Integer factor between the model grid and an evaluation rate.
pub fn rebin_factor(bin_rate_hz: f64, eval_rate_hz: f64) -> Result<usize> {
    if !(eval_rate_hz > 0.0) {
        return Err(Error::InvalidInput(format!("nonpositive eval rate {eval_rate_hz}")));
    }
    let f = bin_rate_hz / eval_rate_hz;
    let r = f.round();
    if r < 1.0 || (f - r).abs() > 1e-9 * f.max(1.0) {
        return Err(Error::InvalidInput(format!(
            "eval rate {eval_rate_hz} Hz does not divide the {bin_rate_hz} Hz grid"
        )));
    }
    Ok(r as usize)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_recording(n: usize, rate: f64, spikes: Vec<f64>) -> Recording {
        Recording::new("c0", "d0", (0..n).map(|i| i as f64).collect(), rate, spikes).unwrap()
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = Recording::new(
            "cell_7",
            "ds",
            vec![0.1, 2.5, -3.25, 1e-7, 12345.678],
            11.7,
            vec![0.0, 0.1234567, 0.4],
        )
        .unwrap();
        rec.indicator = "OGB-1".into();
        rec.meta.insert("depth_um".into(), "120".into());
        save_recording(&rec, dir.path()).unwrap();
        let back = load_recording(dir.path()).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn load_thousand_samples() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::new("c", "d", vec![1.0; 1000], 100.0, vec![0.5, 1.2]).unwrap();
        save_recording(&rec, dir.path()).unwrap();
        let back = load_recording(dir.path()).unwrap();
        assert_eq!(back.duration_s(), 10.0);
        assert_eq!(back.spike_times_s.len(), 2);
    }

    #[test]
    fn spike_beyond_end_is_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::new("c", "d", vec![1.0; 1000], 100.0, vec![]).unwrap();
        save_recording(&rec, dir.path()).unwrap();
        fs::write(dir.path().join(SPIKES_FILE), "t_s\n0.5\n12.0\n").unwrap();
        let err = load_recording(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("spike beyond trace end"), "{msg}");
        assert!(msg.contains("spikes.csv:3"), "{msg}");
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        let rec = Recording::new("c", "d", vec![1.0; 10], 10.0, vec![]).unwrap();
        save_recording(&rec, dir.path()).unwrap();

        fs::write(dir.path().join(SPIKES_FILE), "t_s\n0.5\n0.2\n").unwrap();
        assert!(load_recording(dir.path()).unwrap_err().to_string().contains("unsorted"));

        fs::write(dir.path().join(SPIKES_FILE), "t_s\n0.5x\n").unwrap();
        let msg = load_recording(dir.path()).unwrap_err().to_string();
        assert!(msg.contains("spikes.csv:2") && msg.contains("malformed"), "{msg}");

        fs::write(dir.path().join(SPIKES_FILE), "t_s\n").unwrap();
        let meta = r#"{"cell_id":"c","dataset_id":"d","fluor_rate_hz":0.0}"#;
        fs::write(dir.path().join(META_FILE), meta).unwrap();
        assert!(load_recording(dir.path()).unwrap_err().to_string().contains("nonpositive"));

        let meta = r#"{"cell_id":"c","dataset_id":"d","fluor_rate_hz":100.0}"#;
        fs::write(dir.path().join(META_FILE), meta).unwrap();
        fs::remove_file(dir.path().join(TRACE_FILE)).unwrap();
        assert!(matches!(load_recording(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn resample_identity_rate() {
        let rec = Recording::new(
            "c",
            "d",
            vec![3.0, 1.0, 4.0, 1.0, 5.0],
            100.0,
            vec![0.004, 0.006, 0.02, 0.041],
        )
        .unwrap();
        let b = resample_to_common(&rec, 100.0).unwrap();
        assert_eq!(b.fluorescence, rec.fluorescence);
        assert_eq!(b.spike_counts, vec![2, 0, 1, 0, 1]);
        assert_eq!(b.total_spikes(), rec.spike_times_s.len() as u64);
    }

    #[test]
    fn resample_ramp_matches_line() {
        // 10 Hz samples at 0.05, 0.15, ..., value i; on the 100 Hz grid the
        // interpolant is f(t) = 10 t - 0.5 clamped to [0, 9].
        let rec = ramp_recording(10, 10.0, vec![]);
        let b = resample_to_common(&rec, 100.0).unwrap();
        assert_eq!(b.len(), 100);
        for (j, &v) in b.fluorescence.iter().enumerate() {
            let t = (j as f64 + 0.5) / 100.0;
            let expected = (10.0 * t - 0.5).clamp(0.0, 9.0);
            assert!((v - expected).abs() < 1e-12, "bin {j}: {v} vs {expected}");
        }
    }

    #[test]
    fn boundary_spikes_go_right() {
        let rec = ramp_recording(100, 100.0, vec![0.01, 0.29, 0.3]).clone();
        let b = resample_to_common(&rec, 100.0).unwrap();
        assert_eq!(b.spike_counts[1], 1);
        assert_eq!(b.spike_counts[29], 1);
        assert_eq!(b.spike_counts[30], 1);
    }

    #[test]
    fn resample_too_short() {
        let rec = Recording::new("c", "d", vec![1.0], 1000.0, vec![]).unwrap();
        assert!(resample_to_common(&rec, 100.0).is_err());
        assert!(resample_to_common(&rec, 0.0).is_err());
    }

    #[test]
    fn rebin_examples() {
        assert_eq!(rebin_counts(&[1, 0, 2, 1], 4).unwrap(), vec![4]);
        assert_eq!(rebin_counts(&[1, 0, 2, 1, 5], 4).unwrap(), vec![4]);
        assert_eq!(rebin_counts(&[1, 0, 2], 1).unwrap(), vec![1, 0, 2]);
        assert!(rebin_counts(&[1], 0).is_err());
        let r = rebin_rates(&[0.1, 0.1, 0.1, 0.1], 4).unwrap();
        assert!((r[0] - 0.4).abs() < 1e-15);
        assert_eq!(rebin_rates(&[0.5, 0.25], 1).unwrap(), vec![0.5, 0.25]);
        assert!(rebin_rates(&[1.0], 0).is_err());
    }

    #[test]
    fn rebin_factor_checks() {
        assert_eq!(rebin_factor(100.0, 25.0).unwrap(), 4);
        assert_eq!(rebin_factor(100.0, 2.0).unwrap(), 50);
        assert_eq!(rebin_factor(100.0, 100.0).unwrap(), 1);
        assert!(rebin_factor(100.0, 30.0).is_err());
        assert!(rebin_factor(100.0, 200.0).is_err());
    }

    proptest! {
        #[test]
        fn rebin_conserves_counts(counts in prop::collection::vec(0u32..20, 0..200), factor in 1usize..12) {
            let out = rebin_counts(&counts, factor).unwrap();
            let total: u32 = counts.iter().sum();
            let kept: u32 = out.iter().sum();
            prop_assert!(kept <= total);
            if counts.len() % factor == 0 {
                prop_assert_eq!(kept, total);
            }
        }

        #[test]
        fn rebin_rates_agrees_with_counts(counts in prop::collection::vec(0u32..50, 0..200), factor in 1usize..12) {
            let as_rates: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
            let r = rebin_rates(&as_rates, factor).unwrap();
            let c = rebin_counts(&counts, factor).unwrap();
            prop_assert_eq!(r, c.iter().map(|&v| v as f64).collect::<Vec<_>>());
        }

        #[test]
        fn native_rate_keeps_spike_totals(mut bins in prop::collection::vec(0usize..500, 0..60)) {
            bins.sort_unstable();
            bins.dedup();
            let times: Vec<f64> = bins.iter().map(|&b| (b as f64 + 0.3) / 50.0).collect();
            let rec = Recording::new("c", "d", vec![0.0; 500], 50.0, times.clone()).unwrap();
            let b = resample_to_common(&rec, 50.0).unwrap();
            prop_assert_eq!(b.total_spikes(), times.len() as u64);
        }
    }
}
