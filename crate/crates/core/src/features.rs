//! Centered fluorescence windows and their principal-component projection.
//!
//! Row `t` of the window matrix is `fluor[t - L/2 .. t - L/2 + L)` with edge
//! replication, so a 1000 ms window at 100 Hz spans `[-500 ms, +490 ms]`.
//! Covariance is accumulated through [`WindowStats`], which is additive across
//! traces; pooling training cells for a fold is a sum of per-cell stats and
//! never materializes the full window matrix.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_WINDOW_MS: f64 = 1000.0;
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.95;

/// Dense row-major matrix; serialized as an array of row arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct RowMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl RowMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        RowMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(RowMatrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.iter_rows().map(<[f64]>::to_vec).collect()
    }

    /// Stacks matrices with equal column counts.
    pub fn vstack<'a>(parts: impl IntoIterator<Item = &'a RowMatrix>) -> Result<RowMatrix> {
        let mut out: Option<RowMatrix> = None;
        for p in parts {
            match &mut out {
                None => out = Some(p.clone()),
                Some(acc) => {
                    if acc.cols != p.cols {
                        return Err(Error::DimensionMismatch {
                            expected: acc.cols,
                            got: p.cols,
                        });
                    }
                    acc.data.extend_from_slice(&p.data);
                    acc.rows += p.rows;
                }
            }
        }
        out.ok_or_else(|| Error::InvalidInput("nothing to stack".into()))
    }
}

impl Serialize for RowMatrix {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = serializer.serialize_seq(Some(self.rows))?;
        for r in self.iter_rows() {
            seq.serialize_element(r)?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for RowMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        RowMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Window length in bins for a window duration on a given grid.
pub fn window_len(window_ms: f64, bin_rate_hz: f64) -> Result<usize> {
    let len = (window_ms * bin_rate_hz / 1000.0).round();
    if !(len >= 1.0) {
        return Err(Error::InvalidInput(format!(
            "window of {window_ms} ms is shorter than one bin at {bin_rate_hz} Hz"
        )));
    }
    Ok(len as usize)
}

#[inline]
fn fill_window(fluor: &[f64], t: usize, len: usize, out: &mut [f64]) {
    let n = fluor.len() as isize;
    let start = t as isize - (len / 2) as isize;
    for (j, o) in out.iter_mut().enumerate() {
        let idx = (start + j as isize).clamp(0, n - 1);
        *o = fluor[idx as usize];
    }
}

/// One window per bin, edge-replicated at the trace ends.
pub fn extract_windows(fluor: &[f64], window_ms: f64, bin_rate_hz: f64) -> Result<RowMatrix> {
    if fluor.is_empty() {
        return Err(Error::InvalidInput("empty trace".into()));
    }
    let len = window_len(window_ms, bin_rate_hz)?;
    let mut m = RowMatrix::zeros(fluor.len(), len);
    for t in 0..fluor.len() {
        fill_window(fluor, t, len, m.row_mut(t));
    }
    Ok(m)
}

/// Running sums of windows and their outer products.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowStats {
    pub dim: usize,
    pub count: usize,
    pub sum: Vec<f64>,
    /// Upper triangle is authoritative; full matrix is symmetrized on use.
    pub outer: Vec<f64>,
}

impl WindowStats {
    pub fn new(dim: usize) -> Self {
        WindowStats {
            dim,
            count: 0,
            sum: vec![0.0; dim],
            outer: vec![0.0; dim * dim],
        }
    }

    pub fn add_row(&mut self, row: &[f64]) {
        let d = self.dim;
        self.count += 1;
        for i in 0..d {
            let ri = row[i];
            self.sum[i] += ri;
            let dst = &mut self.outer[i * d + i..(i + 1) * d];
            for (o, &rj) in dst.iter_mut().zip(&row[i..]) {
                *o += ri * rj;
            }
        }
    }

    /// Accumulates every window of a trace without storing the windows.
    pub fn from_trace(fluor: &[f64], window_ms: f64, bin_rate_hz: f64) -> Result<Self> {
        if fluor.is_empty() {
            return Err(Error::InvalidInput("empty trace".into()));
        }
        let len = window_len(window_ms, bin_rate_hz)?;
        let mut stats = WindowStats::new(len);
        let mut buf = vec![0.0; len];
        for t in 0..fluor.len() {
            fill_window(fluor, t, len, &mut buf);
            stats.add_row(&buf);
        }
        Ok(stats)
    }

    pub fn from_matrix(windows: &RowMatrix) -> Self {
        let mut stats = WindowStats::new(windows.cols);
        for r in windows.iter_rows() {
            stats.add_row(r);
        }
        stats
    }

    pub fn merge(&mut self, other: &WindowStats) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: other.dim,
            });
        }
        self.count += other.count;
        self.sum.iter_mut().zip(&other.sum).for_each(|(a, b)| *a += b);
        self.outer.iter_mut().zip(&other.outer).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.count as f64).collect()
    }

    /// Population covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let d = self.dim;
        let n = self.count as f64;
        let mean = self.mean();
        DMatrix::from_fn(d, d, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            self.outer[a * d + b] / n - mean[a] * mean[b]
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `n_kept x window_len`, orthonormal rows, descending variance.
    pub components: RowMatrix,
    pub explained_variance: Vec<f64>,
    pub variance_fraction_kept: f64,
}

impl PcaBasis {
    pub fn n_kept(&self) -> usize {
        self.components.rows
    }

    pub fn window_len(&self) -> usize {
        self.mean.len()
    }

    fn project_into(&self, window: &[f64], centered: &mut [f64], out: &mut [f64]) {
        for ((c, w), m) in centered.iter_mut().zip(window).zip(&self.mean) {
            *c = w - m;
        }
        for (k, o) in out.iter_mut().enumerate() {
            *o = self.components.row(k).iter().zip(centered.iter()).map(|(a, b)| a * b).sum();
        }
    }

    /// Maps coordinates back to window space.
    pub fn reconstruct(&self, coords: &[f64]) -> Result<Vec<f64>> {
        if coords.len() != self.n_kept() {
            return Err(Error::DimensionMismatch {
                expected: self.n_kept(),
                got: coords.len(),
            });
        }
        let mut out = self.mean.clone();
        for (k, &c) in coords.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.components.row(k)) {
                *o += c * v;
            }
        }
        Ok(out)
    }
}

pub fn fit_pca(windows: &RowMatrix, variance_threshold: f64) -> Result<PcaBasis> {
    if windows.rows < 2 {
        return Err(Error::InvalidInput("PCA needs at least 2 windows".into()));
    }
    fit_pca_from_stats(&WindowStats::from_matrix(windows), variance_threshold)
}

/// Keeps the fewest leading components whose eigenvalue mass reaches the
/// threshold; each component is signed so its largest-magnitude entry is positive.
pub fn fit_pca_from_stats(stats: &WindowStats, variance_threshold: f64) -> Result<PcaBasis> {
    if !(variance_threshold > 0.0 && variance_threshold <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "variance threshold {variance_threshold} outside (0, 1]"
        )));
    }
    if stats.count < 2 {
        return Err(Error::InvalidInput("PCA needs at least 2 windows".into()));
    }
    let d = stats.dim;
    let eig = SymmetricEigen::new(stats.covariance());
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("windows have zero total variance".into()));
    }

    let mut kept = 0;
    let mut mass = 0.0;
    while kept < d {
        mass += values[kept];
        kept += 1;
        if mass >= variance_threshold * total * (1.0 - 1e-12) {
            break;
        }
    }

    let mut components = RowMatrix::zeros(kept, d);
    for (r, &i) in order.iter().take(kept).enumerate() {
        let col = eig.eigenvectors.column(i);
        let mut pivot = 0;
        for j in 1..d {
            if col[j].abs() > col[pivot].abs() {
                pivot = j;
            }
        }
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        let norm = col.norm();
        for (dst, v) in components.row_mut(r).iter_mut().zip(col.iter()) {
            *dst = sign * v / norm;
        }
    }

    Ok(PcaBasis {
        mean: stats.mean(),
        components,
        explained_variance: values[..kept].to_vec(),
        variance_fraction_kept: (mass / total).min(1.0),
    })
}

/// Projected window features, one row per bin.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: RowMatrix,
    pub bin_rate_hz: f64,
    pub window_ms: f64,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.data.rows
    }

    pub fn dim(&self) -> usize {
        self.data.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.data.row(i)
    }

    pub fn vstack<'a>(parts: impl IntoIterator<Item = &'a FeatureMatrix>) -> Result<FeatureMatrix> {
        let parts: Vec<&FeatureMatrix> = parts.into_iter().collect();
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("nothing to stack".into()))?;
        Ok(FeatureMatrix {
            bin_rate_hz: first.bin_rate_hz,
            window_ms: first.window_ms,
            data: RowMatrix::vstack(parts.iter().map(|p| &p.data))?,
        })
    }
}

/// `(window - mean) . components^T` for each row.
pub fn project(basis: &PcaBasis, windows: &RowMatrix) -> Result<RowMatrix> {
    if windows.cols != basis.window_len() {
        return Err(Error::DimensionMismatch {
            expected: basis.window_len(),
            got: windows.cols,
        });
    }
    let mut out = RowMatrix::zeros(windows.rows, basis.n_kept());
    let mut centered = vec![0.0; windows.cols];
    for i in 0..windows.rows {
        basis.project_into(windows.row(i), &mut centered, out.row_mut(i));
    }
    Ok(out)
}

/// Windows and projects a whole trace in one pass.
pub fn project_trace(
    basis: &PcaBasis,
    fluor: &[f64],
    window_ms: f64,
    bin_rate_hz: f64,
) -> Result<FeatureMatrix> {
    if fluor.is_empty() {
        return Err(Error::InvalidInput("empty trace".into()));
    }
    let len = window_len(window_ms, bin_rate_hz)?;
    if len != basis.window_len() {
        return Err(Error::DimensionMismatch {
            expected: basis.window_len(),
            got: len,
        });
    }
    let mut out = RowMatrix::zeros(fluor.len(), basis.n_kept());
    let mut window = vec![0.0; len];
    let mut centered = vec![0.0; len];
    for t in 0..fluor.len() {
        fill_window(fluor, t, len, &mut window);
        basis.project_into(&window, &mut centered, out.row_mut(t));
    }
    Ok(FeatureMatrix {
        data: out,
        bin_rate_hz,
        window_ms,
    })
}
