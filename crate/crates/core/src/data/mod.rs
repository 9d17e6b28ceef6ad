//! Dataset ingestion: raw multi-channel series, gap interpolation,
//! normalisation, sliding windows, and the loaders built on top.
//!
//! The canonical path for continuous recordings is
//! `load -> interpolate_gaps -> normalise -> slide_windows`; pre-windowed
//! datasets skip straight to normalisation over their windows. Statistics
//! are always fitted on training data only and then applied to both splits.

mod generic;
mod synthetic;
mod uci;

pub use generic::{load_generic, GenericData, Manifest};
pub use synthetic::toy_two_class;
pub use uci::{load_uci, UCI_CHANNELS, UCI_CLASS_NAMES};

use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {msg}")]
    Parse {
        file: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("row counts disagree: {0}")]
    RowCountMismatch(String),
    #[error("channel {channel} contains no valid samples; nothing to interpolate from")]
    AllGap { channel: usize },
    #[error("window overlap {0} outside [0, 1)")]
    InvalidOverlap(f64),
    #[error("window length must be positive")]
    ZeroWindow,
    #[error("dataset is empty: {0}")]
    Empty(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// One continuous recording: per-step channel values (`[time, channels]`,
/// possibly containing NaN gap markers before interpolation) and one class
/// id per step, already remapped to `0..class_count`.
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub values: Tensor,
    pub labels: Vec<usize>,
}

impl RawSeries {
    pub fn steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[1]
    }
}

/// A windowed, label-per-window dataset ready for batching.
#[derive(Debug, Clone)]
pub struct WindowedDataset {
    /// `[windows, window_len, channels]`.
    pub samples: Tensor,
    /// One label per window, each `< class_count`.
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub window_len: usize,
    /// Stride between consecutive window starts.
    pub step: usize,
}

impl WindowedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[2]
    }

    /// Copies the selected windows into a batch tensor plus labels.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (t, d) = (self.window_len, self.channels());
        let stride = t * d;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.samples.data()[i * stride..(i + 1) * stride]);
            labels.push(self.labels[i]);
        }
        let samples = Tensor::new(vec![indices.len(), t, d], data).expect("gather shape");
        (samples, labels)
    }

    /// Concatenates window sets with identical geometry.
    pub fn merge(parts: Vec<WindowedDataset>) -> Result<WindowedDataset, DataError> {
        let first = parts
            .first()
            .ok_or_else(|| DataError::Empty("no window sets to merge".into()))?;
        let (t, d, c, step) = (first.window_len, first.channels(), first.class_count, first.step);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in &parts {
            if p.window_len != t || p.channels() != d || p.class_count != c {
                return Err(DataError::RowCountMismatch(format!(
                    "window sets disagree: [{t}, {d}, {c} classes] vs [{}, {}, {} classes]",
                    p.window_len,
                    p.channels(),
                    p.class_count
                )));
            }
            data.extend_from_slice(p.samples.data());
            labels.extend_from_slice(&p.labels);
        }
        Ok(WindowedDataset {
            samples: Tensor::new(vec![labels.len(), t, d], data)?,
            labels,
            class_count: c,
            window_len: t,
            step,
        })
    }
}

/// A train/test pair sharing class mapping and geometry.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub train: WindowedDataset,
    pub test: WindowedDataset,
    pub class_names: Vec<String>,
}

/// Per-channel normalisation parameters: subtract `mean`, divide by the
/// population standard deviation, then scale to `target_std`.
#[derive(Debug, Clone)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub target_std: f64,
    /// Channels whose variance was zero; they normalise to 0 and are
    /// reported so callers can warn.
    pub degenerate: Vec<usize>,
}

fn fit_stats<'a, I>(channels: usize, samples: I, target_std: f64) -> Result<NormalizationStats, DataError>
where
    I: Iterator<Item = &'a [f64]> + Clone,
{
    if !(target_std > 0.0 && target_std.is_finite()) {
        return Err(DataError::Manifest(format!(
            "target standard deviation must be positive and finite, got {target_std}"
        )));
    }
    let mut count = 0usize;
    let mut mean = vec![0.0; channels];
    for row in samples.clone() {
        debug_assert_eq!(row.len(), channels);
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
        count += 1;
    }
    if count == 0 {
        return Err(DataError::Empty("no samples to fit normalisation on".into()));
    }
    for m in &mut mean {
        *m /= count as f64;
    }
    let mut var = vec![0.0; channels];
    for row in samples {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let mut degenerate = Vec::new();
    let mut std = vec![0.0; channels];
    for (c, (s, v)) in std.iter_mut().zip(&var).enumerate() {
        let variance = v / count as f64;
        if variance == 0.0 {
            // Constant channel: map to zero rather than dividing by zero.
            degenerate.push(c);
            *s = 1.0;
        } else {
            *s = variance.sqrt();
        }
    }
    Ok(NormalizationStats {
        mean,
        std,
        target_std,
        degenerate,
    })
}

/// Fits per-channel statistics over every step of the given series
/// (typically the training split).
pub fn fit_normalizer(
    series: &[RawSeries],
    target_std: f64,
) -> Result<NormalizationStats, DataError> {
    let channels = series
        .first()
        .ok_or_else(|| DataError::Empty("no series to fit normalisation on".into()))?
        .channels();
    for s in series {
        if s.channels() != channels {
            return Err(DataError::RowCountMismatch(format!(
                "series disagree on channel count: {} vs {}",
                channels,
                s.channels()
            )));
        }
    }
    let rows = series.iter().flat_map(|s| s.values.data().chunks_exact(channels));
    fit_stats(channels, rows, target_std)
}

/// Fits per-channel statistics over every time step of every window.
pub fn fit_normalizer_windows(
    data: &WindowedDataset,
    target_std: f64,
) -> Result<NormalizationStats, DataError> {
    let channels = data.channels();
    fit_stats(channels, data.samples.data().chunks_exact(channels), target_std)
}

fn normalize_in_place(stats: &NormalizationStats, data: &mut [f64]) {
    let channels = stats.mean.len();
    for row in data.chunks_exact_mut(channels) {
        for ((v, m), s) in row.iter_mut().zip(&stats.mean).zip(&stats.std) {
            *v = (*v - m) / s * stats.target_std;
        }
    }
}

/// Returns a copy of `series` with every channel shifted to zero mean and
/// scaled to the target standard deviation (per the fitted statistics).
pub fn apply_normalizer(stats: &NormalizationStats, series: &RawSeries) -> Result<RawSeries, DataError> {
    if series.channels() != stats.mean.len() {
        return Err(DataError::RowCountMismatch(format!(
            "normaliser fitted on {} channels, series has {}",
            stats.mean.len(),
            series.channels()
        )));
    }
    let mut values = series.values.clone();
    normalize_in_place(stats, values.data_mut());
    Ok(RawSeries {
        values,
        labels: series.labels.clone(),
    })
}

/// Normalises every window of a dataset with the given statistics.
pub fn apply_normalizer_windows(
    stats: &NormalizationStats,
    data: &WindowedDataset,
) -> Result<WindowedDataset, DataError> {
    if data.channels() != stats.mean.len() {
        return Err(DataError::RowCountMismatch(format!(
            "normaliser fitted on {} channels, windows have {}",
            stats.mean.len(),
            data.channels()
        )));
    }
    let mut out = data.clone();
    normalize_in_place(stats, out.samples.data_mut());
    Ok(out)
}

/// Fills NaN gap markers by linear interpolation per channel.
///
/// Interior gaps interpolate between the nearest valid neighbours; leading
/// and trailing gaps copy the nearest valid value. Valid samples pass
/// through bit-identical. A channel with no valid sample at all is an
/// error.
pub fn interpolate_gaps(series: &RawSeries) -> Result<RawSeries, DataError> {
    let (steps, channels) = (series.steps(), series.channels());
    let mut values = series.values.clone();
    let data = values.data_mut();
    for c in 0..channels {
        // Collect indices of valid samples for this channel.
        let mut last_valid: Option<usize> = None;
        let mut t = 0;
        let mut any_valid = false;
        while t < steps {
            let v = data[t * channels + c];
            if !v.is_nan() {
                any_valid = true;
                last_valid = Some(t);
                t += 1;
                continue;
            }
            // Start of a gap: find the next valid sample.
            let gap_start = t;
            let mut next_valid = None;
            let mut u = t + 1;
            while u < steps {
                if !data[u * channels + c].is_nan() {
                    next_valid = Some(u);
                    break;
                }
                u += 1;
            }
            match (last_valid, next_valid) {
                (Some(a), Some(b)) => {
                    let va = data[a * channels + c];
                    let vb = data[b * channels + c];
                    for g in gap_start..b {
                        let frac = (g - a) as f64 / (b - a) as f64;
                        data[g * channels + c] = va + (vb - va) * frac;
                    }
                    t = b;
                }
                (Some(a), None) => {
                    let va = data[a * channels + c];
                    for g in gap_start..steps {
                        data[g * channels + c] = va;
                    }
                    t = steps;
                }
                (None, Some(b)) => {
                    let vb = data[b * channels + c];
                    for g in gap_start..b {
                        data[g * channels + c] = vb;
                    }
                    t = b;
                }
                (None, None) => return Err(DataError::AllGap { channel: c }),
            }
            any_valid = true;
        }
        if !any_valid {
            return Err(DataError::AllGap { channel: c });
        }
    }
    Ok(RawSeries {
        values,
        labels: series.labels.clone(),
    })
}

/// The stride between window starts for a given window length and overlap
/// fraction: `window * (1 - overlap)`, rounded to the nearest step and
/// floored at 1.
pub fn window_step(window_len: usize, overlap: f64) -> usize {
    ((window_len as f64 * (1.0 - overlap)).round() as usize).max(1)
}

/// Cuts a series into fixed-length windows.
///
/// Each window takes the class of its final time step (the label at the
/// moment of prediction). A series shorter than one window yields an empty
/// dataset; callers decide whether that warrants a warning or an error.
/// The number of windows always equals `floor((len - window) / step) + 1`
/// when `len >= window`.
pub fn slide_windows(
    series: &RawSeries,
    window_len: usize,
    overlap: f64,
    class_count: usize,
) -> Result<WindowedDataset, DataError> {
    if window_len == 0 {
        return Err(DataError::ZeroWindow);
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(DataError::InvalidOverlap(overlap));
    }
    let step = window_step(window_len, overlap);
    let (steps, channels) = (series.steps(), series.channels());
    let count = if steps >= window_len {
        (steps - window_len) / step + 1
    } else {
        0
    };
    let mut data = Vec::with_capacity(count * window_len * channels);
    let mut labels = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * step;
        let end = start + window_len;
        data.extend_from_slice(&series.values.data()[start * channels..end * channels]);
        labels.push(series.labels[end - 1]);
    }
    Ok(WindowedDataset {
        samples: Tensor::new(vec![count, window_len, channels], data)?,
        labels,
        class_count,
        window_len,
        step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(values: Vec<Vec<f64>>, labels: Vec<usize>) -> RawSeries {
        RawSeries {
            values: Tensor::from_rows(&values).unwrap(),
            labels,
        }
    }

    #[test]
    fn window_count_matches_the_closed_form() {
        let s = series(
            (0..10).map(|i| vec![i as f64]).collect(),
            vec![0; 10],
        );
        // window 4, overlap 0.5 -> step 2 -> floor((10-4)/2)+1 = 4 windows.
        let w = slide_windows(&s, 4, 0.5, 1).unwrap();
        assert_eq!(w.step, 2);
        assert_eq!(w.len(), 4);
        assert_eq!(w.samples.shape(), &[4, 4, 1]);
        // First window covers steps 0..4, last covers 6..10.
        assert_eq!(w.samples.at(&[0, 0, 0]), 0.0);
        assert_eq!(w.samples.at(&[3, 3, 0]), 9.0);
    }

    #[test]
    fn window_label_is_the_final_step_label() {
        let mut labels = vec![0; 10];
        labels[3] = 2; // end of first window (steps 0..4)
        labels[9] = 1; // end of last window
        let s = series((0..10).map(|i| vec![i as f64]).collect(), labels);
        let w = slide_windows(&s, 4, 0.5, 3).unwrap();
        assert_eq!(w.labels, vec![2, 0, 0, 1]);
    }

    #[test]
    fn short_series_yield_empty_datasets() {
        let s = series((0..3).map(|i| vec![i as f64]).collect(), vec![0; 3]);
        let w = slide_windows(&s, 8, 0.0, 1).unwrap();
        assert!(w.is_empty());
        assert_eq!(w.samples.shape(), &[0, 8, 1]);
    }

    #[test]
    fn overlap_bounds_are_validated() {
        let s = series(vec![vec![0.0]], vec![0]);
        assert!(matches!(
            slide_windows(&s, 1, 1.0, 1),
            Err(DataError::InvalidOverlap(_))
        ));
        assert!(matches!(
            slide_windows(&s, 0, 0.0, 1),
            Err(DataError::ZeroWindow)
        ));
    }

    #[test]
    fn interpolation_fills_gaps_and_preserves_valid_samples_bitwise() {
        let nan = f64::NAN;
        let s = series(
            vec![
                vec![1.0, nan],
                vec![nan, nan],
                vec![4.0, nan],
                vec![nan, 8.0],
                vec![nan, nan],
            ],
            vec![0; 5],
        );
        let fixed = interpolate_gaps(&s).unwrap();
        let v = &fixed.values;
        // Channel 0: 1, interp 2.5, 4, then trailing copies of 4.
        assert_eq!(v.at(&[0, 0]), 1.0);
        assert!((v.at(&[1, 0]) - 2.5).abs() < 1e-15);
        assert_eq!(v.at(&[2, 0]), 4.0);
        assert_eq!(v.at(&[3, 0]), 4.0);
        assert_eq!(v.at(&[4, 0]), 4.0);
        // Channel 1: leading copies of 8, then 8, trailing copy.
        for t in 0..5 {
            assert_eq!(v.at(&[t, 1]), 8.0);
        }
        // No NaN survives.
        assert!(v.all_finite());
    }

    #[test]
    fn interpolation_rejects_channels_with_no_data() {
        let s = series(vec![vec![f64::NAN], vec![f64::NAN]], vec![0; 2]);
        assert!(matches!(
            interpolate_gaps(&s),
            Err(DataError::AllGap { channel: 0 })
        ));
    }

    #[test]
    fn normalisation_hits_zero_mean_and_target_std() {
        let s = series(
            (0..100).map(|i| vec![i as f64, 3.0]).collect(),
            vec![0; 100],
        );
        let stats = fit_normalizer(&[s.clone()], 0.5).unwrap();
        // Channel 1 is constant and flagged degenerate.
        assert_eq!(stats.degenerate, vec![1]);
        let out = apply_normalizer(&stats, &s).unwrap();
        let col0: Vec<f64> = out.values.data().chunks_exact(2).map(|r| r[0]).collect();
        let mean: f64 = col0.iter().sum::<f64>() / col0.len() as f64;
        let var: f64 = col0.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / col0.len() as f64;
        assert!(mean.abs() < 1e-12);
        assert!((var.sqrt() - 0.5).abs() < 1e-12);
        // Degenerate channel collapses to exactly zero.
        assert!(out.values.data().chunks_exact(2).all(|r| r[1] == 0.0));
    }

    #[test]
    fn normalisation_is_idempotent_once_applied() {
        let s = series(
            (0..50).map(|i| vec![(i as f64 * 0.7).sin() * 3.0 + 1.0]).collect(),
            vec![0; 50],
        );
        let stats = fit_normalizer(&[s.clone()], 0.5).unwrap();
        let once = apply_normalizer(&stats, &s).unwrap();
        let stats2 = fit_normalizer(&[once.clone()], 0.5).unwrap();
        let twice = apply_normalizer(&stats2, &once).unwrap();
        for (a, b) in once.values.data().iter().zip(twice.values.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_copies_requested_windows() {
        let s = series((0..8).map(|i| vec![i as f64]).collect(), vec![0, 0, 0, 1, 0, 0, 0, 2]);
        let w = slide_windows(&s, 4, 0.0, 3).unwrap();
        let (batch, labels) = w.gather(&[1, 0]);
        assert_eq!(batch.shape(), &[2, 4, 1]);
        assert_eq!(batch.at(&[0, 0, 0]), 4.0);
        assert_eq!(batch.at(&[1, 0, 0]), 0.0);
        assert_eq!(labels, vec![2, 1]);
    }
}
