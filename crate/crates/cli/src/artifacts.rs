//! Run-directory artifacts: layout, atomic writes, and the table formats.
//!
//! Every command that produces files claims a fresh directory, drops an
//! `INCOMPLETE` marker, writes each artifact atomically (temp file, then
//! rename), and removes the marker only when everything landed. A directory
//! still holding the marker is a run that died midway.
//!
//! Numbers in the delimited tables are printed with Rust's shortest
//! round-trip float format, so every metric can be recomputed bit-exactly
//! from the files. `timing.log` is the one deliberately non-reproducible
//! artifact; nothing else may contain wall-clock readings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use resbidir::metrics::ClassScores;
use resbidir::train::{
    write_checkpoint, Checkpoint, EpochReport, TrialResult, CHECKPOINT_VERSION,
};
use serde::Serialize;

use crate::CliError;

/// Version stamped into every run directory; bump when an artifact changes
/// shape or meaning.
pub const ARTIFACT_VERSION: u32 = 1;

/// Marker file present while a run is writing; removed on success.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

/// An exclusively owned output directory with atomic file writes.
#[derive(Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Claims `path` for one run: creates it (parents included) and drops
    /// the incomplete marker. A directory that already holds files is
    /// refused so runs never overwrite each other.
    pub fn create(path: &Path) -> Result<Self, CliError> {
        let io = |source| CliError::Io {
            path: path.to_path_buf(),
            source,
        };
        if path.exists() {
            let mut entries = fs::read_dir(path).map_err(io)?;
            if entries.next().is_some() {
                return Err(CliError::Config(format!(
                    "output directory {} is not empty; pick a fresh directory",
                    path.display()
                )));
            }
        } else {
            fs::create_dir_all(path).map_err(io)?;
        }
        let dir = RunDir {
            root: path.to_path_buf(),
        };
        dir.write_text(
            INCOMPLETE_MARKER,
            "this run has not finished; artifacts may be partial\n",
        )?;
        Ok(dir)
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Writes `name` atomically: the contents go to a temp file in the same
    /// directory, which is then renamed over the target.
    pub fn write_text(&self, name: &str, contents: &str) -> Result<(), CliError> {
        let tmp = self.root.join(format!(".{name}.tmp"));
        let target = self.root.join(name);
        fs::write(&tmp, contents).map_err(|source| CliError::Io {
            path: tmp.clone(),
            source,
        })?;
        fs::rename(&tmp, &target).map_err(|source| CliError::Io {
            path: target,
            source,
        })
    }

    /// Writes a checkpoint with the same temp-then-rename discipline.
    pub fn write_checkpoint(&self, name: &str, ckpt: &Checkpoint) -> Result<(), CliError> {
        let tmp = self.root.join(format!(".{name}.tmp"));
        let target = self.root.join(name);
        write_checkpoint(&tmp, ckpt)?;
        fs::rename(&tmp, &target).map_err(|source| CliError::Io {
            path: target,
            source,
        })
    }

    /// Removes the incomplete marker, declaring the run finished.
    pub fn finish(&self) -> Result<(), CliError> {
        let marker = self.root.join(INCOMPLETE_MARKER);
        fs::remove_file(&marker).map_err(|source| CliError::Io {
            path: marker,
            source,
        })
    }
}

/// Reproducibility stamp: versions, config fingerprint, and seed — enough
/// to tell whether two run directories describe the same experiment. No
/// timestamps; the stamp must be byte-identical across reruns.
pub fn stamp(config_hash: u64, seed: u64) -> String {
    format!(
        "artifact_version = {ARTIFACT_VERSION}\n\
         checkpoint_version = {CHECKPOINT_VERSION}\n\
         config_hash = {config_hash:016x}\n\
         seed = {seed}\n"
    )
}

/// Per-evaluation metrics table, one row per recorded epoch.
pub fn epoch_table(reports: &[EpochReport]) -> String {
    let mut out =
        String::from("epoch\ttrain_loss\ttrain_accuracy\ttrain_f1\ttest_accuracy\ttest_f1\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch, r.train_loss, r.train_accuracy, r.train_f1, r.test_accuracy, r.test_f1
        );
    }
    out
}

/// F1-trend series for train and test: plain delimited data ready for any
/// plotting tool. One row per evaluation.
pub fn trend_table(reports: &[EpochReport]) -> String {
    let mut out = String::from("epoch\ttrain_f1\ttest_f1\n");
    for r in reports {
        let _ = writeln!(out, "{}\t{}\t{}", r.epoch, r.train_f1, r.test_f1);
    }
    out
}

/// Per-class precision/recall/F1 table derived from a confusion matrix.
pub fn scores_table(scores: &ClassScores) -> String {
    let mut out = String::from("class\tprecision\trecall\tf1\tsupport\tpredicted\n");
    for s in &scores.per_class {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            s.name, s.precision, s.recall, s.f1, s.support, s.predicted
        );
    }
    let _ = writeln!(out, "accuracy\t{}", scores.accuracy);
    let _ = writeln!(out, "weighted_f1\t{}", scores.weighted_f1);
    out
}

/// Wall-clock log. The only artifact allowed to differ between reruns of
/// the same experiment.
pub fn timing_log(reports: &[EpochReport], total_seconds: f64) -> String {
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(out, "epoch {} done at {:.3} s", r.epoch, r.wall_time_s);
    }
    let _ = writeln!(out, "total {total_seconds:.3} s");
    out
}

/// Ranked grid-search table, best trial first.
pub fn grid_summary(results: &[TrialResult]) -> String {
    let mut out = String::from(
        "rank\tseed\tbest_epoch\tbest_test_accuracy\tbest_test_f1\t\
         final_test_accuracy\tfinal_test_f1\taborted\toverrides\n",
    );
    for (i, r) in results.iter().enumerate() {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            i + 1,
            r.seed,
            r.best_epoch,
            r.best_test_accuracy,
            r.best_test_f1,
            r.final_test_accuracy,
            r.final_test_f1,
            r.aborted,
            r.override_string()
        );
    }
    out
}

/// Four-variant comparison table; the metrics are the final-epoch test
/// scores and recompute from each variant's emitted confusion matrix.
pub fn ablation_table(rows: &[(String, f64, f64)]) -> String {
    let mut out = String::from("variant\ttest_accuracy\ttest_weighted_f1\n");
    for (name, acc, f1) in rows {
        let _ = writeln!(out, "{name}\t{acc}\t{f1}");
    }
    out
}

/// Machine-readable run summary. Every number repeats a value that also
/// lives in the epoch table or the confusion matrix, never a fresh one.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub command: String,
    pub dataset_kind: String,
    pub class_names: Vec<String>,
    pub residual_blocks: usize,
    pub layers_per_block: usize,
    pub hidden_width: usize,
    pub seed: u64,
    /// Hex form of the stamp's config fingerprint.
    pub config_hash: String,
    /// Epochs requested by the configuration.
    pub epochs_requested: usize,
    /// Rows in the epoch table (evaluation count).
    pub evaluations: usize,
    pub best_epoch: usize,
    pub best_test_accuracy: Option<f64>,
    pub best_test_f1: Option<f64>,
    pub final_test_accuracy: Option<f64>,
    pub final_test_f1: Option<f64>,
    /// Recomputed from the emitted confusion matrix of the final model.
    pub final_confusion_accuracy: f64,
    pub final_confusion_weighted_f1: f64,
    /// Abort reason when training stopped on a non-finite value.
    pub aborted: Option<String>,
}

/// Pretty JSON plus a trailing newline. Field order is fixed by the struct,
/// so the output is deterministic.
pub fn summary_json(summary: &RunSummary) -> Result<String, CliError> {
    let body = serde_json::to_string_pretty(summary)
        .map_err(|e| CliError::Config(format!("summary serialisation failed: {e}")))?;
    Ok(format!("{body}\n"))
}

/// One grid trial's metadata, written into its sub-directory.
#[derive(Debug, Clone, Serialize)]
pub struct TrialSummary {
    pub rank: usize,
    pub overrides: Vec<(String, String)>,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_test_accuracy: f64,
    pub best_test_f1: f64,
    pub final_test_accuracy: f64,
    pub final_test_f1: f64,
    pub aborted: bool,
}

impl TrialSummary {
    pub fn new(rank: usize, r: &TrialResult) -> Self {
        Self {
            rank,
            overrides: r.overrides.clone(),
            seed: r.seed,
            best_epoch: r.best_epoch,
            best_test_accuracy: r.best_test_accuracy,
            best_test_f1: r.best_test_f1,
            final_test_accuracy: r.final_test_accuracy,
            final_test_f1: r.final_test_f1,
            aborted: r.aborted,
        }
    }

    pub fn to_json(&self) -> Result<String, CliError> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Config(format!("trial serialisation failed: {e}")))?;
        Ok(format!("{body}\n"))
    }
}

/// `None` for non-finite metrics (a run that never evaluated), which JSON
/// renders as null instead of an invalid NaN literal.
pub fn finite_or_none(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamps_are_fixed_width_and_stable() {
        let s = stamp(0xABCD, 7);
        assert!(s.contains("config_hash = 000000000000abcd"));
        assert!(s.contains("artifact_version = 1"));
        assert!(s.contains("seed = 7"));
        assert_eq!(s, stamp(0xABCD, 7));
    }

    #[test]
    fn tables_round_trip_their_floats() {
        let reports = vec![EpochReport {
            epoch: 1,
            train_loss: 0.1 + 0.2, // deliberately non-representable sum
            train_accuracy: 2.0 / 3.0,
            train_f1: 1.0 / 3.0,
            test_accuracy: 0.657,
            test_f1: 0.6412,
            wall_time_s: 1.25,
        }];
        let table = epoch_table(&reports);
        let row = table.lines().nth(1).unwrap();
        let cells: Vec<&str> = row.split('\t').collect();
        assert_eq!(cells[1].parse::<f64>().unwrap(), 0.1 + 0.2);
        assert_eq!(cells[2].parse::<f64>().unwrap(), 2.0 / 3.0);
        let trend = trend_table(&reports);
        assert_eq!(trend.lines().count(), 2);
        assert!(trend.starts_with("epoch\ttrain_f1\ttest_f1\n"));
    }
}
