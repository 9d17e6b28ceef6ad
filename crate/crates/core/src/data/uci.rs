//! Loader for the pre-windowed smartphone inertial-signal layout used by
//! the UCI human-activity-recognition dataset.
//!
//! Expected tree, relative to the dataset root:
//!
//! ```text
//! <root>/train/Inertial Signals/<channel>_train.txt   (9 files)
//! <root>/train/y_train.txt
//! <root>/test/Inertial Signals/<channel>_test.txt
//! <root>/test/y_test.txt
//! ```
//!
//! Each signal row is one pre-cut window of 128 readings; the label files
//! carry one class (1..=6) per row. Labels are shifted to 0-based ids.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::tensor::Tensor;

use super::{DataError, WindowedDataset};

/// The nine signal channels, in the order they appear in the sample axis.
pub const UCI_CHANNELS: [&str; 9] = [
    "body_acc_x",
    "body_acc_y",
    "body_acc_z",
    "body_gyro_x",
    "body_gyro_y",
    "body_gyro_z",
    "total_acc_x",
    "total_acc_y",
    "total_acc_z",
];

/// Activity names for label ids 0..=5.
pub const UCI_CLASS_NAMES: [&str; 6] = [
    "WALKING",
    "WALKING_UPSTAIRS",
    "WALKING_DOWNSTAIRS",
    "SITTING",
    "STANDING",
    "LAYING",
];

const WINDOW_LEN: usize = 128;

/// Loads both splits. Returns `(train, test)`, un-normalised.
pub fn load_uci(root: &Path) -> Result<(WindowedDataset, WindowedDataset), DataError> {
    Ok((load_split(root, "train")?, load_split(root, "test")?))
}

fn load_split(root: &Path, split: &str) -> Result<WindowedDataset, DataError> {
    let labels = read_labels(&root.join(split).join(format!("y_{split}.txt")))?;
    let n = labels.len();
    let mut channels = Vec::with_capacity(UCI_CHANNELS.len());
    for name in UCI_CHANNELS {
        let path = root
            .join(split)
            .join("Inertial Signals")
            .join(format!("{name}_{split}.txt"));
        let rows = read_signal(&path)?;
        if rows.len() != n {
            return Err(DataError::RowCountMismatch(format!(
                "{} has {} rows but y_{split}.txt has {}",
                path.display(),
                rows.len(),
                n
            )));
        }
        channels.push(rows);
    }
    // Interleave [n, 128, 9]: window-major, then time, then channel.
    let mut data = vec![0.0; n * WINDOW_LEN * UCI_CHANNELS.len()];
    for (c, rows) in channels.iter().enumerate() {
        for (w, row) in rows.iter().enumerate() {
            for (t, &v) in row.iter().enumerate() {
                data[(w * WINDOW_LEN + t) * UCI_CHANNELS.len() + c] = v;
            }
        }
    }
    Ok(WindowedDataset {
        samples: Tensor::new(vec![n, WINDOW_LEN, UCI_CHANNELS.len()], data)?,
        labels,
        class_count: UCI_CLASS_NAMES.len(),
        window_len: WINDOW_LEN,
        step: WINDOW_LEN / 2, // the published windows use 50% overlap
    })
}

fn open(path: &Path) -> Result<BufReader<File>, DataError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn read_labels(path: &Path) -> Result<Vec<usize>, DataError> {
    let reader = open(path)?;
    let mut labels = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let raw: i64 = text.parse().map_err(|_| DataError::Parse {
            file: path.to_path_buf(),
            line: i + 1,
            msg: format!("expected an integer label, got {text:?}"),
        })?;
        if !(1..=6).contains(&raw) {
            return Err(DataError::Parse {
                file: path.to_path_buf(),
                line: i + 1,
                msg: format!("label {raw} outside 1..=6"),
            });
        }
        labels.push((raw - 1) as usize);
    }
    if labels.is_empty() {
        return Err(DataError::Empty(format!("{} has no labels", path.display())));
    }
    Ok(labels)
}

fn read_signal(path: &Path) -> Result<Vec<Vec<f64>>, DataError> {
    let reader = open(path)?;
    let mut rows = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut row = Vec::with_capacity(WINDOW_LEN);
        for tok in line.split_ascii_whitespace() {
            let v: f64 = tok.parse().map_err(|_| DataError::Parse {
                file: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected a number, got {tok:?}"),
            })?;
            row.push(v);
        }
        if row.len() != WINDOW_LEN {
            return Err(DataError::Parse {
                file: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {WINDOW_LEN} readings per row, got {}", row.len()),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}
