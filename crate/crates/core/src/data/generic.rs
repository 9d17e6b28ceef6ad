//! Manifest-driven loader for delimited multi-channel recordings.
//!
//! A manifest is a `key = value` text file describing where the data lives
//! and how to read it:
//!
//! ```text
//! # lines starting with # are comments
//! train_files = runs/day1.csv, runs/day2.csv
//! test_files = runs/day3.csv
//! delimiter = comma            # or: tab, space, semicolon, or 1 character
//! channels = 3
//! label_column = 3             # 0-based column index of the class id
//! gap_sentinel = NaN           # token marking a dropped reading
//! sample_rate_hz = 30
//! null_label = 0               # class id meaning "no activity"
//! ```
//!
//! Every data row holds `channels + 1` columns: the channel readings in
//! order, with the integer class id spliced in at `label_column`. Relative
//! file paths resolve against the manifest's directory. Raw class ids are
//! remapped to contiguous 0-based ids over the union of both splits (the
//! null label becomes the class named `NULL`); gap sentinels become NaN
//! markers for [`super::interpolate_gaps`].

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::tensor::Tensor;

use super::{DataError, RawSeries};

const MANIFEST_KEYS: [&str; 8] = [
    "train_files",
    "test_files",
    "delimiter",
    "channels",
    "label_column",
    "gap_sentinel",
    "sample_rate_hz",
    "null_label",
];

/// Parsed manifest contents.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub train_files: Vec<PathBuf>,
    pub test_files: Vec<PathBuf>,
    pub delimiter: char,
    pub channels: usize,
    pub label_column: usize,
    pub gap_sentinel: String,
    pub sample_rate_hz: f64,
    pub null_label: i64,
}

/// Both splits plus the class mapping shared between them.
#[derive(Debug, Clone)]
pub struct GenericData {
    pub train: Vec<RawSeries>,
    pub test: Vec<RawSeries>,
    pub class_names: Vec<String>,
    pub sample_rate_hz: f64,
}

impl Manifest {
    /// Reads and validates a manifest file.
    pub fn read(path: &Path) -> Result<Manifest, DataError> {
        let text = fs::read_to_string(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let mut fields: Vec<(String, String)> = Vec::new();
        for (i, raw_line) in text.lines().enumerate() {
            let line = raw_line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| DataError::Parse {
                file: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected `key = value`, got {line:?}"),
            })?;
            let key = key.trim().to_string();
            // Allow trailing comments after the value.
            let value = value.split('#').next().unwrap_or("").trim().to_string();
            if !MANIFEST_KEYS.contains(&key.as_str()) {
                return Err(DataError::Parse {
                    file: path.to_path_buf(),
                    line: i + 1,
                    msg: format!(
                        "unknown manifest key {key:?}; valid keys: {}",
                        MANIFEST_KEYS.join(", ")
                    ),
                });
            }
            if fields.iter().any(|(k, _)| *k == key) {
                return Err(DataError::Parse {
                    file: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("duplicate manifest key {key:?}"),
                });
            }
            fields.push((key, value));
        }
        let get = |key: &str| -> Result<&str, DataError> {
            fields
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| DataError::Manifest(format!("missing required key {key:?}")))
        };
        let files = |key: &str| -> Result<Vec<PathBuf>, DataError> {
            let list: Vec<PathBuf> = get(key)?
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| base.join(s))
                .collect();
            if list.is_empty() {
                return Err(DataError::Manifest(format!("{key} lists no files")));
            }
            Ok(list)
        };
        let delimiter = match get("delimiter")? {
            "comma" => ',',
            "tab" => '\t',
            "space" => ' ',
            "semicolon" => ';',
            other => {
                let mut chars = other.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => c,
                    _ => {
                        return Err(DataError::Manifest(format!(
                            "delimiter must be comma/tab/space/semicolon or one character, got {other:?}"
                        )))
                    }
                }
            }
        };
        let parse_num = |key: &str| -> Result<f64, DataError> {
            get(key)?.parse().map_err(|_| {
                DataError::Manifest(format!("{key} must be a number, got {:?}", get(key).unwrap()))
            })
        };
        let channels = parse_num("channels")? as usize;
        if channels == 0 {
            return Err(DataError::Manifest("channels must be at least 1".into()));
        }
        let label_column = parse_num("label_column")? as usize;
        if label_column > channels {
            return Err(DataError::Manifest(format!(
                "label_column {label_column} exceeds the {channels}+1 columns per row"
            )));
        }
        let sample_rate_hz = parse_num("sample_rate_hz")?;
        if !(sample_rate_hz > 0.0) {
            return Err(DataError::Manifest(format!(
                "sample_rate_hz must be positive, got {sample_rate_hz}"
            )));
        }
        let null_label: i64 = get("null_label")?.parse().map_err(|_| {
            DataError::Manifest(format!(
                "null_label must be an integer, got {:?}",
                get("null_label").unwrap()
            ))
        })?;
        Ok(Manifest {
            train_files: files("train_files")?,
            test_files: files("test_files")?,
            delimiter,
            channels,
            label_column,
            gap_sentinel: get("gap_sentinel")?.to_string(),
            sample_rate_hz,
            null_label,
        })
    }

    /// Seconds of signal one window of `window_len` steps covers.
    pub fn window_seconds(&self, window_len: usize) -> f64 {
        window_len as f64 / self.sample_rate_hz
    }
}

/// One file parsed into channel values (NaN where the gap sentinel stood)
/// and raw integer labels.
struct ParsedFile {
    values: Vec<f64>,
    raw_labels: Vec<i64>,
}

fn parse_file(path: &Path, m: &Manifest) -> Result<ParsedFile, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut values = Vec::new();
    let mut raw_labels = Vec::new();
    let columns = m.channels + 1;
    for (i, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let cells: Vec<&str> = if m.delimiter == ' ' {
            line.split_ascii_whitespace().collect()
        } else {
            line.split(m.delimiter).map(str::trim).collect()
        };
        if cells.len() != columns {
            return Err(DataError::Parse {
                file: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {columns} columns, got {}", cells.len()),
            });
        }
        for (col, cell) in cells.iter().enumerate() {
            if col == m.label_column {
                let label: i64 = cell.parse().map_err(|_| DataError::Parse {
                    file: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("label column holds {cell:?}, expected an integer"),
                })?;
                raw_labels.push(label);
            } else if *cell == m.gap_sentinel {
                values.push(f64::NAN);
            } else {
                let v: f64 = cell.parse().map_err(|_| DataError::Parse {
                    file: path.to_path_buf(),
                    line: i + 1,
                    msg: format!("expected a number or the gap sentinel, got {cell:?}"),
                })?;
                values.push(v);
            }
        }
    }
    if raw_labels.is_empty() {
        return Err(DataError::Empty(format!("{} holds no rows", path.display())));
    }
    Ok(ParsedFile { values, raw_labels })
}

/// Loads every file named by the manifest and remaps labels to contiguous
/// 0-based class ids over the union of both splits.
pub fn load_generic(manifest_path: &Path) -> Result<GenericData, DataError> {
    let manifest = Manifest::read(manifest_path)?;
    let mut train_parsed = Vec::new();
    for path in &manifest.train_files {
        train_parsed.push(parse_file(path, &manifest)?);
    }
    let mut test_parsed = Vec::new();
    for path in &manifest.test_files {
        test_parsed.push(parse_file(path, &manifest)?);
    }
    // Class ids sort by raw label; the null label is always part of the
    // mapping so "no activity" is a first-class, trainable class even if a
    // particular file never contains it.
    let mut raw_ids: BTreeSet<i64> = BTreeSet::new();
    raw_ids.insert(manifest.null_label);
    for f in train_parsed.iter().chain(&test_parsed) {
        raw_ids.extend(f.raw_labels.iter().copied());
    }
    let ordered: Vec<i64> = raw_ids.into_iter().collect();
    let class_names: Vec<String> = ordered
        .iter()
        .map(|&id| {
            if id == manifest.null_label {
                "NULL".to_string()
            } else {
                format!("class_{id}")
            }
        })
        .collect();
    let to_series = |f: ParsedFile| -> Result<RawSeries, DataError> {
        let labels: Vec<usize> = f
            .raw_labels
            .iter()
            .map(|raw| ordered.binary_search(raw).expect("label seen during scan"))
            .collect();
        Ok(RawSeries {
            values: Tensor::new(vec![labels.len(), manifest.channels], f.values)?,
            labels,
        })
    };
    let train = train_parsed
        .into_iter()
        .map(to_series)
        .collect::<Result<Vec<_>, _>>()?;
    let test = test_parsed
        .into_iter()
        .map(to_series)
        .collect::<Result<Vec<_>, _>>()?;
    Ok(GenericData {
        train,
        test,
        class_names,
        sample_rate_hz: manifest.sample_rate_hz,
    })
}
