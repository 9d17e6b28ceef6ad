//! Plain-text experiment configuration.
//!
//! Configuration files are line-oriented UTF-8: one `key = value` pair per
//! line, with blank lines and `#` comment lines ignored. Unknown keys and
//! keys assigned twice are rejected, and the rejection lists the accepted
//! vocabulary. A parsed configuration serialises back to a canonical form
//! (every key, fixed order, one space around `=`), and parsing that form
//! reproduces the configuration exactly.

use std::fmt::Write as _;

use resbidir::layers::{DropoutPosition, NetworkArchitecture};
use resbidir::train::{fnv1a64, GridAxis, TrainConfig};

use crate::CliError;

/// Which loader feeds the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Pre-windowed inertial-signal layout rooted at `dataset.path`.
    Uci,
    /// Manifest-driven raw series, windowed by this tool.
    Generic,
    /// Built-in two-class separable set; needs no files.
    Toy,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Uci => "uci",
            DatasetKind::Generic => "generic",
            DatasetKind::Toy => "toy",
        }
    }

    fn parse(value: &str) -> Option<Self> {
        match value {
            "uci" => Some(DatasetKind::Uci),
            "generic" => Some(DatasetKind::Generic),
            "toy" => Some(DatasetKind::Toy),
            _ => None,
        }
    }
}

/// Every key the configuration format accepts, in canonical emit order.
/// `arch.shape` is parse-only shorthand (`NxM` sets `arch.residual_blocks`
/// and `arch.layers_per_block` at once) and is never emitted.
pub const CONFIG_KEYS: [&str; 32] = [
    "dataset.kind",
    "dataset.path",
    "dataset.window_overlap",
    "dataset.toy_train_per_class",
    "dataset.toy_test_per_class",
    "arch.shape",
    "arch.residual_blocks",
    "arch.layers_per_block",
    "arch.hidden_width",
    "arch.input_channels",
    "arch.num_classes",
    "arch.window_length",
    "arch.dropout_keep_prob",
    "arch.dropout_position",
    "arch.residual_skips",
    "arch.bidirectional",
    "arch.batch_norm",
    "arch.bn_beta_init",
    "arch.bn_momentum",
    "train.learning_rate",
    "train.l2_lambda",
    "train.clip_norm",
    "train.batch_size",
    "train.epochs",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_epsilon",
    "train.eval_every",
    "norm.enabled",
    "norm.target_std",
    "seed",
    "output_dir",
];

/// A full experiment description: dataset, architecture, optimisation,
/// normalisation, seed, and where to put the artifacts.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset_kind: DatasetKind,
    /// Dataset root (`uci`) or manifest file (`generic`); unused for `toy`.
    pub dataset_path: String,
    /// Sliding-window overlap fraction in `[0, 1)`, used when this tool
    /// windows raw series itself (the `generic` loader).
    pub window_overlap: f64,
    /// Windows per class in the built-in toy training split.
    pub toy_train_per_class: usize,
    /// Windows per class in the built-in toy test split.
    pub toy_test_per_class: usize,
    pub arch: NetworkArchitecture,
    pub train: TrainConfig,
    /// Fit a per-channel normaliser on the training windows and apply it to
    /// both splits before training.
    pub normalize: bool,
    /// Standard deviation every channel is scaled to when normalising.
    pub target_std: f64,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset_kind: DatasetKind::Toy,
            dataset_path: String::new(),
            window_overlap: 0.5,
            toy_train_per_class: 100,
            toy_test_per_class: 50,
            arch: NetworkArchitecture {
                residual_blocks: 1,
                layers_per_block: 1,
                hidden_width: 8,
                input_channels: 2,
                num_classes: 2,
                window_length: 16,
                dropout_keep_prob: 0.9,
                dropout_position: DropoutPosition::OutputOnly,
                residual_skips: true,
                bidirectional: true,
                batch_norm: true,
                bn_beta_init: 0.0,
                bn_momentum: 0.99,
            },
            train: TrainConfig::default(),
            normalize: true,
            target_std: 0.5,
            output_dir: "runs/out".to_string(),
        }
    }
}

fn unknown_key(key: &str) -> CliError {
    CliError::Config(format!(
        "unknown key \"{key}\"; valid keys: {}",
        CONFIG_KEYS.join(", ")
    ))
}

fn bad_value(key: &str, value: &str, expected: &str) -> CliError {
    CliError::Config(format!(
        "key \"{key}\" got \"{value}\", expected {expected}"
    ))
}

/// Parses `NxM` (ASCII `x` or `×`) into (blocks, layers-per-block).
fn parse_shape(value: &str) -> Option<(usize, usize)> {
    let (a, b) = value.split_once(['x', '×'])?;
    let blocks = a.trim().parse::<usize>().ok()?;
    let layers = b.trim().parse::<usize>().ok()?;
    Some((blocks, layers))
}

impl ExperimentConfig {
    /// Sets one key from its string form. Used both by the file parser and
    /// by `--set` overrides, so the two accept exactly the same vocabulary.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let as_f64 = || {
            value
                .parse::<f64>()
                .map_err(|_| bad_value(key, value, "a number"))
        };
        let as_usize = || {
            value
                .parse::<usize>()
                .map_err(|_| bad_value(key, value, "a non-negative integer"))
        };
        let as_u64 = || {
            value
                .parse::<u64>()
                .map_err(|_| bad_value(key, value, "an unsigned integer"))
        };
        let as_bool = || match value {
            "true" => Ok(true),
            "false" => Ok(false),
            _ => Err(bad_value(key, value, "true or false")),
        };
        match key {
            "dataset.kind" => {
                self.dataset_kind = DatasetKind::parse(value)
                    .ok_or_else(|| bad_value(key, value, "uci, generic, or toy"))?;
            }
            "dataset.path" => self.dataset_path = value.to_string(),
            "dataset.window_overlap" => self.window_overlap = as_f64()?,
            "dataset.toy_train_per_class" => self.toy_train_per_class = as_usize()?,
            "dataset.toy_test_per_class" => self.toy_test_per_class = as_usize()?,
            "arch.shape" => {
                let (blocks, layers) = parse_shape(value)
                    .ok_or_else(|| bad_value(key, value, "a shape such as 2x2 or 2×2"))?;
                self.arch.residual_blocks = blocks;
                self.arch.layers_per_block = layers;
            }
            "arch.residual_blocks" => self.arch.residual_blocks = as_usize()?,
            "arch.layers_per_block" => self.arch.layers_per_block = as_usize()?,
            "arch.hidden_width" => self.arch.hidden_width = as_usize()?,
            "arch.input_channels" => self.arch.input_channels = as_usize()?,
            "arch.num_classes" => self.arch.num_classes = as_usize()?,
            "arch.window_length" => self.arch.window_length = as_usize()?,
            "arch.dropout_keep_prob" => self.arch.dropout_keep_prob = as_f64()?,
            "arch.dropout_position" => {
                self.arch.dropout_position = match value {
                    "output_only" => DropoutPosition::OutputOnly,
                    "between_blocks" => DropoutPosition::BetweenBlocks,
                    _ => return Err(bad_value(key, value, "output_only or between_blocks")),
                };
            }
            "arch.residual_skips" => self.arch.residual_skips = as_bool()?,
            "arch.bidirectional" => self.arch.bidirectional = as_bool()?,
            "arch.batch_norm" => self.arch.batch_norm = as_bool()?,
            "arch.bn_beta_init" => self.arch.bn_beta_init = as_f64()?,
            "arch.bn_momentum" => self.arch.bn_momentum = as_f64()?,
            "train.learning_rate" => self.train.learning_rate = as_f64()?,
            "train.l2_lambda" => self.train.l2_lambda = as_f64()?,
            "train.clip_norm" => self.train.clip_norm = as_f64()?,
            "train.batch_size" => self.train.batch_size = as_usize()?,
            "train.epochs" => self.train.epochs = as_usize()?,
            "train.adam_beta1" => self.train.adam_beta1 = as_f64()?,
            "train.adam_beta2" => self.train.adam_beta2 = as_f64()?,
            "train.adam_epsilon" => self.train.adam_epsilon = as_f64()?,
            "train.eval_every" => self.train.eval_every = as_usize()?,
            "norm.enabled" => self.normalize = as_bool()?,
            "norm.target_std" => self.target_std = as_f64()?,
            "seed" => self.train.seed = as_u64()?,
            "output_dir" => self.output_dir = value.to_string(),
            _ => return Err(unknown_key(key)),
        }
        Ok(())
    }

    /// Parses a whole configuration file. Every key is optional (defaults
    /// fill the gaps), but no key may appear twice — `arch.shape` counts as
    /// assigning both of the fields it expands to.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = ExperimentConfig::default();
        let mut assigned: Vec<&str> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = idx + 1;
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {lineno}: expected `key = value`, got \"{line}\""))
            })?;
            let key = key.trim();
            let value = value.trim();
            let targets: &[&str] = match key {
                "arch.shape" => &["arch.residual_blocks", "arch.layers_per_block"],
                k => {
                    // Reject unknown keys before the duplicate check so the
                    // error names the real problem.
                    let canon = CONFIG_KEYS
                        .iter()
                        .find(|c| **c == k)
                        .ok_or_else(|| prefix_line(lineno, unknown_key(k)))?;
                    std::slice::from_ref(canon)
                }
            };
            for target in targets {
                if assigned.contains(target) {
                    return Err(CliError::Config(format!(
                        "line {lineno}: \"{target}\" is assigned twice"
                    )));
                }
                assigned.push(target);
            }
            cfg.set(key, value).map_err(|e| prefix_line(lineno, e))?;
        }
        Ok(cfg)
    }

    /// Canonical text form: every key except the `arch.shape` shorthand, in
    /// [`CONFIG_KEYS`] order. Parsing the result reproduces `self`.
    pub fn serialize(&self) -> String {
        self.render(true)
    }

    /// FNV-1a hash of the canonical form with `output_dir` excluded, so a
    /// run's identity does not change when its artifacts are written
    /// somewhere else.
    pub fn config_hash(&self) -> u64 {
        fnv1a64(self.render(false).as_bytes())
    }

    fn render(&self, include_output_dir: bool) -> String {
        let mut out = String::new();
        let a = &self.arch;
        let t = &self.train;
        let dropout_position = match a.dropout_position {
            DropoutPosition::OutputOnly => "output_only",
            DropoutPosition::BetweenBlocks => "between_blocks",
        };
        let _ = writeln!(out, "dataset.kind = {}", self.dataset_kind.as_str());
        let _ = writeln!(out, "dataset.path = {}", self.dataset_path);
        let _ = writeln!(out, "dataset.window_overlap = {}", self.window_overlap);
        let _ = writeln!(out, "dataset.toy_train_per_class = {}", self.toy_train_per_class);
        let _ = writeln!(out, "dataset.toy_test_per_class = {}", self.toy_test_per_class);
        let _ = writeln!(out, "arch.residual_blocks = {}", a.residual_blocks);
        let _ = writeln!(out, "arch.layers_per_block = {}", a.layers_per_block);
        let _ = writeln!(out, "arch.hidden_width = {}", a.hidden_width);
        let _ = writeln!(out, "arch.input_channels = {}", a.input_channels);
        let _ = writeln!(out, "arch.num_classes = {}", a.num_classes);
        let _ = writeln!(out, "arch.window_length = {}", a.window_length);
        let _ = writeln!(out, "arch.dropout_keep_prob = {}", a.dropout_keep_prob);
        let _ = writeln!(out, "arch.dropout_position = {dropout_position}");
        let _ = writeln!(out, "arch.residual_skips = {}", a.residual_skips);
        let _ = writeln!(out, "arch.bidirectional = {}", a.bidirectional);
        let _ = writeln!(out, "arch.batch_norm = {}", a.batch_norm);
        let _ = writeln!(out, "arch.bn_beta_init = {}", a.bn_beta_init);
        let _ = writeln!(out, "arch.bn_momentum = {}", a.bn_momentum);
        let _ = writeln!(out, "train.learning_rate = {}", t.learning_rate);
        let _ = writeln!(out, "train.l2_lambda = {}", t.l2_lambda);
        let _ = writeln!(out, "train.clip_norm = {}", t.clip_norm);
        let _ = writeln!(out, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(out, "train.epochs = {}", t.epochs);
        let _ = writeln!(out, "train.adam_beta1 = {}", t.adam_beta1);
        let _ = writeln!(out, "train.adam_beta2 = {}", t.adam_beta2);
        let _ = writeln!(out, "train.adam_epsilon = {}", t.adam_epsilon);
        let _ = writeln!(out, "train.eval_every = {}", t.eval_every);
        let _ = writeln!(out, "norm.enabled = {}", self.normalize);
        let _ = writeln!(out, "norm.target_std = {}", self.target_std);
        let _ = writeln!(out, "seed = {}", t.seed);
        if include_output_dir {
            let _ = writeln!(out, "output_dir = {}", self.output_dir);
        }
        out
    }

    /// Sanity checks beyond per-key parsing: cross-field consistency plus
    /// the architecture's and optimiser's own validation.
    pub fn validate(&self) -> Result<(), CliError> {
        match self.dataset_kind {
            DatasetKind::Toy => {
                if self.arch.num_classes != 2 {
                    return Err(CliError::Config(format!(
                        "the toy dataset has 2 classes, but arch.num_classes = {}",
                        self.arch.num_classes
                    )));
                }
                if self.toy_train_per_class == 0 || self.toy_test_per_class == 0 {
                    return Err(CliError::Config(
                        "toy splits need at least 1 window per class".to_string(),
                    ));
                }
            }
            DatasetKind::Uci | DatasetKind::Generic => {
                if self.dataset_path.is_empty() {
                    return Err(CliError::Config(format!(
                        "dataset.kind = {} requires dataset.path",
                        self.dataset_kind.as_str()
                    )));
                }
            }
        }
        if !(self.window_overlap >= 0.0 && self.window_overlap < 1.0) {
            return Err(CliError::Config(format!(
                "dataset.window_overlap must lie in [0, 1), got {}",
                self.window_overlap
            )));
        }
        if !(self.target_std > 0.0 && self.target_std.is_finite()) {
            return Err(CliError::Config(format!(
                "norm.target_std must be positive, got {}",
                self.target_std
            )));
        }
        self.arch.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

fn prefix_line(lineno: usize, err: CliError) -> CliError {
    match err {
        CliError::Config(msg) => CliError::Config(format!("line {lineno}: {msg}")),
        other => other,
    }
}

/// Parses a grid file: `key = v1, v2, v3` per line, `#` comments, one line
/// per axis. Axis keys use the hyperparameter vocabulary (`train.` / `arch.`
/// prefixes optional); they are checked against it before any trial runs.
pub fn parse_grid(text: &str) -> Result<Vec<GridAxis>, CliError> {
    let mut axes: Vec<GridAxis> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = idx + 1;
        let (key, values) = line.split_once('=').ok_or_else(|| {
            CliError::Config(format!("line {lineno}: expected `key = v1, v2, ...`, got \"{line}\""))
        })?;
        let key = key.trim().to_string();
        if axes.iter().any(|a| a.key == key) {
            return Err(CliError::Config(format!(
                "line {lineno}: grid axis \"{key}\" appears twice"
            )));
        }
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .collect();
        if values.iter().any(String::is_empty) {
            return Err(CliError::Config(format!(
                "line {lineno}: grid axis \"{key}\" has an empty value"
            )));
        }
        axes.push(GridAxis { key, values });
    }
    if axes.is_empty() {
        return Err(CliError::Config("grid file defines no axes".to_string()));
    }
    Ok(axes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("dataset.kind", "uci").unwrap();
        cfg.set("dataset.path", "data/har").unwrap();
        cfg.set("arch.shape", "2×2").unwrap();
        cfg.set("arch.hidden_width", "28").unwrap();
        cfg.set("train.learning_rate", "0.0025").unwrap();
        cfg.set("train.adam_epsilon", "1e-8").unwrap();
        cfg.set("seed", "42").unwrap();
        let text = cfg.serialize();
        let reparsed = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(reparsed, cfg);
        assert_eq!(reparsed.serialize(), text);
        assert_eq!(reparsed.arch.residual_blocks, 2);
        assert_eq!(reparsed.arch.layers_per_block, 2);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_vocabulary() {
        let err = ExperimentConfig::parse("train.warp = 9\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unknown key \"train.warp\""), "{msg}");
        assert!(msg.contains("train.learning_rate"), "{msg}");
        assert!(msg.contains("line 1"), "{msg}");
    }

    #[test]
    fn duplicate_keys_are_rejected_even_through_shorthand() {
        let err = ExperimentConfig::parse("seed = 1\nseed = 2\n").unwrap_err();
        assert!(err.to_string().contains("assigned twice"), "{err}");
        let err = ExperimentConfig::parse("arch.shape = 2x2\narch.layers_per_block = 3\n")
            .unwrap_err();
        assert!(
            err.to_string().contains("\"arch.layers_per_block\" is assigned twice"),
            "{err}"
        );
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = ExperimentConfig::parse("# a comment\n\n  seed = 7\n").unwrap();
        assert_eq!(cfg.train.seed, 7);
    }

    #[test]
    fn shape_shorthand_accepts_both_separators() {
        for text in ["3x4", "3×4", " 3 × 4 "] {
            let mut cfg = ExperimentConfig::default();
            cfg.set("arch.shape", text.trim()).unwrap();
            assert_eq!(
                (cfg.arch.residual_blocks, cfg.arch.layers_per_block),
                (3, 4),
                "{text}"
            );
        }
        let err = ExperimentConfig::default().set("arch.shape", "3by4").unwrap_err();
        assert!(err.to_string().contains("2x2"), "{err}");
    }

    #[test]
    fn zero_blocks_is_a_config_error() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("arch.residual_blocks", "0").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_the_output_directory() {
        let mut a = ExperimentConfig::default();
        let mut b = ExperimentConfig::default();
        a.output_dir = "runs/a".to_string();
        b.output_dir = "runs/b".to_string();
        assert_eq!(a.config_hash(), b.config_hash());
        b.train.seed += 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn grid_files_parse_axes_in_order() {
        let axes = parse_grid(
            "# two axes\ntrain.learning_rate = 0.001, 0.0025\nhidden_width = 8, 16, 28\n",
        )
        .unwrap();
        assert_eq!(axes.len(), 2);
        assert_eq!(axes[0].key, "train.learning_rate");
        assert_eq!(axes[0].values, vec!["0.001", "0.0025"]);
        assert_eq!(axes[1].values.len(), 3);
        assert!(parse_grid("").is_err());
        assert!(parse_grid("a = 1\na = 2\n").is_err());
    }
}
