//! The four experiment commands: train, gridsearch, evaluate, ablation.
//!
//! Each command is a plain function over an [`ExperimentConfig`] so tests
//! and other tools can drive it without a process boundary; the binary in
//! `main.rs` only parses arguments and prints.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use resbidir::data::{
    self, apply_normalizer, apply_normalizer_windows, fit_normalizer, fit_normalizer_windows,
    interpolate_gaps, load_generic, load_uci, slide_windows, RawSeries, SplitDataset,
    WindowedDataset,
};
use resbidir::train::{
    apply_hyperparameter, evaluate, grid_search, read_checkpoint, train_with_progress, EvalOutcome,
    GridAxis, Model, TrainRun, TrialResult,
};

use crate::artifacts::{
    ablation_table, epoch_table, finite_or_none, grid_summary, scores_table, stamp, summary_json,
    timing_log, trend_table, RunDir, RunSummary, TrialSummary,
};
use crate::config::{DatasetKind, ExperimentConfig};
use crate::CliError;

/// The built-in toy corpus is generated from this fixed seed, not from the
/// experiment seed: the data must be one constant artifact so that grid
/// trials and reruns under different seeds all see the same task.
const TOY_DATA_SEED: u64 = 0xDA7A_5EED;

/// Everything a training command produced, for callers that keep going
/// (ablation, tests) after the artifacts are on disk.
#[derive(Debug)]
pub struct TrainOutcome {
    pub run: TrainRun,
    /// Test-split evaluation of the model the run ended with.
    pub eval: EvalOutcome,
    pub config_hash: u64,
}

/// The four architecture variants compared by `ablation`, in presentation
/// order: (directory slug, display name, bidirectional?, residual dressing?).
/// The residual dressing toggles the skip connections and the block-top
/// batch normalisation together — normalisation is part of the residual
/// block's output stage, so the plain variants carry neither.
pub const ABLATION_VARIANTS: [(&str, &str, bool, bool); 4] = [
    ("lstm", "LSTM", false, false),
    ("bidir_lstm", "Bidir-LSTM", true, false),
    ("res_lstm", "Res-LSTM", false, true),
    ("deep_res_bidir_lstm", "Deep-Res-Bidir-LSTM", true, true),
];

/// One ablation variant's results.
#[derive(Debug)]
pub struct VariantOutcome {
    pub slug: &'static str,
    pub label: &'static str,
    pub outcome: TrainOutcome,
}

fn config_error(msg: String) -> CliError {
    CliError::Config(msg)
}

/// Loads, interpolates, normalises, and windows the configured dataset.
/// Raw series are normalised before windowing; pre-windowed data is
/// normalised across its windows. Statistics always come from the training
/// split alone.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<SplitDataset, CliError> {
    let split = match cfg.dataset_kind {
        DatasetKind::Toy => {
            let mut split = data::toy_two_class(
                cfg.toy_train_per_class,
                cfg.toy_test_per_class,
                cfg.arch.window_length,
                cfg.arch.input_channels,
                TOY_DATA_SEED,
            );
            if cfg.normalize {
                let stats = fit_normalizer_windows(&split.train, cfg.target_std)?;
                split.train = apply_normalizer_windows(&stats, &split.train)?;
                split.test = apply_normalizer_windows(&stats, &split.test)?;
            }
            split
        }
        DatasetKind::Uci => {
            let (mut train, mut test) = load_uci(Path::new(&cfg.dataset_path))?;
            if cfg.normalize {
                let stats = fit_normalizer_windows(&train, cfg.target_std)?;
                train = apply_normalizer_windows(&stats, &train)?;
                test = apply_normalizer_windows(&stats, &test)?;
            }
            SplitDataset {
                train,
                test,
                class_names: data::UCI_CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            }
        }
        DatasetKind::Generic => {
            let loaded = load_generic(Path::new(&cfg.dataset_path))?;
            let classes = loaded.class_names.len();
            let prep = |series: &[RawSeries]| -> Result<Vec<RawSeries>, CliError> {
                series.iter().map(|s| Ok(interpolate_gaps(s)?)).collect()
            };
            let mut train_series = prep(&loaded.train)?;
            let mut test_series = prep(&loaded.test)?;
            if cfg.normalize {
                let stats = fit_normalizer(&train_series, cfg.target_std)?;
                let apply = |series: Vec<RawSeries>| -> Result<Vec<RawSeries>, CliError> {
                    series.iter().map(|s| Ok(apply_normalizer(&stats, s)?)).collect()
                };
                train_series = apply(train_series)?;
                test_series = apply(test_series)?;
            }
            let window = |series: Vec<RawSeries>| -> Result<WindowedDataset, CliError> {
                let parts = series
                    .iter()
                    .map(|s| slide_windows(s, cfg.arch.window_length, cfg.window_overlap, classes))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(WindowedDataset::merge(parts)?)
            };
            SplitDataset {
                train: window(train_series)?,
                test: window(test_series)?,
                class_names: loaded.class_names,
            }
        }
    };
    check_geometry(cfg, &split)?;
    Ok(split)
}

/// Rejects configurations whose architecture disagrees with what the data
/// actually looks like, before any training time is spent.
fn check_geometry(cfg: &ExperimentConfig, split: &SplitDataset) -> Result<(), CliError> {
    let a = &cfg.arch;
    if split.train.window_len != a.window_length {
        return Err(config_error(format!(
            "dataset windows span {} steps but arch.window_length = {}",
            split.train.window_len, a.window_length
        )));
    }
    if split.train.channels() != a.input_channels {
        return Err(config_error(format!(
            "dataset has {} channels but arch.input_channels = {}",
            split.train.channels(),
            a.input_channels
        )));
    }
    if split.train.class_count != a.num_classes {
        return Err(config_error(format!(
            "dataset has {} classes but arch.num_classes = {}",
            split.train.class_count, a.num_classes
        )));
    }
    Ok(())
}

/// Trains one model and writes the full artifact set into the configured
/// output directory. With `verbose`, each evaluation prints one line as it
/// happens; printing never feeds back into the run.
pub fn cmd_train(cfg: &ExperimentConfig, verbose: bool) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let dir = RunDir::create(Path::new(&cfg.output_dir))?;
    let hash = cfg.config_hash();
    // Config and stamp land before training so even an interrupted run
    // directory says what it was trying to be.
    dir.write_text("config.txt", &cfg.serialize())?;
    dir.write_text("stamp.txt", &stamp(hash, cfg.train.seed))?;

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = Model::init(cfg.arch.clone(), &mut rng)?;
    let mut print_epoch = |r: &resbidir::train::EpochReport| {
        println!(
            "epoch {:>4}  loss {:.4}  train acc {:6.2}%  test acc {:6.2}%  test F1 {:6.2}%",
            r.epoch,
            r.train_loss,
            100.0 * r.train_accuracy,
            100.0 * r.test_accuracy,
            100.0 * r.test_f1,
        );
    };
    let progress: Option<&mut dyn FnMut(&resbidir::train::EpochReport)> =
        if verbose { Some(&mut print_epoch) } else { None };
    let run = train_with_progress(&mut model, &data, &cfg.train, &mut rng, progress)?;
    if let Some(abort) = &run.abort {
        eprintln!(
            "warning: training aborted in epoch {} (batch {}): {}; artifacts hold the last completed epoch",
            abort.epoch, abort.batch, abort.reason
        );
    }
    // The model now holds the run's final parameters (or the rolled-back
    // state after an abort); score it for the confusion artifacts.
    let eval = evaluate(&mut model, &data.test, Some(&data.class_names))?;

    dir.write_text("epoch_table.tsv", &epoch_table(&run.reports))?;
    dir.write_text("trend.tsv", &trend_table(&run.reports))?;
    dir.write_text("confusion.tsv", &eval.confusion.to_tsv())?;
    dir.write_text("confusion_percent.tsv", &eval.confusion.to_percent_tsv())?;
    dir.write_text("scores.tsv", &scores_table(&eval.confusion.scores()?))?;
    dir.write_checkpoint("best.ckpt", &run.best.to_checkpoint(hash, cfg.train.seed))?;
    dir.write_checkpoint("final.ckpt", &run.final_state.to_checkpoint(hash, cfg.train.seed))?;
    let summary = RunSummary {
        command: "train".to_string(),
        dataset_kind: cfg.dataset_kind.as_str().to_string(),
        class_names: data.class_names.clone(),
        residual_blocks: cfg.arch.residual_blocks,
        layers_per_block: cfg.arch.layers_per_block,
        hidden_width: cfg.arch.hidden_width,
        seed: cfg.train.seed,
        config_hash: format!("{hash:016x}"),
        epochs_requested: cfg.train.epochs,
        evaluations: run.reports.len(),
        best_epoch: run.best_epoch,
        best_test_accuracy: finite_or_none(run.best_test_accuracy),
        best_test_f1: finite_or_none(run.best_test_f1),
        final_test_accuracy: finite_or_none(run.final_test_accuracy),
        final_test_f1: finite_or_none(run.final_test_f1),
        final_confusion_accuracy: eval.accuracy,
        final_confusion_weighted_f1: eval.weighted_f1,
        aborted: run.abort.as_ref().map(|a| a.reason.clone()),
    };
    dir.write_text("summary.json", &summary_json(&summary)?)?;
    dir.write_text(
        "timing.log",
        &timing_log(&run.reports, started.elapsed().as_secs_f64()),
    )?;
    dir.finish()?;
    Ok(TrainOutcome {
        run,
        eval,
        config_hash: hash,
    })
}

/// Scores a checkpoint on the configured test split and returns the report
/// text. Reads only; neither the checkpoint nor any artifact is touched.
pub fn cmd_evaluate(checkpoint: &Path, cfg: &ExperimentConfig) -> Result<String, CliError> {
    cfg.validate()?;
    let ckpt = read_checkpoint(checkpoint)?;
    let mut model = Model::from_checkpoint(cfg.arch.clone(), &ckpt)?;
    if ckpt.config_hash != cfg.config_hash() {
        // Shapes already matched, so this is legal — but the caller should
        // know the checkpoint was trained under a different configuration.
        eprintln!(
            "warning: checkpoint config hash {:016x} differs from this config's {:016x}",
            ckpt.config_hash,
            cfg.config_hash()
        );
    }
    let data = load_dataset(cfg)?;
    let eval = evaluate(&mut model, &data.test, Some(&data.class_names))?;
    let mut out = String::new();
    let _ = writeln!(out, "windows evaluated: {}", data.test.len());
    let _ = writeln!(out, "accuracy: {:.4}%", 100.0 * eval.accuracy);
    let _ = writeln!(out, "weighted F1: {:.4}%", 100.0 * eval.weighted_f1);
    let _ = writeln!(out);
    out.push_str(&scores_table(&eval.confusion.scores()?));
    let _ = writeln!(out);
    out.push_str(&eval.confusion.to_tsv());
    Ok(out)
}

/// Runs the exhaustive grid search and writes the ranked summary plus one
/// metadata sub-directory per trial. Each sub-directory's `config.txt` is a
/// complete effective configuration (overrides applied, derived seed baked
/// in), so `train` on it reproduces that trial bit for bit.
pub fn cmd_gridsearch(
    cfg: &ExperimentConfig,
    axes: &[GridAxis],
    parallel: bool,
) -> Result<Vec<TrialResult>, CliError> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let dir = RunDir::create(Path::new(&cfg.output_dir))?;
    dir.write_text("config.txt", &cfg.serialize())?;
    dir.write_text("stamp.txt", &stamp(cfg.config_hash(), cfg.train.seed))?;
    let mut grid_text = String::new();
    for axis in axes {
        let _ = writeln!(grid_text, "{} = {}", axis.key, axis.values.join(", "));
    }
    dir.write_text("grid.txt", &grid_text)?;

    let results = grid_search(&cfg.arch, &cfg.train, axes, &data, parallel)?;

    dir.write_text("grid_summary.tsv", &grid_summary(&results))?;
    for (i, trial) in results.iter().enumerate() {
        let rank = i + 1;
        let sub = RunDir::create(&dir.join(&format!("trial_{rank:03}")))?;
        let mut tc = cfg.clone();
        for (key, value) in &trial.overrides {
            apply_hyperparameter(&mut tc.arch, &mut tc.train, key, value)?;
        }
        tc.train.seed = trial.seed;
        tc.output_dir = sub.path().display().to_string();
        sub.write_text("config.txt", &tc.serialize())?;
        sub.write_text("stamp.txt", &stamp(tc.config_hash(), trial.seed))?;
        sub.write_text("trial.json", &TrialSummary::new(rank, trial).to_json()?)?;
        sub.finish()?;
    }
    dir.finish()?;
    Ok(results)
}

/// Trains the four architecture variants under one budget and seed and
/// writes a comparison table. Every variant gets a full training run
/// directory of its own beneath the output directory.
pub fn cmd_ablation(
    cfg: &ExperimentConfig,
    verbose: bool,
) -> Result<Vec<VariantOutcome>, CliError> {
    cfg.validate()?;
    let dir = RunDir::create(Path::new(&cfg.output_dir))?;
    dir.write_text("config.txt", &cfg.serialize())?;
    dir.write_text("stamp.txt", &stamp(cfg.config_hash(), cfg.train.seed))?;

    let mut outcomes = Vec::with_capacity(ABLATION_VARIANTS.len());
    for (slug, label, bidirectional, dressing) in ABLATION_VARIANTS {
        if verbose {
            println!("--- {label} ---");
        }
        let mut vc = cfg.clone();
        vc.arch.bidirectional = bidirectional;
        vc.arch.residual_skips = dressing;
        vc.arch.batch_norm = dressing;
        vc.output_dir = dir.join(slug).display().to_string();
        let outcome = cmd_train(&vc, verbose)?;
        outcomes.push(VariantOutcome {
            slug,
            label,
            outcome,
        });
    }

    let rows: Vec<(String, f64, f64)> = outcomes
        .iter()
        .map(|v| {
            (
                v.label.to_string(),
                v.outcome.eval.accuracy,
                v.outcome.eval.weighted_f1,
            )
        })
        .collect();
    dir.write_text("ablation.tsv", &ablation_table(&rows))?;
    dir.finish()?;
    Ok(outcomes)
}
