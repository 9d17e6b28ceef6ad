//! Command-line entry point. Parses arguments, loads configuration, runs
//! the requested command from the library layer, and prints the results;
//! no experiment logic lives here.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use resbidir_cli::{
    cmd_ablation, cmd_evaluate, cmd_gridsearch, cmd_train, config, CliError, ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "resbidir",
    version,
    about = "Train and evaluate deep residual bidirectional LSTM sequence classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Replace the configuration's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace the configuration's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<String>,
    /// Worker threads for grid-search trials (1 = run trials serially).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write the run artifacts.
    Train {
        /// Configuration file (`key = value` lines, `#` comments).
        config: PathBuf,
        /// Override one configuration key, e.g. --set train.epochs=5.
        /// May be given multiple times; later values win.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Train every point of a hyperparameter grid and rank the trials.
    Gridsearch {
        /// Base configuration file.
        config: PathBuf,
        /// Grid file: one `key = v1, v2, ...` axis per line.
        grid: PathBuf,
    },
    /// Score a saved checkpoint on the configured test split.
    Evaluate {
        /// Checkpoint produced by a training run.
        checkpoint: PathBuf,
        /// Configuration describing the architecture and dataset.
        config: PathBuf,
    },
    /// Train the four architecture variants and compare them.
    Ablation {
        /// Configuration file; its architecture flags are overridden per
        /// variant.
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            // Surface the chain: the wrapped module error often carries the
            // path or parameter that actually failed.
            let mut source = std::error::Error::source(&e);
            while let Some(cause) = source {
                eprintln!("  caused by: {cause}");
                source = cause.source();
            }
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.threads == 0 {
        return Err(CliError::Config("--threads must be at least 1".to_string()));
    }
    if cli.threads > 1 {
        // Size the worker pool once; later calls would be ignored anyway.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match &cli.command {
        Command::Train { config, set } => {
            let mut cfg = load_config(config)?;
            for pair in set {
                let (key, value) = pair.split_once('=').ok_or_else(|| {
                    CliError::Config(format!("--set expects KEY=VALUE, got \"{pair}\""))
                })?;
                cfg.set(key.trim(), value.trim())?;
            }
            apply_globals(&mut cfg, &cli);
            let outcome = cmd_train(&cfg, true)?;
            let r = &outcome.run;
            if let Some(best) = r.reports.iter().find(|e| e.epoch == r.best_epoch) {
                println!(
                    "best epoch {}: test acc {:.2}%, test F1 {:.2}%",
                    best.epoch,
                    100.0 * best.test_accuracy,
                    100.0 * best.test_f1
                );
            }
            println!(
                "final: test acc {:.2}%, test F1 {:.2}%",
                100.0 * outcome.eval.accuracy,
                100.0 * outcome.eval.weighted_f1
            );
            println!("artifacts in {}", cfg.output_dir);
        }
        Command::Gridsearch { config, grid } => {
            let mut cfg = load_config(config)?;
            apply_globals(&mut cfg, &cli);
            let axes = config::parse_grid(&read_file(grid)?)
                .map_err(|e| prefix_path(grid, e))?;
            let results = cmd_gridsearch(&cfg, &axes, cli.threads > 1)?;
            println!("{} trials ranked by best test F1:", results.len());
            for (i, t) in results.iter().enumerate().take(10) {
                println!(
                    "  #{:<3} F1 {:.2}%  acc {:.2}%  seed {}  {}",
                    i + 1,
                    100.0 * t.best_test_f1,
                    100.0 * t.best_test_accuracy,
                    t.seed,
                    t.override_string()
                );
            }
            if results.len() > 10 {
                println!("  ... ({} more)", results.len() - 10);
            }
            println!("summary and per-trial configs in {}", cfg.output_dir);
        }
        Command::Evaluate { checkpoint, config } => {
            let mut cfg = load_config(config)?;
            apply_globals(&mut cfg, &cli);
            let report = cmd_evaluate(checkpoint, &cfg)?;
            print!("{report}");
        }
        Command::Ablation { config } => {
            let mut cfg = load_config(config)?;
            apply_globals(&mut cfg, &cli);
            let outcomes = cmd_ablation(&cfg, true)?;
            println!("{:<22} {:>10} {:>12}", "variant", "test acc", "weighted F1");
            for v in &outcomes {
                println!(
                    "{:<22} {:>9.2}% {:>11.2}%",
                    v.label,
                    100.0 * v.outcome.eval.accuracy,
                    100.0 * v.outcome.eval.weighted_f1
                );
            }
            println!("per-variant runs in {}", cfg.output_dir);
        }
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    ExperimentConfig::parse(&read_file(path)?).map_err(|e| prefix_path(path, e))
}

fn prefix_path(path: &Path, err: CliError) -> CliError {
    match err {
        CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
        other => other,
    }
}

fn apply_globals(cfg: &mut ExperimentConfig, cli: &Cli) {
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
}
