mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eigenkit::error::Error;
use eigenkit::head::CellKind;

use commands::GenKind;
use config::RunConfig;

/// Spectral monitoring of activation streams and spectral layer compression.
#[derive(Parser)]
#[command(name = "eigenkit", version)]
struct Cli {
    /// JSON run config; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config; created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace corpus (JSONL) or mixture dataset (CSV).
    Gen {
        #[arg(long, value_enum, default_value_t = GenKind::Traces)]
        kind: GenKind,
        #[arg(long)]
        n_per_class: Option<usize>,
    },
    /// Stream traces through the monitor and export descriptors as CSV.
    Extract {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        window_len: Option<usize>,
    },
    /// Train recurrent heads, one checkpoint per cell kind.
    TrainHead {
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', value_parser = commands::parse_cell)]
        cell: Vec<CellKind>,
        #[arg(long)]
        window_len: Option<usize>,
        #[arg(long)]
        hidden_dim: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a head: AUROC table, early-detection curve, optional window ablation.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        budgets: Vec<usize>,
        /// Also run the window-length ablation on the configured generator.
        #[arg(long)]
        ablation: bool,
        #[arg(long, value_delimiter = ',')]
        windows: Vec<usize>,
    },
    /// Compress an MLP by spectral width reduction and self-distillation.
    Compress {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long)]
        quantile: Option<f64>,
        #[arg(long)]
        target: Option<f64>,
    },
    /// Run the compression pipeline once per fit quantile.
    Sweep {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        pretrained: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        quantiles: Vec<f64>,
    },
    /// Collect the artifacts in the output directory into report.md.
    Report,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Gate(_) => 3,
        Error::Numerical(_) => 4,
        _ => 2,
    }
}

fn run(cli: Cli) -> eigenkit::error::Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = cli.out {
        cfg.out = o;
    }
    match cli.command {
        Command::Gen { kind, n_per_class } => {
            if let Some(n) = n_per_class {
                cfg.traces.n_per_class = n;
            }
            cfg.propagate_seed();
            commands::gen(&cfg, kind)
        }
        Command::Extract { traces, window_len } => {
            if let Some(n) = window_len {
                cfg.monitor.window_len = n;
            }
            cfg.propagate_seed();
            commands::extract(&cfg, &traces)
        }
        Command::TrainHead {
            traces,
            features,
            cell,
            window_len,
            hidden_dim,
            epochs,
        } => {
            if !cell.is_empty() {
                cfg.head.cells = cell;
            }
            if let Some(n) = window_len {
                cfg.monitor.window_len = n;
            }
            if let Some(h) = hidden_dim {
                cfg.head.hidden_dim = h;
            }
            if let Some(e) = epochs {
                cfg.head.train.epochs = e;
            }
            cfg.propagate_seed();
            commands::train_head(&cfg, traces.as_deref(), features.as_deref())
        }
        Command::Eval {
            checkpoint,
            traces,
            features,
            budgets,
            ablation,
            windows,
        } => {
            if !budgets.is_empty() {
                cfg.head.budgets = budgets;
            }
            if !windows.is_empty() {
                cfg.head.ablation_windows = windows;
            }
            cfg.propagate_seed();
            commands::eval(&cfg, &checkpoint, traces.as_deref(), features.as_deref(), ablation)
        }
        Command::Compress {
            dataset,
            pretrained,
            quantile,
            target,
        } => {
            if let Some(q) = quantile {
                cfg.pipeline.quantile = q;
            }
            if let Some(t) = target {
                cfg.pipeline.target_reduction = t;
            }
            cfg.propagate_seed();
            commands::compress(&cfg, dataset.as_deref(), pretrained.as_deref())
        }
        Command::Sweep {
            dataset,
            pretrained,
            quantiles,
        } => {
            if !quantiles.is_empty() {
                cfg.sweep.quantiles = quantiles;
            }
            cfg.propagate_seed();
            commands::sweep(&cfg, dataset.as_deref(), pretrained.as_deref())
        }
        Command::Report => commands::report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Gate("acc 0.5".into())), 3);
        assert_eq!(exit_code(&Error::Numerical("nan".into())), 4);
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(
            exit_code(&Error::Parse {
                line: 17,
                message: "eof".into()
            }),
            2
        );
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
