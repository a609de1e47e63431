use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand, ValueEnum};
use kgattn::evaluation::TieProtocol;
use kgattn_cli::{
    cmd_ablate_heads, cmd_eval, cmd_params, cmd_prepare, cmd_train, configure_threads, resolve_config, EvalArgs,
    Overrides, TrainArgs, ABLATION_HEADER,
};

#[derive(Parser)]
#[command(name = "kgattn", version, about = "Self-attention knowledge-graph embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ties {
    Random,
    Top,
    Bottom,
}

#[derive(Subcommand)]
enum Command {
    /// Build vocabularies, id-encoded splits and the filter index.
    Prepare {
        #[arg(long)]
        dataset_dir: PathBuf,
        /// Defaults to <dataset-dir>/processed.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train a model and write metrics and checkpoints.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset_dir: PathBuf,
        #[arg(long, default_value = "runs/latest")]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Filtered MRR / Hits@k of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Tie-breaking seed; defaults to the training seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Placement of the true target among equal scores.
        #[arg(long, value_enum, default_value = "random")]
        ties: Ties,
        /// Rank against all entities without filtering known triples.
        #[arg(long)]
        unfiltered: bool,
    },
    /// Print nonembedding and embedding parameter counts.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset_dir: Option<PathBuf>,
        /// Dataset name used to pick a preset when no config is given.
        #[arg(long)]
        dataset: Option<String>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train one model per head count and report NFP and validation MRR.
    AblateHeads {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32,64,128")]
        head_list: Vec<usize>,
        /// Shortened epoch budget shared by every run.
        #[arg(long)]
        budget_epochs: Option<usize>,
        #[arg(long, default_value = "runs/ablate-heads")]
        out_dir: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    configure_threads()?;
    match Cli::parse().command {
        Command::Prepare { dataset_dir, out_dir } => {
            print!("{}", cmd_prepare(&dataset_dir, out_dir.as_deref())?);
        }
        Command::Train {
            config,
            dataset_dir,
            out_dir,
            overrides,
        } => {
            let summary = cmd_train(TrainArgs {
                config: config.as_deref(),
                dataset_dir: &dataset_dir,
                out_dir: &out_dir,
                overrides: &overrides,
            })?;
            println!(
                "trained {} epochs; best validation MRR {} (epoch {}); outputs in {}",
                summary.epochs_run,
                summary.best_valid_mrr.map(|m| format!("{m:.4}")).unwrap_or_else(|| "-".into()),
                summary.best_epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into()),
                out_dir.display()
            );
        }
        Command::Eval {
            checkpoint,
            dataset_dir,
            split,
            seed,
            out_dir,
            ties,
            unfiltered,
        } => {
            let report = cmd_eval(EvalArgs {
                checkpoint: &checkpoint,
                dataset_dir: &dataset_dir,
                split: &split,
                seed,
                out_dir: out_dir.as_deref(),
                ties: match ties {
                    Ties::Random => TieProtocol::Random,
                    Ties::Top => TieProtocol::Top,
                    Ties::Bottom => TieProtocol::Bottom,
                },
                unfiltered,
            })?;
            print!("{report}");
        }
        Command::Params {
            config,
            dataset_dir,
            dataset,
            overrides,
        } => {
            let name = dataset.or_else(|| {
                dataset_dir
                    .as_ref()
                    .and_then(|d| d.file_name())
                    .map(|n| n.to_string_lossy().into_owned())
            });
            let config = resolve_config(config.as_deref(), name.as_deref(), &overrides)?;
            print!("{}", cmd_params(&config, dataset_dir.as_deref())?);
        }
        Command::AblateHeads {
            config,
            dataset_dir,
            head_list,
            budget_epochs,
            out_dir,
            overrides,
        } => {
            let name = dataset_dir.file_name().map(|n| n.to_string_lossy().into_owned());
            let base = resolve_config(config.as_deref(), name.as_deref(), &overrides)?;
            let rows = cmd_ablate_heads(&base, &head_list, budget_epochs, &dataset_dir, &out_dir)?;
            println!("{ABLATION_HEADER}");
            for row in rows {
                println!("{}", row.to_csv_line());
            }
        }
    }
    Ok(())
}
