use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Result;
use cda_cli::config::{Overrides, Phase, RunConfig};
use cda_cli::error::diagnostic;
use cda_cli::server::{serve, AppState};
use cda_cli::{cmd_eval, cmd_generate, cmd_pseudo, cmd_train};
use cda_core::data::{self, Split};
use cda_core::snapshot;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cda", version, about = "Vertebral heart score keypoint training and pseudo-labeling")]
struct Cli {
    /// TOML run config; command-line flags take precedence over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a phantom dataset bundle.
    Generate {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train from scratch on the labeled train split.
    Train {
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Continue a trained snapshot with MC-dropout pseudo labels.
    Pseudo {
        #[arg(long)]
        snapshot: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Report loss, accuracy and the confusion matrix on one split.
    Eval {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Serve the annotation and review API.
    Serve {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// Round log shown by GET /pseudo/rounds.
        #[arg(long)]
        rounds: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
    },
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).ok_or_else(|| format!("unknown split {s}; expected train, valid, test or unlabeled"))
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut config = load_config(cli.config.as_ref())?;
    match cli.command {
        Command::Generate { overrides } => {
            overrides.apply(&mut config, Phase::Train);
            print_json(&cmd_generate(&config)?)
        }
        Command::Train { overrides } => {
            overrides.apply(&mut config, Phase::Train);
            print_json(&cmd_train(&config)?.metrics)
        }
        Command::Pseudo { snapshot, overrides } => {
            overrides.apply(&mut config, Phase::Pseudo);
            print_json(&cmd_pseudo(&config, &snapshot)?.metrics)
        }
        Command::Eval { snapshot, split, dataset } => {
            let root = dataset.unwrap_or(config.dataset);
            print_json(&cmd_eval(&root, &snapshot, split)?)
        }
        Command::Serve { dataset, snapshot, rounds, listen } => {
            let root = dataset.unwrap_or(config.dataset.clone());
            let ds = data::load_dataset(&root)?;
            let snap = snapshot.as_deref().map(snapshot::load).transpose()?;
            let state = Arc::new(AppState::new(root, ds, snap, config.pseudo.passes, config.pseudo.tau, rounds));
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
            rt.block_on(serve(state, listen))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", diagnostic(&e));
            ExitCode::FAILURE
        }
    }
}
