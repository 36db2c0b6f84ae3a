use std::path::PathBuf;
use std::process::ExitCode;

use clap::builder::PossibleValuesParser;
use clap::{Args, Parser, Subcommand};
use flexcast::{DecodingMode, Patching, ReplicatedToken, ResizeMode};
use flexcast_cli::commands;
use flexcast_cli::{parse_config, CliError, ConfigError};

#[derive(Debug, Parser)]
#[command(name = "flexcast", version, about = "Period-adaptive patch forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    #[command(flatten)]
    options: Options,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a new model on every CSV in a directory and write a checkpoint.
    Pretrain,
    /// Continue training a checkpoint on one dataset's training split.
    Finetune,
    /// Score a checkpoint on a dataset's test split.
    Evaluate {
        /// Skip fine-tuning on the dataset's training split.
        #[arg(long)]
        zero_shot: bool,
    },
    /// Forecast past the end of every channel of a CSV.
    Forecast,
    /// Report the dominant cycle length of each channel.
    FindPeriod,
    /// Run the built-in invariant checks.
    Selftest,
}

#[derive(Debug, Args)]
struct Options {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for initialization and window sampling.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Forecast horizon; a comma-separated list for `evaluate`.
    #[arg(long, global = true, value_name = "INT[,INT...]")]
    horizon: Option<String>,
    /// Cycle length, overriding the FFT search.
    #[arg(long, global = true, value_name = "INT")]
    period: Option<usize>,
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(Patching::NAMES))]
    patching: Option<String>,
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(DecodingMode::NAMES))]
    decoding: Option<String>,
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(ResizeMode::NAMES))]
    resize: Option<String>,
    #[arg(long, global = true, value_parser = PossibleValuesParser::new(ReplicatedToken::NAMES))]
    replicated_token: Option<String>,
    /// Reference patch size of the projection weights.
    #[arg(long, global = true, value_name = "INT")]
    ref_patch: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// CSV file, or a directory of CSV files for `pretrain`.
    #[arg(long, global = true, value_name = "PATH")]
    data: Option<PathBuf>,
    /// Checkpoint to fine-tune, evaluate or forecast with.
    #[arg(long, global = true, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Any configuration key, e.g. `--set steps=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Options {
    fn overrides(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut out = Vec::new();
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            out.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_owned(), v));
            }
        };
        push("seed", self.seed.map(|v| v.to_string()));
        push("horizon", self.horizon.clone());
        push("period", self.period.map(|v| v.to_string()));
        push("patching", self.patching.clone());
        push("decoding", self.decoding.clone());
        push("resize", self.resize.clone());
        push("replicated_token", self.replicated_token.clone());
        push("ref_patch", self.ref_patch.map(|v| v.to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        push("data", self.data.as_ref().map(|p| p.display().to_string()));
        push("checkpoint", self.checkpoint.as_ref().map(|p| p.display().to_string()));
        Ok(out)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let text = match &cli.options.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| ConfigError::Read {
            path: path.clone(),
            msg: e.to_string(),
        })?,
        None => String::new(),
    };
    let cfg = parse_config(&text, &cli.options.overrides()?)?;
    match cli.command {
        Command::Pretrain => commands::pretrain(&cfg),
        Command::Finetune => commands::finetune(&cfg),
        Command::Evaluate { zero_shot } => commands::evaluate_cmd(&cfg, zero_shot),
        Command::Forecast => commands::forecast(&cfg),
        Command::FindPeriod => commands::find_period_cmd(&cfg),
        Command::Selftest => commands::selftest(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
