//! `aila`: train, evaluate, ablate, compare and gradient-check AILA models.
//!
//! Exit codes: 0 success, 1 other failure, 2 usage, 3 config, 4 missing file
//! or other i/o, 5 data, 6 divergence, 7 checkpoint mismatch, 8 gradient
//! check failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Data(_) => 5,
            CliError::Diverged(_) => 6,
            CliError::Checkpoint(_) => 7,
            CliError::GradCheck(_) => 8,
        }
    }
}

impl From<aila::Error> for CliError {
    fn from(e: aila::Error) -> Self {
        use aila::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(m) => CliError::Config(m),
            E::Data(m) => CliError::Data(m),
            E::Dimension { .. } | E::Serde(_) => CliError::Data(msg),
            E::NonFinite { .. } | E::NonFiniteGradient { .. } => CliError::Diverged(msg),
            E::Checkpoint(m) => CliError::Checkpoint(m),
            E::Io { .. } => CliError::Io(msg),
            E::Contract(_) => CliError::Other(msg),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "aila", version, about = "Adaptive integrated layered attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where a command writes its run directory.
#[derive(clap::Args, Debug, Clone)]
pub struct OutputArgs {
    /// Output root. Overrides the config's [output].dir.
    #[arg(long, env = "AILA_OUTPUT_ROOT")]
    pub out: Option<PathBuf>,
    /// Fixed run directory name instead of a timestamped one.
    #[arg(long)]
    pub run_name: Option<String>,
    /// Replace an existing run directory of the same name.
    #[arg(long, requires = "run_name")]
    pub overwrite: bool,
}

/// Overrides applied on top of the config's [train] section.
#[derive(clap::Args, Debug, Clone)]
pub struct TrainOverrides {
    /// Seed to run; repeat for several. Replaces the config's seed list.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model per seed and write a run directory.
    Train {
        config: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Evaluate a checkpoint on the test split of a config's dataset.
    Eval {
        checkpoint: PathBuf,
        /// Run config supplying the model layout and the dataset.
        #[arg(long)]
        data: PathBuf,
        /// 1-based layer to zero, or `all` for one record per layer.
        #[arg(long, value_parser = parse_knockout)]
        knockout: Option<KnockoutArg>,
    },
    /// Run an ablation plan.
    Ablate {
        plan: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Finite-difference check of every op, integrator and model variant.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scale::Small)]
        scale: Scale,
    },
    /// Train all five variants on one config and report parameter counts.
    Compare {
        config: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[command(flatten)]
        output: OutputArgs,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scale {
    Small,
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KnockoutArg {
    Layer(usize),
    All,
}

fn parse_knockout(s: &str) -> Result<KnockoutArg, String> {
    if s == "all" {
        return Ok(KnockoutArg::All);
    }
    match s.parse::<usize>() {
        Ok(0) => Err("layers are numbered from 1".into()),
        Ok(j) => Ok(KnockoutArg::Layer(j)),
        Err(_) => Err(format!("expected a layer number or `all`, got `{s}`")),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            overrides,
            output,
        } => commands::train(&config, &overrides, &output),
        Command::Eval {
            checkpoint,
            data,
            knockout,
        } => commands::eval(&checkpoint, &data, knockout),
        Command::Ablate { plan, output } => commands::ablate(&plan, &output),
        Command::Gradcheck { scale } => commands::gradcheck(match scale {
            Scale::Small => aila::gradcheck::SuiteScale::Small,
            Scale::Full => aila::gradcheck::SuiteScale::Full,
        }),
        Command::Compare {
            config,
            overrides,
            output,
        } => commands::compare(&config, &overrides, &output),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("aila: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knockout_argument() {
        assert_eq!(parse_knockout("3"), Ok(KnockoutArg::Layer(3)));
        assert_eq!(parse_knockout("all"), Ok(KnockoutArg::All));
        assert!(parse_knockout("0").is_err());
        assert!(parse_knockout("x").is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn error_classes_map_to_codes() {
        let codes: Vec<u8> = [
            aila::Error::Config("x".into()),
            aila::Error::Data("x".into()),
            aila::Error::NonFiniteGradient { param: "w".into() },
            aila::Error::Checkpoint("x".into()),
        ]
        .into_iter()
        .map(|e| CliError::from(e).exit_code())
        .collect();
        assert_eq!(codes, vec![3, 5, 6, 7]);
    }
}
