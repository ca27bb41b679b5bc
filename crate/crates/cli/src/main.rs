use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use recovery_forge::allocator::Strategy;
use recovery_forge::harness::{run_pipeline, ExperimentConfig, Pipeline};

#[derive(Parser, Debug)]
#[command(name = "recovery-forge", version, about = "Failure discovery and recovery learning for skill chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run a single seed instead of the configured list.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out: PathBuf,

    #[arg(long, global = true, value_enum)]
    strategy: Option<StrategyArg>,

    /// Total training rounds, initialization included.
    #[arg(long, global = true, value_name = "B")]
    budget: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Learn skill preconditions from successful chain runs.
    ChainPreconds,
    /// Collect and cluster failure states.
    Discover,
    /// Train recoveries under the allocation budget.
    Train,
    /// Compare recovery policies on fresh episodes.
    Evaluate,
    /// Round-robin vs Value-UCL on synthetic learning curves.
    SynthAlloc,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum StrategyArg {
    Rr,
    Ucl,
}

impl From<Command> for Pipeline {
    fn from(c: Command) -> Self {
        match c {
            Command::ChainPreconds => Pipeline::ChainPreconds,
            Command::Discover => Pipeline::Discover,
            Command::Train => Pipeline::TrainRecoveries,
            Command::Evaluate => Pipeline::Evaluate,
            Command::SynthAlloc => Pipeline::SyntheticAllocation,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RECOVERY_FORGE_LOG", "warn")).init();
    let cli = Cli::parse();

    let Some(path) = &cli.config else {
        eprintln!("error: --config PATH is required");
        return ExitCode::from(2);
    };
    if !path.is_file() {
        eprintln!("error: config file {} not found", path.display());
        return ExitCode::from(2);
    }
    let mut cfg = match ExperimentConfig::load(path) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = cli.strategy {
        cfg.strategy = match s {
            StrategyArg::Rr => Strategy::RoundRobin,
            StrategyArg::Ucl => Strategy::ValueUcl,
        };
    }
    if let Some(b) = cli.budget {
        cfg.allocator.budget = b;
        cfg.synthetic.budget = b;
    }

    match run_pipeline(cli.command.into(), &cfg, &cli.out) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
