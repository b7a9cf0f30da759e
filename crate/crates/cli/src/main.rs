use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod trace;

use commands::{CliError, CurriculumArgs, EvaluateArgs, RolloutArgs};

#[derive(Parser)]
#[command(name = "lkmerge", version, about = "Level-k curriculum training for dense-traffic merging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train levels 1..=N and write weights, curves and a manifest.
    Curriculum {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        max_level: Option<u8>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-evaluate every policy level against every environment level.
    Evaluate {
        #[arg(long)]
        registry: PathBuf,
        #[arg(long, default_value_t = 100)]
        episodes: u32,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        /// Other cars per scene; defaults to `eval.n_cars` of the registry config.
        #[arg(long)]
        n_cars: Option<u32>,
    },
    /// Run one greedy episode and write its trace.
    Rollout {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        env_level: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        trace: PathBuf,
        /// Directory holding the opponent levels; defaults to the policy's directory.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
}

fn run(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Curriculum {
            config,
            max_level,
            seed,
            out,
        } => {
            let manifest = commands::curriculum(&CurriculumArgs {
                config,
                max_level,
                seed,
                out,
            })?;
            println!("trained {} levels, config {}", manifest.levels.len(), manifest.config_hash);
        }
        Command::Evaluate {
            registry,
            episodes,
            out,
            threads,
            n_cars,
        } => {
            commands::evaluate(&EvaluateArgs {
                registry,
                episodes,
                out: out.clone(),
                threads,
                n_cars,
            })?;
            println!("wrote {}", out.display());
        }
        Command::Rollout {
            policy,
            env_level,
            seed,
            trace,
            registry,
        } => {
            let outcome = commands::rollout(&RolloutArgs {
                policy,
                env_level,
                seed,
                trace,
                registry,
            })?;
            println!("{}", trace::outcome_name(outcome));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
