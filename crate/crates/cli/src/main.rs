mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "svpg", version, about = "Stein variational policy gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train according to a config file and write metrics, checkpoints and a summary.
    Run {
        config: PathBuf,
        /// Maximum number of concurrent agent workers.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Merge completed runs on a common cumulative-transition axis.
    Compare {
        #[arg(required = true, num_args = 2..)]
        runs: Vec<PathBuf>,
        /// Where to write the merged CSV.
        #[arg(long, default_value = "comparison.csv")]
        output: PathBuf,
    },
    /// Dump the states visited by selected particles of a finished run.
    Visitation {
        run: PathBuf,
        /// Particle indices (comma separated); all particles when omitted.
        #[arg(long, value_delimiter = ',')]
        particles: Vec<usize>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Output directory; defaults to `<run>/visitation`.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Print environment dimensions and physical constants.
    EnvInfo {
        /// Environment id; all environments when omitted.
        env: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, workers } => commands::run(&config, workers),
        Command::Compare { runs, output } => commands::compare(&runs, &output),
        Command::Visitation {
            run,
            particles,
            episodes,
            output,
        } => commands::visitation(&run, &particles, episodes, output),
        Command::EnvInfo { env } => commands::env_info(env.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
