use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drsmt::cli::{ablation_csv, cmd_ablate, cmd_eval, cmd_synth, cmd_train, RunConfig, Stage, StageError};

#[derive(Parser)]
#[command(
    name = "drsmt",
    version,
    about = "Reinforcement-learning anomaly detection for multivariate time series"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(short, long, global = true, default_value = "drsmt.toml")]
    config: PathBuf,
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic dataset.
    Synth,
    /// Train the VAE and agent, then validate on held-out slices.
    Train,
    /// Re-run validation from the checkpoints of a finished run.
    Eval {
        /// Run directory holding vae.ckpt and qnet.ckpt.
        run_dir: PathBuf,
        /// Override the number of validation slices.
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Compare the full model against fixed-λ and no-active-learning runs.
    Ablate,
}

fn run(cli: Cli) -> Result<(), StageError> {
    let mut cfg = RunConfig::load(&cli.config).map_err(|source| StageError {
        stage: Stage::Config,
        source,
    })?;
    match cli.command {
        Command::Synth => println!("{}", cmd_synth(&cfg)?),
        Command::Train => {
            let art = cmd_train(&mut cfg)?;
            println!("{}", art.report.summary_csv().trim_end());
            println!("outputs in {}", art.run_dir.display());
        }
        Command::Eval { run_dir, folds } => {
            if let Some(k) = folds {
                cfg.data.folds = k;
            }
            let report = cmd_eval(&cfg, &run_dir)?;
            println!("{}", report.summary_csv().trim_end());
        }
        Command::Ablate => {
            let (rows, _) = cmd_ablate(&mut cfg)?;
            print!("{}", ablation_csv(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.stage.exit_code() as u8)
        }
    }
}
