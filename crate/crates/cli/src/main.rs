use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hesslens_cli::commands::{cmd_attack, cmd_landscape, cmd_spectrum, cmd_sweep, cmd_train, Context, Outcome};
use hesslens_cli::config::{ExperimentConfig, Overrides, Stage};
use hesslens_cli::CliError;

#[derive(Parser)]
#[command(name = "hesslens", version, about = "Hessian spectra, adversarial attacks and robust training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (results do not depend on this).
    #[arg(long, env = "HESSLENS_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model (plain or robust) and write a checkpoint and metrics.
    Train(Common),
    /// Top-k Hessian eigenpairs of a checkpoint for each subsample size.
    Spectrum(Common),
    /// Accuracy of checkpoints on adversarial versions of the test set.
    Attack(Common),
    /// Loss along eigenvector directions or between two checkpoints.
    Landscape(Common),
    /// Train one model per batch size and seed, then measure each.
    Sweep(Common),
}

fn run(cli: Cli) -> Result<Outcome, CliError> {
    type Run = fn(&Context) -> Result<Outcome, CliError>;
    let (common, stage, f): (Common, Stage, Run) = match cli.command {
        Command::Train(c) => (c, Stage::Train, cmd_train),
        Command::Spectrum(c) => (c, Stage::Spectrum, cmd_spectrum),
        Command::Attack(c) => (c, Stage::Attack, cmd_attack),
        Command::Landscape(c) => (c, Stage::Landscape, cmd_landscape),
        Command::Sweep(c) => (c, Stage::Sweep, cmd_sweep),
    };
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("threads: {e}")))?;
    }
    let overrides = Overrides {
        seed: common.seed,
        out: common.out,
    };
    let cfg = ExperimentConfig::load(&common.config, &overrides)?;
    let ctx = Context::prepare(cfg, stage)?;
    f(&ctx)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            if outcome.nonconverged {
                eprintln!("warning: some eigenpairs did not converge (flagged in the output)");
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
