use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use trsbts_cli::commands::{self, RunOptions};
use trsbts_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "trsbts", version, about = "Kernel-regression Schrödinger bridge experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides the config's `seeds`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, env = "TRSBTS_THREADS")]
    threads: Option<usize>,
}

#[derive(clap::Args)]
struct WithModel {
    #[command(flatten)]
    common: Common,
    /// Saved model directory (default `<out>/model`).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the configured levels and save the model.
    Fit(WithModel),
    /// Continue paths from a real warm start with a saved model.
    Generate(WithModel),
    /// Energy-score a saved model on held-out paths.
    Validate(WithModel),
    /// Ambient-dimension sweep on the Hopf generator.
    SweepDim(Common),
    /// Three-phase hyperparameter ladder.
    Ladder(Common),
    /// Heston parameter-recovery experiment.
    Heston(Common),
    /// Entropic selection among candidate reference families.
    SelectReference(Common),
}

fn run(cli: Cli) -> Result<String, CliError> {
    let (common, model) = match &cli.command {
        Command::Fit(w) | Command::Generate(w) | Command::Validate(w) => (&w.common, w.model.clone()),
        Command::SweepDim(c) | Command::Ladder(c) | Command::Heston(c) | Command::SelectReference(c) => (c, None),
    };
    if let Some(n) = common.threads {
        if n == 0 {
            return Err(CliError::config("--threads must be positive"));
        }
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = ExperimentConfig::load(&common.config)?;
    let opts = RunOptions {
        seed: common.seed,
        out: common.out.clone(),
        model,
    };
    let shown = |p: PathBuf| p.display().to_string();
    Ok(match cli.command {
        Command::Fit(_) => shown(commands::cmd_fit(&cfg, &opts)?),
        Command::Generate(_) => commands::cmd_generate(&cfg, &opts)?
            .into_iter()
            .map(shown)
            .collect::<Vec<_>>()
            .join("\n"),
        Command::Validate(_) => shown(commands::cmd_validate(&cfg, &opts)?),
        Command::SweepDim(_) => shown(commands::cmd_sweep_dim(&cfg, &opts)?),
        Command::Ladder(_) => shown(commands::cmd_ladder(&cfg, &opts)?),
        Command::Heston(_) => shown(commands::cmd_heston(&cfg, &opts)?),
        Command::SelectReference(_) => commands::cmd_select_reference(&cfg, &opts)?,
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("trsbts: {e}");
            eprintln!("{}", e.trailer());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
