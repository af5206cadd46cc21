use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metacount_cli::pipeline::ModelKind;
use metacount_cli::{commands, CliError, ExperimentConfig, Method, Overrides};

/// Few-shot scene-adaptive crowd counting experiments.
#[derive(Parser)]
#[command(name = "metacount", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Evaluation method (default: all).
    #[arg(long, global = true)]
    method: Option<Method>,
    /// Shot counts, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    k: Option<Vec<usize>>,
    /// Fine-tuning steps at evaluation.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Trials per scene.
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Restrict counting and fine-tuning to each scene's region of interest.
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    roi: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark to <out>/data.
    Generate,
    /// Supervised training on all training-scene images.
    Pretrain,
    /// MAML meta-training from the pretrained model.
    Metatrain,
    /// Reptile meta-training from the pretrained model.
    Reptile,
    /// K-shot evaluation on the held-out scenes; writes reports and tables.
    Evaluate,
    /// Mean MAE per fine-tuning step for the adapting methods.
    Curves,
}

fn run(cli: Cli) -> Result<String, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        out: cli.out,
        k: cli.k,
        steps: cli.steps,
        trials: cli.trials,
        roi: cli.roi,
    });
    if cli.method.is_some() && !matches!(cli.command, Command::Evaluate | Command::Curves) {
        return Err(CliError::Usage("--method only applies to evaluate and curves".into()));
    }
    match cli.command {
        Command::Generate => commands::generate(&cfg),
        Command::Pretrain => commands::pretrain(&cfg),
        Command::Metatrain => commands::meta_learn(&cfg, ModelKind::Maml),
        Command::Reptile => commands::meta_learn(&cfg, ModelKind::Reptile),
        Command::Evaluate => commands::evaluate(&cfg, cli.method),
        Command::Curves => commands::curves(&cfg, cli.method),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // clap's message already starts with "error:"
            eprint!("{}", e.render());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(msg) => {
            if !msg.is_empty() {
                println!("{}", msg.trim_end());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
