use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use latent_forensics::config::ExperimentConfig;
use latent_forensics::pipeline::{Run, Stage};

/// Latent-space deepfake classification laboratory.
#[derive(Parser, Debug)]
#[command(name = "lfl", version)]
struct Cli {
    /// Experiment config (TOML). Defaults apply to every missing key.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set decision.pi_m=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Parent directory of the run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Sets both `generator.seed` and `dataset.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Fabricate the labelled image dataset.
    GenData,
    /// Invert every image into the generator's style space.
    Invert,
    /// Fit the PCA and VQ projectors on each split.
    FitProjector,
    /// Train every configured classifier on every projector's codes.
    TrainClassifier,
    /// Score the classifiers on held-out images; also runs the reconstruction benchmark.
    Evaluate,
    /// Per-channel classifier accuracy on style codes.
    ChannelImportance,
    /// Accuracy against training-set size.
    AblateSize,
    /// Render CSV, markdown and plot data from the results.
    Report,
    /// Every stage in order.
    Full,
    /// Print the resolved config and its hash.
    ShowConfig,
}

impl Command {
    fn stage(self) -> Option<Stage> {
        Some(match self {
            Command::GenData => Stage::GenData,
            Command::Invert => Stage::Invert,
            Command::FitProjector => Stage::FitProjector,
            Command::TrainClassifier => Stage::TrainClassifier,
            Command::Evaluate => Stage::Evaluate,
            Command::ChannelImportance => Stage::ChannelImportance,
            Command::AblateSize => Stage::AblateSize,
            Command::Report => Stage::Report,
            Command::Full | Command::ShowConfig => return None,
        })
    }
}

fn load_config(cli: &Cli) -> latent_forensics::Result<ExperimentConfig> {
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("generator.seed={s}"));
        overrides.push(format!("dataset.seed={s}"));
    }
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides)?;
    if let Some(out) = &cli.out {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli, cfg: ExperimentConfig) -> anyhow::Result<()> {
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let run = Run::new(cfg);
    match cli.command {
        Command::ShowConfig => {
            println!("# config_hash {}", run.hash);
            print!("{}", run.config.to_toml()?);
            return Ok(());
        }
        Command::Full => run.full()?,
        other => run.execute(other.stage().expect("stage command"))?,
    }
    println!("{}", run.dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.workers == Some(0) {
        eprintln!("error: --workers must be positive");
        return ExitCode::from(2);
    }
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match run(&cli, cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let validation = e
                .downcast_ref::<latent_forensics::Error>()
                .is_some_and(latent_forensics::Error::is_validation);
            eprintln!("error: {e:#}");
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
