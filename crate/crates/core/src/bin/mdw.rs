use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mdw::config::RunConfig;
use mdw::pipeline::{self, RunDir, StageStatus};
use mdw::Error;

#[derive(Parser)]
#[command(name = "mdw", version, about = "Noise-robust multi-modal dataset distillation")]
struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key=value` override applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Worker threads for expert and evaluation seeds (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Rebuild artifacts that already exist.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the noisy training split and the clean test split.
    GenData,
    /// Train expert trajectories with filtration.
    TrainExpert,
    /// Distill the synthetic pairs from stored trajectories.
    Distill,
    /// Train students on the distilled pairs and score retrieval.
    Evaluate,
    /// Run every stage into one run directory.
    Pipeline,
    /// Print the resolved configuration.
    ShowConfig,
}

fn load_config(cli: &Cli) -> mdw::Result<RunConfig> {
    let base = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    let mut overrides: Vec<String> = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    base.with_overrides(overrides.iter().map(String::as_str))
}

fn run(cli: &Cli) -> mdw::Result<()> {
    let config = load_config(cli)?;
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    }
    let dir = RunDir::for_config(&config);
    let report = |stage: &str, status: StageStatus| match status {
        StageStatus::Ran => println!("{stage}: done ({})", dir.root().display()),
        StageStatus::UpToDate => println!("{stage}: up to date ({})", dir.root().display()),
    };
    match cli.command {
        Command::GenData => report("gen-data", pipeline::gen_data(&config, &dir, cli.force)?),
        Command::TrainExpert => report("train-expert", pipeline::train_expert_stage(&config, &dir, cli.force)?),
        Command::Distill => report("distill", pipeline::distill_stage(&config, &dir, cli.force)?),
        Command::Evaluate => report("evaluate", pipeline::evaluate_stage(&config, &dir, cli.force)?),
        Command::Pipeline => {
            for (stage, status) in pipeline::run_pipeline(&config, &dir, cli.force)? {
                report(stage, status);
            }
        }
        Command::ShowConfig => println!("{}", config.to_json()?),
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Json(_) => 2,
        Error::Numeric(_) | Error::NonFiniteLoss { .. } | Error::DistillAborted { .. } | Error::Degenerate(_) => 3,
        Error::MissingArtifact { .. } => 4,
        Error::Format { .. } | Error::Io { .. } | Error::Csv(_) => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
