use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dualteach::app::{self, TeacherKind};
use dualteach::config::{parse_config, parse_config_with_env, PipelineConfig};
use dualteach::pipeline::{RunDir, StrategyKind};
use dualteach::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dualteach",
    version,
    about = "Two-teacher semi-supervised training for soft-labeled dialogue breakdown detection"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration file. Defaults to `<out>/config.toml` when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run directory.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Every stage in order for the configured strategy.
    Run {
        #[arg(long)]
        strategy: Option<StrategyKind>,
    },
    /// Writes the synthetic corpus or copies a JSONL dataset into the run directory.
    GenData,
    /// Builds the masked augmentations A_U and B_L.
    Augment,
    /// Masked-token pretraining of the encoder.
    PretrainEncoder,
    /// Trains the Gold or Masked Teacher.
    TrainTeacher {
        #[arg(long)]
        kind: TeacherKind,
    },
    /// Labels A_U with the joint teacher score.
    PseudoLabel,
    /// Trains or evaluates the model of one strategy.
    TrainStudent {
        #[arg(long)]
        strategy: Option<StrategyKind>,
    },
    /// Scores a predictions file against a gold file.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// Manifest declaring the class set; defaults to the one beside `--gold`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

impl Command {
    fn stage(&self) -> &'static str {
        match self {
            Command::Run { .. } => "run",
            Command::GenData => "gen-data",
            Command::Augment => "augment",
            Command::PretrainEncoder => "pretrain-encoder",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::PseudoLabel => "pseudo-label",
            Command::TrainStudent { .. } => "train-student",
            Command::Evaluate { .. } => "evaluate",
        }
    }

    fn strategy(&self) -> Option<StrategyKind> {
        match self {
            Command::Run { strategy } | Command::TrainStudent { strategy } => *strategy,
            _ => None,
        }
    }
}

fn load_config(global: &Global, strategy: Option<StrategyKind>) -> Result<PipelineConfig> {
    let snapshot = global.out.join("config.toml");
    let path = global
        .config
        .as_deref()
        .or(snapshot.exists().then_some(snapshot.as_path()));
    let mut config = match path {
        Some(p) => parse_config(p)?,
        None => parse_config_with_env("", |k| std::env::var(k).ok())?,
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    if let Some(threads) = global.threads {
        config.threads = threads;
    }
    if let Some(strategy) = strategy {
        config.strategy = strategy;
    }
    config.validate()?;
    Ok(config)
}

fn print_report(path: &Path) -> Result<()> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    print!("{text}");
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    if let Command::Evaluate { pred, gold, manifest } = &cli.command {
        let config = load_config(&cli.global, None)?;
        let report = app::evaluate_files(pred, gold, manifest.as_deref(), config.mse_divisor)?;
        print!("{}", report.to_json_pretty());
        return Ok(());
    }
    let config = load_config(&cli.global, cli.command.strategy())?;
    let dir = RunDir::create(&cli.global.out)?;
    app::with_threads(config.threads, || match &cli.command {
        Command::Run { .. } => {
            app::run_pipeline(&config, &dir)?;
            print_report(&dir.root().join("report.json"))
        }
        Command::GenData => {
            app::write_config_snapshot(&config, &dir)?;
            app::gen_data(&config, &dir).map(drop)
        }
        Command::Augment => app::augment(&config, &dir).map(drop),
        Command::PretrainEncoder => app::pretrain_encoder(&config, &dir).map(drop),
        Command::TrainTeacher { kind } => app::train_teacher(&config, &dir, *kind),
        Command::PseudoLabel => app::pseudo_label(&config, &dir).map(drop),
        Command::TrainStudent { .. } => {
            app::train_student(&config, &dir, config.strategy)?;
            print_report(&dir.root().join("report.json"))
        }
        Command::Evaluate { .. } => unreachable!("handled above"),
    })?
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let err = match err {
                Error::Stage { .. } => err,
                other => Error::in_stage(cli.command.stage(), other),
            };
            eprintln!("error: {err}");
            let mut source = std::error::Error::source(&err);
            while let Some(cause) = source {
                if !err.to_string().contains(&cause.to_string()) {
                    eprintln!("  caused by: {cause}");
                }
                source = cause.source();
            }
            ExitCode::FAILURE
        }
    }
}
