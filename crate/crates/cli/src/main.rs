use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use retino_bench::config::RunConfigFile;
use retino_bench::pipeline::{self, Overrides, PipelineError};

#[derive(Parser)]
#[command(name = "retino-bench", version, about = "Frozen-backbone transfer learning benchmark for DR grading")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config file (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Replaces the split, head initialization and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u32>,
    /// VGG16, ResNet50V2, EfficientNetB0 or StubBackbone.
    #[arg(long)]
    backbone: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train/validation split manifest.
    Split {
        #[command(flatten)]
        common: Common,
        /// Output CSV (default: <runs dir>/split.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a head on a frozen backbone and emit a run directory.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Re-evaluate a saved checkpoint on the validation split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory (default: eval/ beside the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge the metrics of several runs into one comparison table.
    Compare {
        /// Run ids (directory names under the runs dir).
        #[arg(required = true)]
        run_ids: Vec<String>,
        /// Runs dir; falls back to RETINO_BENCH_RUNS_DIR, then the config's output.runs_dir.
        #[arg(long)]
        runs_dir: Option<PathBuf>,
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Output directory (default: <runs dir>/comparison).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<RunConfigFile, PipelineError> {
    let mut cfg = RunConfigFile::load(&common.config)?;
    let overrides = Overrides { seed: common.seed, epochs: common.epochs, backbone: common.backbone.clone() };
    pipeline::apply_overrides(&mut cfg, &overrides)?;
    Ok(cfg)
}

fn compare_root(runs_dir: Option<PathBuf>, config: Option<&Path>) -> Result<PathBuf, PipelineError> {
    if let Some(dir) = runs_dir {
        return Ok(dir);
    }
    let cfg = match config {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    Ok(pipeline::runs_root(&cfg))
}

fn run(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Split { common, out } => {
            let cfg = load(&common)?;
            let (path, _) = pipeline::cmd_split(&cfg, out.as_deref())?;
            println!("{}", path.display());
        }
        Command::Train { common } => {
            let cfg = load(&common)?;
            let outcome = pipeline::cmd_train(&cfg)?;
            println!("{}", outcome.run_dir.display());
        }
        Command::Evaluate { common, checkpoint, out } => {
            let cfg = load(&common)?;
            let (dir, bundle) = pipeline::cmd_evaluate(&cfg, &checkpoint, out.as_deref())?;
            log::info!("validation accuracy {:.4}", bundle.evaluation.accuracy);
            println!("{}", dir.display());
        }
        Command::Compare { run_ids, runs_dir, config, out } => {
            let root = compare_root(runs_dir, config.as_deref())?;
            let (dir, _) = pipeline::cmd_compare(&root, &run_ids, out.as_deref())?;
            println!("{}", dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
