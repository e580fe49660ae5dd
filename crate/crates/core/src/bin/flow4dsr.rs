use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flow4dsr::pipeline::{self, PipelineConfig};
use flow4dsr::Result;

#[derive(Parser)]
#[command(name = "flow4dsr", version, about = "Synthetic 4D flow MRI super-resolution pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Main output of the command: frames dir, dataset dir, checkpoint,
    /// prediction container or report dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write HR frame containers for every configured source.
    Generate,
    /// Build train/val/test containers from the HR frames.
    BuildDataset,
    /// Train the network and keep the best checkpoint.
    Train,
    /// Super-resolve an LR volume container.
    Predict {
        /// LR volume container; defaults to the test split of the dataset.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a prediction and the interpolation baselines against ground truth.
    Evaluate {
        #[arg(long)]
        prediction: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        lr: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let path = cli
        .config
        .ok_or_else(|| flow4dsr::Error::Config("--config <path> is required".into()))?;
    let mut cfg = PipelineConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = cli.out;
    match cli.command {
        Command::Generate => {
            if let Some(o) = out {
                cfg.paths.frames_dir = o;
            }
            for p in pipeline::generate(&cfg)? {
                println!("{}", p.display());
            }
        }
        Command::BuildDataset => {
            if let Some(o) = out {
                cfg.paths.dataset_dir = o;
            }
            let m = pipeline::build(&cfg)?;
            println!("train {}\tval {}\ttest {}", m.counts.train, m.counts.val, m.counts.test);
        }
        Command::Train => {
            if let Some(o) = out {
                cfg.paths.checkpoint = o;
            }
            let report = pipeline::train(&cfg)?;
            if let Some(best) = report.best() {
                println!("best validation relative speed error {:.5} at iteration {}", best.metric, best.iteration);
            }
        }
        Command::Predict { input, checkpoint } => {
            let input = input.unwrap_or_else(|| pipeline::test_lr_path(&cfg));
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            let out = out.unwrap_or_else(|| cfg.paths.prediction.clone());
            let n = pipeline::predict(&cfg, &input, &checkpoint, &out)?;
            println!("{n} frames -> {}", out.display());
        }
        Command::Evaluate { prediction, truth, lr } => {
            let prediction = prediction.unwrap_or_else(|| cfg.paths.prediction.clone());
            let truth = truth.unwrap_or_else(|| pipeline::test_hr_path(&cfg));
            let lr = lr.unwrap_or_else(|| pipeline::test_lr_path(&cfg));
            let dir = out.unwrap_or_else(|| cfg.paths.report_dir.clone());
            let report = pipeline::evaluate(&cfg, &truth, &lr, &prediction)?;
            pipeline::write_report(&report, &dir)?;
            for (method, e) in &report.mean_rel_speed_error {
                println!("{method}\t{e:.5}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    flow4dsr::sys::configure_threads();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
