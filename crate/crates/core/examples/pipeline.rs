//! Run all five stages from a JSON config, the same path the `flow4dsr`
//! binary takes. The config is copied into a scratch directory so its
//! relative output paths land there.
//!
//! Usage: `cargo run --release --example pipeline [config.json]`

use std::fs;
use std::path::PathBuf;

use flow4dsr::pipeline::{self, PipelineConfig};
use flow4dsr::Error;

fn main() -> flow4dsr::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let src: PathBuf = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.json").into());
    let work = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let cfg_path = work.path().join("config.json");
    fs::copy(&src, &cfg_path).map_err(|e| Error::io(&src, e))?;
    let cfg = PipelineConfig::load(&cfg_path)?;

    fs::create_dir_all(&cfg.paths.frames_dir).map_err(|e| Error::io(&cfg.paths.frames_dir, e))?;
    let frames = pipeline::generate(&cfg)?;
    println!("generate: {} frame containers", frames.len());
    let manifest = pipeline::build(&cfg)?;
    println!(
        "build-dataset: {} train / {} val patches, {} test frames",
        manifest.counts.train, manifest.counts.val, manifest.counts.test
    );
    let report = pipeline::train(&cfg)?;
    let best = report.best().expect("first validation always improves");
    println!("train: {} steps, best validation {:.4} at step {}", report.losses.len(), best.metric, best.iteration);
    let n = pipeline::predict(
        &cfg,
        &pipeline::test_lr_path(&cfg),
        &cfg.paths.checkpoint,
        &cfg.paths.prediction,
    )?;
    println!("predict: {n} frames");
    let eval = pipeline::evaluate(
        &cfg,
        &pipeline::test_hr_path(&cfg),
        &pipeline::test_lr_path(&cfg),
        &cfg.paths.prediction,
    )?;
    pipeline::write_report(&eval, &cfg.paths.report_dir)?;
    println!("evaluate: mean relative speed error per method");
    for (m, e) in &eval.mean_rel_speed_error {
        println!("  {m:<10} {e:.4}");
    }
    Ok(())
}
