//! Train a narrow network for a few hundred steps on patches cut from one
//! helical flow, printing the step log and validation history.
//!
//! Usage: `cargo run --release --example train_small [iterations]`

use std::io::stdout;

use flow4dsr::dataset::{build_dataset, read_dataset, synthetic_frames, BuildConfig, SourceInfo, SourceInput, SourceRole};
use flow4dsr::flowfield::{FlowSpec, Waveform};
use flow4dsr::net::{Checkpoint, ModelParameters, NetConfig};
use flow4dsr::train::{relative_speed_error, train_loop, TrainConfig, TrainSample};
use flow4dsr::volume::{Axis, Grid3};

fn main() -> flow4dsr::Result<()> {
    let iters: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let dir = tempfile::tempdir().map_err(|e| flow4dsr::Error::io(std::env::temp_dir(), e))?;

    let grid = Grid3::isotropic([32; 3], 1.0)?;
    let wave = Waveform(vec![(0.0, 0.5), (0.5, 1.0)]);
    let flows = [
        ("train", SourceRole::Train, FlowSpec::helical(Axis::Z, 9.0, 100.0, 0.3)),
        ("holdout", SourceRole::Holdout, FlowSpec::helical(Axis::X, 9.0, 90.0, 0.3)),
    ];
    let mut inputs = Vec::new();
    for (name, role, flow) in flows {
        inputs.push(SourceInput {
            info: SourceInfo { name: name.into(), role, n_frames: 2 },
            frames: Box::new(synthetic_frames(&flow.with_waveform(wave.clone()), &grid, 2)?),
        });
    }
    let build = BuildConfig {
        patches_per_frame: 2,
        patch_size: 8,
        ..Default::default()
    };
    build_dataset(&build, &grid, inputs, dir.path())?;
    let load = |file: &str| -> flow4dsr::Result<Vec<TrainSample<f32>>> {
        read_dataset(&dir.path().join(file))?.1.iter().map(TrainSample::from_patch).collect()
    };
    let (train, val) = (load("train.f4d")?, load("val.f4d")?);
    println!("{} training patches, {} validation patches", train.len(), val.len());

    let mut params = ModelParameters::<f32>::init(
        NetConfig {
            base_filters: 8,
            lr_resblocks: 2,
            hr_resblocks: 1,
            ..Default::default()
        },
        3,
    )?;
    println!("{} parameters, initial val error {:.4}", params.parameter_count(), relative_speed_error(&params, &val)?);
    let cfg = TrainConfig {
        lr0: 1e-3,
        batch: 8,
        max_iters: iters,
        validate_every: 50,
        ..Default::default()
    };
    let ck = dir.path().join("best.f4dw");
    println!("iter\tlr\tl_mse\tl_vg\tl_total");
    let report = train_loop(&mut params, &train, &val, &cfg, Some(&ck), &mut stdout())?;
    for v in &report.validations {
        println!("validation @{:>4}: {:.4}{}", v.iteration, v.metric, if v.improved { " *" } else { "" });
    }
    let best = Checkpoint::load(&ck)?;
    println!("best checkpoint: iteration {} metric {:?}", best.iteration, best.validation_metric);
    Ok(())
}
