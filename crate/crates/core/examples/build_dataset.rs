//! Build the train/val/test containers from two synthetic training flows
//! and one holdout flow, then read a few patches back.
//!
//! Usage: `cargo run --release --example build_dataset [out_dir]`

use flow4dsr::dataset::{
    build_dataset, read_dataset, read_volumes, synthetic_frames, BuildConfig, SourceInfo, SourceInput, SourceRole,
};
use flow4dsr::flowfield::{FlowSpec, Waveform};
use flow4dsr::volume::{Axis, Grid3};

fn main() -> flow4dsr::Result<()> {
    let tmp = tempfile::tempdir().map_err(|e| flow4dsr::Error::io(std::env::temp_dir(), e))?;
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| tmp.path().to_path_buf());

    let grid = Grid3::isotropic([48; 3], 0.8)?;
    let wave = Waveform(vec![(0.0, 0.3), (0.2, 1.0), (0.7, 0.3)]);
    let sources = [
        ("straight", SourceRole::Train, FlowSpec::poiseuille(Axis::Z, 12.0, 80.0)),
        ("swirl", SourceRole::Train, FlowSpec::helical(Axis::Y, 12.0, 120.0, 0.35)),
        ("narrowed", SourceRole::Holdout, FlowSpec::stenosed(Axis::X, 12.0, 100.0, 0.55)),
    ];
    let n_frames = 3;
    let mut inputs = Vec::new();
    for (name, role, flow) in sources {
        inputs.push(SourceInput {
            info: SourceInfo { name: name.into(), role, n_frames },
            frames: Box::new(synthetic_frames(&flow.with_waveform(wave.clone()), &grid, n_frames)?),
        });
    }
    let cfg = BuildConfig {
        patches_per_frame: 4,
        patch_size: 12,
        seed: 5,
        ..Default::default()
    };
    let manifest = build_dataset(&cfg, &grid, inputs, &out)?;
    println!("wrote {}", out.display());
    println!(
        "counts: train {}  val {}  test {}",
        manifest.counts.train, manifest.counts.val, manifest.counts.test
    );

    let (header, train) = read_dataset(&out.join("train.f4d"))?;
    println!("train header: {} records, LR patch {:?}", header.count, header.dims);
    for p in train.iter().step_by(10).take(4) {
        println!(
            "  venc {:?}  fluid {:.2}  LR {:?} -> HR {:?}",
            p.venc,
            p.fluid_fraction,
            p.lr_dims(),
            p.hr_dims()
        );
    }
    let (_, lr) = read_volumes(&out.join("test_lr.f4d"))?;
    println!("test LR frames: {} of {:?}", lr.len(), lr[0].dims());
    Ok(())
}
