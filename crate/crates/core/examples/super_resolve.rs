//! Super-resolve a full simulated LR volume patch by patch and stitch the
//! result. Uses a checkpoint if one is given, else a freshly initialised
//! network, and compares against stitched trilinear upsampling.
//!
//! Usage: `cargo run --release --example super_resolve [model.f4dw]`

use flow4dsr::dataset::{simulate_lr, Augmentation, HrFrame};
use flow4dsr::eval::{rel_speed_error, MetricConfig};
use flow4dsr::flowfield::{generate_field, FlowSpec, VelocityField};
use flow4dsr::infer::{plan_patches, upsample_full, TrilinearPredictor};
use flow4dsr::net::{Checkpoint, ModelParameters, NetConfig};
use flow4dsr::volume::{Axis, Grid3};

fn main() -> flow4dsr::Result<()> {
    let grid = Grid3::isotropic([64; 3], 0.8)?;
    let (field, mask) = generate_field(&FlowSpec::helical(Axis::Z, 16.0, 110.0, 0.3), &grid)?;
    let hr = HrFrame { field, mask };
    let aug = Augmentation {
        venc: [60.0, 60.0, 150.0],
        intensity: 150.0,
        snr_db: 16.0,
    };
    let lr = simulate_lr(&hr, &aug, 9)?.to_record();

    let params = match std::env::args().nth(1) {
        Some(p) => Checkpoint::load(p.as_ref())?.params,
        None => ModelParameters::init(NetConfig::with_filters(16), 1)?,
    };
    let n = 16;
    let plan = plan_patches(lr.dims(), n)?;
    println!(
        "LR {:?} -> SR {:?}: {} patches of {n}^3, stride {}",
        plan.lr_dims,
        plan.sr_dims(),
        plan.origins.len(),
        plan.stride
    );

    let cfg = MetricConfig::new(hr.mask.clone());
    for (name, res) in [
        ("network", upsample_full(&lr, &params, n)?),
        ("trilinear", upsample_full(&lr, &TrilinearPredictor, n)?),
    ] {
        let sr = VelocityField::from_components(grid, res.stitched.velocity.each_ref().map(|v| v.to_f64()))?;
        println!(
            "{name:<10} {:>7.2} s  relative speed error {:.4}",
            res.elapsed.as_secs_f64(),
            rel_speed_error(&sr, &hr.field, &cfg)?
        );
    }
    Ok(())
}
