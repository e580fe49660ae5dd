//! Inspect the network: layer layout, parameter count, output shapes for a
//! few input sizes, and a weight file round trip.

use std::time::Instant;

use flow4dsr::net::{Checkpoint, Feature, ModelParameters, NetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> flow4dsr::Result<()> {
    let cfg = NetConfig::with_filters(16);
    let params = ModelParameters::<f32>::init(cfg, 42)?;
    for (name, cin, cout) in cfg.layout().iter().take(6) {
        println!("{name:<14} {cin:>3} -> {cout:<3}");
    }
    println!("... {} convolutions, {} parameters", cfg.layout().len(), params.parameter_count());

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in [8, 12, 16] {
        let mut input = |lo: f32, hi: f32| {
            Feature::from_vec([n; 3], 3, (0..n * n * n * 3).map(|_| rng.random_range(lo..hi)).collect())
        };
        let (v, a) = (input(-1.0, 1.0)?, input(0.0, 1.0)?);
        let t = Instant::now();
        let y = params.forward_sample(&v, &a)?;
        let max = y.data().iter().fold(0.0f32, |m, x| m.max(x.abs()));
        println!(
            "{n}^3 -> {:?}x{}  max |y| {max:.3}  {:.0} ms",
            y.dims(),
            y.channels(),
            t.elapsed().as_secs_f64() * 1e3
        );
    }

    let dir = tempfile::tempdir().map_err(|e| flow4dsr::Error::io(std::env::temp_dir(), e))?;
    let path = dir.path().join("init.f4dw");
    let ck = Checkpoint {
        params,
        iteration: 0,
        validation_metric: None,
    };
    ck.save(&path)?;
    let back = Checkpoint::load(&path)?;
    let bytes = std::fs::metadata(&path).map_err(|e| flow4dsr::Error::io(&path, e))?.len();
    println!("weights file {bytes} bytes, round trip identical: {}", back == ck);
    Ok(())
}
