//! The training loop: seeded shuffled batches, Adam on the total loss,
//! periodic validation and best-checkpoint selection.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, lr_at, AdamConfig, AdamState};
use super::loss::{total_loss_with_grad, LossBreakdown};
use crate::dataset::PatchPair;
use crate::error::{ensure, Error, Result};
use crate::eval::{rel_speed_error_slices, DEFAULT_EPSILON};
use crate::net::{compute_anatomy_channels, Checkpoint, Feature, ModelParameters, Real};
use crate::seed::derive_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub batch: usize,
    pub max_iters: u64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Iterations between validation passes.
    pub validate_every: u64,
    /// Grid step per axis used by the gradient loss, in voxels of the
    /// network output.
    pub vg_spacing: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            lr0: 1e-4,
            decay_factor: std::f64::consts::SQRT_2,
            decay_every: 10_000,
            batch: 20,
            max_iters: 1_000,
            seed: 0,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            validate_every: 500,
            vg_spacing: [1.0; 3],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if self.batch == 0 {
            return bad("batch must be >= 1".into());
        }
        if !(self.decay_factor.is_finite() && self.decay_factor >= 1.0) || self.decay_every == 0 {
            return bad("learning-rate decay needs decay_factor >= 1 and decay_every >= 1".into());
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0) {
            return bad("Adam needs betas in [0, 1) and eps > 0".into());
        }
        if self.validate_every == 0 {
            return bad("validate_every must be >= 1".into());
        }
        if !self.vg_spacing.iter().all(|h| h.is_finite() && *h > 0.0) {
            return bad(format!("vg_spacing must be positive, got {:?}", self.vg_spacing));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn lr_at(&self, iteration: u64) -> f64 {
        lr_at(iteration, self.lr0, self.decay_factor, self.decay_every)
    }
}

/// One patch as network inputs, target and fluid mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample<T> {
    pub velocity: Feature<T>,
    pub anatomy: Feature<T>,
    pub target: Feature<T>,
    /// HR voxels with non-zero true speed.
    pub mask: Vec<bool>,
}

impl TrainSample<f32> {
    pub fn from_patch(p: &PatchPair) -> Result<Self> {
        p.validate()?;
        let v = &p.lr_velocity;
        let m = &p.lr_magnitude;
        let anat = compute_anatomy_channels([&m[0], &m[1], &m[2]], [&v[0], &v[1], &v[2]])?;
        let h = &p.hr_velocity;
        Ok(TrainSample {
            velocity: Feature::from_volumes(&[&v[0], &v[1], &v[2]])?,
            anatomy: Feature::from_volumes(&[&anat[0], &anat[1], &anat[2]])?,
            target: Feature::from_volumes(&[&h[0], &h[1], &h[2]])?,
            mask: p.hr_mask().into_vec(),
        })
    }
}

impl<T: Real> TrainSample<T> {
    pub fn cast<U: Real>(&self) -> TrainSample<U> {
        let cv = |f: &Feature<T>| {
            Feature::from_vec(
                f.dims(),
                f.channels(),
                f.data().iter().map(|x| U::of(x.to_f64().expect("finite"))).collect(),
            )
            .expect("same shape")
        };
        TrainSample {
            velocity: cv(&self.velocity),
            anatomy: cv(&self.anatomy),
            target: cv(&self.target),
            mask: self.mask.clone(),
        }
    }
}

/// Masked relative speed error pooled over all fluid voxels of the samples.
pub fn relative_speed_error<T: Real + Into<f64>>(params: &ModelParameters<T>, samples: &[TrainSample<T>]) -> Result<f64> {
    let parts: Vec<(f64, usize)> = samples
        .par_iter()
        .map(|s| {
            let n = s.mask.iter().filter(|&&m| m).count();
            if n == 0 {
                return Ok((0.0, 0));
            }
            let pred = params.forward_sample(&s.velocity, &s.anatomy)?;
            let split = |f: &Feature<T>| [f.channel(0).into_vec(), f.channel(1).into_vec(), f.channel(2).into_vec()];
            let (p, t) = (split(&pred), split(&s.target));
            let e = rel_speed_error_slices(
                [&p[0][..], &p[1][..], &p[2][..]],
                [&t[0][..], &t[1][..], &t[2][..]],
                &s.mask,
                DEFAULT_EPSILON,
            )?;
            Ok((e * n as f64, n))
        })
        .collect::<Result<_>>()?;
    let (sum, n) = parts.iter().fold((0.0, 0), |(s, c), (e, n)| (s + e, c + n));
    ensure(n > 0, || "no fluid voxels in the evaluated samples".into())?;
    Ok(sum / n as f64)
}

/// Mean loss over `batch` and the gradient of that mean. Samples are
/// processed in parallel chunks and summed in batch order, so the result
/// does not depend on the thread count.
pub fn batch_gradient<T: Real>(
    params: &ModelParameters<T>,
    batch: &[&TrainSample<T>],
    spacing: [f64; 3],
) -> Result<(LossBreakdown, ModelParameters<T>)> {
    ensure(!batch.is_empty(), || "empty batch".into())?;
    let scale = T::of(1.0 / batch.len() as f64);
    let mut grads = params.zeros_like();
    let mut losses = Vec::with_capacity(batch.len());
    let chunk = rayon::current_num_threads().max(1);
    for part in batch.chunks(chunk) {
        let results: Vec<(LossBreakdown, ModelParameters<T>)> = part
            .par_iter()
            .map(|s| {
                let (pred, tape) = params.forward_recorded(&s.velocity, &s.anatomy)?;
                let (loss, g_out) = total_loss_with_grad(&pred, &s.target, spacing)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("non-finite loss {loss:?}")));
                }
                let mut g = params.zeros_like();
                params.backward(&tape, &g_out, &mut g)?;
                Ok((loss, g))
            })
            .collect::<Result<_>>()?;
        for (loss, g) in results {
            losses.push(loss);
            grads.add_scaled(&g, scale);
        }
    }
    Ok((LossBreakdown::mean(&losses), grads))
}

/// Forward, loss, backward and one Adam update on `batch`; returns the loss
/// before the update.
pub fn train_step<T: Real>(
    params: &mut ModelParameters<T>,
    state: &mut AdamState<T>,
    batch: &[&TrainSample<T>],
    lr: f64,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    let (loss, grads) = batch_gradient(params, batch, config.vg_spacing)?;
    adam_step(params, &grads, state, lr, &config.adam())?;
    if !params.all_finite() {
        return Err(Error::Numeric(format!("parameters became non-finite at step {}", state.step)));
    }
    Ok(loss)
}

/// Endless stream of batches: each epoch is a fresh seeded permutation and
/// batches run across epoch boundaries.
pub struct BatchSampler {
    n: usize,
    batch: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    pub fn new(n: usize, batch: usize, seed: u64) -> Result<Self> {
        ensure(n > 0 && batch > 0, || "batch sampler needs samples and a positive batch size".into())?;
        Ok(BatchSampler {
            n,
            batch,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, &[self.epoch]));
                self.order.shuffle(&mut rng);
                self.epoch += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub iteration: u64,
    pub metric: f64,
    /// Strictly better than every earlier validation, so a checkpoint was
    /// written.
    pub improved: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch loss of every step, in order.
    pub losses: Vec<LossBreakdown>,
    pub validations: Vec<ValidationRecord>,
}

impl TrainReport {
    pub fn best(&self) -> Option<ValidationRecord> {
        self.validations.iter().rev().find(|v| v.improved).copied()
    }
}

/// One log line: `iter lr l_mse l_vg l_total`, tab separated.
pub fn format_log_line(iteration: u64, lr: f64, loss: &LossBreakdown) -> String {
    format!("{iteration}\t{lr:.6e}\t{:.6e}\t{:.6e}\t{:.6e}", loss.l_mse, loss.l_vg, loss.l_total)
}

/// Run `config.max_iters` steps. Validation runs after the first step,
/// every `config.validate_every` steps and after the last one; on strict
/// improvement the parameters are saved to `checkpoint`. A numeric failure
/// stops training and leaves the last saved checkpoint in place.
pub fn train_loop(
    params: &mut ModelParameters<f32>,
    train: &[TrainSample<f32>],
    val: &[TrainSample<f32>],
    config: &TrainConfig,
    checkpoint: Option<&Path>,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    config.validate()?;
    ensure(!train.is_empty() && !val.is_empty(), || {
        "training needs non-empty train and validation sets".into()
    })?;
    crate::sys::retain_freed_memory();
    let mut state = AdamState::new(params);
    let mut sampler = BatchSampler::new(train.len(), config.batch, derive_seed(config.seed, &[0x7261_696e]))?;
    let mut report = TrainReport::default();
    let mut best = f64::INFINITY;
    for iteration in 1..=config.max_iters {
        let lr = config.lr_at(iteration - 1);
        let idx = sampler.next_batch();
        let batch: Vec<&TrainSample<f32>> = idx.iter().map(|&i| &train[i]).collect();
        let loss = train_step(params, &mut state, &batch, lr, config)?;
        writeln!(log, "{}", format_log_line(iteration, lr, &loss)).map_err(|e| Error::io("<training log>", e))?;
        report.losses.push(loss);

        if iteration == 1 || iteration % config.validate_every == 0 || iteration == config.max_iters {
            let metric = relative_speed_error(params, val)?;
            let improved = metric < best;
            if improved {
                best = metric;
                if let Some(path) = checkpoint {
                    Checkpoint {
                        params: params.clone(),
                        iteration,
                        validation_metric: Some(metric),
                    }
                    .save(path)?;
                }
            }
            log::info!("iteration {iteration}: validation relative speed error {metric:.5}{}", if improved { " (best)" } else { "" });
            report.validations.push(ValidationRecord {
                iteration,
                metric,
                improved,
            });
        }
    }
    log.flush().map_err(|e| Error::io("<training log>", e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetConfig;
    use crate::volume::Volume;

    fn tiny() -> NetConfig {
        NetConfig {
            base_filters: 2,
            lr_resblocks: 1,
            hr_resblocks: 1,
            ..Default::default()
        }
    }

    fn sample(seed: u64) -> TrainSample<f32> {
        let n = 8;
        let f = |c: u64| {
            Volume::from_fn([n, n, n], move |i, j, k| {
                (((i * 7 + j * 3 + k + (seed * 5 + c) as usize) % 11) as f32 - 5.0) * 0.1
            })
        };
        let m = Volume::filled([n, n, n], 1.0f32);
        let (a, b, c) = (f(0), f(1), f(2));
        let t = |c: u64| {
            Volume::from_fn([2 * n; 3], move |i, j, k| (((i + 2 * j + 3 * k + (seed + c) as usize) % 7) as f32 - 3.0) * 0.1)
        };
        let pp = PatchPair {
            lr_velocity: [a, b, c],
            lr_magnitude: [m.clone(), m.clone(), m],
            hr_velocity: [t(0), t(1), t(2)],
            venc: [1.0; 3],
            fluid_fraction: 1.0,
        };
        TrainSample::from_patch(&pp).unwrap()
    }

    #[test]
    fn sampler_covers_each_epoch_and_is_seeded() {
        let mut s = BatchSampler::new(7, 3, 9).unwrap();
        let seen: Vec<usize> = (0..7).flat_map(|_| s.next_batch()).collect();
        for epoch in seen.chunks(7) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, (0..7).collect::<Vec<_>>());
        }
        let mut a = BatchSampler::new(7, 3, 9).unwrap();
        let mut b = BatchSampler::new(7, 3, 10).unwrap();
        let (xa, xb): (Vec<_>, Vec<_>) = (0..5).map(|_| (a.next_batch(), b.next_batch())).unzip();
        assert_ne!(xa, xb);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch: 0,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            lr0: f64::NAN,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn batch_gradient_is_mean_of_per_sample_gradients() {
        let p = ModelParameters::<f64>::init(tiny(), 3).unwrap();
        let s: Vec<TrainSample<f64>> = (0..3).map(|i| sample(i).cast()).collect();
        let refs: Vec<&TrainSample<f64>> = s.iter().collect();
        let (loss, g) = batch_gradient(&p, &refs, [1.0; 3]).unwrap();
        let mut want = p.zeros_like();
        let mut l = 0.0;
        for r in &refs {
            let (lb, gi) = batch_gradient(&p, &[*r], [1.0; 3]).unwrap();
            want.add_scaled(&gi, 1.0 / 3.0);
            l += lb.l_total / 3.0;
        }
        approx::assert_relative_eq!(loss.l_total, l, max_relative = 1e-12);
        for ((_, _, a), (_, _, b)) in g.tensors().into_iter().zip(want.tensors()) {
            for (x, y) in a.iter().zip(b) {
                approx::assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn small_step_decreases_loss() {
        let s = [sample(1)];
        let refs: Vec<&TrainSample<f32>> = s.iter().collect();
        let cfg = TrainConfig::default();
        for seed in 0..10 {
            let mut p = ModelParameters::<f32>::init(tiny(), seed).unwrap();
            let mut st = AdamState::new(&p);
            let before = train_step(&mut p, &mut st, &refs, 1e-6, &cfg).unwrap();
            let (after, _) = batch_gradient(&p, &refs, cfg.vg_spacing).unwrap();
            assert!(after.l_total < before.l_total, "seed {seed}: {} !< {}", after.l_total, before.l_total);
        }
    }

    #[test]
    fn loop_logs_and_checkpoints_the_best_validation() {
        let dir = tempfile::tempdir().unwrap();
        let ck = dir.path().join("best.f4dw");
        let train: Vec<_> = (0..4).map(sample).collect();
        let val = vec![sample(7)];
        let cfg = TrainConfig {
            batch: 2,
            max_iters: 6,
            validate_every: 2,
            lr0: 1e-3,
            ..Default::default()
        };
        let mut p = ModelParameters::<f32>::init(tiny(), 5).unwrap();
        let mut log = Vec::new();
        let rep = train_loop(&mut p, &train, &val, &cfg, Some(&ck), &mut log).unwrap();
        let text = String::from_utf8(log).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert_eq!(text.lines().next().unwrap().split('\t').count(), 5);
        assert_eq!(rep.losses.len(), 6);
        assert_eq!(rep.validations.iter().map(|v| v.iteration).collect::<Vec<_>>(), vec![1, 2, 4, 6]);
        assert!(rep.validations[0].improved);
        let best = rep.best().unwrap();
        let min = rep.validations.iter().map(|v| v.metric).fold(f64::INFINITY, f64::min);
        assert_eq!(best.metric, min);
        let loaded = Checkpoint::load(&ck).unwrap();
        assert_eq!(loaded.iteration, best.iteration);
        assert_eq!(loaded.validation_metric, Some(best.metric));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut s = sample(2);
        s.target.data_mut()[0] = f32::NAN;
        let mut p = ModelParameters::<f32>::init(tiny(), 1).unwrap();
        let mut st = AdamState::new(&p);
        let err = train_step(&mut p, &mut st, &[&s], 1e-4, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }
}
