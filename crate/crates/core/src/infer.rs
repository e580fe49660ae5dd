//! Full-volume super-resolution: overlapping LR patches are predicted
//! independently, their borders stripped and the rest stitched together.

use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::patch::MAGNITUDE_SCALE;
use crate::dataset::VolumeRecord;
use crate::error::{ensure, Error, Result};
use crate::net::{compute_anatomy_channels, upsample_trilinear2x, Feature, ModelParameters, MIN_INPUT};
use crate::volume::Volume;

/// SR voxels removed from each patch face before stitching.
pub const STRIP: usize = 4;

/// Default LR patch side at inference time.
pub const DEFAULT_INFER_PATCH: usize = 32;

const UNASSIGNED: u32 = u32::MAX;

/// Where the LR patches of one volume start.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub n: usize,
    pub stride: usize,
    pub strip: usize,
    pub lr_dims: [usize; 3],
    /// Origins per axis; the last one on each axis is clamped to `dim - n`.
    pub axis_origins: [Vec<usize>; 3],
    /// Cartesian product of `axis_origins`, first axis slowest.
    pub origins: Vec<[usize; 3]>,
}

fn axis_origins(dim: usize, n: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        if o + n >= dim {
            out.push(dim - n);
            break;
        }
        out.push(o);
        o += stride;
    }
    out
}

pub fn plan_patches(lr_dims: [usize; 3], n: usize) -> Result<PatchPlan> {
    ensure(n >= MIN_INPUT, || format!("patch size {n} is below the minimum {MIN_INPUT}"))?;
    ensure(lr_dims.iter().all(|&d| d >= n), || {
        format!("volume {lr_dims:?} is smaller than the patch size {n}")
    })?;
    let stride = n - STRIP;
    let axis_origins = lr_dims.map(|d| axis_origins(d, n, stride));
    let mut origins = Vec::new();
    for &i in &axis_origins[0] {
        for &j in &axis_origins[1] {
            for &k in &axis_origins[2] {
                origins.push([i, j, k]);
            }
        }
    }
    Ok(PatchPlan {
        n,
        stride,
        strip: STRIP,
        lr_dims,
        axis_origins,
        origins,
    })
}

impl PatchPlan {
    pub fn sr_dims(&self) -> [usize; 3] {
        self.lr_dims.map(|d| 2 * d)
    }

    /// SR index range kept from the patch at `origin`, per axis. Faces on
    /// the volume boundary keep their border.
    pub fn retained(&self, origin: [usize; 3]) -> [(usize, usize); 3] {
        std::array::from_fn(|a| {
            let o = origin[a];
            let lo = if o == 0 { 0 } else { 2 * o + self.strip };
            let hi = if o + self.n == self.lr_dims[a] {
                2 * self.lr_dims[a]
            } else {
                2 * (o + self.n) - self.strip
            };
            (lo, hi)
        })
    }
}

/// Maps one normalised LR patch (velocity and anatomy, `n^3` by 3) to its
/// normalised SR patch (`(2n)^3` by 3).
pub trait PatchPredictor: Sync {
    fn predict(&self, velocity: &Feature<f32>, anatomy: &Feature<f32>) -> Result<Feature<f32>>;
}

impl PatchPredictor for ModelParameters<f32> {
    fn predict(&self, velocity: &Feature<f32>, anatomy: &Feature<f32>) -> Result<Feature<f32>> {
        self.forward_sample(velocity, anatomy)
    }
}

/// Trilinear x2 upsampling of the velocity channels in place of a network.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrilinearPredictor;

impl PatchPredictor for TrilinearPredictor {
    fn predict(&self, velocity: &Feature<f32>, _anatomy: &Feature<f32>) -> Result<Feature<f32>> {
        Ok(upsample_trilinear2x(velocity))
    }
}

/// Network inputs for a whole LR volume.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedVolume {
    pub velocity: Feature<f32>,
    pub anatomy: Feature<f32>,
    /// Divides cm/s into network units.
    pub venc_max: f32,
}

impl NormalizedVolume {
    /// Velocities over the largest VENC, magnitudes over the 8-bit scale and
    /// clamped to `[0, 1]`, as for training patches.
    pub fn from_record(rec: &VolumeRecord) -> Result<Self> {
        let venc_max = rec.venc.iter().copied().fold(f32::MIN, f32::max);
        ensure(venc_max > 0.0 && venc_max.is_finite(), || {
            format!("VENCs must be positive, got {:?}", rec.venc)
        })?;
        let vel = rec.velocity.each_ref().map(|v| v.map(|x| x / venc_max));
        let mag = rec
            .magnitude
            .each_ref()
            .map(|m| m.map(|x| (x / MAGNITUDE_SCALE as f32).clamp(0.0, 1.0)));
        let anat = compute_anatomy_channels([&mag[0], &mag[1], &mag[2]], [&vel[0], &vel[1], &vel[2]])?;
        Ok(NormalizedVolume {
            velocity: Feature::from_volumes(&[&vel[0], &vel[1], &vel[2]])?,
            anatomy: Feature::from_volumes(&[&anat[0], &anat[1], &anat[2]])?,
            venc_max,
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.velocity.dims()
    }
}

fn crop(f: &Feature<f32>, o: [usize; 3], n: usize) -> Feature<f32> {
    let [_, h, w] = f.dims();
    let c = f.channels();
    let mut out = Vec::with_capacity(n * n * n * c);
    for i in o[0]..o[0] + n {
        for j in o[1]..o[1] + n {
            let start = ((i * h + j) * w + o[2]) * c;
            out.extend_from_slice(&f.data()[start..start + n * c]);
        }
    }
    Feature::from_vec([n; 3], c, out).expect("crop shape")
}

/// Super-resolved velocities (cm/s) and the index into `plan.origins` of
/// the patch that supplied each SR voxel.
#[derive(Clone, Debug, PartialEq)]
pub struct StitchedVolume {
    pub velocity: [Volume<f32>; 3],
    pub provenance: Volume<u32>,
}

/// Predict every patch of `plan` and stitch the retained regions. Later
/// patches overwrite earlier ones where clamped origins overlap.
pub fn predict_volume<P: PatchPredictor + ?Sized>(
    input: &NormalizedVolume,
    predictor: &P,
    plan: &PatchPlan,
) -> Result<StitchedVolume> {
    ensure(input.dims() == plan.lr_dims, || {
        format!("plan is for {:?} but the volume is {:?}", plan.lr_dims, input.dims())
    })?;
    let sr = plan.sr_dims();
    let mut out = Feature::<f32>::zeros(sr, 3);
    let mut provenance = Volume::filled(sr, UNASSIGNED);
    // Bounded batches keep at most a few SR patches alive per thread.
    let chunk = 4 * rayon::current_num_threads().max(1);
    for (c, batch) in plan.origins.chunks(chunk).enumerate() {
        let preds: Vec<Feature<f32>> = batch
            .par_iter()
            .map(|&o| {
                let v = crop(&input.velocity, o, plan.n);
                let a = crop(&input.anatomy, o, plan.n);
                let p = predictor.predict(&v, &a)?;
                ensure(p.dims() == [2 * plan.n; 3] && p.channels() == 3, || {
                    format!("predictor returned {:?}x{} for a {}^3 patch", p.dims(), p.channels(), plan.n)
                })?;
                Ok(p)
            })
            .collect::<Result<_>>()?;
        for (b, (pred, &o)) in preds.iter().zip(batch).enumerate() {
            let id = (c * chunk + b) as u32;
            let r = plan.retained(o);
            let base = o.map(|x| 2 * x);
            let m = 2 * plan.n;
            for i in r[0].0..r[0].1 {
                for j in r[1].0..r[1].1 {
                    let src = (((i - base[0]) * m + (j - base[1])) * m + (r[2].0 - base[2])) * 3;
                    let dst = ((i * sr[1] + j) * sr[2] + r[2].0) * 3;
                    let len = (r[2].1 - r[2].0) * 3;
                    out.data_mut()[dst..dst + len].copy_from_slice(&pred.data()[src..src + len]);
                    for k in r[2].0..r[2].1 {
                        provenance.set(i, j, k, id);
                    }
                }
            }
        }
    }
    if let Some(p) = provenance.as_slice().iter().position(|&p| p == UNASSIGNED) {
        return Err(Error::Numeric(format!("stitching left SR voxel {p} unassigned")));
    }
    let scale = input.venc_max;
    let velocity = std::array::from_fn(|c| out.channel(c).map(|x| x * scale));
    Ok(StitchedVolume { velocity, provenance })
}

#[derive(Clone, Debug)]
pub struct UpsampleResult {
    pub stitched: StitchedVolume,
    pub elapsed: Duration,
}

/// Plan, predict and stitch one LR volume, logging the wall-clock time.
pub fn upsample_full<P: PatchPredictor + ?Sized>(rec: &VolumeRecord, predictor: &P, n: usize) -> Result<UpsampleResult> {
    let start = Instant::now();
    crate::sys::retain_freed_memory();
    let input = NormalizedVolume::from_record(rec)?;
    let plan = plan_patches(input.dims(), n)?;
    let stitched = predict_volume(&input, predictor, &plan)?;
    let elapsed = start.elapsed();
    log::info!(
        "super-resolved {:?} -> {:?} from {} patches in {:.2} s",
        plan.lr_dims,
        plan.sr_dims(),
        plan.origins.len(),
        elapsed.as_secs_f64()
    );
    Ok(UpsampleResult { stitched, elapsed })
}

fn replicate2<T: Copy>(v: &Volume<T>) -> Volume<T> {
    let d = v.dims().map(|x| 2 * x);
    Volume::from_fn(d, |i, j, k| v.get(i / 2, j / 2, k / 2))
}

/// SR volume record: predicted velocities, the LR magnitudes and mask
/// replicated onto the SR grid, and the input VENCs.
pub fn predict_record<P: PatchPredictor + ?Sized>(rec: &VolumeRecord, predictor: &P, n: usize) -> Result<VolumeRecord> {
    let res = upsample_full(rec, predictor, n)?;
    let mask = replicate2(&rec.mask);
    let fluid_fraction = mask.as_slice().iter().filter(|&&m| m).count() as f32 / mask.len() as f32;
    Ok(VolumeRecord {
        velocity: res.stitched.velocity,
        magnitude: rec.magnitude.each_ref().map(replicate2),
        mask,
        venc: rec.venc,
        fluid_fraction,
    })
}
