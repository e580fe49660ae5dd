//! Training patches: random origin selection, right-angle rotations with
//! co-rotated vector components, and normalisation to network units.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::flowfield::FluidMask;
use crate::volume::{Axis, Volume};

pub const LR_PATCH: usize = 16;
pub const HR_PATCH: usize = 2 * LR_PATCH;
/// Divisor mapping raw magnitude intensities into `[0, 1]`.
pub const MAGNITUDE_SCALE: f64 = 255.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RightAngle {
    Deg90,
    Deg180,
    Deg270,
}

impl RightAngle {
    pub const ALL: [RightAngle; 3] = [RightAngle::Deg90, RightAngle::Deg180, RightAngle::Deg270];

    pub fn quarter_turns(self) -> usize {
        match self {
            RightAngle::Deg90 => 1,
            RightAngle::Deg180 => 2,
            RightAngle::Deg270 => 3,
        }
    }
}

/// One sample in network units: velocities divided by the largest VENC,
/// magnitudes divided by 255.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchPair {
    pub lr_velocity: [Volume<f32>; 3],
    /// Per-encoding magnitudes `mx, my, mz`; the anatomy channels are derived
    /// from these at training time.
    pub lr_magnitude: [Volume<f32>; 3],
    pub hr_velocity: [Volume<f32>; 3],
    pub venc: [f32; 3],
    pub fluid_fraction: f32,
}

impl PatchPair {
    pub fn venc_max(&self) -> f32 {
        self.venc.iter().copied().fold(f32::MIN, f32::max)
    }

    pub fn lr_dims(&self) -> [usize; 3] {
        self.lr_velocity[0].dims()
    }

    pub fn hr_dims(&self) -> [usize; 3] {
        self.hr_velocity[0].dims()
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.lr_dims();
        let hr = self.hr_dims();
        ensure(
            self.lr_velocity.iter().chain(&self.lr_magnitude).all(|v| v.dims() == lr)
                && self.hr_velocity.iter().all(|v| v.dims() == hr),
            || "patch component shapes differ".into(),
        )?;
        ensure(hr == lr.map(|d| 2 * d), || {
            format!("HR patch dims {hr:?} are not twice LR dims {lr:?}")
        })?;
        ensure(
            self.lr_velocity
                .iter()
                .chain(&self.hr_velocity)
                .all(|v| v.as_slice().iter().all(|x| x.abs() <= 1.0)),
            || "normalised velocities must lie in [-1, 1]".into(),
        )?;
        ensure(
            self.lr_magnitude
                .iter()
                .all(|v| v.as_slice().iter().all(|x| (0.0..=1.0).contains(x))),
            || "normalised magnitudes must lie in [0, 1]".into(),
        )
    }

    /// HR fluid voxels, taken as the voxels with non-zero ground-truth speed.
    pub fn hr_mask(&self) -> Volume<bool> {
        let [a, b, c] = &self.hr_velocity;
        Volume::from_fn(a.dims(), |i, j, k| {
            a.get(i, j, k) != 0.0 || b.get(i, j, k) != 0.0 || c.get(i, j, k) != 0.0
        })
    }
}

/// Patch contents in physical units, before normalisation.
#[derive(Clone, Debug)]
pub struct RawPatch {
    pub lr_velocity: [Volume<f64>; 3],
    pub lr_magnitude: [Volume<f64>; 3],
    pub hr_velocity: [Volume<f64>; 3],
    pub venc: [f64; 3],
    pub fluid_fraction: f64,
}

pub fn normalize_pair(raw: &RawPatch) -> Result<PatchPair> {
    ensure(raw.venc.iter().all(|v| *v > 0.0), || {
        format!("VENCs must be positive, got {:?}", raw.venc)
    })?;
    let venc_max = raw.venc.iter().copied().fold(f64::MIN, f64::max);
    let vel = |vols: &[Volume<f64>; 3]| -> Result<[Volume<f32>; 3]> {
        for v in vols {
            let m = v.max_abs();
            if !(m <= venc_max) {
                return Err(Error::Validation(format!(
                    "velocity {m} cm/s exceeds the largest VENC {venc_max}"
                )));
            }
        }
        Ok(vols.each_ref().map(|v| v.map(|x| (x / venc_max) as f32)))
    };
    let pair = PatchPair {
        lr_velocity: vel(&raw.lr_velocity)?,
        lr_magnitude: raw
            .lr_magnitude
            .each_ref()
            .map(|m| m.map(|x| (x / MAGNITUDE_SCALE).clamp(0.0, 1.0) as f32)),
        hr_velocity: vel(&raw.hr_velocity)?,
        venc: raw.venc.map(|v| v as f32),
        fluid_fraction: raw.fluid_fraction as f32,
    };
    pair.validate()?;
    Ok(pair)
}

/// Rotate a cubic scalar volume by `quarter_turns * 90` degrees about `axis`,
/// turning the first of the remaining (cyclic) axes towards the second.
pub fn rotate_volume<T: Copy>(vol: &Volume<T>, axis: Axis, quarter_turns: usize) -> Result<Volume<T>> {
    let d = vol.dims();
    ensure(d[0] == d[1] && d[1] == d[2], || format!("rotation needs a cube, got {d:?}"))?;
    let s = d[0];
    let (p, q) = axis.others();
    let (p, q) = (p.index(), q.index());
    let mut out = vol.clone();
    for _ in 0..quarter_turns % 4 {
        let src = out.clone();
        out = Volume::from_fn(d, |i, j, k| {
            let idx = [i, j, k];
            let mut old = idx;
            old[p] = idx[q];
            old[q] = s - 1 - idx[p];
            src.at(old)
        });
    }
    Ok(out)
}

/// Rotate a vector field: the grid moves as in [`rotate_volume`] and the
/// components are mixed by the same rotation matrix.
pub fn rotate_vector<T: Copy + std::ops::Neg<Output = T>>(
    comps: &[Volume<T>; 3],
    axis: Axis,
    quarter_turns: usize,
) -> Result<[Volume<T>; 3]> {
    let (p, q) = axis.others();
    let (p, q) = (p.index(), q.index());
    let mut cur = comps.clone();
    for _ in 0..quarter_turns % 4 {
        let moved: Vec<Volume<T>> = cur
            .iter()
            .map(|c| rotate_volume(c, axis, 1))
            .collect::<Result<_>>()?;
        let mut next = moved.clone();
        next[q] = moved[p].clone();
        next[p] = moved[q].map(|x| -x);
        cur = next.try_into().map_err(|_| Error::Validation("component count".into()))?;
    }
    Ok(cur)
}

/// Component permutation induced by a right-angle rotation, applied to
/// per-component metadata such as VENCs.
pub fn rotate_components_abs<T: Copy>(v: [T; 3], axis: Axis, quarter_turns: usize) -> [T; 3] {
    let (p, q) = axis.others();
    let (p, q) = (p.index(), q.index());
    let mut out = v;
    if quarter_turns % 2 == 1 {
        out[p] = v[q];
        out[q] = v[p];
    }
    out
}

pub fn rotate_patch(pair: &PatchPair, axis: Axis, angle: RightAngle) -> Result<PatchPair> {
    let k = angle.quarter_turns();
    for v in pair.lr_velocity.iter().chain(&pair.hr_velocity) {
        let d = v.dims();
        ensure(d[0] == d[1] && d[1] == d[2], || format!("rotation needs cubic patches, got {d:?}"))?;
    }
    Ok(PatchPair {
        lr_velocity: rotate_vector(&pair.lr_velocity, axis, k)?,
        lr_magnitude: [
            rotate_volume(&pair.lr_magnitude[0], axis, k)?,
            rotate_volume(&pair.lr_magnitude[1], axis, k)?,
            rotate_volume(&pair.lr_magnitude[2], axis, k)?,
        ],
        hr_velocity: rotate_vector(&pair.hr_velocity, axis, k)?,
        venc: rotate_components_abs(pair.venc, axis, k),
        fluid_fraction: pair.fluid_fraction,
    })
}

/// The original patch followed by its nine single-axis rotations.
pub fn rotation_variants(pair: &PatchPair) -> Result<Vec<PatchPair>> {
    let mut out = Vec::with_capacity(10);
    out.push(pair.clone());
    for axis in Axis::ALL {
        for angle in RightAngle::ALL {
            out.push(rotate_patch(pair, axis, angle)?);
        }
    }
    Ok(out)
}

pub fn fluid_fraction(mask: &Volume<bool>, origin: [usize; 3], size: usize) -> f64 {
    let mut n = 0usize;
    for i in origin[0]..origin[0] + size {
        for j in origin[1]..origin[1] + size {
            for k in origin[2]..origin[2] + size {
                n += mask.get(i, j, k) as usize;
            }
        }
    }
    n as f64 / (size * size * size) as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchOrigin {
    /// LR voxel origin; the HR patch starts at twice this.
    pub lr: [usize; 3],
    pub fluid_fraction: f64,
}

impl PatchOrigin {
    pub fn hr(&self) -> [usize; 3] {
        self.lr.map(|o| 2 * o)
    }
}

pub const MAX_ATTEMPTS: usize = 1000;

/// Draw `n` random LR patch origins. All but the last must reach
/// `min_fluid` (rejection sampling, [`MAX_ATTEMPTS`] tries each); the last one
/// is unconstrained. Each entry is the outcome for that patch.
pub fn extract_patches<R: Rng>(
    mask_lr: &FluidMask,
    n: usize,
    min_fluid: f64,
    patch: usize,
    rng: &mut R,
) -> Result<Vec<Result<PatchOrigin>>> {
    let dims = mask_lr.grid.dims;
    ensure(dims.iter().all(|&d| d >= patch), || {
        format!("LR volume {dims:?} is smaller than the {patch}^3 patch")
    })?;
    let draw = |rng: &mut R| {
        let lr = dims.map(|d| rng.random_range(0..=d - patch));
        PatchOrigin {
            lr,
            fluid_fraction: fluid_fraction(&mask_lr.inside, lr, patch),
        }
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        if i + 1 == n {
            out.push(Ok(draw(rng)));
            continue;
        }
        let mut found = None;
        for _ in 0..MAX_ATTEMPTS {
            let o = draw(rng);
            if o.fluid_fraction >= min_fluid {
                found = Some(o);
                break;
            }
        }
        out.push(found.ok_or_else(|| {
            Error::Unsatisfiable(format!(
                "patch {} of {n}: no origin with fluid fraction >= {min_fluid} after {MAX_ATTEMPTS} attempts",
                i + 1
            ))
        }));
    }
    Ok(out)
}

/// Collect origins, turning the first failure into an error naming `frame`.
pub fn require_origins(draws: Vec<Result<PatchOrigin>>, frame: &str) -> Result<Vec<PatchOrigin>> {
    draws
        .into_iter()
        .map(|d| d.map_err(|e| Error::Unsatisfiable(format!("frame {frame}: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(s: usize, seed: f32) -> Volume<f32> {
        Volume::from_fn([s; 3], |i, j, k| seed + (i * 100 + j * 10 + k) as f32)
    }

    fn pair() -> PatchPair {
        let lr = |o| ramp(4, o).map(|x| x / 1000.0);
        let hr = |o| ramp(8, o).map(|x| x / 1000.0);
        PatchPair {
            lr_velocity: [lr(0.1), lr(0.2), lr(0.3)],
            lr_magnitude: [lr(0.0), lr(0.0), lr(0.0)],
            hr_velocity: [hr(0.1), hr(0.2), hr(0.3)],
            venc: [100.0, 150.0, 200.0],
            fluid_fraction: 0.5,
        }
    }

    #[test]
    fn z_rotations_map_components() {
        let p = pair();
        let r90 = rotate_patch(&p, Axis::Z, RightAngle::Deg90).unwrap();
        // (vx, vy, vz) -> (-vy, vx, vz), each sampled at the rotated position.
        let s = 4;
        for i in 0..s {
            for j in 0..s {
                for k in 0..s {
                    // new(i, j, k) = R * old(j, s-1-i, k)
                    let (oi, oj) = (j, s - 1 - i);
                    assert_eq!(r90.lr_velocity[0].get(i, j, k), -p.lr_velocity[1].get(oi, oj, k));
                    assert_eq!(r90.lr_velocity[1].get(i, j, k), p.lr_velocity[0].get(oi, oj, k));
                    assert_eq!(r90.lr_velocity[2].get(i, j, k), p.lr_velocity[2].get(oi, oj, k));
                }
            }
        }
        assert_eq!(r90.venc, [150.0, 100.0, 200.0]);

        let r180 = rotate_patch(&p, Axis::Z, RightAngle::Deg180).unwrap();
        for i in 0..s {
            for j in 0..s {
                for k in 0..s {
                    let (oi, oj) = (s - 1 - i, s - 1 - j);
                    assert_eq!(r180.lr_velocity[0].get(i, j, k), -p.lr_velocity[0].get(oi, oj, k));
                    assert_eq!(r180.lr_velocity[1].get(i, j, k), -p.lr_velocity[1].get(oi, oj, k));
                    assert_eq!(r180.lr_velocity[2].get(i, j, k), p.lr_velocity[2].get(oi, oj, k));
                }
            }
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let p = pair();
        for axis in Axis::ALL {
            let mut r = p.clone();
            for _ in 0..4 {
                r = rotate_patch(&r, axis, RightAngle::Deg90).unwrap();
            }
            assert_eq!(r, p);
            let r = rotate_patch(&rotate_patch(&p, axis, RightAngle::Deg90).unwrap(), axis, RightAngle::Deg270).unwrap();
            assert_eq!(r, p);
        }
    }

    #[test]
    fn rotation_preserves_speed_multiset() {
        let p = pair();
        let speeds = |q: &PatchPair| {
            let mut s: Vec<f64> = (0..q.hr_velocity[0].len())
                .map(|n| {
                    q.hr_velocity
                        .iter()
                        .map(|c| (c.as_slice()[n] as f64).powi(2))
                        .sum::<f64>()
                })
                .collect();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s
        };
        for v in rotation_variants(&p).unwrap() {
            assert_eq!(speeds(&v), speeds(&p));
        }
        assert_eq!(rotation_variants(&p).unwrap().len(), 10);
    }

    #[test]
    fn non_cube_rejected() {
        let mut p = pair();
        p.lr_velocity[0] = Volume::filled([4, 4, 5], 0.0);
        assert!(rotate_patch(&p, Axis::X, RightAngle::Deg90).is_err());
    }

    #[test]
    fn normalisation_rules() {
        let v = |x: f64, s: usize| Volume::filled([s; 3], x);
        let raw = RawPatch {
            lr_velocity: [v(200.0, 2), v(0.0, 2), v(-50.0, 2)],
            lr_magnitude: [v(240.0, 2), v(300.0, 2), v(0.0, 2)],
            hr_velocity: [v(100.0, 4), v(0.0, 4), v(0.0, 4)],
            venc: [100.0, 200.0, 60.0],
            fluid_fraction: 0.4,
        };
        let p = normalize_pair(&raw).unwrap();
        assert_eq!(p.lr_velocity[0].get(0, 0, 0), 1.0);
        assert_eq!(p.lr_velocity[1].get(0, 0, 0), 0.0);
        assert_eq!(p.lr_velocity[2].get(0, 0, 0), -0.25);
        assert!((p.lr_magnitude[0].get(0, 0, 0) - 240.0 / 255.0).abs() < 1e-7);
        assert!((p.lr_magnitude[0].get(0, 0, 0) - 0.941).abs() < 1e-3);
        assert_eq!(p.lr_magnitude[1].get(0, 0, 0), 1.0);
        assert_eq!(p.venc_max(), 200.0);

        let mut bad = raw.clone();
        bad.hr_velocity[0] = v(250.0, 4);
        assert!(normalize_pair(&bad).is_err());
    }

    fn mask_with(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> bool) -> FluidMask {
        let g = Grid3::isotropic(dims, 1.0).unwrap();
        FluidMask::new(g, Volume::from_fn(dims, f)).unwrap()
    }

    #[test]
    fn half_fluid_accepts_every_draw() {
        let m = mask_with([24, 24, 24], |_, _, k| k % 2 == 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let draws = extract_patches(&m, 10, 0.2, 16, &mut rng).unwrap();
        let origins = require_origins(draws, "f0").unwrap();
        assert_eq!(origins.len(), 10);
        assert!(origins.iter().all(|o| (o.fluid_fraction - 0.5).abs() < 1e-12));
        assert!(origins.iter().all(|o| o.lr.iter().all(|&x| x <= 8)));
    }

    #[test]
    fn empty_mask_fails_constrained_patches_only() {
        let m = mask_with([16, 16, 20], |_, _, _| false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws = extract_patches(&m, 10, 0.2, 16, &mut rng).unwrap();
        assert!(draws[..9].iter().all(|d| d.is_err()));
        assert!(draws[9].is_ok());
        let err = require_origins(draws, "aorta03/17").unwrap_err();
        assert!(err.to_string().contains("aorta03/17"));
    }

    #[test]
    fn undersized_volume_rejected() {
        let m = mask_with([15, 16, 16], |_, _, _| true);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(extract_patches(&m, 10, 0.2, 16, &mut rng).is_err());
    }
}
