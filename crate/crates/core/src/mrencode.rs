//! Phase-contrast encoding: velocity components to phase images, a constant
//! fluid magnitude, and the complex MR signal built from the two.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::flowfield::FluidMask;
use crate::kspace::ComplexVolume;
use crate::volume::{check_same_dims, Grid3, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingParams {
    /// Per-component VENC in cm/s.
    pub venc: [f64; 3],
    pub fluid_intensity: f64,
}

impl EncodingParams {
    pub fn validate(&self) -> Result<()> {
        ensure(self.venc.iter().all(|v| v.is_finite() && *v > 0.0), || {
            format!("VENCs must be positive, got {:?}", self.venc)
        })?;
        ensure(
            self.fluid_intensity.is_finite() && self.fluid_intensity > 0.0,
            || format!("fluid intensity {} must be positive", self.fluid_intensity),
        )
    }

    pub fn venc_max(&self) -> f64 {
        self.venc.iter().copied().fold(f64::MIN, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseVolume {
    pub grid: Grid3,
    /// Radians in `[-pi, pi]`.
    pub phase: Volume<f64>,
}

impl PhaseVolume {
    pub fn new(grid: Grid3, phase: Volume<f64>) -> Result<Self> {
        check_same_dims(grid.dims, phase.dims())?;
        ensure(
            phase.as_slice().iter().all(|p| (-PI..=PI).contains(p)),
            || "phase values must lie in [-pi, pi]".into(),
        )?;
        Ok(PhaseVolume { grid, phase })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagnitudeSet {
    pub grid: Grid3,
    pub mx: Volume<f64>,
    pub my: Volume<f64>,
    pub mz: Volume<f64>,
}

impl MagnitudeSet {
    pub fn components(&self) -> [&Volume<f64>; 3] {
        [&self.mx, &self.my, &self.mz]
    }
}

fn check_venc(venc: f64) -> Result<()> {
    ensure(venc.is_finite() && venc > 0.0, || {
        format!("VENC {venc} must be positive")
    })
}

/// `phase = pi * v / venc`. Velocities beyond the VENC are refused instead of
/// wrapped.
pub fn encode_phase(grid: &Grid3, velocity: &Volume<f64>, venc: f64) -> Result<PhaseVolume> {
    check_venc(venc)?;
    check_same_dims(grid.dims, velocity.dims())?;
    if let Some(&v) = velocity.as_slice().iter().find(|v| !(v.abs() <= venc)) {
        return Err(Error::Aliasing { value: v, venc });
    }
    Ok(PhaseVolume {
        grid: *grid,
        phase: velocity.map(|v| (PI * v / venc).clamp(-PI, PI)),
    })
}

pub fn decode_velocity(phase: &PhaseVolume, venc: f64) -> Result<Volume<f64>> {
    check_venc(venc)?;
    Ok(phase.phase.map(|p| venc * p / PI))
}

/// Constant `fluid_intensity` inside the mask, zero elsewhere, for all three
/// encodings.
pub fn synth_magnitude(mask: &FluidMask, fluid_intensity: f64) -> Result<MagnitudeSet> {
    ensure(fluid_intensity.is_finite() && fluid_intensity > 0.0, || {
        format!("fluid intensity {fluid_intensity} must be positive")
    })?;
    if mask.count() == 0 {
        log::warn!("synthesising magnitude for an empty fluid mask; all values are zero");
    }
    let m = mask
        .inside
        .map(|inside| if inside { fluid_intensity } else { 0.0 });
    Ok(MagnitudeSet {
        grid: mask.grid,
        mx: m.clone(),
        my: m.clone(),
        mz: m,
    })
}

pub fn to_complex(phase: &PhaseVolume, magnitude: &Volume<f64>) -> Result<ComplexVolume> {
    check_same_dims(phase.phase.dims(), magnitude.dims())?;
    let data = phase
        .phase
        .as_slice()
        .iter()
        .zip(magnitude.as_slice())
        .map(|(&p, &m)| Complex64::from_polar(m, p))
        .collect();
    ComplexVolume::from_vec(phase.grid, data)
}

/// Modulus and argument of every voxel. Zero-magnitude voxels get phase 0.
pub fn from_complex(vol: &ComplexVolume) -> (PhaseVolume, Volume<f64>) {
    let dims = vol.grid.dims;
    let phase = vol
        .data()
        .iter()
        .map(|c| if c.norm() == 0.0 { 0.0 } else { c.arg() })
        .collect();
    let mag = vol.data().iter().map(|c| c.norm()).collect();
    (
        PhaseVolume {
            grid: vol.grid,
            phase: Volume::from_vec(dims, phase).expect("dims match"),
        },
        Volume::from_vec(dims, mag).expect("dims match"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn g() -> Grid3 {
        Grid3::isotropic([4, 4, 4], 1.0).unwrap()
    }

    fn vol(v: f64) -> Volume<f64> {
        Volume::filled([4, 4, 4], v)
    }

    #[test]
    fn encode_examples() {
        assert_eq!(encode_phase(&g(), &vol(0.0), 100.0).unwrap().phase.get(0, 0, 0), 0.0);
        assert_eq!(encode_phase(&g(), &vol(100.0), 100.0).unwrap().phase.get(0, 0, 0), PI);
        let p = encode_phase(&g(), &vol(-50.0), 100.0).unwrap();
        assert!((p.phase.get(1, 2, 3) + PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn encode_refuses_aliasing() {
        assert!(matches!(
            encode_phase(&g(), &vol(100.5), 100.0),
            Err(Error::Aliasing { .. })
        ));
        assert!(encode_phase(&g(), &vol(1.0), 0.0).is_err());
    }

    #[test]
    fn decode_examples() {
        let p = PhaseVolume::new(g(), vol(PI / 2.0)).unwrap();
        assert!((decode_velocity(&p, 200.0).unwrap().get(0, 0, 0) - 100.0).abs() < 1e-12);
        let p = PhaseVolume::new(g(), vol(0.0)).unwrap();
        assert_eq!(decode_velocity(&p, 200.0).unwrap().get(0, 0, 0), 0.0);
        assert!(PhaseVolume::new(g(), vol(4.0)).is_err());
    }

    #[test]
    fn magnitude_inside_and_outside() {
        let mut inside = Volume::filled([4, 4, 4], false);
        inside.set(1, 1, 1, true);
        let mask = FluidMask::new(g(), inside).unwrap();
        let m = synth_magnitude(&mask, 120.0).unwrap();
        assert_eq!(m.mx.get(1, 1, 1), 120.0);
        assert_eq!(m.mz.get(0, 0, 0), 0.0);
        assert!(synth_magnitude(&mask, 0.0).is_err());

        let empty = FluidMask::new(g(), Volume::filled([4, 4, 4], false)).unwrap();
        let m = synth_magnitude(&empty, 100.0).unwrap();
        assert!(m.components().iter().all(|c| c.max_abs() == 0.0));
    }

    #[test]
    fn complex_examples() {
        let c = to_complex(&PhaseVolume::new(g(), vol(0.0)).unwrap(), &vol(1.0)).unwrap();
        assert_eq!(c.data()[0], Complex64::new(1.0, 0.0));
        let c = to_complex(&PhaseVolume::new(g(), vol(PI / 2.0)).unwrap(), &vol(2.0)).unwrap();
        assert!((c.data()[0] - Complex64::new(0.0, 2.0)).norm() < 1e-15);
        let c = to_complex(&PhaseVolume::new(g(), vol(1.0)).unwrap(), &vol(0.0)).unwrap();
        assert_eq!(c.data()[0], Complex64::new(0.0, 0.0));
        let (p, m) = from_complex(&c);
        assert_eq!(p.phase.get(0, 0, 0), 0.0);
        assert_eq!(m.get(0, 0, 0), 0.0);

        let bad = Volume::filled([4, 4, 5], 1.0);
        assert!(to_complex(&PhaseVolume::new(g(), vol(0.0)).unwrap(), &bad).is_err());
    }

    #[test]
    fn random_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let venc = 150.0;
        let v = Volume::from_fn([8, 8, 8], |_, _, _| rng.random_range(-venc..=venc));
        let grid = Grid3::isotropic([8, 8, 8], 1.0).unwrap();
        let back = decode_velocity(&encode_phase(&grid, &v, venc).unwrap(), venc).unwrap();
        let err = v
            .as_slice()
            .iter()
            .zip(back.as_slice())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6 * venc);
    }

    proptest! {
        #[test]
        fn encoding_is_odd_and_invertible(v in -300.0f64..300.0, venc in 300.0f64..1000.0) {
            let pos = encode_phase(&g(), &vol(v), venc).unwrap().phase.get(0, 0, 0);
            let neg = encode_phase(&g(), &vol(-v), venc).unwrap().phase.get(0, 0, 0);
            prop_assert_eq!(pos, -neg);
            let p = PhaseVolume::new(g(), vol(pos)).unwrap();
            let back = decode_velocity(&p, venc).unwrap().get(0, 0, 0);
            prop_assert!((back - v).abs() <= 1e-6 * venc);
        }

        #[test]
        fn polar_round_trip(m in 1e-3f64..500.0, p in -3.1f64..3.1) {
            let c = to_complex(&PhaseVolume::new(g(), vol(p)).unwrap(), &vol(m)).unwrap();
            let (pp, mm) = from_complex(&c);
            prop_assert!((pp.phase.get(0, 0, 0) - p).abs() < 1e-12);
            prop_assert!((mm.get(0, 0, 0) - m).abs() < 1e-12 * m.max(1.0));
        }
    }
}
