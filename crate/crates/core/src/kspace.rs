//! k-space resampling: centred truncation with calibrated complex Gaussian
//! noise (downsampling by 2) and zero-padding (sinc upsampling by 2).
//!
//! Transforms are unnormalised forward and `1/N` inverse. Truncation keeps the
//! signed frequencies `-n/2 ..= n/2 - 1` of the low-resolution size `n` on
//! every axis and scales them by `N_lr / N_hr = 1/8`, so a constant image stays
//! the same constant. Zero padding applies the inverse scaling.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::flowfield::VelocityField;
use crate::volume::{check_same_dims, Grid3, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexVolume {
    pub grid: Grid3,
    data: Vec<Complex64>,
}

impl ComplexVolume {
    pub fn from_vec(grid: Grid3, data: Vec<Complex64>) -> Result<Self> {
        ensure(data.len() == grid.len(), || {
            format!("complex volume {:?} needs {} values, got {}", grid.dims, grid.len(), data.len())
        })?;
        ensure(data.iter().all(|c| c.re.is_finite() && c.im.is_finite()), || {
            "complex volume contains non-finite values".into()
        })?;
        Ok(ComplexVolume { grid, data })
    }

    pub fn zeros(grid: Grid3) -> Self {
        ComplexVolume {
            grid,
            data: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn from_real(grid: Grid3, re: &Volume<f64>) -> Result<Self> {
        check_same_dims(grid.dims, re.dims())?;
        Self::from_vec(grid, re.as_slice().iter().map(|&r| Complex64::new(r, 0.0)).collect())
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn re(&self) -> Volume<f64> {
        Volume::from_vec(self.grid.dims, self.data.iter().map(|c| c.re).collect()).expect("dims")
    }

    pub fn im(&self) -> Volume<f64> {
        Volume::from_vec(self.grid.dims, self.data.iter().map(|c| c.im).collect()).expect("dims")
    }

    /// Mean squared modulus.
    pub fn power(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum::<f64>() / self.data.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Target SNR in dB; `+inf` disables the noise.
    pub target_snr_db: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn noiseless() -> Self {
        NoiseSpec {
            target_snr_db: f64::INFINITY,
            seed: 0,
        }
    }
}

fn transform_axis(data: &mut [Complex64], dims: [usize; 3], axis: usize, inverse: bool, planner: &mut FftPlanner<f64>) {
    let n = dims[axis];
    let fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    let stride = match axis {
        0 => dims[1] * dims[2],
        1 => dims[2],
        _ => 1,
    };
    if axis == 2 {
        fft.process(data);
        return;
    }
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    let (outer, inner) = match axis {
        0 => (1, dims[1] * dims[2]),
        _ => (dims[0], dims[2]),
    };
    let block = n * stride;
    for o in 0..outer {
        for i in 0..inner {
            let base = o * block + i;
            for (t, l) in line.iter_mut().enumerate() {
                *l = data[base + t * stride];
            }
            fft.process(&mut line);
            for (t, l) in line.iter().enumerate() {
                data[base + t * stride] = *l;
            }
        }
    }
}

/// Unnormalised forward 3D DFT.
pub fn fft3(vol: &ComplexVolume) -> ComplexVolume {
    let mut out = vol.clone();
    let mut planner = FftPlanner::new();
    for axis in [2, 1, 0] {
        transform_axis(&mut out.data, vol.grid.dims, axis, false, &mut planner);
    }
    out
}

/// Inverse 3D DFT scaled by `1/N`.
pub fn ifft3(vol: &ComplexVolume) -> ComplexVolume {
    let mut out = vol.clone();
    let mut planner = FftPlanner::new();
    for axis in [2, 1, 0] {
        transform_axis(&mut out.data, vol.grid.dims, axis, true, &mut planner);
    }
    let scale = 1.0 / vol.grid.len() as f64;
    out.data.iter_mut().for_each(|c| *c *= scale);
    out
}

/// Noise standard deviation whose variance (total complex noise power) gives
/// the requested SNR against signal power `px`.
pub fn noise_sigma(px: f64, target_snr_db: f64) -> Result<f64> {
    ensure(px.is_finite() && px > 0.0, || format!("signal power {px} must be positive"))?;
    ensure(!target_snr_db.is_nan(), || "target SNR is NaN".into())?;
    Ok((px / 10f64.powf(target_snr_db / 10.0)).sqrt())
}

/// `10 log10(P_signal / P_residual)`, `+inf` when the residual vanishes.
pub fn measure_snr_db(signal_ks: &ComplexVolume, noisy_ks: &ComplexVolume) -> Result<f64> {
    check_same_dims(signal_ks.grid.dims, noisy_ks.grid.dims)?;
    let n = signal_ks.data.len() as f64;
    let p_signal = signal_ks.power();
    let p_res = signal_ks
        .data
        .iter()
        .zip(&noisy_ks.data)
        .map(|(s, y)| (y - s).norm_sqr())
        .sum::<f64>()
        / n;
    if p_res == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (p_signal / p_res).log10())
}

#[inline]
fn signed_freq(idx: usize, n: usize) -> isize {
    if idx < n / 2 {
        idx as isize
    } else {
        idx as isize - n as isize
    }
}

#[inline]
fn wrap(f: isize, n: usize) -> usize {
    f.rem_euclid(n as isize) as usize
}

/// Keep the centred low-frequency block of half size on every axis, scaled by
/// 1/8. Input and output are both k-space.
pub fn truncate_kspace(hr_ks: &ComplexVolume) -> Result<ComplexVolume> {
    let hr = hr_ks.grid.dims;
    let lr_grid = hr_ks.grid.halved()?;
    let lr = lr_grid.dims;
    let scale = lr_grid.len() as f64 / hr_ks.grid.len() as f64;
    let mut out = ComplexVolume::zeros(lr_grid);
    for i in 0..lr[0] {
        let hi = wrap(signed_freq(i, lr[0]), hr[0]);
        for j in 0..lr[1] {
            let hj = wrap(signed_freq(j, lr[1]), hr[1]);
            for k in 0..lr[2] {
                let hk = wrap(signed_freq(k, lr[2]), hr[2]);
                out.data[(i * lr[1] + j) * lr[2] + k] = hr_ks.data[(hi * hr[1] + hj) * hr[2] + hk] * scale;
            }
        }
    }
    Ok(out)
}

/// Embed a k-space block in the centre of a doubled-size zero k-space, scaled
/// by 8.
pub fn zero_pad_kspace(lr_ks: &ComplexVolume) -> ComplexVolume {
    let lr = lr_ks.grid.dims;
    let hr_grid = lr_ks.grid.doubled();
    let hr = hr_grid.dims;
    let scale = hr_grid.len() as f64 / lr_ks.grid.len() as f64;
    let mut out = ComplexVolume::zeros(hr_grid);
    for i in 0..lr[0] {
        let hi = wrap(signed_freq(i, lr[0]), hr[0]);
        for j in 0..lr[1] {
            let hj = wrap(signed_freq(j, lr[1]), hr[1]);
            for k in 0..lr[2] {
                let hk = wrap(signed_freq(k, lr[2]), hr[2]);
                out.data[(hi * hr[1] + hj) * hr[2] + hk] = lr_ks.data[(i * lr[1] + j) * lr[2] + k] * scale;
            }
        }
    }
    out
}

/// Add zero-mean complex Gaussian noise of total variance `sigma^2`
/// (`sigma^2 / 2` on each of the real and imaginary parts). Draws follow the
/// linear voxel order, real part first.
pub fn add_kspace_noise(ks: &mut ComplexVolume, sigma: f64, seed: u64) -> Result<()> {
    ensure(sigma.is_finite() && sigma >= 0.0, || format!("noise sigma {sigma} invalid"))?;
    if sigma == 0.0 {
        return Ok(());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma / std::f64::consts::SQRT_2)
        .map_err(|e| Error::Validation(e.to_string()))?;
    for c in ks.data.iter_mut() {
        let re = normal.sample(&mut rng);
        let im = normal.sample(&mut rng);
        *c += Complex64::new(re, im);
    }
    Ok(())
}

/// Low-resolution k-space before and after noise, plus the noise sigma used.
#[derive(Clone, Debug)]
pub struct DownsampledKspace {
    pub clean: ComplexVolume,
    pub noisy: ComplexVolume,
    pub sigma: f64,
}

/// Truncate the k-space of `hr` and add noise calibrated against the power
/// of the truncated k-space.
pub fn downsample_kspace(hr: &ComplexVolume, noise: &NoiseSpec) -> Result<DownsampledKspace> {
    ensure(hr.grid.dims.iter().all(|d| d % 2 == 0), || {
        format!("downsampling needs even dims, got {:?}", hr.grid.dims)
    })?;
    let clean = truncate_kspace(&fft3(hr))?;
    let sigma = if noise.target_snr_db == f64::INFINITY {
        0.0
    } else {
        noise_sigma(clean.power(), noise.target_snr_db)?
    };
    let mut noisy = clean.clone();
    add_kspace_noise(&mut noisy, sigma, noise.seed)?;
    Ok(DownsampledKspace { clean, noisy, sigma })
}

/// Downsample by 2 in k-space and return the noisy low-resolution image.
pub fn downsample_with_noise(hr: &ComplexVolume, noise: &NoiseSpec) -> Result<ComplexVolume> {
    Ok(ifft3(&downsample_kspace(hr, noise)?.noisy))
}

/// Like [`downsample_with_noise`] but with an explicit noise sigma, for
/// calibrating against a signal power measured elsewhere.
pub fn downsample_with_sigma(hr: &ComplexVolume, sigma: f64, seed: u64) -> Result<ComplexVolume> {
    ensure(hr.grid.dims.iter().all(|d| d % 2 == 0), || {
        format!("downsampling needs even dims, got {:?}", hr.grid.dims)
    })?;
    let mut ks = truncate_kspace(&fft3(hr))?;
    add_kspace_noise(&mut ks, sigma, seed)?;
    Ok(ifft3(&ks))
}

/// Sinc interpolation by 2: zero-pad the centred k-space.
pub fn sinc_upsample(lr: &ComplexVolume) -> ComplexVolume {
    ifft3(&zero_pad_kspace(&fft3(lr)))
}

/// Sinc interpolation of each velocity component, keeping the real part.
pub fn sinc_upsample_field(field: &VelocityField) -> Result<VelocityField> {
    let grid = field.grid.doubled();
    let comps = field
        .components()
        .map(|c| ComplexVolume::from_real(field.grid, c).map(|cv| sinc_upsample(&cv).re()));
    let [a, b, c] = comps;
    VelocityField::from_components(grid, [a?, b?, c?])
}
