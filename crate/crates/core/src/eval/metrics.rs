//! Voxel metrics: relative speed error, flow rate through a plane,
//! divergence and Bland-Altman agreement.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::flowfield::{FluidMask, VelocityField};
use crate::volume::{Axis, Volume};

/// Denominator guard of the relative speed error.
pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct MetricConfig {
    pub epsilon: f64,
    pub mask: FluidMask,
}

impl MetricConfig {
    pub fn new(mask: FluidMask) -> Self {
        MetricConfig {
            epsilon: DEFAULT_EPSILON,
            mask,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.epsilon.is_finite() && self.epsilon > 0.0, || {
            format!("epsilon must be positive, got {}", self.epsilon)
        })
    }
}

/// Mean over masked voxels of `|pred - truth| / sqrt(|truth|^2 + eps)`, on
/// flat component slices.
pub fn rel_speed_error_slices<T: Copy + Into<f64>>(
    pred: [&[T]; 3],
    truth: [&[T]; 3],
    mask: &[bool],
    epsilon: f64,
) -> Result<f64> {
    let n = mask.len();
    ensure(pred.iter().chain(&truth).all(|c| c.len() == n), || {
        "prediction, truth and mask differ in size".into()
    })?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in (0..n).filter(|&i| mask[i]) {
        let (mut diff, mut speed) = (0.0, 0.0);
        for c in 0..3 {
            let (p, t): (f64, f64) = (pred[c][i].into(), truth[c][i].into());
            diff += (p - t) * (p - t);
            speed += t * t;
        }
        sum += diff.sqrt() / (speed + epsilon).sqrt();
        count += 1;
    }
    ensure(count > 0, || "relative speed error needs a non-empty mask".into())?;
    Ok(sum / count as f64)
}

pub fn rel_speed_error(pred: &VelocityField, truth: &VelocityField, cfg: &MetricConfig) -> Result<f64> {
    cfg.validate()?;
    ensure(pred.grid.dims == truth.grid.dims && cfg.mask.grid.dims == truth.grid.dims, || {
        "prediction, truth and mask differ in shape".into()
    })?;
    fn slices(f: &VelocityField) -> [&[f64]; 3] {
        f.components().map(|c| c.as_slice())
    }
    rel_speed_error_slices(slices(pred), slices(truth), cfg.mask.inside.as_slice(), cfg.epsilon)
}

/// An axis-aligned analysis plane and the region of it that is measured.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub axis: Axis,
    pub index: usize,
    /// Row-major over the two remaining axes in increasing axis order.
    pub region: Vec<bool>,
}

impl PlaneSpec {
    /// The fluid cross-section of `mask` at `index` along `axis`.
    pub fn from_mask(mask: &FluidMask, axis: Axis, index: usize) -> Result<Self> {
        let dims = mask.grid.dims;
        ensure(index < dims[axis.index()], || {
            format!("plane index {index} outside axis of length {}", dims[axis.index()])
        })?;
        let region = plane_voxels(dims, axis, index).map(|p| mask.inside.at(p)).collect();
        Ok(PlaneSpec { axis, index, region })
    }

    fn validate(&self, dims: [usize; 3]) -> Result<()> {
        let a = self.axis.index();
        ensure(self.index < dims[a], || {
            format!("plane index {} outside axis of length {}", self.index, dims[a])
        })?;
        let others: usize = (0..3).filter(|&d| d != a).map(|d| dims[d]).product();
        ensure(self.region.len() == others, || {
            format!("plane region has {} entries, expected {others}", self.region.len())
        })?;
        ensure(self.region.iter().any(|&r| r), || "plane region is empty".into())
    }
}

/// Voxel indices of a plane, in the order used by [`PlaneSpec::region`].
fn plane_voxels(dims: [usize; 3], axis: Axis, index: usize) -> impl Iterator<Item = [usize; 3]> {
    let a = axis.index();
    let (u, v) = match a {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    (0..dims[u]).flat_map(move |i| {
        (0..dims[v]).map(move |j| {
            let mut p = [0; 3];
            p[a] = index;
            p[u] = i;
            p[v] = j;
            p
        })
    })
}

/// Volumetric flow through the plane region in mL/s, from velocities in cm/s
/// and grid spacing in mm.
pub fn flow_rate(field: &VelocityField, plane: &PlaneSpec) -> Result<f64> {
    let dims = field.grid.dims;
    plane.validate(dims)?;
    let a = plane.axis.index();
    let h = field.grid.spacing;
    let area_cm2: f64 = (0..3).filter(|&d| d != a).map(|d| h[d] / 10.0).product();
    let v = field.component(plane.axis);
    let sum: f64 = plane_voxels(dims, plane.axis, plane.index)
        .zip(&plane.region)
        .filter(|(_, &r)| r)
        .map(|(p, _)| v.at(p))
        .sum();
    Ok(sum * area_cm2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRateError {
    /// `pred - truth`, mL/s.
    pub absolute: f64,
    /// `100 * (pred - truth) / truth`.
    pub percent: f64,
}

pub fn flow_rate_error(truth: f64, pred: f64) -> Result<FlowRateError> {
    ensure(truth != 0.0 && truth.is_finite() && pred.is_finite(), || {
        format!("flow rate error undefined for truth {truth}, prediction {pred}")
    })?;
    let absolute = pred - truth;
    Ok(FlowRateError {
        absolute,
        percent: 100.0 * absolute / truth,
    })
}

/// `dvx/dx + dvy/dy + dvz/dz` by central differences over the grid spacing,
/// on masked voxels that are not on the volume boundary; zero elsewhere.
pub fn divergence_field(field: &VelocityField, mask: &FluidMask) -> Result<Volume<f64>> {
    let dims = field.grid.dims;
    ensure(dims.iter().all(|&d| d >= 3), || format!("divergence needs dims >= 3, got {dims:?}"))?;
    ensure(mask.grid.dims == dims, || "mask and field differ in shape".into())?;
    let h = field.grid.spacing;
    let comps = field.components();
    Ok(Volume::from_fn(dims, |i, j, k| {
        let p = [i, j, k];
        let interior = (0..3).all(|a| p[a] > 0 && p[a] + 1 < dims[a]);
        if !interior || !mask.inside.at(p) {
            return 0.0;
        }
        (0..3)
            .map(|a| {
                let (mut lo, mut hi) = (p, p);
                lo[a] -= 1;
                hi[a] += 1;
                (comps[a].at(hi) - comps[a].at(lo)) / (2.0 * h[a])
            })
            .sum()
    }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceStats {
    /// Mean of `|div|` over interior masked voxels.
    pub mean_abs: f64,
    pub max_abs: f64,
}

pub fn divergence_stats(field: &VelocityField, mask: &FluidMask) -> Result<DivergenceStats> {
    let div = divergence_field(field, mask)?;
    let dims = mask.grid.dims;
    let mut sum = 0.0;
    let mut max: f64 = 0.0;
    let mut n = 0usize;
    for i in 1..dims[0] - 1 {
        for j in 1..dims[1] - 1 {
            for k in 1..dims[2] - 1 {
                if mask.inside.get(i, j, k) {
                    let d = div.get(i, j, k).abs();
                    sum += d;
                    max = max.max(d);
                    n += 1;
                }
            }
        }
    }
    ensure(n > 0, || "mask has no interior voxels".into())?;
    Ok(DivergenceStats {
        mean_abs: sum / n as f64,
        max_abs: max,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub bias: f64,
    /// Sample standard deviation of the differences.
    pub sd: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Agreement of paired samples: differences `pred - truth`, limits
/// `bias +- 1.96 sd`.
pub fn bland_altman(pred: &[f64], truth: &[f64]) -> Result<BlandAltman> {
    ensure(pred.len() == truth.len(), || "Bland-Altman samples are not paired".into())?;
    let n = pred.len();
    ensure(n >= 2, || format!("Bland-Altman needs at least 2 pairs, got {n}"))?;
    let d: Vec<f64> = pred.iter().zip(truth).map(|(p, t)| p - t).collect();
    let bias = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - bias).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    Ok(BlandAltman {
        bias,
        sd,
        lo: bias - 1.96 * sd,
        hi: bias + 1.96 * sd,
    })
}

/// Up to `n` distinct masked voxel indices, drawn without replacement.
pub fn sample_mask(mask: &FluidMask, n: usize, seed: u64) -> Vec<usize> {
    let inside: Vec<usize> = (0..mask.inside.len()).filter(|&i| mask.inside.as_slice()[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, inside.len(), n.min(inside.len()))
        .into_iter()
        .map(|i| inside[i])
        .collect();
    picked.sort_unstable();
    picked
}

/// Per-component Bland-Altman statistics over the sampled voxels.
pub fn bland_altman_components(pred: &VelocityField, truth: &VelocityField, voxels: &[usize]) -> Result<[BlandAltman; 3]> {
    ensure(pred.grid.dims == truth.grid.dims, || "prediction and truth differ in shape".into())?;
    let (p, t) = (pred.components(), truth.components());
    let stat = |c: usize| {
        let ps: Vec<f64> = voxels.iter().map(|&i| p[c].as_slice()[i]).collect();
        let ts: Vec<f64> = voxels.iter().map(|&i| t[c].as_slice()[i]).collect();
        bland_altman(&ps, &ts)
    };
    Ok([stat(0)?, stat(1)?, stat(2)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowfield::{generate_field, FlowSpec};
    use crate::volume::Grid3;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn field_from(grid: Grid3, f: impl Fn([f64; 3]) -> [f64; 3]) -> VelocityField {
        let comp = |c: usize| {
            Volume::from_fn(grid.dims, |i, j, k| f([i as f64 * grid.spacing[0], j as f64 * grid.spacing[1], k as f64 * grid.spacing[2]])[c])
        };
        VelocityField::new(grid, comp(0), comp(1), comp(2)).unwrap()
    }

    fn random_field(grid: Grid3, rng: &mut ChaCha8Rng) -> VelocityField {
        let mut comp = || Volume::from_fn(grid.dims, |_, _, _| rng.random_range(-50.0..50.0));
        VelocityField::new(grid, comp(), comp(), comp()).unwrap()
    }

    #[test]
    fn rel_speed_error_trivial_cases() {
        let grid = Grid3::isotropic([5, 6, 4], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let truth = random_field(grid, &mut rng);
        let cfg = MetricConfig::new(FluidMask::full(grid));
        assert_eq!(rel_speed_error(&truth, &truth, &cfg).unwrap(), 0.0);
        let fast = field_from(grid, |_| [300.0, -400.0, 0.0]);
        let zero = VelocityField::zeros(grid);
        assert_relative_eq!(rel_speed_error(&zero, &fast, &cfg).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn rel_speed_error_matches_naive_loop() {
        let grid = Grid3::isotropic([6, 5, 7], 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (p, t) = (random_field(grid, &mut rng), random_field(grid, &mut rng));
        let inside = Volume::from_fn(grid.dims, |i, j, k| (i + 2 * j + k) % 3 != 0);
        let cfg = MetricConfig::new(FluidMask::new(grid, inside.clone()).unwrap());
        let (mut sum, mut n) = (0.0, 0.0);
        for i in 0..6 {
            for j in 0..5 {
                for k in 0..7 {
                    if inside.get(i, j, k) {
                        let d: f64 = (0..3).map(|c| (p.components()[c].get(i, j, k) - t.components()[c].get(i, j, k)).powi(2)).sum();
                        let s: f64 = (0..3).map(|c| t.components()[c].get(i, j, k).powi(2)).sum();
                        sum += d.sqrt() / (s + 1e-5).sqrt();
                        n += 1.0;
                    }
                }
            }
        }
        assert_relative_eq!(rel_speed_error(&p, &t, &cfg).unwrap(), sum / n, epsilon = 1e-10);
    }

    #[test]
    fn rel_speed_error_scale_invariance_up_to_epsilon() {
        let grid = Grid3::isotropic([4, 4, 4], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, t) = (random_field(grid, &mut rng).scaled(10.0), random_field(grid, &mut rng).scaled(10.0));
        let mut cfg = MetricConfig::new(FluidMask::full(grid));
        cfg.epsilon = 1e-12;
        let a = rel_speed_error(&p, &t, &cfg).unwrap();
        let b = rel_speed_error(&p.scaled(7.0), &t.scaled(7.0), &cfg).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-12);
        cfg.epsilon = 1e-5;
        let c = rel_speed_error(&p, &t, &cfg).unwrap();
        assert_relative_eq!(a, c, max_relative = 1e-6);
    }

    #[test]
    fn empty_mask_is_rejected() {
        let grid = Grid3::isotropic([4, 4, 4], 1.0).unwrap();
        let f = VelocityField::zeros(grid);
        let mask = FluidMask::new(grid, Volume::filled(grid.dims, false)).unwrap();
        assert!(rel_speed_error(&f, &f, &MetricConfig::new(mask)).is_err());
    }

    #[test]
    fn uniform_flow_rate() {
        // Ten faces of 1 cm^2 each.
        let grid = Grid3::isotropic([4, 4, 5], 10.0).unwrap();
        let f = field_from(grid, |_| [100.0, 3.0, -2.0]);
        let plane = PlaneSpec {
            axis: Axis::X,
            index: 2,
            region: (0..20).map(|i| i < 10).collect(),
        };
        assert_relative_eq!(flow_rate(&f, &plane).unwrap(), 1000.0, epsilon = 1e-9);
        assert_relative_eq!(flow_rate(&f.scaled(-2.0), &plane).unwrap(), -2000.0, epsilon = 1e-9);
    }

    #[test]
    fn poiseuille_flow_rate() {
        let grid = Grid3::isotropic([8, 64, 64], 0.5).unwrap();
        let (r, vmax) = (12.0, 80.0);
        let (f, mask) = generate_field(&FlowSpec::poiseuille(Axis::X, r, vmax), &grid).unwrap();
        let plane = PlaneSpec::from_mask(&mask, Axis::X, 4).unwrap();
        let exact = std::f64::consts::PI * (r / 10.0).powi(2) * vmax / 2.0;
        let q = flow_rate(&f, &plane).unwrap();
        assert!((q - exact).abs() / exact < 0.02, "{q} vs {exact}");
    }

    #[test]
    fn table_three_rows() {
        for (truth, pred, abs, pct) in [
            (111.6, 110.9, "-0.7", "-0.6"),
            (135.2, 139.7, "4.5", "3.3"),
            (126.8, 134.1, "7.3", "5.8"),
        ] {
            let e = flow_rate_error(truth, pred).unwrap();
            assert_eq!(format!("{:.1}", e.absolute), abs);
            assert_eq!(format!("{:.1}", e.percent), pct);
        }
        assert!(flow_rate_error(0.0, 1.0).is_err());
    }

    #[test]
    fn plane_errors() {
        let grid = Grid3::isotropic([4, 4, 4], 1.0).unwrap();
        let f = VelocityField::zeros(grid);
        let empty = PlaneSpec {
            axis: Axis::Y,
            index: 1,
            region: vec![false; 16],
        };
        assert!(flow_rate(&f, &empty).is_err());
        assert!(PlaneSpec::from_mask(&FluidMask::full(grid), Axis::Z, 4).is_err());
    }

    #[test]
    fn divergence_of_linear_and_solenoidal_fields() {
        let grid = Grid3::new([6, 7, 5], [0.5, 1.0, 2.0]).unwrap();
        let mask = FluidMask::full(grid);
        let d = divergence_field(&field_from(grid, |p| p), &mask).unwrap();
        assert_relative_eq!(d.get(2, 3, 2), 3.0, epsilon = 1e-12);
        assert_eq!(d.get(0, 3, 2), 0.0);
        let s = divergence_field(&field_from(grid, |[x, y, z]| [y, z, x]), &mask).unwrap();
        assert!(s.as_slice().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn poiseuille_divergence_is_small() {
        let grid = Grid3::isotropic([12, 32, 32], 0.5).unwrap();
        let (f, mask) = generate_field(&FlowSpec::poiseuille(Axis::X, 6.0, 100.0), &grid).unwrap();
        let stats = divergence_stats(&f, &mask).unwrap();
        assert!(stats.max_abs < 1e-9, "{stats:?}");
    }

    #[test]
    fn bland_altman_examples() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(
            bland_altman(&a, &a).unwrap(),
            BlandAltman {
                bias: 0.0,
                sd: 0.0,
                lo: 0.0,
                hi: 0.0
            }
        );
        let b = bland_altman(&[1.0, -1.0, 1.0, -1.0], &[0.0; 4]).unwrap();
        assert_relative_eq!(b.bias, 0.0);
        assert_relative_eq!(b.sd, 1.1547, epsilon = 1e-4);
        assert_relative_eq!(b.hi, 2.2632, epsilon = 1e-4);
        assert_relative_eq!(b.lo, -2.2632, epsilon = 1e-4);
        assert!(bland_altman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn mask_sampling_is_seeded_and_inside() {
        let grid = Grid3::isotropic([8, 8, 8], 1.0).unwrap();
        let inside = Volume::from_fn(grid.dims, |i, _, _| i < 3);
        let mask = FluidMask::new(grid, inside).unwrap();
        let a = sample_mask(&mask, 50, 9);
        assert_eq!(a, sample_mask(&mask, 50, 9));
        assert_eq!(a.len(), 50);
        assert!(a.iter().all(|&i| mask.inside.as_slice()[i]));
        assert_eq!(sample_mask(&mask, 10_000, 9).len(), 192);
    }

    proptest::proptest! {
        #[test]
        fn limits_bracket_bias(d in proptest::collection::vec(-100.0f64..100.0, 2..40)) {
            let zeros = vec![0.0; d.len()];
            let b = bland_altman(&d, &zeros).unwrap();
            proptest::prop_assert!(b.lo <= b.bias && b.bias <= b.hi);
        }

        #[test]
        fn flow_rate_is_linear(a in -10.0f64..10.0, b in -10.0f64..10.0) {
            let grid = Grid3::isotropic([4, 5, 6], 1.5).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let (f, g) = (random_field(grid, &mut rng), random_field(grid, &mut rng));
            let plane = PlaneSpec::from_mask(&FluidMask::full(grid), Axis::Z, 3).unwrap();
            let comb = VelocityField::from_components(grid, [0, 1, 2].map(|c| {
                f.components()[c].zip_map(g.components()[c], |x, y| a * x + b * y).unwrap()
            })).unwrap();
            let lhs = flow_rate(&comb, &plane).unwrap();
            let rhs = a * flow_rate(&f, &plane).unwrap() + b * flow_rate(&g, &plane).unwrap();
            proptest::prop_assert!((lhs - rhs).abs() < 1e-8 * (1.0 + rhs.abs()));
        }
    }
}
