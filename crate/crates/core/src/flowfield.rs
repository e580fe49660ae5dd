//! Closed-form, divergence-free tube flows used as high-resolution ground truth.
//!
//! Three families are provided, all with the tube axis through the grid centre:
//!
//! * `poiseuille_tube`: parabolic axial profile `v(r) = peak * (1 - r^2/R^2)`.
//! * `helical_tube`: the Poiseuille profile plus a rigid-body swirl whose
//!   tangential speed is `swirl_ratio * peak * r / R`.
//! * `stenosed_tube`: a cosine-tapered narrowing of the radius around the
//!   axial midpoint. The axial speed scales with `(R0/R)^2` so the flow rate is
//!   the same through every cross-section, and the matching radial velocity
//!   (from the Stokes stream function) keeps the continuous field solenoidal.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::volume::{check_same_dims, Axis, Grid3, Volume};

#[derive(Clone, Debug, PartialEq)]
pub struct VelocityField {
    pub grid: Grid3,
    /// Velocity components in cm/s.
    pub vx: Volume<f64>,
    pub vy: Volume<f64>,
    pub vz: Volume<f64>,
}

impl VelocityField {
    pub fn new(grid: Grid3, vx: Volume<f64>, vy: Volume<f64>, vz: Volume<f64>) -> Result<Self> {
        for v in [&vx, &vy, &vz] {
            check_same_dims(grid.dims, v.dims())?;
            ensure(v.as_slice().iter().all(|x| x.is_finite()), || {
                "velocity field contains non-finite values".to_string()
            })?;
        }
        Ok(VelocityField { grid, vx, vy, vz })
    }

    pub fn zeros(grid: Grid3) -> Self {
        let z = Volume::filled(grid.dims, 0.0);
        VelocityField {
            grid,
            vx: z.clone(),
            vy: z.clone(),
            vz: z,
        }
    }

    pub fn components(&self) -> [&Volume<f64>; 3] {
        [&self.vx, &self.vy, &self.vz]
    }

    pub fn components_mut(&mut self) -> [&mut Volume<f64>; 3] {
        [&mut self.vx, &mut self.vy, &mut self.vz]
    }

    pub fn component(&self, axis: Axis) -> &Volume<f64> {
        self.components()[axis.index()]
    }

    pub fn from_components(grid: Grid3, [vx, vy, vz]: [Volume<f64>; 3]) -> Result<Self> {
        Self::new(grid, vx, vy, vz)
    }

    /// Largest absolute value of each component.
    pub fn max_abs_components(&self) -> [f64; 3] {
        self.components().map(|c| c.max_abs())
    }

    pub fn speed(&self) -> Volume<f64> {
        Volume::from_fn(self.grid.dims, |i, j, k| {
            let (a, b, c) = (self.vx.get(i, j, k), self.vy.get(i, j, k), self.vz.get(i, j, k));
            (a * a + b * b + c * c).sqrt()
        })
    }

    pub fn scaled(&self, s: f64) -> Self {
        VelocityField {
            grid: self.grid,
            vx: self.vx.map(|v| v * s),
            vy: self.vy.map(|v| v * s),
            vz: self.vz.map(|v| v * s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FluidMask {
    pub grid: Grid3,
    pub inside: Volume<bool>,
}

impl FluidMask {
    pub fn new(grid: Grid3, inside: Volume<bool>) -> Result<Self> {
        check_same_dims(grid.dims, inside.dims())?;
        Ok(FluidMask { grid, inside })
    }

    pub fn full(grid: Grid3) -> Self {
        FluidMask {
            grid,
            inside: Volume::filled(grid.dims, true),
        }
    }

    pub fn count(&self) -> usize {
        self.inside.as_slice().iter().filter(|&&b| b).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.inside.len() as f64
    }

    /// Low-resolution mask: an LR voxel is fluid when at least half of the
    /// 2x2x2 HR voxels it covers are fluid.
    pub fn downsample2(&self) -> Result<FluidMask> {
        let grid = self.grid.halved()?;
        let inside = Volume::from_fn(grid.dims, |i, j, k| {
            let mut n = 0;
            for di in 0..2 {
                for dj in 0..2 {
                    for dk in 0..2 {
                        n += self.inside.get(2 * i + di, 2 * j + dj, 2 * k + dk) as usize;
                    }
                }
            }
            n >= 4
        });
        Ok(FluidMask { grid, inside })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    PoiseuilleTube,
    HelicalTube,
    StenosedTube,
}

/// Piecewise-linear temporal scaling curve of `(time_s, scale)` knots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Waveform(pub Vec<(f64, f64)>);

impl Default for Waveform {
    /// Two-lobe systole/diastole-like curve over one 0.71 s cycle. The shape is
    /// a fixed stand-in, not a measured inlet waveform.
    fn default() -> Self {
        Waveform(vec![
            (0.00, 0.10),
            (0.08, 0.55),
            (0.16, 1.00),
            (0.28, 0.35),
            (0.36, 0.50),
            (0.48, 0.20),
            (0.71, 0.10),
        ])
    }
}

impl Waveform {
    pub fn constant(scale: f64) -> Self {
        Waveform(vec![(0.0, scale), (1.0, scale)])
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.0.is_empty(), || "waveform has no knots".into())?;
        for &(t, s) in &self.0 {
            ensure(t.is_finite() && s.is_finite(), || {
                "waveform contains non-finite values".into()
            })?;
            ensure(s >= 0.0, || format!("waveform scale {s} is negative"))?;
        }
        ensure(self.0.windows(2).all(|w| w[1].0 > w[0].0), || {
            "waveform times must be strictly increasing".into()
        })
    }

    pub fn span(&self) -> (f64, f64) {
        (self.0[0].0, self.0[self.0.len() - 1].0)
    }

    pub fn value_at(&self, t: f64) -> Result<f64> {
        let (t0, t1) = self.span();
        if !(t >= t0 && t <= t1) {
            return Err(Error::Range(format!(
                "time {t} s outside waveform span [{t0}, {t1}]"
            )));
        }
        let knots = &self.0;
        if knots.len() == 1 {
            return Ok(knots[0].1);
        }
        let seg = knots
            .windows(2)
            .position(|w| t <= w[1].0)
            .unwrap_or(knots.len() - 2);
        let (ta, sa) = knots[seg];
        let (tb, sb) = knots[seg + 1];
        let u = (t - ta) / (tb - ta);
        Ok(sa + u * (sb - sa))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub kind: FlowKind,
    pub axis: Axis,
    pub radius_mm: f64,
    pub peak_speed_cm_s: f64,
    #[serde(default)]
    pub swirl_ratio: f64,
    #[serde(default = "default_stenosis")]
    pub stenosis_factor: f64,
    #[serde(default)]
    pub waveform: Waveform,
}

fn default_stenosis() -> f64 {
    1.0
}

impl FlowSpec {
    pub fn poiseuille(axis: Axis, radius_mm: f64, peak_speed_cm_s: f64) -> Self {
        FlowSpec {
            kind: FlowKind::PoiseuilleTube,
            axis,
            radius_mm,
            peak_speed_cm_s,
            swirl_ratio: 0.0,
            stenosis_factor: 1.0,
            waveform: Waveform::default(),
        }
    }

    pub fn helical(axis: Axis, radius_mm: f64, peak_speed_cm_s: f64, swirl_ratio: f64) -> Self {
        FlowSpec {
            kind: FlowKind::HelicalTube,
            swirl_ratio,
            ..Self::poiseuille(axis, radius_mm, peak_speed_cm_s)
        }
    }

    pub fn stenosed(axis: Axis, radius_mm: f64, peak_speed_cm_s: f64, stenosis_factor: f64) -> Self {
        FlowSpec {
            kind: FlowKind::StenosedTube,
            stenosis_factor,
            ..Self::poiseuille(axis, radius_mm, peak_speed_cm_s)
        }
    }

    pub fn with_waveform(mut self, waveform: Waveform) -> Self {
        self.waveform = waveform;
        self
    }

    pub fn validate(&self, grid: &Grid3) -> Result<()> {
        grid.validate()?;
        let finite = [
            self.radius_mm,
            self.peak_speed_cm_s,
            self.swirl_ratio,
            self.stenosis_factor,
        ]
        .iter()
        .all(|v| v.is_finite());
        ensure(finite, || "flow spec contains non-finite values".into())?;
        ensure(self.radius_mm > 0.0, || {
            format!("radius {} mm must be positive", self.radius_mm)
        })?;
        ensure(self.peak_speed_cm_s > 0.0, || {
            format!("peak speed {} must be positive", self.peak_speed_cm_s)
        })?;
        if self.kind == FlowKind::StenosedTube {
            ensure(
                self.stenosis_factor > 0.0 && self.stenosis_factor <= 1.0,
                || format!("stenosis factor {} not in (0, 1]", self.stenosis_factor),
            )?;
        }
        self.waveform.validate()?;

        let (p, q) = self.axis.others();
        let fit = [p, q]
            .iter()
            .map(|a| (grid.dims[a.index()] as f64 - 1.0) * grid.spacing[a.index()] / 2.0)
            .fold(f64::INFINITY, f64::min);
        if self.radius_mm > fit {
            return Err(Error::Config(format!(
                "tube radius {} mm does not fit in the grid (max {fit:.3} mm)",
                self.radius_mm
            )));
        }
        Ok(())
    }

    /// Local tube radius and its axial derivative at axial coordinate `s` (mm,
    /// relative to the grid centre).
    fn radius_profile(&self, s: f64, half_taper: f64) -> (f64, f64) {
        let r0 = self.radius_mm;
        if self.kind != FlowKind::StenosedTube || s.abs() >= half_taper {
            return (r0, 0.0);
        }
        let depth = r0 * (1.0 - self.stenosis_factor);
        let phase = std::f64::consts::PI * s / half_taper;
        let r = r0 - depth * (1.0 + phase.cos()) / 2.0;
        let dr = depth * std::f64::consts::PI / (2.0 * half_taper) * phase.sin();
        (r, dr)
    }
}

/// Evaluate the steady (scale 1) flow described by `spec` on `grid`.
pub fn generate_field(spec: &FlowSpec, grid: &Grid3) -> Result<(VelocityField, FluidMask)> {
    spec.validate(grid)?;
    let a = spec.axis.index();
    let (p, q) = spec.axis.others();
    let (p, q) = (p.index(), q.index());
    // The taper spans the middle half of the tube length.
    let half_taper = grid.dims[a] as f64 * grid.spacing[a] / 4.0;
    let r0 = spec.radius_mm;
    let peak = spec.peak_speed_cm_s;

    let mut comps = [
        Volume::filled(grid.dims, 0.0),
        Volume::filled(grid.dims, 0.0),
        Volume::filled(grid.dims, 0.0),
    ];
    let mut inside = Volume::filled(grid.dims, false);

    for i in 0..grid.dims[0] {
        for j in 0..grid.dims[1] {
            for k in 0..grid.dims[2] {
                let idx = [i, j, k];
                let s = grid.centered_coord(a, idx[a]);
                let u = grid.centered_coord(p, idx[p]);
                let w = grid.centered_coord(q, idx[q]);
                let r2 = u * u + w * w;
                let (radius, dradius) = spec.radius_profile(s, half_taper);
                if r2 > radius * radius {
                    continue;
                }
                inside.set(i, j, k, true);
                let shape = 1.0 - r2 / (radius * radius);
                let mut vel = [0.0; 3];
                match spec.kind {
                    FlowKind::PoiseuilleTube => {
                        vel[a] = peak * shape;
                    }
                    FlowKind::HelicalTube => {
                        vel[a] = peak * shape;
                        let omega = spec.swirl_ratio * peak / r0;
                        vel[p] = -omega * w;
                        vel[q] = omega * u;
                    }
                    FlowKind::StenosedTube => {
                        let axial = peak * (r0 / radius).powi(2) * shape;
                        vel[a] = axial;
                        // u_r = axial * r * R'/R, split onto the cross-section axes.
                        let radial = axial * dradius / radius;
                        vel[p] = radial * u;
                        vel[q] = radial * w;
                    }
                }
                for c in 0..3 {
                    comps[c].set(i, j, k, vel[c]);
                }
            }
        }
    }
    let field = VelocityField::from_components(*grid, comps)?;
    let mask = FluidMask::new(*grid, inside)?;
    Ok((field, mask))
}

/// Scale every component by the waveform value at time `t`.
pub fn modulate_temporal(field: &VelocityField, waveform: &Waveform, t: f64) -> Result<VelocityField> {
    waveform.validate()?;
    let s = waveform.value_at(t)?;
    Ok(field.scaled(s))
}

/// `n_frames` uniformly spaced sample times covering the waveform span.
pub fn frame_times(waveform: &Waveform, n_frames: usize) -> Result<Vec<f64>> {
    if n_frames < 1 {
        return Err(Error::Validation("n_frames must be >= 1".into()));
    }
    waveform.validate()?;
    let (t0, t1) = waveform.span();
    if n_frames == 1 {
        return Ok(vec![t0]);
    }
    let dt = (t1 - t0) / (n_frames - 1) as f64;
    Ok((0..n_frames)
        .map(|i| if i == n_frames - 1 { t1 } else { t0 + i as f64 * dt })
        .collect())
}

pub fn sample_frames(
    spec: &FlowSpec,
    grid: &Grid3,
    n_frames: usize,
) -> Result<Vec<(VelocityField, FluidMask)>> {
    let times = frame_times(&spec.waveform, n_frames)?;
    let (base, mask) = generate_field(spec, grid)?;
    times
        .into_iter()
        .map(|t| Ok((modulate_temporal(&base, &spec.waveform, t)?, mask.clone())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(n: usize) -> Grid3 {
        Grid3::isotropic([n, n, n], 0.594).unwrap()
    }

    #[test]
    fn poiseuille_centerline_and_wall() {
        // Odd dims put a voxel centre exactly on the axis.
        let g = Grid3::isotropic([9, 9, 9], 1.0).unwrap();
        let spec = FlowSpec::poiseuille(Axis::Z, 4.0, 100.0);
        let (f, m) = generate_field(&spec, &g).unwrap();
        assert_eq!(f.vz.get(4, 4, 0), 100.0);
        // r = 4 mm exactly: on the wall, inside the mask, zero speed.
        assert!(m.inside.get(8, 4, 3));
        assert_eq!(f.vz.get(8, 4, 3), 0.0);
        assert_eq!(f.vx.max_abs(), 0.0);
        assert_eq!(f.vy.max_abs(), 0.0);
    }

    #[test]
    fn zero_outside_mask_for_all_kinds() {
        let g = grid(24);
        for spec in [
            FlowSpec::poiseuille(Axis::X, 5.0, 80.0),
            FlowSpec::helical(Axis::Y, 5.0, 80.0, 0.3),
            FlowSpec::stenosed(Axis::Z, 5.0, 80.0, 0.5),
        ] {
            let (f, m) = generate_field(&spec, &g).unwrap();
            for (idx, &inside) in m.inside.as_slice().iter().enumerate() {
                if !inside {
                    for c in f.components() {
                        assert_eq!(c.as_slice()[idx], 0.0);
                    }
                }
            }
            assert!(m.count() > 0);
        }
    }

    #[test]
    fn radius_too_large_is_config_error() {
        let spec = FlowSpec::poiseuille(Axis::Z, 20.0, 100.0);
        assert!(matches!(
            generate_field(&spec, &grid(16)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn nonfinite_spec_is_validation_error() {
        let spec = FlowSpec::poiseuille(Axis::Z, f64::NAN, 100.0);
        assert!(matches!(
            generate_field(&spec, &grid(16)),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn stenosis_narrows_midpoint() {
        let g = grid(32);
        let spec = FlowSpec::stenosed(Axis::Z, 6.0, 50.0, 0.5);
        let (f, m) = generate_field(&spec, &g).unwrap();
        let count_slice = |k: usize| {
            (0..32)
                .flat_map(|i| (0..32).map(move |j| (i, j)))
                .filter(|&(i, j)| m.inside.get(i, j, k))
                .count()
        };
        assert!(count_slice(16) * 3 < count_slice(0));
        // Peak axial speed rises where the lumen narrows.
        assert!(f.vz.max_abs() > 150.0);
    }

    #[test]
    fn helical_adds_tangential_motion() {
        let g = grid(24);
        let (f, _) = generate_field(&FlowSpec::helical(Axis::Z, 6.0, 100.0, 0.5), &g).unwrap();
        assert!(f.vx.max_abs() > 10.0 && f.vy.max_abs() > 10.0);
        assert!(f.vx.max_abs() <= 50.0 + 1e-9);
    }

    #[test]
    fn waveform_interpolation_and_range() {
        let w = Waveform(vec![(0.0, 0.0), (1.0, 2.0), (2.0, 1.0)]);
        assert_eq!(w.value_at(0.5).unwrap(), 1.0);
        assert_eq!(w.value_at(1.5).unwrap(), 1.5);
        assert_eq!(w.value_at(2.0).unwrap(), 1.0);
        assert!(matches!(w.value_at(2.5), Err(Error::Range(_))));
        assert!(Waveform(vec![(1.0, 0.0), (0.5, 1.0)]).validate().is_err());
        assert!(Waveform(vec![(0.0, -1.0)]).validate().is_err());
    }

    #[test]
    fn modulation_scales() {
        let g = grid(16);
        let (f, _) = generate_field(&FlowSpec::poiseuille(Axis::Z, 3.0, 60.0), &g).unwrap();
        let zero = modulate_temporal(&f, &Waveform::constant(0.0), 0.5).unwrap();
        assert_eq!(zero.vz.max_abs(), 0.0);
        let same = modulate_temporal(&f, &Waveform::constant(1.0), 0.5).unwrap();
        assert_eq!(same, f);
        let double = modulate_temporal(&f, &Waveform::constant(2.0), 0.5).unwrap();
        let sum = |v: &Volume<f64>| v.as_slice().iter().sum::<f64>();
        assert!((sum(&double.vz) - 2.0 * sum(&f.vz)).abs() < 1e-9);
    }

    #[test]
    fn frames_count_and_constant_waveform() {
        let g = grid(16);
        let spec = FlowSpec::poiseuille(Axis::Z, 3.0, 60.0).with_waveform(Waveform::constant(1.0));
        let frames = sample_frames(&spec, &g, 5).unwrap();
        assert_eq!(frames.len(), 5);
        assert!(frames.windows(2).all(|w| w[0] == w[1]));
        assert!(sample_frames(&spec, &g, 0).is_err());

        let times = frame_times(&Waveform::default(), 71).unwrap();
        assert_eq!(times.len(), 71);
        assert_eq!(frame_times(&Waveform::default(), 1).unwrap(), vec![0.0]);
    }

    #[test]
    fn deterministic() {
        let g = grid(20);
        let spec = FlowSpec::stenosed(Axis::X, 4.0, 70.0, 0.6);
        assert_eq!(generate_field(&spec, &g).unwrap(), generate_field(&spec, &g).unwrap());
    }
}
