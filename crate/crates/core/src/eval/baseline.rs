//! Non-learned x2 upsampling baselines on the network's sample grid: output
//! sample `o` sits at source coordinate `(o + 0.5) / 2 - 0.5`, so even outputs
//! lie a quarter voxel below a source voxel and odd outputs a quarter above.
//! Sinc interpolation lives in [`crate::kspace::sinc_upsample_field`].

use crate::error::{ensure, Result};
use crate::flowfield::VelocityField;
use crate::net::{upsample_trilinear2x, Feature};
use crate::volume::Volume;

pub fn upsample_trilinear_baseline(lr: &VelocityField) -> Result<VelocityField> {
    ensure(lr.grid.dims.iter().all(|&d| d >= 2), || {
        format!("trilinear upsampling needs dims >= 2, got {:?}", lr.grid.dims)
    })?;
    let [a, b, c] = lr.components();
    let up = upsample_trilinear2x(&Feature::from_volumes(&[a, b, c])?);
    VelocityField::from_components(lr.grid.doubled(), [up.channel(0), up.channel(1), up.channel(2)])
}

/// Lagrange weights for the four nodes at offsets `-1, 0, 1, 2` evaluated at
/// `t` in `[0, 1]`.
fn cubic_weights(t: f64) -> [f64; 4] {
    [
        -t * (t - 1.0) * (t - 2.0) / 6.0,
        (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
        -(t + 1.0) * t * (t - 2.0) / 2.0,
        (t + 1.0) * t * (t - 1.0) / 6.0,
    ]
}

/// Cubic x2 along one axis of a scalar volume, clamping node indices at the
/// edges.
fn cubic_axis(v: &Volume<f64>, axis: usize) -> Volume<f64> {
    let src = v.dims();
    let n = src[axis] as isize;
    let mut dims = src;
    dims[axis] *= 2;
    let (even, odd) = (cubic_weights(0.75), cubic_weights(0.25));
    Volume::from_fn(dims, |i, j, k| {
        let mut p = [i, j, k];
        let o = p[axis];
        // Even outputs sit between nodes k-1 and k, odd ones between k and k+1.
        let (base, w) = if o % 2 == 0 { (o as isize / 2 - 1, &even) } else { (o as isize / 2, &odd) };
        let mut acc = 0.0;
        for (m, wm) in w.iter().enumerate() {
            p[axis] = (base - 1 + m as isize).clamp(0, n - 1) as usize;
            acc += wm * v.at(p);
        }
        acc
    })
}

/// Separable cubic interpolation with a four-point interpolating (Lagrange)
/// kernel: reproduces cubic polynomials away from the edges.
pub fn upsample_tricubic_baseline(lr: &VelocityField) -> Result<VelocityField> {
    ensure(lr.grid.dims.iter().all(|&d| d >= 4), || {
        format!("tricubic upsampling needs dims >= 4, got {:?}", lr.grid.dims)
    })?;
    let comps = lr.components().map(|c| (0..3).fold(c.clone(), |acc, a| cubic_axis(&acc, a)));
    VelocityField::from_components(lr.grid.doubled(), comps)
}
