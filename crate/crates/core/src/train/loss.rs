//! Training losses on 3-channel velocity maps, with gradients with respect
//! to the prediction.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::net::{Feature, Real};

/// Weight of the gradient term in the total loss.
pub const VG_WEIGHT: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_mse: f64,
    pub l_vg: f64,
    pub l_total: f64,
    pub vg_weight: f64,
}

impl LossBreakdown {
    pub fn new(l_mse: f64, l_vg: f64) -> Self {
        LossBreakdown {
            l_mse,
            l_vg,
            l_total: l_mse + VG_WEIGHT * l_vg,
            vg_weight: VG_WEIGHT,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.l_mse.is_finite() && self.l_vg.is_finite() && self.l_total.is_finite()
    }

    /// Mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len().max(1) as f64;
        let (m, v) = items.iter().fold((0.0, 0.0), |(m, v), l| (m + l.l_mse, v + l.l_vg));
        Self::new(m / n, v / n)
    }
}

fn check_pair<T: Real>(pred: &Feature<T>, target: &Feature<T>) -> Result<()> {
    ensure(pred.channels() == 3 && target.channels() == 3, || {
        "losses need 3-channel velocity maps".into()
    })?;
    ensure(pred.dims() == target.dims(), || {
        format!("prediction {:?} and target {:?} differ in shape", pred.dims(), target.dims())
    })
}

/// Mean over voxels of the summed squared component errors.
pub fn loss_mse<T: Real>(pred: &Feature<T>, target: &Feature<T>) -> Result<f64> {
    check_pair(pred, target)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| {
            let d = (*p - *t).to_f64().unwrap_or(f64::NAN);
            d * d
        })
        .sum();
    Ok(sum / pred.voxels() as f64)
}

/// Finite difference of channel `c` along axis `c` at every voxel: central
/// `(v[k+1] - v[k-1]) / (2h)` inside, one-sided `(v[1] - v[0]) / h` and
/// `(v[n-1] - v[n-2]) / h` on the two boundary layers. The central stencil
/// spans two voxels, so its denominator is the stencil span `2h`.
fn diagonal_derivative(diff: &[f64], dims: [usize; 3], c: usize, h: f64) -> Vec<f64> {
    let stride = [dims[1] * dims[2], dims[2], 1][c];
    let n = dims[c];
    let at = |v: usize| diff[v * 3 + c];
    (0..diff.len() / 3)
        .map(|v| {
            let k = v / stride % n;
            if k == 0 {
                (at(v + stride) - at(v)) / h
            } else if k == n - 1 {
                (at(v) - at(v - stride)) / h
            } else {
                (at(v + stride) - at(v - stride)) / (2.0 * h)
            }
        })
        .collect()
}

/// Adjoint of [`diagonal_derivative`], added into channel `c` of `out`.
fn diagonal_derivative_adjoint(e: &[f64], dims: [usize; 3], c: usize, h: f64, scale: f64, out: &mut [f64]) {
    let stride = [dims[1] * dims[2], dims[2], 1][c];
    let n = dims[c];
    for (v, &ev) in e.iter().enumerate() {
        let k = v / stride % n;
        let (lo, hi, w) = if k == 0 {
            (v, v + stride, 1.0 / h)
        } else if k == n - 1 {
            (v - stride, v, 1.0 / h)
        } else {
            (v - stride, v + stride, 0.5 / h)
        };
        out[hi * 3 + c] += scale * w * ev;
        out[lo * 3 + c] -= scale * w * ev;
    }
}

fn differences<T: Real>(pred: &Feature<T>, target: &Feature<T>) -> Vec<f64> {
    pred.data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (*p - *t).to_f64().unwrap_or(f64::NAN))
        .collect()
}

fn check_vg<T: Real>(pred: &Feature<T>, target: &Feature<T>, spacing: [f64; 3]) -> Result<()> {
    check_pair(pred, target)?;
    ensure(pred.dims().iter().all(|&d| d >= 3), || {
        format!("gradient loss needs sides >= 3, got {:?}", pred.dims())
    })?;
    ensure(spacing.iter().all(|h| h.is_finite() && *h > 0.0), || {
        format!("gradient loss spacing must be positive, got {spacing:?}")
    })
}

/// Mean over voxels of the squared errors of the diagonal derivatives
/// `dvx/dx`, `dvy/dy`, `dvz/dz`.
pub fn loss_velocity_gradient<T: Real>(pred: &Feature<T>, target: &Feature<T>, spacing: [f64; 3]) -> Result<f64> {
    check_vg(pred, target, spacing)?;
    let diff = differences(pred, target);
    let sum: f64 = (0..3)
        .map(|c| diagonal_derivative(&diff, pred.dims(), c, spacing[c]).iter().map(|e| e * e).sum::<f64>())
        .sum();
    Ok(sum / pred.voxels() as f64)
}

pub fn total_loss<T: Real>(pred: &Feature<T>, target: &Feature<T>, spacing: [f64; 3]) -> Result<LossBreakdown> {
    Ok(LossBreakdown::new(loss_mse(pred, target)?, loss_velocity_gradient(pred, target, spacing)?))
}

/// Both terms and the gradient of `w_mse * l_mse + w_vg * l_vg`.
fn terms_with_grad<T: Real>(
    pred: &Feature<T>,
    target: &Feature<T>,
    spacing: [f64; 3],
    w_mse: f64,
    w_vg: f64,
) -> Result<(LossBreakdown, Feature<T>)> {
    check_vg(pred, target, spacing)?;
    let dims = pred.dims();
    let n = pred.voxels() as f64;
    let diff = differences(pred, target);
    let mse = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let mut grad: Vec<f64> = diff.iter().map(|d| 2.0 * w_mse * d / n).collect();
    let mut vg = 0.0;
    for c in 0..3 {
        let e = diagonal_derivative(&diff, dims, c, spacing[c]);
        vg += e.iter().map(|x| x * x).sum::<f64>();
        diagonal_derivative_adjoint(&e, dims, c, spacing[c], 2.0 * w_vg / n, &mut grad);
    }
    let grad = Feature::from_vec(dims, 3, grad.into_iter().map(T::of).collect())?;
    Ok((LossBreakdown::new(mse, vg / n), grad))
}

/// [`total_loss`] and its gradient with respect to `pred`.
pub fn total_loss_with_grad<T: Real>(
    pred: &Feature<T>,
    target: &Feature<T>,
    spacing: [f64; 3],
) -> Result<(LossBreakdown, Feature<T>)> {
    terms_with_grad(pred, target, spacing, 1.0, VG_WEIGHT)
}

/// [`loss_velocity_gradient`] and its gradient with respect to `pred`.
pub fn loss_velocity_gradient_with_grad<T: Real>(
    pred: &Feature<T>,
    target: &Feature<T>,
    spacing: [f64; 3],
) -> Result<(f64, Feature<T>)> {
    let (l, g) = terms_with_grad(pred, target, spacing, 0.0, 1.0)?;
    Ok((l.l_vg, g))
}
