//! Layer operations on single-sample channels-last feature maps, with their
//! backward passes.

use rand::Rng;

use super::feature::Feature;
use super::real::Real;
use crate::error::{ensure, Result};

/// A 3x3x3 convolution: weights `[tap][cin][cout]`, one bias per output.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<T> {
    pub cin: usize,
    pub cout: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Conv<T> {
    pub fn zeros(cin: usize, cout: usize) -> Self {
        Conv {
            cin,
            cout,
            weight: vec![T::zero(); 27 * cin * cout],
            bias: vec![T::zero(); cout],
        }
    }

    /// Uniform in `+-1/sqrt(fan_in)` for weights and biases.
    pub fn init<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        let bound = 1.0 / ((27 * cin) as f64).sqrt();
        let mut draw = || T::of(rng.random_range(-bound..bound));
        let weight = (0..27 * cin * cout).map(|_| draw()).collect();
        let bias = (0..cout).map(|_| draw()).collect();
        Conv { cin, cout, weight, bias }
    }

    pub fn weight_at(&self, tap: [usize; 3], ci: usize, co: usize) -> T {
        self.weight[(((tap[0] * 3 + tap[1]) * 3 + tap[2]) * self.cin + ci) * self.cout + co]
    }

    /// Weights of the adjoint convolution: taps reversed, channels swapped.
    fn flipped_transposed(&self) -> Vec<T> {
        let (ci, co) = (self.cin, self.cout);
        let mut out = vec![T::zero(); self.weight.len()];
        for tap in 0..27 {
            for i in 0..ci {
                for o in 0..co {
                    out[(tap * co + o) * ci + i] = self.weight[((26 - tap) * ci + i) * co + o];
                }
            }
        }
        out
    }

    fn check_input(&self, x: &Feature<T>) -> Result<()> {
        ensure(x.channels() == self.cin, || {
            format!("convolution expects {} input channels, got {}", self.cin, x.channels())
        })
    }
}

/// Stride-1 convolution with edge-replicating padding; spatial dims are kept.
pub fn conv3d_symmetric<T: Real>(conv: &Conv<T>, x: &Feature<T>) -> Result<Feature<T>> {
    conv.check_input(x)?;
    let pad = x.pad_edge();
    let mut out = Feature::zeros(x.dims(), conv.cout);
    T::conv_valid(pad.data(), pad.dims(), conv.cin, &conv.weight, &conv.bias, conv.cout, out.data_mut());
    Ok(out)
}

/// Accumulate parameter gradients of [`conv3d_symmetric`] into `grad` and,
/// if asked, return the gradient with respect to the input.
pub fn conv3d_backward<T: Real>(
    conv: &Conv<T>,
    x: &Feature<T>,
    gout: &Feature<T>,
    grad: &mut Conv<T>,
    input_grad: bool,
) -> Result<Option<Feature<T>>> {
    conv.check_input(x)?;
    ensure(gout.dims() == x.dims() && gout.channels() == conv.cout, || {
        "output gradient does not match the convolution output".into()
    })?;
    let pad = x.pad_edge();
    T::conv_wgrad(pad.data(), pad.dims(), conv.cin, gout.data(), conv.cout, &mut grad.weight);
    for g in gout.data().chunks_exact(conv.cout) {
        for (b, &v) in grad.bias.iter_mut().zip(g) {
            *b += v;
        }
    }
    if !input_grad {
        return Ok(None);
    }
    let gz = gout.pad_zero(2);
    let mut gpad = Feature::zeros(pad.dims(), conv.cin);
    let zero_bias = vec![T::zero(); conv.cin];
    T::conv_valid(gz.data(), gz.dims(), conv.cout, &conv.flipped_transposed(), &zero_bias, conv.cin, gpad.data_mut());
    Ok(Some(gpad.fold_edge()))
}

pub fn relu_inplace<T: Real>(x: &mut Feature<T>) {
    for v in x.data_mut() {
        *v = v.max(T::zero());
    }
}

pub fn leaky_relu_inplace<T: Real>(x: &mut Feature<T>, slope: T) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = *v * slope;
        }
    }
}

pub fn tanh_inplace<T: Real>(x: &mut Feature<T>) {
    for v in x.data_mut() {
        *v = v.tanh();
    }
}

/// Backward of ReLU given its output `y`.
pub fn relu_backward<T: Real>(y: &Feature<T>, g: &mut Feature<T>) {
    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
        if yv <= T::zero() {
            *gv = T::zero();
        }
    }
}

/// Backward of leaky ReLU given its output `y` (the sign of `y` equals the
/// sign of the input for a positive slope).
pub fn leaky_relu_backward<T: Real>(y: &Feature<T>, g: &mut Feature<T>, slope: T) {
    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
        if yv <= T::zero() {
            *gv = *gv * slope;
        }
    }
}

pub fn tanh_backward<T: Real>(y: &Feature<T>, g: &mut Feature<T>) {
    for (gv, &yv) in g.data_mut().iter_mut().zip(y.data()) {
        *gv = *gv * (T::one() - yv * yv);
    }
}

/// Apply `f(src_line, dst_line)` to every line along `axis` of a map laid out
/// `[d][h][w][c]`. `src_n` and `dst_n` are the line lengths.
fn along_axis<T: Copy>(
    src: &[T],
    dims: [usize; 3],
    c: usize,
    axis: usize,
    dst_n: usize,
    dst: &mut [T],
    mut f: impl FnMut(&[T], usize, &mut [T]),
) {
    let src_n = dims[axis];
    let inner: usize = dims[axis + 1..].iter().product::<usize>() * c;
    let outer: usize = dims[..axis].iter().product();
    for o in 0..outer {
        f(&src[o * src_n * inner..][..src_n * inner], inner, &mut dst[o * dst_n * inner..][..dst_n * inner]);
    }
}

/// Trilinear x2 upsampling, align-corners false: output sample `o` reads the
/// source at `(o + 0.5) / 2 - 0.5`, clamped at the edges. Along one axis this
/// is `out[2k] = x[k-1]/4 + 3x[k]/4` and `out[2k+1] = 3x[k]/4 + x[k+1]/4`.
pub fn upsample_trilinear2x<T: Real>(x: &Feature<T>) -> Feature<T> {
    let (q, t) = (T::of(0.25), T::of(0.75));
    let c = x.channels();
    let mut cur = x.clone();
    for axis in 0..3 {
        let mut dims = cur.dims();
        let n = dims[axis];
        dims[axis] = 2 * n;
        let mut next = Feature::zeros(dims, c);
        along_axis(cur.data(), cur.dims(), c, axis, 2 * n, next.data_mut(), |s, inner, d| {
            for k in 0..n {
                let lo = &s[k.saturating_sub(1) * inner..][..inner];
                let mid = &s[k * inner..][..inner];
                let hi = &s[(k + 1).min(n - 1) * inner..][..inner];
                let (even, odd) = d[2 * k * inner..][..2 * inner].split_at_mut(inner);
                for e in 0..inner {
                    even[e] = q * lo[e] + t * mid[e];
                    odd[e] = t * mid[e] + q * hi[e];
                }
            }
        });
        cur = next;
    }
    cur
}

/// Adjoint of [`upsample_trilinear2x`].
pub fn upsample_trilinear2x_backward<T: Real>(g: &Feature<T>) -> Feature<T> {
    let (q, t) = (T::of(0.25), T::of(0.75));
    let c = g.channels();
    let mut cur = g.clone();
    for axis in (0..3).rev() {
        let mut dims = cur.dims();
        let n = dims[axis] / 2;
        dims[axis] = n;
        let mut next = Feature::zeros(dims, c);
        along_axis(cur.data(), cur.dims(), c, axis, n, next.data_mut(), |s, inner, d| {
            for k in 0..n {
                let even = &s[2 * k * inner..][..inner];
                let odd = &s[(2 * k + 1) * inner..][..inner];
                let (lo, mid, hi) = (k.saturating_sub(1), k, (k + 1).min(n - 1));
                for e in 0..inner {
                    d[lo * inner + e] += q * even[e];
                    d[mid * inner + e] += t * (even[e] + odd[e]);
                    d[hi * inner + e] += q * odd[e];
                }
            }
        });
        cur = next;
    }
    cur
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 3], c: usize, seed: u64) -> Feature<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product::<usize>() * c;
        Feature::from_vec(dims, c, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct evaluation with explicit mirrored indexing.
    fn brute_conv(conv: &Conv<f64>, x: &Feature<f64>) -> Feature<f64> {
        let d = x.dims();
        let mut out = Feature::zeros(d, conv.cout);
        let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
        let mut vals = Vec::new();
        for i in 0..d[0] {
            for j in 0..d[1] {
                for k in 0..d[2] {
                    for co in 0..conv.cout {
                        let mut s = conv.bias[co];
                        for a in 0..3 {
                            for b in 0..3 {
                                for c in 0..3 {
                                    let (si, sj, sk) = (
                                        clamp(i as isize + a as isize - 1, d[0]),
                                        clamp(j as isize + b as isize - 1, d[1]),
                                        clamp(k as isize + c as isize - 1, d[2]),
                                    );
                                    for ci in 0..conv.cin {
                                        s += x.get(si, sj, sk, ci) * conv.weight_at([a, b, c], ci, co);
                                    }
                                }
                            }
                        }
                        vals.push(s);
                    }
                }
            }
        }
        out.data_mut().copy_from_slice(&vals);
        out
    }

    #[test]
    fn matches_brute_force_with_mirrored_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random([5, 5, 5], 1, 1);
        let conv = Conv::<f64>::init(1, 1, &mut rng);
        let a = conv3d_symmetric(&conv, &x).unwrap();
        let b = brute_conv(&conv, &x);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-6);
        }
        let x = random([4, 3, 5], 3, 2);
        let conv = Conv::<f64>::init(3, 2, &mut rng);
        let a = conv3d_symmetric(&conv, &x).unwrap();
        let b = brute_conv(&conv, &x);
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_and_constant_kernels() {
        let x = random([4, 4, 4], 2, 3);
        let mut conv = Conv::<f64>::zeros(2, 2);
        for c in 0..2 {
            conv.weight[(13 * 2 + c) * 2 + c] = 1.0;
        }
        assert_eq!(conv3d_symmetric(&conv, &x).unwrap(), x);

        let x = Feature::from_vec([4, 5, 3], 1, vec![2.0; 60]).unwrap();
        let mut conv = Conv::<f64>::zeros(1, 1);
        conv.weight.iter_mut().for_each(|w| *w = 0.5 / 27.0);
        conv.bias[0] = 0.25;
        for v in conv3d_symmetric(&conv, &x).unwrap().data() {
            assert!((v - (2.0 * 0.5 + 0.25)).abs() < 1e-14);
        }
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = random([4, 4, 4], 2, 3);
        assert!(conv3d_symmetric(&Conv::<f64>::zeros(3, 1), &x).is_err());
    }

    /// `<conv(x) - bias, y> == <x, input_grad(y)>`.
    #[test]
    fn input_gradient_is_the_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let conv = Conv::<f64>::init(3, 2, &mut rng);
        let x = random([4, 5, 3], 3, 6);
        let y = random([4, 5, 3], 2, 7);
        let mut lin = conv.clone();
        lin.bias.iter_mut().for_each(|b| *b = 0.0);
        let fx = conv3d_symmetric(&lin, &x).unwrap();
        let lhs: f64 = fx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let mut grad = Conv::zeros(3, 2);
        let gx = conv3d_backward(&conv, &x, &y, &mut grad, true).unwrap().unwrap();
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn weight_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let conv = Conv::<f64>::init(2, 3, &mut rng);
        let x = random([3, 4, 3], 2, 9);
        let y = random([3, 4, 3], 3, 10);
        let loss = |c: &Conv<f64>| -> f64 {
            conv3d_symmetric(c, &x).unwrap().data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
        };
        let mut grad = Conv::zeros(2, 3);
        conv3d_backward(&conv, &x, &y, &mut grad, false).unwrap();
        for idx in [0, 17, 80, 161] {
            let mut p = conv.clone();
            p.weight[idx] += 1e-6;
            let mut m = conv.clone();
            m.weight[idx] -= 1e-6;
            let fd = (loss(&p) - loss(&m)) / 2e-6;
            assert!((fd - grad.weight[idx]).abs() < 1e-6, "{fd} vs {}", grad.weight[idx]);
        }
        let total: f64 = y.data().iter().skip(1).step_by(3).sum();
        assert!((grad.bias[1] - total).abs() < 1e-12);
    }

    #[test]
    fn upsample_examples() {
        let ramp = Feature::from_vec([1, 1, 2], 1, vec![0.0, 1.0]).unwrap();
        let up = upsample_trilinear2x(&ramp);
        assert_eq!(up.dims(), [2, 2, 4]);
        for i in 0..2 {
            for j in 0..2 {
                let row: Vec<f64> = (0..4).map(|k| up.get(i, j, k, 0)).collect();
                assert_eq!(row, vec![0.0, 0.25, 0.75, 1.0]);
            }
        }
        let c = Feature::from_vec([3, 2, 4], 2, vec![1.7; 48]).unwrap();
        assert!(upsample_trilinear2x(&c).data().iter().all(|&v| v == 1.7));
    }

    #[test]
    fn upsample_is_linear_and_backward_is_adjoint() {
        let x = random([3, 4, 2], 2, 11);
        let z = random([3, 4, 2], 2, 12);
        let mut combo = x.clone();
        for (a, b) in combo.data_mut().iter_mut().zip(z.data()) {
            *a = 2.0 * *a - 0.5 * b;
        }
        let lhs = upsample_trilinear2x(&combo);
        let (ux, uz) = (upsample_trilinear2x(&x), upsample_trilinear2x(&z));
        for ((l, a), b) in lhs.data().iter().zip(ux.data()).zip(uz.data()) {
            assert!((l - (2.0 * a - 0.5 * b)).abs() < 1e-12);
        }
        let y = random([6, 8, 4], 2, 13);
        let lhs: f64 = ux.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let gx = upsample_trilinear2x_backward(&y);
        let rhs: f64 = x.data().iter().zip(gx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
