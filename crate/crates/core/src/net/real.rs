use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use super::kernels::{conv_valid_generic, conv_wgrad_generic};

/// Scalar type of the network: `f32` for training and inference, `f64` for
/// gradient checks. The convolution entry points dispatch to vectorised
/// kernels where the type and CPU allow.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + AddAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    /// Valid 3x3x3 convolution of the padded map `pad` (dims `pd`).
    fn conv_valid(pad: &[Self], pd: [usize; 3], cin: usize, w: &[Self], bias: &[Self], cout: usize, out: &mut [Self]) {
        conv_valid_generic(pad, pd, cin, w, bias, cout, out)
    }

    /// Accumulate `d loss / d weight` given the padded input and the output
    /// gradient.
    fn conv_wgrad(pad: &[Self], pd: [usize; 3], cin: usize, gout: &[Self], cout: usize, gw: &mut [Self]) {
        conv_wgrad_generic(pad, pd, cin, gout, cout, gw)
    }
}

impl Real for f64 {}

impl Real for f32 {
    fn conv_valid(pad: &[f32], pd: [usize; 3], cin: usize, w: &[f32], bias: &[f32], cout: usize, out: &mut [f32]) {
        check_lengths(pad.len(), pd, cin, w.len(), cout, out.len());
        #[cfg(target_arch = "x86_64")]
        {
            use super::kernels::avx512;
            if avx512::available() {
                // SAFETY: AVX-512F is present and the slice lengths were checked.
                unsafe {
                    if avx512::winograd_fits(pd, cin, cout) {
                        avx512::conv_valid_winograd(pad, pd, cin, w, bias, cout, out);
                    } else if cout % 16 == 0 {
                        avx512::conv_valid(pad, pd, cin, w, bias, cout, out);
                    } else if cout == 1 && (3 * cin) % 16 == 0 {
                        avx512::conv_valid_c1(pad, pd, cin, w, bias[0], out);
                    } else {
                        avx512::conv_valid_auto(pad, pd, cin, w, bias, cout, out);
                    }
                }
                return;
            }
        }
        conv_valid_generic(pad, pd, cin, w, bias, cout, out)
    }

    fn conv_wgrad(pad: &[f32], pd: [usize; 3], cin: usize, gout: &[f32], cout: usize, gw: &mut [f32]) {
        check_lengths(pad.len(), pd, cin, gw.len(), cout, gout.len());
        #[cfg(target_arch = "x86_64")]
        {
            use super::kernels::avx512;
            if avx512::available() {
                // SAFETY: as above.
                unsafe {
                    if avx512::winograd_fits(pd, cin, cout) {
                        avx512::conv_wgrad_winograd(pad, pd, cin, gout, cout, gw);
                    } else if cout % 16 == 0 {
                        avx512::conv_wgrad(pad, pd, cin, gout, cout, gw);
                    } else if cout == 1 && (3 * cin) % 16 == 0 {
                        avx512::conv_wgrad_c1(pad, pd, cin, gout, gw);
                    } else {
                        avx512::conv_wgrad_auto(pad, pd, cin, gout, cout, gw);
                    }
                }
                return;
            }
        }
        conv_wgrad_generic(pad, pd, cin, gout, cout, gw)
    }
}

fn check_lengths(pad: usize, pd: [usize; 3], cin: usize, w: usize, cout: usize, out: usize) {
    assert!(pd.iter().all(|&d| d >= 3), "padded dims {pd:?} too small");
    assert_eq!(pad, pd.iter().product::<usize>() * cin);
    assert_eq!(w, 27 * cin * cout);
    assert_eq!(out, (pd[0] - 2) * (pd[1] - 2) * (pd[2] - 2) * cout);
}
