//! 3x3x3 convolution kernels over channels-last maps.
//!
//! `pad` has dims `pd` and the output has dims `pd - 2` ("valid" convolution).
//! Weights are `[tap][cin][cout]` with `tap = (a * 3 + b) * 3 + c`. For a fixed
//! `(a, b)` the three `c` taps and all input channels form one contiguous run
//! of `3 * cin` values both in the input row and in the weights, so the inner
//! loops walk `m = c * cin + ci` over `0..3 * cin`.

use std::ops::AddAssign;

use num_traits::Float;

#[inline(always)]
pub(crate) fn conv_valid_generic<T: Float + AddAssign>(
    pad: &[T],
    pd: [usize; 3],
    cin: usize,
    w: &[T],
    bias: &[T],
    cout: usize,
    out: &mut [T],
) {
    let od = [pd[0] - 2, pd[1] - 2, pd[2] - 2];
    let run = 3 * cin;
    for i in 0..od[0] {
        for j in 0..od[1] {
            for k in 0..od[2] {
                let o = &mut out[((i * od[1] + j) * od[2] + k) * cout..][..cout];
                o.copy_from_slice(bias);
                for a in 0..3 {
                    for b in 0..3 {
                        let src = &pad[(((i + a) * pd[1] + j + b) * pd[2] + k) * cin..][..run];
                        let wb = &w[(a * 3 + b) * run * cout..][..run * cout];
                        for (x, wr) in src.iter().zip(wb.chunks_exact(cout)) {
                            for (oo, &ww) in o.iter_mut().zip(wr) {
                                *oo += *x * ww;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[inline(always)]
pub(crate) fn conv_wgrad_generic<T: Float + AddAssign>(
    pad: &[T],
    pd: [usize; 3],
    cin: usize,
    gout: &[T],
    cout: usize,
    gw: &mut [T],
) {
    let od = [pd[0] - 2, pd[1] - 2, pd[2] - 2];
    let run = 3 * cin;
    for i in 0..od[0] {
        for j in 0..od[1] {
            for k in 0..od[2] {
                let g = &gout[((i * od[1] + j) * od[2] + k) * cout..][..cout];
                for a in 0..3 {
                    for b in 0..3 {
                        let src = &pad[(((i + a) * pd[1] + j + b) * pd[2] + k) * cin..][..run];
                        let wb = &mut gw[(a * 3 + b) * run * cout..][..run * cout];
                        for (x, wr) in src.iter().zip(wb.chunks_exact_mut(cout)) {
                            for (ww, &gg) in wr.iter_mut().zip(g) {
                                *ww += *x * gg;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
pub(crate) mod avx512 {
    //! f32 kernels for AVX-512. Callers check `is_x86_feature_detected!`.
    #![allow(clippy::too_many_arguments)]

    use std::arch::x86_64::*;

    pub fn available() -> bool {
        std::is_x86_feature_detected!("avx512f")
    }

    /// The portable kernels compiled with AVX-512 enabled.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn conv_valid_auto(pad: &[f32], pd: [usize; 3], cin: usize, w: &[f32], bias: &[f32], cout: usize, out: &mut [f32]) {
        super::conv_valid_generic(pad, pd, cin, w, bias, cout, out)
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn conv_wgrad_auto(pad: &[f32], pd: [usize; 3], cin: usize, gout: &[f32], cout: usize, gw: &mut [f32]) {
        super::conv_wgrad_generic(pad, pd, cin, gout, cout, gw)
    }

    /// `NB` consecutive output voxels by `16 * CB` output channels.
    #[inline(always)]
    unsafe fn fwd_block<const NB: usize, const CB: usize>(
        src: *const f32,
        plane: usize,
        row: usize,
        cin: usize,
        w: *const f32,
        cout: usize,
        bias: *const f32,
        out: *mut f32,
    ) {
        let run = 3 * cin;
        let mut acc = [[_mm512_setzero_ps(); CB]; NB];
        for c in 0..CB {
            let b = _mm512_loadu_ps(bias.add(16 * c));
            for a in acc.iter_mut() {
                a[c] = b;
            }
        }
        for a in 0..3 {
            for b in 0..3 {
                let s = src.add(a * plane + b * row);
                let wb = w.add((a * 3 + b) * run * cout);
                for m in 0..run {
                    let mut wv = [_mm512_setzero_ps(); CB];
                    for (c, v) in wv.iter_mut().enumerate() {
                        *v = _mm512_loadu_ps(wb.add(m * cout + 16 * c));
                    }
                    for (x, ax) in acc.iter_mut().enumerate() {
                        let xs = _mm512_set1_ps(*s.add(x * cin + m));
                        for c in 0..CB {
                            ax[c] = _mm512_fmadd_ps(xs, wv[c], ax[c]);
                        }
                    }
                }
            }
        }
        for (x, ax) in acc.iter().enumerate() {
            for (c, v) in ax.iter().enumerate() {
                _mm512_storeu_ps(out.add(x * cout + 16 * c), *v);
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn conv_valid_blocked<const NB: usize, const CB: usize>(
        pad: &[f32],
        pd: [usize; 3],
        cin: usize,
        w: &[f32],
        bias: &[f32],
        cout: usize,
        out: &mut [f32],
    ) {
        let od = [pd[0] - 2, pd[1] - 2, pd[2] - 2];
        let (row, plane) = (pd[2] * cin, pd[1] * pd[2] * cin);
        let (p, wp, bp, op) = (pad.as_ptr(), w.as_ptr(), bias.as_ptr(), out.as_mut_ptr());
        for i in 0..od[0] {
            for j in 0..od[1] {
                for cob in (0..cout).step_by(16 * CB) {
                    let mut k = 0;
                    let src = |k: usize| p.add((i * pd[1] + j) * row + k * cin);
                    let dst = |k: usize| op.add(((i * od[1] + j) * od[2] + k) * cout + cob);
                    let (wc, bc) = (wp.add(cob), bp.add(cob));
                    while k + NB <= od[2] {
                        fwd_block::<NB, CB>(src(k), plane, row, cin, wc, cout, bc, dst(k));
                        k += NB;
                    }
                    while k + 4 <= od[2] {
                        fwd_block::<4, CB>(src(k), plane, row, cin, wc, cout, bc, dst(k));
                        k += 4;
                    }
                    while k < od[2] {
                        fwd_block::<1, CB>(src(k), plane, row, cin, wc, cout, bc, dst(k));
                        k += 1;
                    }
                }
            }
        }
    }

    /// Requires `cout % 16 == 0`.
    pub unsafe fn conv_valid(pad: &[f32], pd: [usize; 3], cin: usize, w: &[f32], bias: &[f32], cout: usize, out: &mut [f32]) {
        debug_assert_eq!(cout % 16, 0);
        if cout % 64 == 0 {
            conv_valid_blocked::<6, 4>(pad, pd, cin, w, bias, cout, out)
        } else if cout % 32 == 0 {
            conv_valid_blocked::<7, 2>(pad, pd, cin, w, bias, cout, out)
        } else {
            conv_valid_blocked::<14, 1>(pad, pd, cin, w, bias, cout, out)
        }
    }

    /// Single output channel; requires `(3 * cin) % 16 == 0`.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn conv_valid_c1(pad: &[f32], pd: [usize; 3], cin: usize, w: &[f32], bias: f32, out: &mut [f32]) {
        let od = [pd[0] - 2, pd[1] - 2, pd[2] - 2];
        let run = 3 * cin;
        let (p, wp) = (pad.as_ptr(), w.as_ptr());
        for i in 0..od[0] {
            for j in 0..od[1] {
                for k in 0..od[2] {
                    let mut acc = [_mm512_setzero_ps(); 3];
                    for a in 0..3 {
                        for b in 0..3 {
                            let s = p.add((((i + a) * pd[1] + j + b) * pd[2] + k) * cin);
                            let wb = wp.add((a * 3 + b) * run);
                            for (n, m) in (0..run).step_by(16).enumerate() {
                                let t = n % 3;
                                acc[t] = _mm512_fmadd_ps(_mm512_loadu_ps(s.add(m)), _mm512_loadu_ps(wb.add(m)), acc[t]);
                            }
                        }
                    }
                    let sum = _mm512_add_ps(_mm512_add_ps(acc[0], acc[1]), acc[2]);
                    out[(i * od[1] + j) * od[2] + k] = bias + _mm512_reduce_add_ps(sum);
                }
            }
        }
    }

    /// Accumulate weight gradients for `M` consecutive `m` indices by `16 * CB`
    /// output channels over one output row of `nx` voxels.
    #[inline(always)]
    unsafe fn wgrad_block<const M: usize, const CB: usize>(
        src: *const f32,
        cin: usize,
        g: *const f32,
        cout: usize,
        nx: usize,
        gw: *mut f32,
    ) {
        let mut acc = [[_mm512_setzero_ps(); CB]; M];
        for (m, am) in acc.iter_mut().enumerate() {
            for (c, v) in am.iter_mut().enumerate() {
                *v = _mm512_loadu_ps(gw.add(m * cout + 16 * c));
            }
        }
        for x in 0..nx {
            let mut gv = [_mm512_setzero_ps(); CB];
            for (c, v) in gv.iter_mut().enumerate() {
                *v = _mm512_loadu_ps(g.add(x * cout + 16 * c));
            }
            for (m, am) in acc.iter_mut().enumerate() {
                let xs = _mm512_set1_ps(*src.add(x * cin + m));
                for c in 0..CB {
                    am[c] = _mm512_fmadd_ps(xs, gv[c], am[c]);
                }
            }
        }
        for (m, am) in acc.iter().enumerate() {
            for (c, v) in am.iter().enumerate() {
                _mm512_storeu_ps(gw.add(m * cout + 16 * c), *v);
            }
        }
    }

    #[target_feature(enable = "avx512f")]
    unsafe fn conv_wgrad_blocked<const M: usize, const CB: usize>(
        pad: &[f32],
        pd: [usize; 3],
        cin: usize,
        gout: &[f32],
        cout: usize,
        gw: &mut [f32],
    ) {
        let od = [pd[0] - 2, pd[1] - 2, pd[2] - 2];
        let run = 3 * cin;
        let (p, g, wp) = (pad.as_ptr(), gout.as_ptr(), gw.as_mut_ptr());
        for i in 0..od[0] {
            for j in 0..od[1] {
                let grow = g.add((i * od[1] + j) * od[2] * cout);
                for a in 0..3 {
                    for b in 0..3 {
                        let s = p.add(((i + a) * pd[1] + j + b) * pd[2] * cin);
                        let wb = wp.add((a * 3 + b) * run * cout);
                        for m0 in (0..run).step_by(M) {
                            for cob in (0..cout).step_by(16 * CB) {
                                wgrad_block::<M, CB>(s.add(m0), cin, grow.add(cob), cout, od[2], wb.add(m0 * cout + cob));
                            }
                        }
                    }
                }
            }
        }
    }

    /// Requires `cout % 16 == 0`.
    pub unsafe fn conv_wgrad(pad: &[f32], pd: [usize; 3], cin: usize, gout: &[f32], cout: usize, gw: &mut [f32]) {
        debug_assert_eq!(cout % 16, 0);
        let run = 3 * cin;
        if cout % 64 == 0 && run % 6 == 0 {
            conv_wgrad_blocked::<6, 4>(pad, pd, cin, gout, cout, gw)
        } else if cout % 64 == 0 {
            conv_wgrad_blocked::<3, 4>(pad, pd, cin, gout, cout, gw)
        } else if cout % 32 == 0 && run % 12 == 0 {
            conv_wgrad_blocked::<12, 2>(pad, pd, cin, gout, cout, gw)
        } else if cout % 32 == 0 {
            conv_wgrad_blocked::<3, 2>(pad, pd, cin, gout, cout, gw)
        } else if run % 24 == 0 {
            conv_wgrad_blocked::<24, 1>(pad, pd, cin, gout, cout, gw)
        } else {
            conv_wgrad_blocked::<3, 1>(pad, pd, cin, gout, cout, gw)
        }
    }

    /// Single output channel; requires `(3 * cin) % 16 == 0`.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn conv_wgrad_c1(pad: &[f32], pd: [usize; 3], cin: usize, gout: &[f32], gw: &mut [f32]) {
        let od = [pd[0] - 2, pd[1] - 2, pd[2] - 2];
        let run = 3 * cin;
        let (p, wp) = (pad.as_ptr(), gw.as_mut_ptr());
        for i in 0..od[0] {
            for j in 0..od[1] {
                let grow = &gout[(i * od[1] + j) * od[2]..][..od[2]];
                for a in 0..3 {
                    for b in 0..3 {
                        let s = p.add(((i + a) * pd[1] + j + b) * pd[2] * cin);
                        let wb = wp.add((a * 3 + b) * run);
                        for m in (0..run).step_by(16) {
                            let mut acc = [_mm512_setzero_ps(); 4];
                            for (x, &gx) in grow.iter().enumerate() {
                                let t = x % 4;
                                acc[t] = _mm512_fmadd_ps(_mm512_loadu_ps(s.add(x * cin + m)), _mm512_set1_ps(gx), acc[t]);
                            }
                            let sum = _mm512_add_ps(_mm512_add_ps(acc[0], acc[1]), _mm512_add_ps(acc[2], acc[3]));
                            _mm512_storeu_ps(wb.add(m), _mm512_add_ps(_mm512_loadu_ps(wb.add(m)), sum));
                        }
                    }
                }
            }
        }
    }

    /// Rows of `B^T`, each `d[i] + sign * d[j]`.
    const BT: [(usize, usize, bool); 4] = [(0, 2, true), (1, 2, false), (2, 1, true), (1, 3, true)];

    #[inline(always)]
    unsafe fn comb(a: __m512, b: __m512, neg: bool) -> __m512 {
        if neg {
            _mm512_sub_ps(a, b)
        } else {
            _mm512_add_ps(a, b)
        }
    }

    /// Rows of `A^T` applied to four values.
    #[inline(always)]
    unsafe fn at2(m: [__m512; 4]) -> [__m512; 2] {
        [_mm512_add_ps(_mm512_add_ps(m[0], m[1]), m[2]), _mm512_sub_ps(_mm512_sub_ps(m[1], m[2]), m[3])]
    }

    /// Input tile transform of 16 channels: `src` is the tile corner, result
    /// position `xi` goes to `dst + xi * ds`.
    #[inline(always)]
    unsafe fn input_tile(src: *const f32, plane: usize, row: usize, cin: usize, dst: *mut f32, ds: usize) {
        let ld = |x: usize, y: usize, z: usize| _mm512_loadu_ps(src.add(x * plane + y * row + z * cin));
        for (ux, &(xa, xb, xn)) in BT.iter().enumerate() {
            let mut p = [[_mm512_setzero_ps(); 4]; 4];
            for (y, py) in p.iter_mut().enumerate() {
                for (z, v) in py.iter_mut().enumerate() {
                    *v = comb(ld(xa, y, z), ld(xb, y, z), xn);
                }
            }
            for (uy, &(ya, yb, yn)) in BT.iter().enumerate() {
                let mut q = [_mm512_setzero_ps(); 4];
                for (z, v) in q.iter_mut().enumerate() {
                    *v = comb(p[ya][z], p[yb][z], yn);
                }
                for (uz, &(za, zb, zn)) in BT.iter().enumerate() {
                    _mm512_storeu_ps(dst.add(((ux * 4 + uy) * 4 + uz) * ds), comb(q[za], q[zb], zn));
                }
            }
        }
    }

    /// Output tile transform of 16 channels plus bias; output voxel
    /// `(x, y, z)` goes to `dst + x * plane + y * row + z * cout`.
    #[inline(always)]
    unsafe fn output_tile(src: *const f32, ss: usize, bias: __m512, dst: *mut f32, plane: usize, row: usize, cout: usize) {
        let ld = |xi: usize| _mm512_loadu_ps(src.add(xi * ss));
        for ox in 0..2 {
            let mut p = [[_mm512_setzero_ps(); 4]; 4];
            for (y, py) in p.iter_mut().enumerate() {
                for (z, v) in py.iter_mut().enumerate() {
                    let m = [ld(y * 4 + z), ld(16 + y * 4 + z), ld(32 + y * 4 + z), ld(48 + y * 4 + z)];
                    *v = at2(m)[ox];
                }
            }
            for oy in 0..2 {
                let mut q = [_mm512_setzero_ps(); 4];
                for (z, v) in q.iter_mut().enumerate() {
                    *v = at2([p[0][z], p[1][z], p[2][z], p[3][z]])[oy];
                }
                let r = at2(q);
                for (oz, v) in r.iter().enumerate() {
                    _mm512_storeu_ps(dst.add(ox * plane + oy * row + oz * cout), _mm512_add_ps(*v, bias));
                }
            }
        }
    }

    /// Weights `[27][cin][cout]` to `G g G^T` as `[64][cin][cout]`.
    fn winograd_weights(w: &[f32], k: usize) -> Vec<f32> {
        // Transform along one axis of a `[n0][n1][n2][k]` array whose extent
        // on `axis` is 3, producing extent 4.
        fn along(src: &[f32], n: [usize; 3], axis: usize, k: usize) -> Vec<f32> {
            let mut m = n;
            m[axis] = 4;
            let mut out = vec![0.0f32; m[0] * m[1] * m[2] * k];
            let stride = |d: [usize; 3], i: [usize; 3]| ((i[0] * d[1] + i[1]) * d[2] + i[2]) * k;
            for i0 in 0..m[0] {
                for i1 in 0..m[1] {
                    for i2 in 0..m[2] {
                        let o = [i0, i1, i2];
                        let at = |t: usize| {
                            let mut i = o;
                            i[axis] = t;
                            &src[stride(n, i)..][..k]
                        };
                        let dst = &mut out[stride(m, o)..][..k];
                        match o[axis] {
                            0 => dst.copy_from_slice(at(0)),
                            3 => dst.copy_from_slice(at(2)),
                            r => {
                                let sign = if r == 1 { 0.5 } else { -0.5 };
                                for (((d, a), b), c) in dst.iter_mut().zip(at(0)).zip(at(1)).zip(at(2)) {
                                    *d = 0.5 * (a + c) + sign * b;
                                }
                            }
                        }
                    }
                }
            }
            out
        }
        let a = along(w, [3, 3, 3], 2, k);
        let b = along(&a, [3, 3, 4], 1, k);
        along(&b, [3, 4, 4], 0, k)
    }

    #[inline(always)]
    unsafe fn gemm_block<const NB: usize, const CB: usize>(a: *const f32, lda: usize, k: usize, b: *const f32, n: usize, c: *mut f32, ldc: usize) {
        let mut acc = [[_mm512_setzero_ps(); CB]; NB];
        for m in 0..k {
            let mut bv = [_mm512_setzero_ps(); CB];
            for (j, v) in bv.iter_mut().enumerate() {
                *v = _mm512_loadu_ps(b.add(m * n + 16 * j));
            }
            for (r, ar) in acc.iter_mut().enumerate() {
                let x = _mm512_set1_ps(*a.add(r * lda + m));
                for j in 0..CB {
                    ar[j] = _mm512_fmadd_ps(x, bv[j], ar[j]);
                }
            }
        }
        for (r, ar) in acc.iter().enumerate() {
            for (j, v) in ar.iter().enumerate() {
                _mm512_storeu_ps(c.add(r * ldc + 16 * j), *v);
            }
        }
    }

    /// `c[rows][n] = a[rows][k] * b[k][n]` with row strides `lda` and `ldc`.
    #[inline(always)]
    unsafe fn gemm<const NB: usize, const CB: usize>(a: *const f32, lda: usize, rows: usize, k: usize, b: *const f32, n: usize, c: *mut f32, ldc: usize) {
        for j in (0..n).step_by(16 * CB) {
            let mut r = 0;
            while r + NB <= rows {
                gemm_block::<NB, CB>(a.add(r * lda), lda, k, b.add(j), n, c.add(r * ldc + j), ldc);
                r += NB;
            }
            while r + 4 <= rows {
                gemm_block::<4, CB>(a.add(r * lda), lda, k, b.add(j), n, c.add(r * ldc + j), ldc);
                r += 4;
            }
            while r < rows {
                gemm_block::<1, CB>(a.add(r * lda), lda, k, b.add(j), n, c.add(r * ldc + j), ldc);
                r += 1;
            }
        }
    }

    /// Whether [`conv_valid_winograd`] applies.
    pub fn winograd_fits(pd: [usize; 3], cin: usize, cout: usize) -> bool {
        cin % 16 == 0 && cout % 16 == 0 && pd.iter().all(|&d| d >= 4 && d % 2 == 0)
    }

    /// Valid convolution by Winograd F(2x2x2, 3x3x3): each 2x2x2 output tile
    /// costs 64 multiplies per channel pair instead of 216.
    #[target_feature(enable = "avx512f")]
    pub unsafe fn conv_valid_winograd(pad: &[f32], pd: [usize; 3], cin: usize, w: &[f32], bias: &[f32], cout: usize, out: &mut [f32]) {
        debug_assert!(winograd_fits(pd, cin, cout));
        let od = [pd[0] - 2, pd[1] - 2, pd[2] - 2];
        let nt = [od[0] / 2, od[1] / 2, od[2] / 2];
        let total = nt[0] * nt[1] * nt[2];
        let tb = (1024 / cin.max(cout)).clamp(8, 64).min(total);
        let vw = winograd_weights(w, cin * cout);
        // U is tile-major, M position-major; strides are padded off multiples
        // of 4 KiB, which alias in L1.
        let (su, sm) = (64 * cin + 16, tb * cout + 16);
        let mut u = vec![0.0f32; tb * su];
        let mut m = vec![0.0f32; 64 * sm];
        let (row, plane) = (pd[2] * cin, pd[1] * pd[2] * cin);
        let (p, up, mp, op) = (pad.as_ptr(), u.as_mut_ptr(), m.as_mut_ptr(), out.as_mut_ptr());
        let tile = |t: usize| [t / (nt[1] * nt[2]), t / nt[2] % nt[1], t % nt[2]];
        for t0 in (0..total).step_by(tb) {
            let n = tb.min(total - t0);
            for tt in 0..n {
                let [ti, tj, tk] = tile(t0 + tt);
                let base = p.add(2 * ti * plane + 2 * tj * row + 2 * tk * cin);
                for c0 in (0..cin).step_by(16) {
                    input_tile(base.add(c0), plane, row, cin, up.add(tt * su + c0), cin);
                }
            }
            for xi in 0..64 {
                let (a, b, c) = (up.add(xi * cin), vw.as_ptr().add(xi * cin * cout), mp.add(xi * sm));
                if cout % 64 == 0 {
                    gemm::<6, 4>(a, su, n, cin, b, cout, c, cout);
                } else if cout % 32 == 0 {
                    gemm::<7, 2>(a, su, n, cin, b, cout, c, cout);
                } else {
                    gemm::<14, 1>(a, su, n, cin, b, cout, c, cout);
                }
            }
            for tt in 0..n {
                let [ti, tj, tk] = tile(t0 + tt);
                let (orow, oplane) = (od[2] * cout, od[1] * od[2] * cout);
                let dst = op.add(2 * ti * oplane + 2 * tj * orow + 2 * tk * cout);
                for c0 in (0..cout).step_by(16) {
                    let bv = _mm512_loadu_ps(bias.as_ptr().add(c0));
                    output_tile(mp.add(tt * cout + c0), sm, bv, dst.add(c0), oplane, orow, cout);
                }
            }
        }
    }

    /// Rows of `A` applied to two values: `[y0, y0 + y1, y0 - y1, -y1]`.
    #[inline(always)]
    unsafe fn a4(y0: __m512, y1: __m512) -> [__m512; 4] {
        [y0, _mm512_add_ps(y0, y1), _mm512_sub_ps(y0, y1), _mm512_sub_ps(_mm512_setzero_ps(), y1)]
    }

    /// Output-gradient tile expansion `A g A^T` of 16 channels; position `xi`
    /// goes to `dst + xi * ds`.
    #[inline(always)]
    unsafe fn gout_tile(src: *const f32, plane: usize, row: usize, cout: usize, dst: *mut f32, ds: usize) {
        let ld = |x: usize, y: usize, z: usize| _mm512_loadu_ps(src.add(x * plane + y * row + z * cout));
        let mut p = [[[_mm512_setzero_ps(); 2]; 2]; 4];
        for y in 0..2 {
            for z in 0..2 {
                let e = a4(ld(0, y, z), ld(1, y, z));
                for x in 0..4 {
                    p[x][y][z] = e[x];
                }
            }
        }
        for (x, px) in p.iter().enumerate() {
            let ey = [a4(px[0][0], px[1][0]), a4(px[0][1], px[1][1])];
            for y in 0..4 {
                let ez = a4(ey[0][y], ey[1][y]);
                for (z, v) in ez.iter().enumerate() {
                    _mm512_storeu_ps(dst.add(((x * 4 + y) * 4 + z) * ds), *v);
                }
            }
        }
    }

    /// `c[rows][16 * CB] += a[t][rows]^T b[t][16 * CB]` over `nt` tiles, for
    /// `M` consecutive rows.
    #[inline(always)]
    unsafe fn gemm_tn_block<const M: usize, const CB: usize>(a: *const f32, lda: usize, b: *const f32, ldb: usize, nt: usize, c: *mut f32, ldc: usize) {
        let mut acc = [[_mm512_setzero_ps(); CB]; M];
        for (r, ar) in acc.iter_mut().enumerate() {
            for (j, v) in ar.iter_mut().enumerate() {
                *v = _mm512_loadu_ps(c.add(r * ldc + 16 * j));
            }
        }
        for t in 0..nt {
            let mut bv = [_mm512_setzero_ps(); CB];
            for (j, v) in bv.iter_mut().enumerate() {
                *v = _mm512_loadu_ps(b.add(t * ldb + 16 * j));
            }
            for (r, ar) in acc.iter_mut().enumerate() {
                let x = _mm512_set1_ps(*a.add(t * lda + r));
                for j in 0..CB {
                    ar[j] = _mm512_fmadd_ps(x, bv[j], ar[j]);
                }
            }
        }
        for (r, ar) in acc.iter().enumerate() {
            for (j, v) in ar.iter().enumerate() {
                _mm512_storeu_ps(c.add(r * ldc + 16 * j), *v);
            }
        }
    }

    #[inline(always)]
    unsafe fn gemm_tn<const M: usize, const CB: usize>(a: *const f32, lda: usize, rows: usize, b: *const f32, ldb: usize, n: usize, nt: usize, c: *mut f32) {
        for j in (0..n).step_by(16 * CB) {
            let mut r = 0;
            while r + M <= rows {
                gemm_tn_block::<M, CB>(a.add(r), lda, b.add(j), ldb, nt, c.add(r * n + j), n);
                r += M;
            }
            while r < rows {
                gemm_tn_block::<1, CB>(a.add(r), lda, b.add(j), ldb, nt, c.add(r * n + j), n);
                r += 1;
            }
        }
    }

    /// `[64][k]` Winograd-domain weight gradients back to `[27][k]`, added
    /// into `gw` (`G^T` along each axis).
    fn winograd_weights_adjoint(p: &[f32], k: usize, gw: &mut [f32]) {
        fn along(src: &[f32], n: [usize; 3], axis: usize, k: usize) -> Vec<f32> {
            let mut m = n;
            m[axis] = 3;
            let mut out = vec![0.0f32; m[0] * m[1] * m[2] * k];
            let stride = |d: [usize; 3], i: [usize; 3]| ((i[0] * d[1] + i[1]) * d[2] + i[2]) * k;
            for i0 in 0..m[0] {
                for i1 in 0..m[1] {
                    for i2 in 0..m[2] {
                        let o = [i0, i1, i2];
                        let at = |t: usize| {
                            let mut i = o;
                            i[axis] = t;
                            &src[stride(n, i)..][..k]
                        };
                        let dst = &mut out[stride(m, o)..][..k];
                        let (e0, e1, e2, e3) = (at(0), at(1), at(2), at(3));
                        for (q, d) in dst.iter_mut().enumerate() {
                            *d = match o[axis] {
                                0 => e0[q] + 0.5 * (e1[q] + e2[q]),
                                1 => 0.5 * (e1[q] - e2[q]),
                                _ => e3[q] + 0.5 * (e1[q] + e2[q]),
                            };
                        }
                    }
                }
            }
            out
        }
        let a = along(p, [4, 4, 4], 2, k);
        let b = along(&a, [4, 4, 3], 1, k);
        for (g, v) in gw.iter_mut().zip(along(&b, [4, 3, 3], 0, k)) {
            *g += v;
        }
    }

    /// Weight gradient by Winograd F(2x2x2, 3x3x3); same preconditions as
    /// [`conv_valid_winograd`].
    #[target_feature(enable = "avx512f")]
    pub unsafe fn conv_wgrad_winograd(pad: &[f32], pd: [usize; 3], cin: usize, gout: &[f32], cout: usize, gw: &mut [f32]) {
        debug_assert!(winograd_fits(pd, cin, cout));
        let od = [pd[0] - 2, pd[1] - 2, pd[2] - 2];
        let nt = [od[0] / 2, od[1] / 2, od[2] / 2];
        let total = nt[0] * nt[1] * nt[2];
        let tb = (1024 / cin.max(cout)).clamp(8, 64).min(total);
        let (su, sg) = (64 * cin + 16, 64 * cout + 16);
        let mut u = vec![0.0f32; tb * su];
        let mut g = vec![0.0f32; tb * sg];
        let mut acc = vec![0.0f32; 64 * cin * cout];
        let (row, plane) = (pd[2] * cin, pd[1] * pd[2] * cin);
        let (orow, oplane) = (od[2] * cout, od[1] * od[2] * cout);
        let (p, gp, up, vp, ap) = (pad.as_ptr(), gout.as_ptr(), u.as_mut_ptr(), g.as_mut_ptr(), acc.as_mut_ptr());
        let tile = |t: usize| [t / (nt[1] * nt[2]), t / nt[2] % nt[1], t % nt[2]];
        for t0 in (0..total).step_by(tb) {
            let n = tb.min(total - t0);
            for tt in 0..n {
                let [ti, tj, tk] = tile(t0 + tt);
                let base = p.add(2 * ti * plane + 2 * tj * row + 2 * tk * cin);
                for c0 in (0..cin).step_by(16) {
                    input_tile(base.add(c0), plane, row, cin, up.add(tt * su + c0), cin);
                }
                let gbase = gp.add(2 * ti * oplane + 2 * tj * orow + 2 * tk * cout);
                for c0 in (0..cout).step_by(16) {
                    gout_tile(gbase.add(c0), oplane, orow, cout, vp.add(tt * sg + c0), cout);
                }
            }
            for xi in 0..64 {
                let (a, b, c) = (up.add(xi * cin), vp.add(xi * cout), ap.add(xi * cin * cout));
                if cout % 64 == 0 {
                    gemm_tn::<4, 4>(a, su, cin, b, sg, cout, n, c);
                } else if cout % 32 == 0 {
                    gemm_tn::<8, 2>(a, su, cin, b, sg, cout, n, c);
                } else {
                    gemm_tn::<16, 1>(a, su, cin, b, sg, cout, n, c);
                }
            }
        }
        winograd_weights_adjoint(&acc, cin * cout, gw);
    }
}
