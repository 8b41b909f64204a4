//! Direct stride-1 `f32` convolution kernels for x86-64 with AVX2 and FMA.
//!
//! Both entry points return `false` when the kernels cannot run on this
//! machine; callers then use the im2col/GEMM path.

/// `out[co][y][x] = sum w[co][ci][ky][kx] * inp[ci][y + ky][x + kx]` for a
/// `cin x ph x pw` input and `(ph - kh + 1) x (pw - kw + 1)` output planes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate(
    inp: &[f32],
    cin: usize,
    ph: usize,
    pw: usize,
    w: &[f32],
    cout: usize,
    kernel: (usize, usize),
    out: &mut [f32],
) -> bool {
    let (kh, kw) = kernel;
    assert!(ph >= kh && pw >= kw && kh > 0 && kw > 0, "kernel larger than input");
    assert!(inp.len() >= cin * ph * pw, "input too short");
    assert!(w.len() >= cout * cin * kh * kw, "weights too short");
    assert!(out.len() >= cout * (ph - kh + 1) * (pw - kw + 1), "output too short");
    #[cfg(target_arch = "x86_64")]
    {
        if avx2::available() {
            // SAFETY: the CPU supports the enabled features and the slice
            // lengths cover every index the kernel touches (asserted above).
            unsafe { avx2::correlate(inp.as_ptr(), cin, ph, pw, w.as_ptr(), cout, kh, kw, out.as_mut_ptr()) };
            return true;
        }
    }
    false
}

/// `dw[co][ci][ky][kx] = sum dy[co][y][x] * inp[ci][y + ky][x + kx]`,
/// overwriting `dw`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn weight_grad(
    inp: &[f32],
    cin: usize,
    ph: usize,
    pw: usize,
    dy: &[f32],
    cout: usize,
    kernel: (usize, usize),
    dw: &mut [f32],
) -> bool {
    let (kh, kw) = kernel;
    assert!(ph >= kh && pw >= kw && kh > 0 && kw > 0, "kernel larger than input");
    assert!(inp.len() >= cin * ph * pw, "input too short");
    assert!(dy.len() >= cout * (ph - kh + 1) * (pw - kw + 1), "upstream too short");
    assert!(dw.len() >= cout * cin * kh * kw, "weight gradient too short");
    #[cfg(target_arch = "x86_64")]
    {
        if avx2::available() {
            // SAFETY: as in `correlate`.
            unsafe { avx2::weight_grad(inp.as_ptr(), cin, ph, pw, dy.as_ptr(), cout, kh, kw, dw.as_mut_ptr()) };
            return true;
        }
    }
    false
}

#[cfg(target_arch = "x86_64")]
mod avx2 {
    use std::arch::x86_64::*;
    use std::sync::OnceLock;

    pub(super) fn available() -> bool {
        static DETECTED: OnceLock<bool> = OnceLock::new();
        *DETECTED.get_or_init(|| is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma"))
    }

    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn correlate(
        inp: *const f32,
        cin: usize,
        ph: usize,
        pw: usize,
        w: *const f32,
        cout: usize,
        kh: usize,
        kw: usize,
        out: *mut f32,
    ) {
        let g = Geometry::new(cin, ph, pw, kh, kw);
        let mut co = 0;
        while co < cout {
            let n = (cout - co).min(4);
            match n {
                4 => correlate_rows::<4>(inp, w, out, &g, co),
                3 => correlate_rows::<3>(inp, w, out, &g, co),
                2 => correlate_rows::<2>(inp, w, out, &g, co),
                _ => correlate_rows::<1>(inp, w, out, &g, co),
            }
            co += n;
        }
    }

    struct Geometry {
        cin: usize,
        ph: usize,
        pw: usize,
        kh: usize,
        kw: usize,
        oh: usize,
        ow: usize,
    }

    impl Geometry {
        fn new(cin: usize, ph: usize, pw: usize, kh: usize, kw: usize) -> Self {
            Geometry {
                cin,
                ph,
                pw,
                kh,
                kw,
                oh: ph - kh + 1,
                ow: pw - kw + 1,
            }
        }

        fn patch(&self) -> usize {
            self.cin * self.kh * self.kw
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn correlate_rows<const C: usize>(inp: *const f32, w: *const f32, out: *mut f32, g: &Geometry, co: usize) {
        for oy in 0..g.oh {
            let mut ox = 0;
            while ox + 24 <= g.ow {
                correlate_tile::<C, 3>(inp, w, out, g, co, oy, ox);
                ox += 24;
            }
            while ox + 8 <= g.ow {
                correlate_tile::<C, 1>(inp, w, out, g, co, oy, ox);
                ox += 8;
            }
            if ox < g.ow && g.ow >= 8 {
                // Overlapping last tile; recomputed pixels get identical values.
                correlate_tile::<C, 1>(inp, w, out, g, co, oy, g.ow - 8);
                ox = g.ow;
            }
            for x in ox..g.ow {
                for c in 0..C {
                    let wc = w.add((co + c) * g.patch());
                    let mut acc = 0.0f32;
                    for ci in 0..g.cin {
                        for ky in 0..g.kh {
                            let row = inp.add(ci * g.ph * g.pw + (oy + ky) * g.pw + x);
                            let wr = wc.add((ci * g.kh + ky) * g.kw);
                            for kx in 0..g.kw {
                                acc += *wr.add(kx) * *row.add(kx);
                            }
                        }
                    }
                    *out.add((co + c) * g.oh * g.ow + oy * g.ow + x) = acc;
                }
            }
        }
    }

    /// `C` output channels by `8 * V` pixels held in registers.
    #[inline]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn correlate_tile<const C: usize, const V: usize>(
        inp: *const f32,
        w: *const f32,
        out: *mut f32,
        g: &Geometry,
        co: usize,
        oy: usize,
        ox: usize,
    ) {
        let patch = g.patch();
        let mut acc = [[_mm256_setzero_ps(); V]; C];
        for ci in 0..g.cin {
            for ky in 0..g.kh {
                let row = inp.add(ci * g.ph * g.pw + (oy + ky) * g.pw + ox);
                let wr = w.add(co * patch + (ci * g.kh + ky) * g.kw);
                for kx in 0..g.kw {
                    let mut x = [_mm256_setzero_ps(); V];
                    for (v, xv) in x.iter_mut().enumerate() {
                        *xv = _mm256_loadu_ps(row.add(kx + 8 * v));
                    }
                    for (c, acc_c) in acc.iter_mut().enumerate() {
                        let wv = _mm256_broadcast_ss(&*wr.add(c * patch + kx));
                        for v in 0..V {
                            acc_c[v] = _mm256_fmadd_ps(wv, x[v], acc_c[v]);
                        }
                    }
                }
            }
        }
        for (c, acc_c) in acc.iter().enumerate() {
            let dst = out.add((co + c) * g.oh * g.ow + oy * g.ow + ox);
            for (v, a) in acc_c.iter().enumerate() {
                _mm256_storeu_ps(dst.add(8 * v), *a);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    #[target_feature(enable = "avx2,fma")]
    pub(super) unsafe fn weight_grad(
        inp: *const f32,
        cin: usize,
        ph: usize,
        pw: usize,
        dy: *const f32,
        cout: usize,
        kh: usize,
        kw: usize,
        dw: *mut f32,
    ) {
        let g = Geometry::new(cin, ph, pw, kh, kw);
        for ci in 0..cin {
            for ky in 0..kh {
                let mut kx = 0;
                while kx < kw {
                    let nk = (kw - kx).min(3);
                    let mut co = 0;
                    while co < cout {
                        let nc = (cout - co).min(4);
                        macro_rules! block {
                            ($c:literal, $k:literal) => {
                                weight_grad_block::<$c, $k>(inp, dy, dw, &g, co, ci, ky, kx)
                            };
                        }
                        match (nc, nk) {
                            (4, 3) => block!(4, 3),
                            (4, 2) => block!(4, 2),
                            (4, _) => block!(4, 1),
                            (3, 3) => block!(3, 3),
                            (3, 2) => block!(3, 2),
                            (3, _) => block!(3, 1),
                            (2, 3) => block!(2, 3),
                            (2, 2) => block!(2, 2),
                            (2, _) => block!(2, 1),
                            (_, 3) => block!(1, 3),
                            (_, 2) => block!(1, 2),
                            _ => block!(1, 1),
                        }
                        co += nc;
                    }
                    kx += nk;
                }
            }
        }
    }

    #[target_feature(enable = "avx2,fma")]
    unsafe fn hsum(v: __m256) -> f32 {
        let s = _mm_add_ps(_mm256_castps256_ps128(v), _mm256_extractf128_ps::<1>(v));
        let s = _mm_add_ps(s, _mm_movehl_ps(s, s));
        let s = _mm_add_ss(s, _mm_shuffle_ps::<0b01>(s, s));
        _mm_cvtss_f32(s)
    }

    /// `C` output channels by `K` horizontal taps, reduced over all pixels.
    #[allow(clippy::too_many_arguments)]
    #[inline]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn weight_grad_block<const C: usize, const K: usize>(
        inp: *const f32,
        dy: *const f32,
        dw: *mut f32,
        g: &Geometry,
        co: usize,
        ci: usize,
        ky: usize,
        kx: usize,
    ) {
        let plane = g.oh * g.ow;
        let mut acc = [[_mm256_setzero_ps(); K]; C];
        let mut tail = [[0.0f32; K]; C];
        for oy in 0..g.oh {
            let prow = inp.add(ci * g.ph * g.pw + (oy + ky) * g.pw + kx);
            let drow = dy.add(co * plane + oy * g.ow);
            let mut ox = 0;
            while ox + 8 <= g.ow {
                let mut p = [_mm256_setzero_ps(); K];
                for (k, pk) in p.iter_mut().enumerate() {
                    *pk = _mm256_loadu_ps(prow.add(ox + k));
                }
                for (c, acc_c) in acc.iter_mut().enumerate() {
                    let d = _mm256_loadu_ps(drow.add(c * plane + ox));
                    for k in 0..K {
                        acc_c[k] = _mm256_fmadd_ps(d, p[k], acc_c[k]);
                    }
                }
                ox += 8;
            }
            for x in ox..g.ow {
                for (c, tail_c) in tail.iter_mut().enumerate() {
                    let d = *drow.add(c * plane + x);
                    for (k, t) in tail_c.iter_mut().enumerate() {
                        *t += d * *prow.add(x + k);
                    }
                }
            }
        }
        let patch = g.patch();
        for c in 0..C {
            for k in 0..K {
                *dw.add((co + c) * patch + (ci * g.kh + ky) * g.kw + kx + k) = hsum(acc[c][k]) + tail[c][k];
            }
        }
    }
}
