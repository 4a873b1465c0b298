//! Slice-level compute kernels used by the graph ops.

use alloc::vec;
use alloc::vec::Vec;

use crate::graph::PadMode;

/// `c = a' * b' + beta * c` for row-major operands, where `a'` is `a` or its
/// transpose (`m x k` after transposition) and likewise `b'` (`k x n`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above bounds every index the kernel touches:
    // a(i, p) lives at i*rsa + p*csa < m*k, b(p, j) at p*rsb + j*csb < k*n and
    // c(i, j) at i*n + j < m*n. `c` is exclusively borrowed.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Source index along one axis for padded position `i` (which may be
/// negative or past the end), or `None` when it falls on a zero pad.
#[inline]
pub(crate) fn pad_index(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    let n = n as isize;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            let r = if i < 0 { -i } else { 2 * (n - 1) - i };
            debug_assert!((0..n).contains(&r));
            Some(r as usize)
        }
    }
}

/// Geometry of one 2-D convolution over a single image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
    pub ho: usize,
    pub wo: usize,
}

/// Per-axis lookup: for kernel offset `k` and output coordinate `o`, the source
/// index (or `usize::MAX` for a zero pad).
fn axis_map(k: usize, out: usize, n: usize, stride: usize, pad: usize, mode: PadMode) -> Vec<usize> {
    let mut map = vec![usize::MAX; k * out];
    for ki in 0..k {
        for o in 0..out {
            let i = (o * stride + ki) as isize - pad as isize;
            if let Some(s) = pad_index(i, n, mode) {
                map[ki * out + o] = s;
            }
        }
    }
    map
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_len(&self) -> usize {
        self.ho * self.wo
    }

    fn maps(&self) -> (Vec<usize>, Vec<usize>) {
        (
            axis_map(self.kh, self.ho, self.h, self.stride, self.pad, self.mode),
            axis_map(self.kw, self.wo, self.w, self.stride, self.pad, self.mode),
        )
    }

    /// Unfolds one image `[c, h, w]` into `cols[c*kh*kw, ho*wo]`.
    pub fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (ymap, xmap) = self.maps();
        let l = self.col_len();
        let mut row = 0;
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let xm = &xmap[kj * self.wo..(kj + 1) * self.wo];
                    let dst_row = &mut cols[row * l..(row + 1) * l];
                    for oy in 0..self.ho {
                        let dst = &mut dst_row[oy * self.wo..(oy + 1) * self.wo];
                        let sy = ymap[ki * self.ho + oy];
                        if sy == usize::MAX {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &plane[sy * self.w..(sy + 1) * self.w];
                        for (d, &sx) in dst.iter_mut().zip(xm) {
                            *d = if sx == usize::MAX { 0.0 } else { src[sx] };
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates `cols` into `dx`.
    pub fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let (ymap, xmap) = self.maps();
        let l = self.col_len();
        let mut row = 0;
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let xm = &xmap[kj * self.wo..(kj + 1) * self.wo];
                    let src_row = &cols[row * l..(row + 1) * l];
                    for oy in 0..self.ho {
                        let sy = ymap[ki * self.ho + oy];
                        if sy == usize::MAX {
                            continue;
                        }
                        let src = &src_row[oy * self.wo..(oy + 1) * self.wo];
                        let dst = &mut plane[sy * self.w..(sy + 1) * self.w];
                        for (&g, &sx) in src.iter().zip(xm) {
                            if sx != usize::MAX {
                                dst[sx] += g;
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Source taps for 2x bilinear upsampling along an axis of length `n`:
/// `(i0, i1, frac)` per output coordinate, using half-pixel centers clamped
/// to the valid range.
pub(crate) fn up2_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = (o as f64 + 0.5) / 2.0 - 0.5;
            let src = src.clamp(0.0, (n - 1) as f64);
            let i0 = libm::floor(src) as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// 2x bilinear upsampling of one `h x w` plane into `out` (`2h x 2w`).
pub(crate) fn up2_plane(
    src: &[f64],
    h: usize,
    w: usize,
    ty: &[(usize, usize, f64)],
    tx: &[(usize, usize, f64)],
    tmp: &mut [f64],
    out: &mut [f64],
) {
    // rows first: tmp is h x 2w
    for y in 0..h {
        let s = &src[y * w..(y + 1) * w];
        let d = &mut tmp[y * 2 * w..(y + 1) * 2 * w];
        for (o, &(i0, i1, f)) in tx.iter().enumerate() {
            d[o] = s[i0] * (1.0 - f) + s[i1] * f;
        }
    }
    let w2 = 2 * w;
    for (o, &(i0, i1, f)) in ty.iter().enumerate() {
        let (a, b) = (&tmp[i0 * w2..(i0 + 1) * w2], &tmp[i1 * w2..(i1 + 1) * w2]);
        let d = &mut out[o * w2..(o + 1) * w2];
        for x in 0..w2 {
            d[x] = a[x] * (1.0 - f) + b[x] * f;
        }
    }
}

/// Transpose of [`up2_plane`]: accumulates `gout` (`2h x 2w`) into `gsrc`.
pub(crate) fn up2_plane_adjoint(
    gout: &[f64],
    h: usize,
    w: usize,
    ty: &[(usize, usize, f64)],
    tx: &[(usize, usize, f64)],
    tmp: &mut [f64],
    gsrc: &mut [f64],
) {
    let w2 = 2 * w;
    tmp[..h * w2].fill(0.0);
    for (o, &(i0, i1, f)) in ty.iter().enumerate() {
        let g = &gout[o * w2..(o + 1) * w2];
        for x in 0..w2 {
            tmp[i0 * w2 + x] += g[x] * (1.0 - f);
            tmp[i1 * w2 + x] += g[x] * f;
        }
    }
    for y in 0..h {
        let t = &tmp[y * w2..(y + 1) * w2];
        let d = &mut gsrc[y * w..(y + 1) * w];
        for (o, &(i0, i1, f)) in tx.iter().enumerate() {
            d[i0] += t[o] * (1.0 - f);
            d[i1] += t[o] * f;
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}
