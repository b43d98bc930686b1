//! Dense inner loops shared by matmul and conv2d. All accumulate into `c`.

use crate::element::Element;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot = arow
                .iter()
                .zip(brow)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
            c[i * n + j] = c[i * n + j] + dot;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Element>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Geometry of a 2D sliding window over one image plane.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    /// Output columns `ow` for which `ow*stride + kx*dilation - padding` lands
    /// inside `[0, w)`.
    #[inline]
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let off = (kx * self.dilation) as isize - self.padding as isize;
        let lo = if off >= 0 {
            0
        } else {
            ((-off) as usize).div_ceil(self.stride)
        };
        let lim = self.w as isize - off;
        let hi = if lim <= 0 {
            0
        } else {
            ((lim as usize - 1) / self.stride + 1).min(self.out_w)
        };
        (lo, hi.max(lo))
    }

    #[inline]
    fn src_row(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky * self.dilation) as isize - self.padding as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }
}

/// Unfolds `channels` planes of `x` into a `[channels·kh·kw, out_h·out_w]`
/// column matrix (zero padding).
pub(crate) fn im2col<T: Element>(x: &[T], channels: usize, win: &Window, col: &mut [T]) {
    let plane = win.h * win.w;
    let l = win.out_h * win.out_w;
    debug_assert_eq!(col.len(), channels * win.kh * win.kw * l);
    col.iter_mut().for_each(|v| *v = T::zero());
    for c in 0..channels {
        let xp = &x[c * plane..(c + 1) * plane];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = ((c * win.kh + ky) * win.kw + kx) * l;
                let (lo, hi) = win.valid_cols(kx);
                let x_off = (kx * win.dilation) as isize - win.padding as isize;
                for oy in 0..win.out_h {
                    let Some(iy) = win.src_row(oy, ky) else {
                        continue;
                    };
                    let dst = &mut col[row + oy * win.out_w..row + (oy + 1) * win.out_w];
                    let src = &xp[iy * win.w..(iy + 1) * win.w];
                    for ox in lo..hi {
                        dst[ox] = src[(ox as isize * win.stride as isize + x_off) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto image planes.
pub(crate) fn col2im<T: Element>(col: &[T], channels: usize, win: &Window, x: &mut [T]) {
    let plane = win.h * win.w;
    let l = win.out_h * win.out_w;
    for c in 0..channels {
        let xp = &mut x[c * plane..(c + 1) * plane];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = ((c * win.kh + ky) * win.kw + kx) * l;
                let (lo, hi) = win.valid_cols(kx);
                let x_off = (kx * win.dilation) as isize - win.padding as isize;
                for oy in 0..win.out_h {
                    let Some(iy) = win.src_row(oy, ky) else {
                        continue;
                    };
                    let src = &col[row + oy * win.out_w..row + (oy + 1) * win.out_w];
                    let dst = &mut xp[iy * win.w..(iy + 1) * win.w];
                    for ox in lo..hi {
                        let ix = (ox as isize * win.stride as isize + x_off) as usize;
                        dst[ix] = dst[ix] + src[ox];
                    }
                }
            }
        }
    }
}
