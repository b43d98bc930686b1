use std::sync::Arc;

use rayon::prelude::*;

use crate::element::Element;
use crate::error::{hyper, mismatch, Result};
use crate::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, Window};
use crate::tape::record;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dOptions {
    /// Stride 1 with the padding that preserves spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            padding: dilation * (kernel - 1) / 2,
            dilation,
            ..Self::default()
        }
    }
}

/// 2D cross-correlation with zero padding.
///
/// `x: [n, c_in, h, w]`, `weight: [c_out, c_in/groups, kh, kw]`,
/// `bias: [c_out]`.
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    opts: Conv2dOptions,
) -> Result<Tensor<T>> {
    let Conv2dOptions {
        stride,
        padding,
        dilation,
        groups,
    } = opts;
    if stride < 1 || dilation < 1 || groups < 1 {
        return Err(hyper("conv2d", format!("stride/dilation/groups must be >= 1, got {opts:?}")));
    }
    let &[n, c_in, h, w] = x.shape() else {
        return Err(mismatch("conv2d", x.shape(), weight.shape()));
    };
    let &[c_out, cin_g, kh, kw] = weight.shape() else {
        return Err(mismatch("conv2d", x.shape(), weight.shape()));
    };
    if c_in % groups != 0 || c_out % groups != 0 || cin_g * groups != c_in {
        return Err(mismatch("conv2d", x.shape(), weight.shape()));
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(mismatch("conv2d bias", b.shape(), &[c_out]));
        }
    }
    let span_h = dilation * (kh - 1) + 1;
    let span_w = dilation * (kw - 1) + 1;
    if h + 2 * padding < span_h || w + 2 * padding < span_w {
        return Err(mismatch("conv2d", x.shape(), weight.shape()));
    }
    let win = Window {
        h,
        w,
        kh,
        kw,
        stride,
        padding,
        dilation,
        out_h: (h + 2 * padding - span_h) / stride + 1,
        out_w: (w + 2 * padding - span_w) / stride + 1,
    };
    let cout_g = c_out / groups;
    let kk = cin_g * kh * kw;
    let l = win.out_h * win.out_w;
    let in_sample = c_in * h * w;
    let out_sample = c_out * l;

    let xd = x.data_arc();
    let wd = weight.data_arc();
    let bd = bias.map(|b| b.data_arc());

    let mut out = vec![T::zero(); n * out_sample];
    out.par_chunks_mut(out_sample)
        .zip(xd.par_chunks(in_sample))
        .for_each(|(y, xs)| {
            let mut col = vec![T::zero(); kk * l];
            for g in 0..groups {
                im2col(&xs[g * cin_g * h * w..(g + 1) * cin_g * h * w], cin_g, &win, &mut col);
                let wg = &wd[g * cout_g * kk..(g + 1) * cout_g * kk];
                gemm_nn(cout_g, kk, l, wg, &col, &mut y[g * cout_g * l..(g + 1) * cout_g * l]);
            }
            if let Some(b) = &bd {
                for (co, plane) in y.chunks_mut(l).enumerate() {
                    plane.iter_mut().for_each(|v| *v = *v + b[co]);
                }
            }
        });

    let inputs: Vec<&Tensor<T>> = match bias {
        Some(b) => vec![x, weight, b],
        None => vec![x, weight],
    };
    let has_bias = bias.is_some();
    let w_len = weight.numel();
    Ok(record(&inputs, vec![n, c_out, win.out_h, win.out_w], Arc::new(out), move |gy, needs| {
        let gx = needs[0].then(|| {
            let mut gx = vec![T::zero(); n * in_sample];
            gx.par_chunks_mut(in_sample)
                .zip(gy.par_chunks(out_sample))
                .for_each(|(gx, gy)| {
                    let mut col = vec![T::zero(); kk * l];
                    for g in 0..groups {
                        col.iter_mut().for_each(|v| *v = T::zero());
                        let wg = &wd[g * cout_g * kk..(g + 1) * cout_g * kk];
                        gemm_tn(kk, cout_g, l, wg, &gy[g * cout_g * l..(g + 1) * cout_g * l], &mut col);
                        col2im(&col, cin_g, &win, &mut gx[g * cin_g * h * w..(g + 1) * cin_g * h * w]);
                    }
                });
            gx
        });
        let gw = needs[1].then(|| {
            // per-sample partials reduced in sample order keep the sum deterministic
            let partials: Vec<Vec<T>> = xd
                .par_chunks(in_sample)
                .zip(gy.par_chunks(out_sample))
                .map(|(xs, gy)| {
                    let mut gw = vec![T::zero(); w_len];
                    let mut col = vec![T::zero(); kk * l];
                    for g in 0..groups {
                        im2col(&xs[g * cin_g * h * w..(g + 1) * cin_g * h * w], cin_g, &win, &mut col);
                        gemm_nt(
                            cout_g,
                            l,
                            kk,
                            &gy[g * cout_g * l..(g + 1) * cout_g * l],
                            &col,
                            &mut gw[g * cout_g * kk..(g + 1) * cout_g * kk],
                        );
                    }
                    gw
                })
                .collect();
            let mut gw = vec![T::zero(); w_len];
            for p in partials {
                gw.iter_mut().zip(&p).for_each(|(a, b)| *a = *a + *b);
            }
            gw
        });
        let mut grads = vec![gx, gw];
        if has_bias {
            grads.push(needs[2].then(|| {
                let mut gb = vec![T::zero(); c_out];
                for sample in gy.chunks(out_sample) {
                    for (co, plane) in sample.chunks(l).enumerate() {
                        gb[co] = gb[co] + plane.iter().copied().sum::<T>();
                    }
                }
                gb
            }));
        }
        grads
    }))
}
