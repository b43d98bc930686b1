use std::sync::Arc;

use crate::element::Element;
use crate::error::{hyper, mismatch, Result, TensorError};
use crate::tape::record;
use crate::tensor::{numel, Tensor};

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data<T: Element>(data: &[T], shape: &[usize], axes: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return out;
    }
    if rank == 0 {
        out.extend_from_slice(data);
        return out;
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    while out.len() < total {
        for j in 0..inner {
            out.push(data[off + j * inner_stride]);
        }
        let mut ax = rank - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

impl<T: Element> Tensor<T> {
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor<T>> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(mismatch("reshape", self.shape(), &shape));
        }
        Ok(record(&[self], shape, self.data_arc(), |g, _| vec![Some(g.to_vec())]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = self.ndim();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(hyper("permute", format!("{axes:?} is not a permutation of {rank} axes")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_data(self.data(), self.shape(), axes);
        let mut inverse = vec![0; rank];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let grad_shape = out_shape.clone();
        Ok(record(&[self], out_shape, Arc::new(data), move |g, _| {
            vec![Some(permute_data(g, &grad_shape, &inverse))]
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor<T>> {
        let rank = self.ndim();
        if rank < 2 {
            return Err(hyper("transpose_last", "needs at least 2 axes"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(&axes)
    }

    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| hyper("concat", "no inputs"))?;
        let rank = first.ndim();
        if axis >= rank {
            return Err(hyper("concat", format!("axis {axis} out of range for rank {rank}")));
        }
        for p in parts {
            let ok = p.ndim() == rank
                && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
            if !ok {
                return Err(mismatch("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        Ok(record(parts, out_shape, Arc::new(data), move |g, needs| {
            let mut offset = 0;
            lens.iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let start = offset;
                    offset += len;
                    need.then(|| {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        gp
                    })
                })
                .collect()
        }))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() || start + len > self.shape()[axis] {
            return Err(hyper(
                "narrow",
                format!("[{start}, {}) along axis {axis} of {:?}", start + len, self.shape()),
            ));
        }
        let extent = self.shape()[axis];
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let n_in = self.numel();
        Ok(record(&[self], out_shape, Arc::new(data), move |g, _| {
            let mut gx = vec![T::zero(); n_in];
            for o in 0..outer {
                let base = (o * extent + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        }))
    }

    /// Mirror padding along `axis` that excludes the edge sample:
    /// `[1, 2, 3]` padded by one on each side is `[2, 1, 2, 3, 2]`.
    pub fn pad_reflect(&self, axis: usize, before: usize, after: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(hyper("pad_reflect", format!("axis {axis} out of range")));
        }
        let extent = self.shape()[axis];
        if before >= extent.max(1) || after >= extent.max(1) {
            return Err(TensorError::InvalidHyperparam {
                op: "pad_reflect",
                msg: format!("padding ({before}, {after}) must be smaller than extent {extent}"),
            });
        }
        let outer: usize = self.shape()[..axis].iter().product();
        let inner: usize = self.shape()[axis + 1..].iter().product();
        let out_len = extent + before + after;
        let src: Vec<usize> = (0..out_len)
            .map(|j| reflect(j as isize - before as isize, extent))
            .collect();
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = out_len;
        let x = self.data();
        let mut data = Vec::with_capacity(outer * out_len * inner);
        for o in 0..outer {
            for &s in &src {
                let base = (o * extent + s) * inner;
                data.extend_from_slice(&x[base..base + inner]);
            }
        }
        let n_in = self.numel();
        Ok(record(&[self], out_shape, Arc::new(data), move |g, _| {
            let mut gx = vec![T::zero(); n_in];
            for o in 0..outer {
                for (j, &s) in src.iter().enumerate() {
                    let dst = (o * extent + s) * inner;
                    let from = (o * out_len + j) * inner;
                    for k in 0..inner {
                        gx[dst + k] = gx[dst + k] + g[from + k];
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// `[n, c·r², h, w] -> [n, c, h·r, w·r]` with
    /// `out[n, c, h·r+i, w·r+j] = in[n, c·r² + i·r + j, h, w]`.
    pub fn pixel_shuffle(&self, r: usize) -> Result<Tensor<T>> {
        let &[n, c, h, w] = self.shape() else {
            return Err(mismatch("pixel_shuffle", self.shape(), &[0, 0, 0, 0]));
        };
        if r == 0 || c % (r * r) != 0 {
            return Err(TensorError::NotDivisible {
                op: "pixel_shuffle",
                extent: c,
                by: r * r,
            });
        }
        let co = c / (r * r);
        self.reshape([n, co, r, r, h, w])?
            .permute(&[0, 1, 4, 2, 5, 3])?
            .reshape([n, co, h * r, w * r])
    }

    /// Inverse of [`Tensor::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, r: usize) -> Result<Tensor<T>> {
        let &[n, c, h, w] = self.shape() else {
            return Err(mismatch("pixel_unshuffle", self.shape(), &[0, 0, 0, 0]));
        };
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(TensorError::NotDivisible {
                op: "pixel_unshuffle",
                extent: if r == 0 || h % r != 0 { h } else { w },
                by: r,
            });
        }
        self.reshape([n, c, h / r, r, w / r, r])?
            .permute(&[0, 1, 3, 5, 2, 4])?
            .reshape([n, c * r * r, h / r, w / r])
    }
}
