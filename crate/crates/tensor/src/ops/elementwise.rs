use std::sync::Arc;

use crate::element::Element;
use crate::error::{mismatch, Result};
use crate::tape::record;
use crate::tensor::{numel, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

/// Numpy-style broadcast of two shapes (right-aligned, extent 1 stretches).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` expressed over `out` indices; broadcast axes get 0.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output index with the matching offsets into both operands.
fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        for j in 0..inner {
            f(o + j, oa + j * ia, ob + j * ib);
        }
        o += inner;
        // odometer over the outer axes
        let mut ax = rank - 1;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `g` (shaped like `out`) down to `shape`.
fn reduce_to<T: Element>(g: &[T], out: &[usize], shape: &[usize]) -> Vec<T> {
    if out == shape {
        return g.to_vec();
    }
    let s = broadcast_strides(shape, out);
    let zero = vec![0; out.len()];
    let mut acc = vec![T::zero(); numel(shape)];
    for_each_pair(out, &s, &zero, |o, i, _| acc[i] = acc[i] + g[o]);
    acc
}

fn binary<T: Element>(a: &Tensor<T>, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
    let name = match op {
        BinaryOp::Add => "add",
        BinaryOp::Sub => "sub",
        BinaryOp::Mul => "mul",
    };
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| mismatch(name, a.shape(), b.shape()))?;
    let (ad, bd) = (a.data_arc(), b.data_arc());
    let f = |x: T, y: T| match op {
        BinaryOp::Add => x + y,
        BinaryOp::Sub => x - y,
        BinaryOp::Mul => x * y,
    };
    let data: Vec<T> = if a.shape() == b.shape() {
        ad.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)).collect()
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        let mut data = vec![T::zero(); numel(&out_shape)];
        for_each_pair(&out_shape, &sa, &sb, |o, i, j| data[o] = f(ad[i], bd[j]));
        data
    };
    let (a_shape, b_shape, os) = (a.shape().to_vec(), b.shape().to_vec(), out_shape.clone());
    Ok(record(&[a, b], out_shape, Arc::new(data), move |g, needs| {
        let ga = needs[0].then(|| match op {
            BinaryOp::Add | BinaryOp::Sub => reduce_to(g, &os, &a_shape),
            BinaryOp::Mul => {
                let sb = broadcast_strides(&b_shape, &os);
                let zero = vec![0; os.len()];
                let mut prod = vec![T::zero(); g.len()];
                for_each_pair(&os, &sb, &zero, |o, j, _| prod[o] = g[o] * bd[j]);
                reduce_to(&prod, &os, &a_shape)
            }
        });
        let gb = needs[1].then(|| match op {
            BinaryOp::Add => reduce_to(g, &os, &b_shape),
            BinaryOp::Sub => {
                let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                reduce_to(&neg, &os, &b_shape)
            }
            BinaryOp::Mul => {
                let sa = broadcast_strides(&a_shape, &os);
                let zero = vec![0; os.len()];
                let mut prod = vec![T::zero(); g.len()];
                for_each_pair(&os, &sa, &zero, |o, i, _| prod[o] = g[o] * ad[i]);
                reduce_to(&prod, &os, &b_shape)
            }
        });
        vec![ga, gb]
    }))
}

impl<T: Element> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        binary(self, other, BinaryOp::Mul)
    }

    pub fn binary(&self, other: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
        binary(self, other, op)
    }

    pub fn scale(&self, s: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v * s).collect();
        record(&[self], self.shape().to_vec(), Arc::new(data), move |g, _| {
            vec![Some(g.iter().map(|&v| v * s).collect())]
        })
    }

    pub fn add_scalar(&self, s: T) -> Tensor<T> {
        let data = self.data().iter().map(|&v| v + s).collect();
        record(&[self], self.shape().to_vec(), Arc::new(data), |g, _| vec![Some(g.to_vec())])
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }
}
