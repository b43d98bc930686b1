use std::sync::Arc;

use crate::element::Element;
use crate::error::{hyper, mismatch, Result};
use crate::tape::record;
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Splits `shape` around `axis` into (outer, extent, inner) counts.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Element> Tensor<T> {
    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.ndim() {
            return Err(hyper("softmax", format!("axis {axis} out of range for {:?}", self.shape())));
        }
        let (outer, len, inner) = around_axis(self.shape(), axis);
        let x = self.data();
        let mut y = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(x[at(j)]));
                let mut total = T::zero();
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    y[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    y[at(j)] = y[at(j)] / total;
                }
            }
        }
        let y = Arc::new(y);
        let saved = Arc::clone(&y);
        Ok(record(&[self], self.shape().to_vec(), y, move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * len + j) * inner + i;
                    let dot = (0..len).fold(T::zero(), |acc, j| acc + g[at(j)] * saved[at(j)]);
                    for j in 0..len {
                        gx[at(j)] = saved[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }
}

/// Normalizes each token over its last axis (biased variance), then applies
/// `gamma`/`beta`.
pub fn layer_norm<T: Element>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = *x.shape().last().ok_or_else(|| mismatch("layer_norm", x.shape(), gamma.shape()))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(mismatch("layer_norm", x.shape(), gamma.shape()));
    }
    let tokens = x.numel() / d.max(1);
    let inv_d = T::one() / T::from_usize(d).expect("d fits");
    let (xd, gd, bd) = (x.data(), gamma.data_arc(), beta.data());
    let mut xhat = vec![T::zero(); xd.len()];
    let mut rstd = vec![T::zero(); tokens];
    let mut y = vec![T::zero(); xd.len()];
    for t in 0..tokens {
        let row = &xd[t * d..(t + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let r = T::one() / (var + eps).sqrt();
        rstd[t] = r;
        for j in 0..d {
            let h = (row[j] - mean) * r;
            xhat[t * d + j] = h;
            y[t * d + j] = h * gd[j] + bd[j];
        }
    }
    let xhat = Arc::new(xhat);
    Ok(record(&[x, gamma, beta], x.shape().to_vec(), Arc::new(y), move |g, needs| {
        let gx = needs[0].then(|| {
            let mut gx = vec![T::zero(); g.len()];
            for t in 0..tokens {
                let (gr, hr) = (&g[t * d..(t + 1) * d], &xhat[t * d..(t + 1) * d]);
                let mut mean_dh = T::zero();
                let mut mean_dh_h = T::zero();
                for j in 0..d {
                    let dh = gr[j] * gd[j];
                    mean_dh = mean_dh + dh;
                    mean_dh_h = mean_dh_h + dh * hr[j];
                }
                mean_dh = mean_dh * inv_d;
                mean_dh_h = mean_dh_h * inv_d;
                for j in 0..d {
                    let dh = gr[j] * gd[j];
                    gx[t * d + j] = rstd[t] * (dh - mean_dh - hr[j] * mean_dh_h);
                }
            }
            gx
        });
        let ggamma = needs[1].then(|| {
            let mut acc = vec![T::zero(); d];
            for t in 0..tokens {
                for j in 0..d {
                    acc[j] = acc[j] + g[t * d + j] * xhat[t * d + j];
                }
            }
            acc
        });
        let gbeta = needs[2].then(|| {
            let mut acc = vec![T::zero(); d];
            for row in g.chunks(d) {
                acc.iter_mut().zip(row).for_each(|(a, &v)| *a = *a + v);
            }
            acc
        });
        vec![gx, ggamma, gbeta]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_input_gives_uniform_output() {
        let y = Tensor::<f64>::full([2, 5], 3.0).softmax(1).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn closed_form_two_way() {
        let y = Tensor::<f64>::new([2], vec![0.0, 2f64.ln()]).unwrap().softmax(0).unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn middle_axis_normalizes() {
        let x = Tensor::<f32>::from_fn([2, 3, 4], |i| ((i * 37) % 11) as f32 - 5.0);
        let y = x.softmax(1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let s: f32 = (0..3).map(|j| y.data()[(o * 3 + j) * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn large_logits_are_stable() {
        let y = Tensor::<f32>::new([3], vec![1000.0, 1000.0, -1000.0]).unwrap().softmax(0).unwrap();
        assert!(y.all_finite());
        assert!((y.data()[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn constant_token_normalizes_to_zero() {
        let x = Tensor::<f32>::full([3, 8], 4.2);
        let y = layer_norm(&x, &Tensor::ones([8]), &Tensor::zeros([8]), 1e-5).unwrap();
        // the f32 running mean of 4.2 is off by an ulp; eps keeps the result tiny
        assert!(y.data().iter().all(|&v| v.abs() < 1e-3), "{:?}", y.data());
        let exact = Tensor::<f32>::full([2, 8], 0.5);
        let y = layer_norm(&exact, &Tensor::ones([8]), &Tensor::zeros([8]), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn beta_sets_token_mean() {
        let x = Tensor::<f64>::from_fn([4, 6], |i| ((i * 13) % 7) as f64);
        let gamma = Tensor::full([6], 2.5);
        let beta = Tensor::full([6], -0.75);
        let y = layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        for row in y.data().chunks(6) {
            let mean = row.iter().sum::<f64>() / 6.0;
            assert!((mean + 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_affine_shape() {
        let x = Tensor::<f32>::zeros([2, 4]);
        assert!(layer_norm(&x, &Tensor::ones([3]), &Tensor::zeros([3]), 1e-5).is_err());
    }
}
