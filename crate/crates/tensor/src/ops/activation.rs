use std::sync::Arc;

use crate::element::Element;
use crate::error::{mismatch, Result};
use crate::tape::record;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
    Sigmoid,
}

fn gelu<T: Element>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let cdf = half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::from_f64_lossy(0.398_942_280_401_432_7);
    cdf + x * pdf
}

fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Element> Tensor<T> {
    pub fn activation(&self, act: Activation) -> Tensor<T> {
        match act {
            Activation::Relu => self.relu(),
            Activation::Gelu => self.gelu(),
            Activation::Sigmoid => self.sigmoid(),
        }
    }

    /// Subgradient at zero is taken as zero.
    pub fn relu(&self) -> Tensor<T> {
        let x = self.data_arc();
        let data = x.iter().map(|&v| v.max(T::zero())).collect();
        record(&[self], self.shape().to_vec(), Arc::new(data), move |g, _| {
            vec![Some(
                g.iter()
                    .zip(x.iter())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            )]
        })
    }

    /// Exact erf form: `x·Φ(x)`.
    pub fn gelu(&self) -> Tensor<T> {
        let x = self.data_arc();
        let data = x.iter().map(|&v| gelu(v)).collect();
        record(&[self], self.shape().to_vec(), Arc::new(data), move |g, _| {
            vec![Some(g.iter().zip(x.iter()).map(|(&g, &v)| g * gelu_grad(v)).collect())]
        })
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let y = Arc::new(self.data().iter().map(|&v| sigmoid(v)).collect::<Vec<_>>());
        let saved = Arc::clone(&y);
        record(&[self], self.shape().to_vec(), y, move |g, _| {
            vec![Some(
                g.iter()
                    .zip(saved.iter())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect(),
            )]
        })
    }

    /// Subgradient at zero is taken as zero.
    pub fn abs(&self) -> Tensor<T> {
        let x = self.data_arc();
        let data = x.iter().map(|v| v.abs()).collect();
        record(&[self], self.shape().to_vec(), Arc::new(data), move |g, _| {
            vec![Some(
                g.iter()
                    .zip(x.iter())
                    .map(|(&g, &v)| {
                        if v > T::zero() {
                            g
                        } else if v < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect(),
            )]
        })
    }

    pub fn sum(&self) -> Tensor<T> {
        let n = self.numel();
        let total = self.data().iter().copied().sum::<T>();
        record(&[self], vec![1], Arc::new(vec![total]), move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = T::from_usize(self.numel()).expect("numel fits");
        self.sum().scale(T::one() / n)
    }

    /// Per-channel spatial mean of an `[n, c, h, w]` map, keeping `[n, c, 1, 1]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let &[n, c, h, w] = self.shape() else {
            return Err(mismatch("global_avg_pool", self.shape(), &[0, 0, 0, 0]));
        };
        let plane = h * w;
        if plane == 0 {
            return Err(mismatch("global_avg_pool", self.shape(), &[n, c, 1, 1]));
        }
        let inv = T::one() / T::from_usize(plane).expect("plane fits");
        let data = self
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        Ok(record(&[self], vec![n, c, 1, 1], Arc::new(data), move |g, _| {
            vec![Some(g.iter().flat_map(|&v| std::iter::repeat_n(v * inv, plane)).collect())]
        }))
    }
}
