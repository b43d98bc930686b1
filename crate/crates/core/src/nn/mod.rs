//! Layers as stateless parameter-name bundles.
//!
//! Each layer declares its tensors on a [`ParamBuilder`] at construction and
//! looks them up by name in whatever [`ParamStore`] it is run against, so the
//! same layout serves f32 training, f64 gradient checks and watched copies.

mod blocks;
mod transformer;
mod upsample;

use hipa_tensor::{conv2d, layer_norm, Conv2dOptions, Element, Tensor};

use crate::error::Result;
use crate::params::{Init, ParamBuilder, ParamStore};

pub use blocks::{ChannelGate, DilatedChannelAttention, Mrfag, Mrfam, ResidualBlock};
pub use transformer::{
    interpolation_matrix, map_to_tokens, patch_embed, patch_fold, tokens_to_map, ApeVit, ApeVitSpec, EncoderLayer, Mlp,
    MultiHeadAttention, PositionEncoding,
};
pub use upsample::{Head, Upsampler};

pub(crate) fn cast<T: Element>(v: f64) -> T {
    T::from_f64_lossy(v)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: String,
    pub bias: String,
    pub opts: Conv2dOptions,
}

impl Conv2d {
    pub fn new(b: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, kernel: usize, opts: Conv2dOptions) -> Self {
        let fan_in = c_in / opts.groups * kernel * kernel;
        Self {
            weight: b.declare(
                format!("{name}.weight"),
                [c_out, c_in / opts.groups, kernel, kernel],
                Init::FanIn(fan_in),
            ),
            bias: b.declare(format!("{name}.bias"), [c_out], Init::FanIn(fan_in)),
            opts,
        }
    }

    /// Size-preserving `kernel`×`kernel` convolution.
    pub fn same(b: &mut ParamBuilder, name: &str, c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self::new(b, name, c_in, c_out, kernel, Conv2dOptions::same(kernel, 1))
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(conv2d(x, p.get(&self.weight)?, Some(p.get(&self.bias)?), self.opts)?)
    }
}

/// `x · W + b` over the last axis, `W: [in, out]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: b.declare(format!("{name}.weight"), [d_in, d_out], Init::FanIn(d_in)),
            bias: b.declare(format!("{name}.bias"), [d_out], Init::FanIn(d_in)),
        }
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.matmul(p.get(&self.weight)?)?.add(p.get(&self.bias)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: String,
    pub beta: String,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize) -> Self {
        Self {
            gamma: b.declare(format!("{name}.gamma"), [d], Init::Const(1.0)),
            beta: b.declare(format!("{name}.beta"), [d], Init::Const(0.0)),
        }
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(layer_norm(
            x,
            p.get(&self.gamma)?,
            p.get(&self.beta)?,
            cast(hipa_tensor::LAYER_NORM_EPS),
        )?)
    }
}

/// Overwrites every entry of a parameter with `v`.
pub fn fill<T: Element>(p: &mut ParamStore<T>, name: &str, v: T) -> Result<()> {
    p.get_mut(name)?.data_mut().fill(v);
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::test_util::*;
    use super::*;

    #[test]
    fn linear_applies_over_last_axis() {
        let (lin, mut p) = build(0, |b| Linear::new(b, "l", 2, 3));
        *p.get_mut("l.weight").unwrap() = Tensor::new([2, 3], vec![1., 0., 1., 0., 1., 1.]).unwrap();
        *p.get_mut("l.bias").unwrap() = Tensor::new([3], vec![0., 0., 10.]).unwrap();
        let x = Tensor::new([1, 1, 2], vec![2.0, 5.0]).unwrap();
        assert_eq!(lin.forward(&p, &x).unwrap().data(), &[2.0, 5.0, 17.0]);
    }

    #[test]
    fn conv_declares_grouped_shapes() {
        let (conv, p) = build(0, |b| {
            Conv2d::new(
                b,
                "dw",
                6,
                6,
                3,
                Conv2dOptions {
                    groups: 6,
                    ..Conv2dOptions::same(3, 1)
                },
            )
        });
        assert_eq!(p.get(&conv.weight).unwrap().shape(), &[6, 1, 3, 3]);
        let y = conv.forward(&p, &random(&[2, 6, 5, 4], 1)).unwrap();
        assert_eq!(y.shape(), &[2, 6, 5, 4]);
    }
}
