use hipa_tensor::{Element, Tensor};

use super::Conv2d;
use crate::error::{HipaError, Result};
use crate::params::{ParamBuilder, ParamStore};

/// Sub-pixel upsampling: 3×3 conv to r²·C channels, then pixel shuffle.
/// ×4 runs two ×2 steps.
#[derive(Debug, Clone)]
pub struct Upsampler {
    pub steps: Vec<(Conv2d, usize)>,
}

impl Upsampler {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize, scale: usize) -> Result<Self> {
        let factors: &[usize] = match scale {
            2 => &[2],
            3 => &[3],
            4 => &[2, 2],
            s => return Err(HipaError::UnsupportedScale(s)),
        };
        Ok(Self {
            steps: factors
                .iter()
                .enumerate()
                .map(|(i, &r)| (Conv2d::same(b, &format!("{name}.up{i}"), c, r * r * c, 3), r))
                .collect(),
        })
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = f.clone();
        for (conv, r) in &self.steps {
            x = conv.forward(p, &x)?.pixel_shuffle(*r)?;
        }
        Ok(x)
    }
}

/// Upsampler followed by a 3×3 reconstruction conv to RGB.
#[derive(Debug, Clone)]
pub struct Head {
    pub up: Upsampler,
    pub rec: Conv2d,
}

impl Head {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize, scale: usize) -> Result<Self> {
        Ok(Self {
            up: Upsampler::new(b, &format!("{name}.upsample"), c, scale)?,
            rec: Conv2d::same(b, &format!("{name}.rec"), c, 3, 3),
        })
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        self.rec.forward(p, &self.up.forward(p, f)?)
    }
}
