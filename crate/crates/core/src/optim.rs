//! Adam with bias correction.

use hipa_tensor::{Gradients, Tensor};
use indexmap::IndexMap;

use crate::error::{HipaError, Result};
use crate::params::ParamStore;

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.999;
pub const EPS: f32 = 1e-8;

/// Flat gradient buffers keyed by parameter name.
pub type Grads = IndexMap<String, Vec<f32>>;

/// Reads the gradient of every watched parameter; unreached ones get zeros.
pub fn collect_grads(watched: &ParamStore, g: &Gradients<f32>) -> Grads {
    watched.iter().map(|(name, t)| (name.to_string(), g.get_or_zeros(t))).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub t: u64,
    pub m: IndexMap<String, Vec<f32>>,
    pub v: IndexMap<String, Vec<f32>>,
}

impl Adam {
    /// Zeroed moments shaped like `params`.
    pub fn new(params: &ParamStore, lr: f32) -> Self {
        let zeros: IndexMap<String, Vec<f32>> =
            params.iter().map(|(n, t)| (n.to_string(), vec![0.0; t.numel()])).collect();
        Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPS,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update of every parameter. Fails before touching anything if a
    /// parameter has no gradient or the moment buffers do not match.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        for (name, p) in params.iter() {
            let g = grads.get(name).ok_or_else(|| HipaError::MissingGrad(name.to_string()))?;
            let n = p.numel();
            let fits = |buf: Option<&Vec<f32>>| buf.is_some_and(|b| b.len() == n);
            if g.len() != n || !fits(self.m.get(name)) || !fits(self.v.get(name)) {
                return Err(HipaError::InvalidSize(format!("optimizer buffers for {name} do not match {n} elements")));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = (1.0 - (self.beta1 as f64).powi(t)) as f32;
        let c2 = (1.0 - (self.beta2 as f64).powi(t)) as f32;
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.m.get_mut(name).expect("checked above");
            let v = self.v.get_mut(name).expect("checked above");
            let theta = p.data_mut();
            for i in 0..theta.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }

    /// Moment buffers as tensors shaped like their parameters.
    pub fn moments(&self, params: &ParamStore) -> Result<[Vec<(String, Tensor)>; 2]> {
        let shaped = |bufs: &IndexMap<String, Vec<f32>>| {
            params
                .iter()
                .map(|(name, p)| {
                    let b = bufs.get(name).ok_or_else(|| HipaError::MissingParam(name.to_string()))?;
                    Ok((name.to_string(), Tensor::new(p.shape().to_vec(), b.clone())?))
                })
                .collect::<Result<Vec<_>>>()
        };
        Ok([shaped(&self.m)?, shaped(&self.v)?])
    }
}
