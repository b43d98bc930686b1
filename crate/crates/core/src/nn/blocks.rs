use hipa_tensor::{Conv2dOptions, Element, Tensor, TensorError};

use super::Conv2d;
use crate::config::ReceptiveField;
use crate::error::Result;
use crate::params::{ParamBuilder, ParamStore};

/// `x + conv(relu(conv(x)))` with 3×3 kernels.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

impl ResidualBlock {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize) -> Self {
        Self {
            conv1: Conv2d::same(b, &format!("{name}.conv1"), c, c, 3),
            conv2: Conv2d::same(b, &format!("{name}.conv2"), c, c, 3),
        }
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.conv1.forward(p, x)?.relu();
        Ok(x.add(&self.conv2.forward(p, &h)?)?)
    }
}

/// Squeeze-excitation gate: pool, 1×1 down to `width`, relu, 1×1 back, sigmoid.
#[derive(Debug, Clone)]
pub struct ChannelGate {
    pub squeeze: Conv2d,
    pub excite: Conv2d,
}

impl ChannelGate {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize, width: usize) -> Self {
        Self {
            squeeze: Conv2d::same(b, &format!("{name}.squeeze"), c, width, 1),
            excite: Conv2d::same(b, &format!("{name}.excite"), width, c, 1),
        }
    }

    /// Per-channel weights `[n, c, 1, 1]` in (0, 1).
    pub fn gate<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.squeeze.forward(p, &x.global_avg_pool()?)?.relu();
        Ok(self.excite.forward(p, &s)?.sigmoid())
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.mul(&self.gate(p, x)?)?)
    }
}

/// Dilated spatial convolution followed by a channel gate on its output.
#[derive(Debug, Clone)]
pub struct DilatedChannelAttention {
    pub field: ReceptiveField,
    pub conv: Conv2d,
    pub gate: ChannelGate,
}

impl DilatedChannelAttention {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize, field: ReceptiveField, ca_width: usize) -> Self {
        let (k, d) = field.kernel_dilation();
        Self {
            field,
            conv: Conv2d::new(b, &format!("{name}.conv"), c, c, k, Conv2dOptions::same(k, d)),
            gate: ChannelGate::new(b, &format!("{name}.gate"), c, ca_width),
        }
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let f = self.conv.forward(p, x)?;
        self.gate.forward(p, &f)
    }
}

/// Multi-reception-field attention module.
///
/// `mrfam(x, src) = src + fuse(concat(branch_k(blocks(x))))`, where `src` is
/// the group input shared by every module of the group.
#[derive(Debug, Clone)]
pub struct Mrfam {
    pub blocks: Vec<ResidualBlock>,
    pub branches: Vec<DilatedChannelAttention>,
    pub fusion: Conv2d,
}

impl Mrfam {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        c: usize,
        res_blocks: usize,
        fields: &[ReceptiveField],
        ca_width: usize,
    ) -> Self {
        let blocks = (0..res_blocks)
            .map(|i| ResidualBlock::new(b, &format!("{name}.rb{i}"), c))
            .collect();
        let branches = fields
            .iter()
            .map(|&f| DilatedChannelAttention::new(b, &format!("{name}.rf{f}"), c, f, ca_width))
            .collect();
        Self {
            blocks,
            branches,
            fusion: Conv2d::same(b, &format!("{name}.fusion"), fields.len() * c, c, 1),
        }
    }

    /// The module body without the source skip.
    pub fn body<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for block in &self.blocks {
            h = block.forward(p, &h)?;
        }
        let outs = self
            .branches
            .iter()
            .map(|br| br.forward(p, &h))
            .collect::<Result<Vec<_>>>()?;
        let cat = match outs.as_slice() {
            [one] => one.clone(),
            many => Tensor::concat(&many.iter().collect::<Vec<_>>(), 1)?,
        };
        self.fusion.forward(p, &cat)
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>, src: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape() != src.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "mrfam",
                lhs: x.shape().to_vec(),
                rhs: src.shape().to_vec(),
            }
            .into());
        }
        Ok(src.add(&self.body(p, x)?)?)
    }
}

/// Chain of `G` modules sharing the group input as skip, closed by a tail
/// 3×3 convolution and the group skip.
#[derive(Debug, Clone)]
pub struct Mrfag {
    pub modules: Vec<Mrfam>,
    pub tail: Conv2d,
}

impl Mrfag {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        c: usize,
        g: usize,
        res_blocks: usize,
        fields: &[ReceptiveField],
        ca_width: usize,
    ) -> Result<Self> {
        if g < 1 {
            return Err(TensorError::InvalidHyperparam {
                op: "mrfag",
                msg: "needs at least one module".into(),
            }
            .into());
        }
        let modules = (0..g)
            .map(|i| Mrfam::new(b, &format!("{name}.m{i}"), c, res_blocks, fields, ca_width))
            .collect();
        Ok(Self {
            modules,
            tail: Conv2d::same(b, &format!("{name}.tail"), c, c, 3),
        })
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut f = x.clone();
        for m in &self.modules {
            f = m.forward(p, &f, x)?;
        }
        Ok(x.add(&self.tail.forward(p, &f)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fill;
    use crate::nn::test_util::{build, random};

    #[test]
    fn residual_block_zero_branch_is_identity() {
        let (rb, mut p) = build(1, |b| ResidualBlock::new(b, "rb", 4));
        fill(&mut p, &rb.conv2.weight, 0.0).unwrap();
        fill(&mut p, &rb.conv2.bias, 0.0).unwrap();
        let x = random(&[2, 4, 3, 5], 2);
        assert_eq!(rb.forward(&p, &x).unwrap().data(), x.data());
    }

    #[test]
    fn gate_saturation() {
        let (dca, mut p) = build(2, |b| DilatedChannelAttention::new(b, "d", 3, ReceptiveField::Rf3, 4));
        let x = random(&[1, 3, 6, 6], 3);
        let feature = dca.conv.forward(&p, &x).unwrap();

        fill(&mut p, &dca.gate.excite.weight, 0.0).unwrap();
        fill(&mut p, &dca.gate.excite.bias, 1e3).unwrap();
        let open = dca.forward(&p, &x).unwrap();
        assert!(open.max_abs_diff(&feature).unwrap() < 1e-6);

        fill(&mut p, &dca.gate.excite.bias, -1e3).unwrap();
        let closed = dca.forward(&p, &x).unwrap();
        assert!(closed.data().iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn rf1_identity_conv_with_open_gate_is_identity() {
        let (dca, mut p) = build(3, |b| DilatedChannelAttention::new(b, "d", 3, ReceptiveField::Rf1, 4));
        let w = p.get_mut(&dca.conv.weight).unwrap().data_mut();
        w.fill(0.0);
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        fill(&mut p, &dca.conv.bias, 0.0).unwrap();
        fill(&mut p, &dca.gate.excite.weight, 0.0).unwrap();
        fill(&mut p, &dca.gate.excite.bias, 1e3).unwrap();
        let x = random(&[2, 3, 4, 4], 4);
        assert!(dca.forward(&p, &x).unwrap().max_abs_diff(&x).unwrap() < 1e-6);
    }

    #[test]
    fn branch_receptive_fields() {
        // A single impulse spreads over exactly the branch's receptive field.
        for field in ReceptiveField::ALL {
            let (dca, mut p) = build(4, |b| DilatedChannelAttention::new(b, "d", 1, field, 1));
            fill(&mut p, &dca.conv.weight, 1.0).unwrap();
            fill(&mut p, &dca.conv.bias, 0.0).unwrap();
            let mut x = Tensor::<f32>::zeros([1, 1, 9, 9]);
            x.data_mut()[4 * 9 + 4] = 1.0;
            let y = dca.conv.forward(&p, &x).unwrap();
            let rows: Vec<usize> = (0..9).filter(|r| (0..9).any(|c| y.data()[r * 9 + c] != 0.0)).collect();
            let (first, last) = (rows[0], *rows.last().unwrap());
            assert_eq!(last - first + 1, field.extent(), "{field:?}");
        }
    }

    #[test]
    fn mrfam_zero_fusion_passes_source() {
        let (m, mut p) = build(5, |b| Mrfam::new(b, "m", 4, 1, &ReceptiveField::ALL, 4));
        fill(&mut p, &m.fusion.weight, 0.0).unwrap();
        fill(&mut p, &m.fusion.bias, 0.0).unwrap();
        let (x, src) = (random(&[1, 4, 8, 8], 6), random(&[1, 4, 8, 8], 7));
        assert_eq!(m.forward(&p, &x, &src).unwrap().data(), src.data());
    }

    #[test]
    fn mrfam_single_branch_keeps_shape() {
        let (m, p) = build(6, |b| Mrfam::new(b, "m", 4, 2, &[ReceptiveField::Rf1], 4));
        assert_eq!(p.get(&m.fusion.weight).unwrap().shape(), &[4, 4, 1, 1]);
        let x = random(&[2, 4, 5, 7], 8);
        assert_eq!(m.forward(&p, &x, &x).unwrap().shape(), x.shape());
        assert!(m.forward(&p, &x, &random(&[2, 4, 5, 6], 1)).is_err());
    }

    #[test]
    fn mrfag_zero_tail_is_identity_and_g1_unrolls() {
        let (g, mut p) = build(7, |b| Mrfag::new(b, "g", 4, 1, 1, &ReceptiveField::ALL, 4).unwrap());
        let x = random(&[1, 4, 6, 6], 9);
        let unrolled = x
            .add(&g.tail.forward(&p, &g.modules[0].forward(&p, &x, &x).unwrap()).unwrap())
            .unwrap();
        assert_eq!(g.forward(&p, &x).unwrap().data(), unrolled.data());
        fill(&mut p, &g.tail.weight, 0.0).unwrap();
        fill(&mut p, &g.tail.bias, 0.0).unwrap();
        assert_eq!(g.forward(&p, &x).unwrap().data(), x.data());
    }

    #[test]
    fn mrfag_rejects_empty_group() {
        let mut b = ParamBuilder::new();
        assert!(Mrfag::new(&mut b, "g", 4, 0, 1, &ReceptiveField::ALL, 4).is_err());
    }

    #[test]
    fn mrfag_stress_is_finite() {
        let (g, p) = build(8, |b| Mrfag::new(b, "g", 4, 3, 1, &ReceptiveField::ALL, 4).unwrap());
        for i in 0..100 {
            let x = random(&[1, 4, 6, 6], 100 + i).scale(1.0 + i as f32 / 10.0);
            assert!(g.forward(&p, &x).unwrap().all_finite());
        }
    }
}
