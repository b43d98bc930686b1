//! Three-stage hierarchical-patch network.
//!
//! Stage 1 works on LR quadrants, stage 2 on left/right halves, stage 3 on
//! the whole image. Each stage emits an HR prediction and hands its merged
//! features to the next one.

use hipa_tensor::{Element, Tensor, TensorError};

use crate::config::{HipaConfig, Hierarchy};
use crate::error::{HipaError, Result};
use crate::nn::{cast, ApeVit, ApeVitSpec, Conv2d, Head, Mrfag};
use crate::params::{ParamBuilder, ParamStore};
use crate::rng::{stream, STREAM_INIT};

fn dims<T: Element>(op: &'static str, x: &Tensor<T>) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(x.shape()).map_err(|_| {
        TensorError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![0; 4],
        }
        .into()
    })
}

fn halve(op: &'static str, extent: usize) -> Result<usize> {
    if extent % 2 != 0 {
        return Err(TensorError::NotDivisible { op, extent, by: 2 }.into());
    }
    Ok(extent / 2)
}

/// Quadrants of `[n, c, h, w]` in the order top-left, top-right,
/// bottom-left, bottom-right.
pub fn split_image<T: Element>(x: &Tensor<T>) -> Result<[Tensor<T>; 4]> {
    let [_, _, h, w] = dims("split_image", x)?;
    let (hh, hw) = (halve("split_image", h)?, halve("split_image", w)?);
    let top = x.narrow(2, 0, hh)?;
    let bottom = x.narrow(2, hh, hh)?;
    Ok([
        top.narrow(3, 0, hw)?,
        top.narrow(3, hw, hw)?,
        bottom.narrow(3, 0, hw)?,
        bottom.narrow(3, hw, hw)?,
    ])
}

/// Left and right column halves.
pub fn split_halves<T: Element>(x: &Tensor<T>) -> Result<[Tensor<T>; 2]> {
    let [_, _, _, w] = dims("split_halves", x)?;
    let hw = halve("split_halves", w)?;
    Ok([x.narrow(3, 0, hw)?, x.narrow(3, hw, hw)?])
}

/// Stacks along height.
pub fn merge_vertical<T: Element>(top: &Tensor<T>, bottom: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(Tensor::concat(&[top, bottom], 2)?)
}

/// Stacks along width.
pub fn merge_horizontal<T: Element>(left: &Tensor<T>, right: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(Tensor::concat(&[left, right], 3)?)
}

/// Channel concat of the two maps, reduced back to C by a 1×1 conv.
#[derive(Debug, Clone)]
pub struct CrossStageFusion {
    pub conv: Conv2d,
}

impl CrossStageFusion {
    pub fn new(b: &mut ParamBuilder, name: &str, c: usize) -> Self {
        Self {
            conv: Conv2d::same(b, name, 2 * c, c, 1),
        }
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, shallow: &Tensor<T>, carried: &Tensor<T>) -> Result<Tensor<T>> {
        if shallow.shape() != carried.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "fuse_cross_stage",
                lhs: shallow.shape().to_vec(),
                rhs: carried.shape().to_vec(),
            }
            .into());
        }
        self.conv.forward(p, &Tensor::concat(&[shallow, carried], 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct StageOutput<T: Element = f32> {
    pub hr: Tensor<T>,
    /// Features for the next stage: the two vertically merged halves after
    /// stage 1, the merged full map after stage 2, nothing after stage 3.
    pub carry: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Stage1 {
    pub shallow: Conv2d,
    pub group: Mrfag,
    pub vit: ApeVit,
    pub head: Head,
}

#[derive(Debug, Clone)]
pub struct Stage2 {
    pub shallow: Conv2d,
    pub fuse: CrossStageFusion,
    pub group: Mrfag,
    pub vit: ApeVit,
    pub head: Head,
}

#[derive(Debug, Clone)]
pub struct Stage3 {
    pub shallow: Conv2d,
    pub fuse: CrossStageFusion,
    pub group: Mrfag,
    pub head: Head,
}

/// Single full-image trunk used as the fixed-patch baseline.
#[derive(Debug, Clone)]
pub struct FixedTrunk {
    pub shallow: Conv2d,
    pub group: Mrfag,
    pub vit: ApeVit,
    pub head: Head,
}

#[derive(Debug, Clone)]
pub enum Layout {
    Variable { s1: Stage1, s2: Stage2, s3: Stage3 },
    Fixed(FixedTrunk),
}

/// Batches same-shaped regions along n so shared weights run once.
fn stack<T: Element>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    Ok(Tensor::concat(parts, 0)?)
}

fn unstack<T: Element, const K: usize>(x: &Tensor<T>) -> Result<[Tensor<T>; K]> {
    let n = x.shape()[0] / K;
    let parts: Vec<Tensor<T>> = (0..K).map(|i| x.narrow(0, i * n, n)).collect::<Result<_, _>>()?;
    Ok(parts.try_into().unwrap_or_else(|_| unreachable!("K parts")))
}

impl Stage1 {
    pub fn forward<T: Element>(&self, p: &ParamStore<T>, lr: &Tensor<T>) -> Result<StageOutput<T>> {
        let q = split_image(lr)?;
        let f0 = self.shallow.forward(p, &stack(&[&q[0], &q[1], &q[2], &q[3]])?)?;
        let fa = self.vit.forward(p, &self.group.forward(p, &f0)?)?;
        let [a1, a2, a3, a4] = unstack::<T, 4>(&fa)?;
        let [s1, s2, s3, s4] = unstack::<T, 4>(&f0)?;
        let mer1 = merge_vertical(&a1, &a3)?.add(&merge_vertical(&s1, &s3)?)?;
        let mer2 = merge_vertical(&a2, &a4)?.add(&merge_vertical(&s2, &s4)?)?;
        let hr = self.head.forward(p, &merge_horizontal(&mer1, &mer2)?)?;
        Ok(StageOutput {
            hr,
            carry: vec![mer1, mer2],
        })
    }
}

impl Stage2 {
    pub fn forward<T: Element>(&self, p: &ParamStore<T>, lr: &Tensor<T>, carry: &[Tensor<T>]) -> Result<StageOutput<T>> {
        let [left, right] = split_halves(lr)?;
        let [c_left, c_right] = carry else {
            return Err(HipaError::InvalidSize(format!("stage 2 expects 2 carried maps, got {}", carry.len())));
        };
        let f0 = self.shallow.forward(p, &stack(&[&left, &right])?)?;
        let fused = self.fuse.forward(p, &f0, &stack(&[c_left, c_right])?)?;
        let fa = self.vit.forward(p, &self.group.forward(p, &fused)?)?;
        let [al, ar] = unstack::<T, 2>(&fa)?;
        let [sl, sr] = unstack::<T, 2>(&f0)?;
        let merged = merge_horizontal(&al, &ar)?.add(&merge_horizontal(&sl, &sr)?)?;
        let hr = self.head.forward(p, &merged)?;
        Ok(StageOutput {
            hr,
            carry: vec![merged],
        })
    }
}

impl Stage3 {
    pub fn forward<T: Element>(&self, p: &ParamStore<T>, lr: &Tensor<T>, carry: &[Tensor<T>]) -> Result<StageOutput<T>> {
        let [carried] = carry else {
            return Err(HipaError::InvalidSize(format!("stage 3 expects 1 carried map, got {}", carry.len())));
        };
        let f0 = self.shallow.forward(p, lr)?;
        let deep = self.group.forward(p, &self.fuse.forward(p, &f0, carried)?)?;
        let hr = self.head.forward(p, &deep.add(&f0)?)?;
        Ok(StageOutput { hr, carry: vec![] })
    }
}

impl FixedTrunk {
    pub fn forward<T: Element>(&self, p: &ParamStore<T>, lr: &Tensor<T>) -> Result<Tensor<T>> {
        let f0 = self.shallow.forward(p, lr)?;
        let deep = self.vit.forward(p, &self.group.forward(p, &f0)?)?;
        self.head.forward(p, &deep.add(&f0)?)
    }
}

/// The network layout for one configuration. Parameters live in a separate
/// [`ParamStore`] created by [`Hipa::init_params`].
#[derive(Debug)]
pub struct Hipa {
    pub config: HipaConfig,
    pub layout: Layout,
    builder: ParamBuilder,
}

impl Hipa {
    pub fn new(config: &HipaConfig) -> Result<Self> {
        config.validate()?;
        let c = config;
        let ch = c.channels;
        let mut b = ParamBuilder::new();
        let vit_spec = |table_grid| ApeVitSpec {
            channels: ch,
            patch: c.patch_size,
            heads: c.heads,
            layers: c.layers,
            mode: c.ape_mode,
            reduction: c.ape_reduction,
            mlp_ratio: c.mlp_ratio,
            table_grid,
        };
        let group = |b: &mut ParamBuilder, name: &str, g: usize| {
            Mrfag::new(b, name, ch, g, c.res_blocks, &c.branches, c.ca_width)
        };
        let grid = c.lr_crop / c.patch_size;
        let layout = match c.hierarchy {
            Hierarchy::Variable => {
                let s1 = Stage1 {
                    shallow: Conv2d::same(&mut b, "s1.shallow", 3, ch, 3),
                    group: group(&mut b, "s1.mrfag", c.mrfam_per_stage[0])?,
                    vit: ApeVit::new(&mut b, "s1.vit", vit_spec((grid / 2, grid / 2)))?,
                    head: Head::new(&mut b, "s1.head", ch, c.scale)?,
                };
                let s2 = Stage2 {
                    shallow: Conv2d::same(&mut b, "s2.shallow", 3, ch, 3),
                    fuse: CrossStageFusion::new(&mut b, "s2.fuse", ch),
                    group: group(&mut b, "s2.mrfag", c.mrfam_per_stage[1])?,
                    vit: ApeVit::new(&mut b, "s2.vit", vit_spec((grid, grid / 2)))?,
                    head: Head::new(&mut b, "s2.head", ch, c.scale)?,
                };
                let s3 = Stage3 {
                    shallow: Conv2d::same(&mut b, "s3.shallow", 3, ch, 3),
                    fuse: CrossStageFusion::new(&mut b, "s3.fuse", ch),
                    group: group(&mut b, "s3.mrfag", c.mrfam_per_stage[2])?,
                    head: Head::new(&mut b, "s3.head", ch, c.scale)?,
                };
                Layout::Variable { s1, s2, s3 }
            }
            Hierarchy::Fixed => Layout::Fixed(FixedTrunk {
                shallow: Conv2d::same(&mut b, "fixed.shallow", 3, ch, 3),
                group: group(&mut b, "fixed.mrfag", c.mrfam_per_stage.iter().sum())?,
                vit: ApeVit::new(&mut b, "fixed.vit", vit_spec((grid, grid)))?,
                head: Head::new(&mut b, "fixed.head", ch, c.scale)?,
            }),
        };
        Ok(Self {
            config: config.clone(),
            layout,
            builder: b,
        })
    }

    /// Fresh parameters from the config seed.
    pub fn init_params(&self) -> ParamStore<f32> {
        self.builder.finish(&mut stream(self.config.seed, STREAM_INIT))
    }

    pub fn param_shapes(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.builder.shapes()
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Errors unless `p` holds exactly this layout's names and shapes, in order.
    pub fn check_params<T: Element>(&self, p: &ParamStore<T>) -> Result<()> {
        let expected: Vec<_> = self.param_shapes().collect();
        if expected.len() != p.len() {
            return Err(HipaError::ConfigMismatch(format!(
                "layout has {} tensors, store has {}",
                expected.len(),
                p.len()
            )));
        }
        for ((name, shape), (got_name, got)) in expected.into_iter().zip(p.iter()) {
            if name != got_name || shape != got.shape() {
                return Err(HipaError::ConfigMismatch(format!(
                    "expected {name} {shape:?}, found {got_name} {:?}",
                    got.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_input<T: Element>(&self, lr: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = dims("hipa_forward", lr)?;
        if c != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "hipa_forward",
                lhs: lr.shape().to_vec(),
                rhs: vec![lr.shape()[0], 3, h, w],
            }
            .into());
        }
        let m = self.config.size_multiple();
        for extent in [h, w] {
            if extent == 0 || extent % m != 0 {
                return Err(TensorError::NotDivisible {
                    op: "hipa_forward",
                    extent,
                    by: m,
                }
                .into());
            }
        }
        Ok(())
    }

    /// Predictions of stages 1, 2 and 3 for `lr: [n, 3, h, w]`. In fixed
    /// mode the single prediction fills all three slots.
    pub fn forward<T: Element>(&self, p: &ParamStore<T>, lr: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
        self.check_input(lr)?;
        match &self.layout {
            Layout::Variable { s1, s2, s3 } => {
                let o1 = s1.forward(p, lr)?;
                let o2 = s2.forward(p, lr, &o1.carry)?;
                let o3 = s3.forward(p, lr, &o2.carry)?;
                Ok([o1.hr, o2.hr, o3.hr])
            }
            Layout::Fixed(trunk) => {
                let hr = trunk.forward(p, lr)?;
                Ok([hr.clone(), hr.clone(), hr])
            }
        }
    }

    /// Inference on any LR size: reflect-pads bottom/right to a valid
    /// multiple, runs untaped, crops back and clamps to [0, 1].
    pub fn super_resolve(&self, p: &ParamStore<f32>, lr: &Tensor<f32>) -> Result<[Tensor<f32>; 3]> {
        let [_, _, h, w] = dims("super_resolve", lr)?;
        let m = self.config.size_multiple();
        let pad = |extent: usize| (m - extent % m) % m;
        let (ph, pw) = (pad(h), pad(w));
        if (ph > 0 && ph >= h) || (pw > 0 && pw >= w) {
            return Err(HipaError::TooSmall(format!(
                "{h}×{w} input cannot be reflect-padded to a multiple of {m}"
            )));
        }
        let padded = lr.detach().pad_reflect(2, 0, ph)?.pad_reflect(3, 0, pw)?;
        let s = self.config.scale;
        let preds = self.forward(p, &padded)?;
        let crop = |t: &Tensor<f32>| -> Result<Tensor<f32>> {
            let c = t.narrow(2, 0, s * h)?.narrow(3, 0, s * w)?;
            Ok(Tensor::new(c.shape().to_vec(), c.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())?)
        };
        Ok([crop(&preds[0])?, crop(&preds[1])?, crop(&preds[2])?])
    }
}

/// Weighted sum of per-stage mean absolute errors.
pub fn hipa_loss<T: Element>(preds: &[Tensor<T>; 3], gt: &Tensor<T>, weights: [f32; 3]) -> Result<Tensor<T>> {
    let mut total: Option<Tensor<T>> = None;
    for (pred, w) in preds.iter().zip(weights) {
        if pred.shape() != gt.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "hipa_loss",
                lhs: pred.shape().to_vec(),
                rhs: gt.shape().to_vec(),
            }
            .into());
        }
        let term = pred.sub(gt)?.abs().mean().scale(cast(w as f64));
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("three terms"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fill;
    use crate::nn::test_util::random;
    use hipa_tensor::Tape;

    fn tiny() -> HipaConfig {
        let mut c = HipaConfig::desk();
        c.channels = 4;
        c.lr_crop = 8;
        c
    }

    #[test]
    fn split_ramp_quadrants() {
        let x = Tensor::<f32>::from_fn([1, 1, 4, 4], |i| i as f32);
        let q = split_image(&x).unwrap();
        assert_eq!(q[0].data(), &[0., 1., 4., 5.]);
        assert_eq!(q[1].data(), &[2., 3., 6., 7.]);
        assert_eq!(q[2].data(), &[8., 9., 12., 13.]);
        assert_eq!(q[3].data(), &[10., 11., 14., 15.]);
        let left = merge_vertical(&q[0], &q[2]).unwrap();
        assert_eq!(left.data(), split_halves(&x).unwrap()[0].data());
        let back = merge_horizontal(&left, &merge_vertical(&q[1], &q[3]).unwrap()).unwrap();
        assert_eq!(back.data(), x.data());
        assert!(split_image(&Tensor::<f32>::zeros([1, 1, 3, 4])).is_err());
    }

    #[test]
    fn fusion_surgery_selects_either_input() {
        let mut b = ParamBuilder::new();
        let fuse = CrossStageFusion::new(&mut b, "f", 3);
        let mut p = b.finish(&mut stream(0, 0));
        let (s, c) = (random(&[1, 3, 4, 4], 1), random(&[1, 3, 4, 4], 2));
        for (offset, want) in [(0, &s), (3, &c)] {
            let w = p.get_mut(&fuse.conv.weight).unwrap().data_mut();
            w.fill(0.0);
            for o in 0..3 {
                w[o * 6 + offset + o] = 1.0;
            }
            fill(&mut p, &fuse.conv.bias, 0.0).unwrap();
            assert_eq!(fuse.forward(&p, &s, &c).unwrap().data(), want.data());
        }
    }

    #[test]
    fn stage_outputs_share_hr_extent() {
        for scale in [2, 3, 4] {
            let mut c = tiny();
            c.scale = scale;
            let model = Hipa::new(&c).unwrap();
            let p = model.init_params();
            let preds = model.forward(&p, &random(&[2, 3, 8, 12], 3)).unwrap();
            for pred in &preds {
                assert_eq!(pred.shape(), &[2, 3, 8 * scale, 12 * scale]);
                assert!(pred.all_finite());
            }
        }
    }

    #[test]
    fn zeroed_trunk_carries_merged_shallow_features() {
        let model = Hipa::new(&tiny()).unwrap();
        let mut p = model.init_params();
        let Layout::Variable { s1, .. } = &model.layout else { panic!() };
        // zero the group tail and the last encoder projections: trunk output becomes the shallow map
        for name in [&s1.group.tail.weight, &s1.group.tail.bias] {
            fill(&mut p, name, 0.0).unwrap();
        }
        let enc = &s1.vit.layers[0];
        for name in [&enc.attn.out.weight, &enc.attn.out.bias, &enc.mlp.fc2.weight, &enc.mlp.fc2.bias] {
            fill(&mut p, name, 0.0).unwrap();
        }
        let crate::nn::PositionEncoding::Attention { conv, .. } = &s1.vit.position else { panic!() };
        fill(&mut p, &conv.weight, 0.0).unwrap();
        fill(&mut p, &conv.bias, 0.0).unwrap();

        let lr = random(&[1, 3, 8, 8], 4);
        let out = s1.forward(&p, &lr).unwrap();
        // with an identity trunk each merged map is the trunk path plus the shallow skip
        let q = split_image(&lr).unwrap();
        let sq: Vec<_> = q.iter().map(|t| s1.shallow.forward(&p, t).unwrap()).collect();
        let want_left = merge_vertical(&sq[0], &sq[2]).unwrap().scale(2.0);
        let want_right = merge_vertical(&sq[1], &sq[3]).unwrap().scale(2.0);
        assert!(out.carry[0].max_abs_diff(&want_left).unwrap() < 1e-6);
        assert!(out.carry[1].max_abs_diff(&want_right).unwrap() < 1e-6);
    }

    #[test]
    fn fixed_mode_replicates_prediction() {
        let mut c = tiny();
        c.hierarchy = Hierarchy::Fixed;
        let model = Hipa::new(&c).unwrap();
        let p = model.init_params();
        let preds = model.forward(&p, &random(&[1, 3, 8, 8], 5)).unwrap();
        assert_eq!(preds[0].data(), preds[2].data());
        assert_eq!(preds[1].data(), preds[2].data());
        assert!(model.param_shapes().all(|(n, _)| n.starts_with("fixed.")));
    }

    #[test]
    fn stage3_parameters_grow_linearly_in_g3() {
        let counts: Vec<usize> = (1..=4)
            .map(|g| {
                let mut c = tiny();
                c.mrfam_per_stage[2] = g;
                Hipa::new(&c).unwrap().num_params()
            })
            .collect();
        let step = counts[1] - counts[0];
        assert!(step > 0);
        assert!(counts.windows(2).all(|w| w[1] - w[0] == step));
    }

    #[test]
    fn forward_is_deterministic() {
        let model = Hipa::new(&tiny()).unwrap();
        let lr = random(&[1, 3, 8, 8], 6);
        let a = model.forward(&model.init_params(), &lr).unwrap();
        let b = model.forward(&model.init_params(), &lr).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        let model = Hipa::new(&tiny()).unwrap();
        let p = model.init_params();
        assert!(model.forward(&p, &random(&[1, 3, 6, 8], 7)).is_err());
        assert!(model.forward(&p, &random(&[1, 1, 8, 8], 7)).is_err());
    }

    #[test]
    fn super_resolve_pads_and_crops() {
        let model = Hipa::new(&tiny()).unwrap();
        let p = model.init_params();
        let out = model.super_resolve(&p, &random(&[1, 3, 17, 23], 8)).unwrap();
        for o in &out {
            assert_eq!(o.shape(), &[1, 3, 34, 46]);
            assert!(o.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert!(model.super_resolve(&p, &random(&[1, 3, 1, 8], 8)).is_err());
    }

    #[test]
    fn loss_closed_forms() {
        let gt = random(&[1, 3, 4, 4], 9);
        let same = [gt.clone(), gt.clone(), gt.clone()];
        assert_eq!(hipa_loss(&same, &gt, [1.0; 3]).unwrap().item(), 0.0);
        let off = [gt.add_scalar(0.1), gt.clone(), gt.clone()];
        assert!((hipa_loss(&off, &gt, [1.0; 3]).unwrap().item() - 0.1).abs() < 1e-6);
        let last = [gt.add_scalar(0.3), gt.add_scalar(0.2), gt.add_scalar(-0.05)];
        assert!((hipa_loss(&last, &gt, [0.0, 0.0, 1.0]).unwrap().item() - 0.05).abs() < 1e-6);
        assert!(hipa_loss(&same, &random(&[1, 3, 4, 2], 1), [1.0; 3]).is_err());
    }

    #[test]
    fn stage_losses_reach_stage1() {
        let model = Hipa::new(&tiny()).unwrap();
        let p = model.init_params();
        let lr = random(&[1, 3, 8, 8], 10);
        let gt = random(&[1, 3, 16, 16], 11);
        let Layout::Variable { s1, .. } = &model.layout else { panic!() };
        for weights in [[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 1.0]] {
            let tape = Tape::new();
            let w = p.watched(&tape);
            let loss = hipa_loss(&model.forward(&w, &lr).unwrap(), &gt, weights).unwrap();
            let g = loss.backward().unwrap();
            let leaf = w.get(&s1.shallow.weight).unwrap();
            assert!(g.get_or_zeros(leaf).iter().any(|v| *v != 0.0), "{weights:?}");
        }
    }
}
