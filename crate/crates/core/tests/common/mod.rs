//! Shared oracles for the integration tests and the acceptance suite.
#![allow(dead_code)]

use hipa_core::config::{ApeMode, HipaConfig, ReceptiveField};
use hipa_core::model::{merge_horizontal, merge_vertical, split_image, CrossStageFusion};
use hipa_core::nn::{
    ApeVit, ApeVitSpec, Conv2d, DilatedChannelAttention, EncoderLayer, Head, Mrfag, Mrfam, PositionEncoding,
    ResidualBlock,
};
use hipa_core::params::{ParamBuilder, ParamStore};
use hipa_core::rng::stream;
use hipa_core::{hipa_loss, Hipa, HipaError};
use hipa_tensor::gradcheck::{check_entries, GradReport, DEFAULT_FLOOR, DEFAULT_STEP};
use hipa_tensor::{Tensor, TensorError};
use rand::Rng as _;

pub const TOL: f64 = 1e-3;
pub const MODEL_TOL: f64 = 1e-2;

pub fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = stream(seed, 11);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

pub fn tensor_err(e: HipaError) -> TensorError {
    match e {
        HipaError::Tensor(t) => t,
        other => panic!("{other}"),
    }
}

/// Contracts `out` with fixed random weights so every output entry matters.
pub fn probe(out: Tensor<f64>, seed: u64) -> hipa_tensor::Result<Tensor<f64>> {
    let w = random(out.shape(), seed ^ 0xabcdef);
    Ok(out.mul(&w)?.sum())
}

pub fn store(names: &[String], tensors: &[Tensor<f64>]) -> ParamStore<f64> {
    let mut p = ParamStore::new();
    for (n, t) in names.iter().zip(tensors) {
        p.insert(n.clone(), t.clone()).unwrap();
    }
    p
}

/// Checks `fwd` with respect to its inputs and every parameter entry, or
/// `sample` random entries when given.
pub fn check_block<L>(
    build: impl FnOnce(&mut ParamBuilder) -> L,
    inputs: Vec<Tensor<f64>>,
    sample: Option<usize>,
    fwd: impl Fn(&L, &ParamStore<f64>, &[Tensor<f64>]) -> hipa_core::Result<Tensor<f64>>,
) -> GradReport {
    let mut b = ParamBuilder::new();
    let layer = build(&mut b);
    let params: ParamStore<f64> = b.finish(&mut stream(5, 0)).cast();
    let names: Vec<String> = params.names().map(String::from).collect();
    let k = inputs.len();
    let all: Vec<Tensor<f64>> = inputs.into_iter().chain(params.iter().map(|(_, t)| t.detach())).collect();
    let mut entries: Vec<(usize, usize)> =
        all.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
    if let Some(n) = sample {
        let mut rng = stream(17, 3);
        entries = (0..n).map(|_| entries[rng.random_range(0..entries.len())]).collect();
    }
    check_entries(
        &all,
        |xs| probe(fwd(&layer, &store(&names, &xs[k..]), &xs[..k]).map_err(tensor_err)?, 1),
        &entries,
        DEFAULT_STEP,
        DEFAULT_FLOOR,
    )
    .unwrap()
}

pub fn assert_passes(name: &str, r: GradReport, tol: f64) {
    println!("{name}: {} entries, max rel err {:.2e}", r.checked, r.max_rel_err);
    assert!(r.passes(tol), "{name}: max rel err {:.3e} at {:?}", r.max_rel_err, r.worst);
}


pub type Named = Vec<(String, GradReport)>;

fn one(name: &str, r: GradReport) -> Named {
    vec![(name.to_string(), r)]
}

pub fn residual_block() -> Named {
    one(
        "residual_block",
        check_block(|b| ResidualBlock::new(b, "rb", 4), vec![random(&[1, 4, 8, 8], 1)], None, |l, p, x| l.forward(p, &x[0])),
    )
}

pub fn dilated_channel_attention() -> Named {
    ReceptiveField::ALL
        .iter()
        .map(|&field| {
            let r = check_block(
                |b| DilatedChannelAttention::new(b, "dca", 4, field, 4),
                vec![random(&[2, 4, 6, 6], 2)],
                None,
                |l, p, x| l.forward(p, &x[0]),
            );
            (format!("dilated_channel_attention rf{field}"), r)
        })
        .collect()
}

pub fn mrfam() -> Named {
    one(
        "mrfam",
        check_block(
            |b| Mrfam::new(b, "m", 4, 1, &ReceptiveField::ALL, 4),
            vec![random(&[1, 4, 8, 8], 3), random(&[1, 4, 8, 8], 4)],
            None,
            |l, p, x| l.forward(p, &x[0], &x[1]),
        ),
    )
}

pub fn mrfag() -> Named {
    one(
        "mrfag",
        check_block(
            |b| Mrfag::new(b, "g", 4, 2, 1, &ReceptiveField::ALL, 4).unwrap(),
            vec![random(&[1, 4, 8, 8], 5)],
            Some(400),
            |l, p, x| l.forward(p, &x[0]),
        ),
    )
}

/// Each encoding added to its tokens; the learned table is built for a
/// 2×2 grid and resized to 4×2.
pub fn position_encodings() -> Named {
    let d = 16;
    [ApeMode::Pe, ApeMode::Cpe, ApeMode::Ape]
        .into_iter()
        .map(|mode| {
            let r = check_block(
                |b| PositionEncoding::new(b, "pos", mode, d, 4, (2, 2)),
                vec![random(&[2, 8, d], 6)],
                None,
                |l, p, x| Ok(x[0].add(&l.encode(p, &x[0], (4, 2))?.unwrap())?),
            );
            (format!("position encoding {mode}"), r)
        })
        .collect()
}

pub fn encoder_layer() -> Named {
    one(
        "encoder_layer",
        check_block(|b| EncoderLayer::new(b, "enc", 8, 2, 2).unwrap(), vec![random(&[2, 5, 8], 7)], None, |l, p, x| {
            l.forward(p, &x[0])
        }),
    )
}

pub fn ape_vit() -> Named {
    let spec = ApeVitSpec {
        channels: 4,
        patch: 2,
        heads: 2,
        layers: 1,
        mode: ApeMode::Ape,
        reduction: 4,
        mlp_ratio: 2,
        table_grid: (4, 4),
    };
    one(
        "ape_vit",
        check_block(|b| ApeVit::new(b, "vit", spec).unwrap(), vec![random(&[1, 4, 8, 8], 8)], Some(600), |l, p, x| {
            l.forward(p, &x[0])
        }),
    )
}

pub fn shallow_fusion_and_head() -> Named {
    let mut out = one(
        "shallow",
        check_block(|b| Conv2d::same(b, "sf", 3, 4, 3), vec![random(&[1, 3, 5, 5], 9)], None, |l, p, x| l.forward(p, &x[0])),
    );
    out.extend(one(
        "cross-stage fusion",
        check_block(
            |b| CrossStageFusion::new(b, "fuse", 4),
            vec![random(&[1, 4, 4, 4], 10), random(&[1, 4, 4, 4], 11)],
            None,
            |l, p, x| l.forward(p, &x[0], &x[1]),
        ),
    ));
    for scale in [2, 3, 4] {
        let r = check_block(|b| Head::new(b, "head", 4, scale).unwrap(), vec![random(&[1, 4, 3, 3], 12)], Some(300), |l, p, x| {
            l.forward(p, &x[0])
        });
        out.push((format!("head ×{scale}"), r));
    }
    out
}

pub fn split_merge() -> Named {
    one(
        "split/merge",
        check_block(|_| (), vec![random(&[1, 2, 4, 6], 13), random(&[1, 2, 4, 6], 14)], None, |_, _, x| {
            let [a, b, c, d] = split_image(&x[0])?;
            let top = merge_horizontal(&a.mul(&x[1].narrow(2, 0, 2)?.narrow(3, 0, 3)?)?, &b)?;
            Ok(merge_vertical(&top, &merge_horizontal(&c, &d.scale(2.0))?)?)
        }),
    )
}

/// Desk model plus loss: 20 parameter tensors spread over the layout, one
/// random entry each, and 5 input entries.
pub fn full_model() -> Named {
    let cfg = HipaConfig::desk();
    let model = Hipa::new(&cfg).unwrap();
    let params: ParamStore<f64> = model.init_params().cast();
    let names: Vec<String> = params.names().map(String::from).collect();
    let lr = random(&[1, 3, 16, 16], 20).scale(0.5).add_scalar(0.5);
    let gt = random(&[1, 3, 32, 32], 21).scale(0.5).add_scalar(0.5);
    let all: Vec<Tensor<f64>> = std::iter::once(lr).chain(params.iter().map(|(_, t)| t.detach())).collect();
    let mut rng = stream(23, 3);
    let stride = names.len() as f64 / 20.0;
    let mut entries: Vec<(usize, usize)> = (0..20)
        .map(|i| {
            let t = 1 + (i as f64 * stride) as usize;
            (t, rng.random_range(0..all[t].numel()))
        })
        .collect();
    entries.extend((0..5).map(|_| (0, rng.random_range(0..all[0].numel()))));
    let r = check_entries(
        &all,
        |xs| {
            let p = store(&names, &xs[1..]);
            let preds = model.forward(&p, &xs[0]).map_err(tensor_err)?;
            hipa_loss(&preds, &gt, cfg.loss_weights).map_err(tensor_err)
        },
        &entries,
        DEFAULT_STEP,
        DEFAULT_FLOOR,
    )
    .unwrap();
    one("hipa_forward + hipa_loss", r)
}

/// Every composite block with its tolerance.
pub fn all_blocks() -> Vec<(String, GradReport, f64)> {
    let mut out = Vec::new();
    for f in [
        residual_block,
        dilated_channel_attention,
        mrfam,
        mrfag,
        position_encodings,
        encoder_layer,
        ape_vit,
        shallow_fusion_and_head,
        split_merge,
    ] {
        out.extend(f().into_iter().map(|(n, r)| (n, r, TOL)));
    }
    out.extend(full_model().into_iter().map(|(n, r)| (n, r, MODEL_TOL)));
    out
}

pub const GRID: (usize, usize) = (4, 4);

pub fn small_vit(mode: ApeMode) -> (ApeVit, ParamStore) {
    let spec = ApeVitSpec {
        channels: 4,
        patch: 2,
        heads: 2,
        layers: 2,
        mode,
        reduction: 4,
        mlp_ratio: 2,
        table_grid: GRID,
    };
    let mut b = ParamBuilder::new();
    let v = ApeVit::new(&mut b, "vit", spec).unwrap();
    (v, b.finish(&mut stream(3, 0)))
}

/// Position encoding, then the encoder stack, on raw tokens.
fn run_tokens(v: &ApeVit, p: &ParamStore, tokens: &Tensor) -> Tensor {
    let x = match v.position.encode(p, tokens, GRID).unwrap() {
        Some(e) => tokens.add(&e).unwrap(),
        None => tokens.clone(),
    };
    v.encode_tokens(p, &x).unwrap()
}

pub fn permute_tokens(t: &Tensor, perm: &[usize]) -> Tensor {
    let &[n, count, d] = t.shape() else { unreachable!() };
    let src = t.data();
    Tensor::from_fn([n, count, d], |i| {
        let (b, k, j) = (i / (count * d), i / d % count, i % d);
        src[(b * count + perm[k]) * d + j]
    })
}

/// Max over entries of |f(πx) − π f(x)| for a seeded shuffle π.
pub fn equivariance_deviation(mode: ApeMode, zero_table: bool) -> f32 {
    use rand::seq::SliceRandom;
    let (v, mut p) = small_vit(mode);
    if zero_table {
        hipa_core::nn::fill(&mut p, "vit.pos.table", 0.0).unwrap();
    }
    let mut rng = stream(9, 4);
    let tokens = Tensor::from_fn([1, 16, 16], |_| rng.random_range(-1.0..1.0));
    let mut perm: Vec<usize> = (0..16).collect();
    perm.shuffle(&mut rng);
    let a = run_tokens(&v, &p, &permute_tokens(&tokens, &perm));
    let b = permute_tokens(&run_tokens(&v, &p, &tokens), &perm);
    a.max_abs_diff(&b).unwrap()
}
