use hipa_tensor::{Conv2dOptions, Element, Tensor, TensorError};

use super::{cast, ChannelGate, Conv2d, LayerNorm, Linear};
use crate::config::ApeMode;
use crate::error::Result;
use crate::params::{Init, ParamBuilder, ParamStore};

fn grid_of(op: &'static str, h: usize, w: usize, patch: usize) -> Result<(usize, usize)> {
    for extent in [h, w] {
        if patch == 0 || extent % patch != 0 {
            return Err(TensorError::NotDivisible { op, extent, by: patch }.into());
        }
    }
    Ok((h / patch, w / patch))
}

/// `[n, C, h, w] -> [n, h·w/P², P²·C]`; each token is its P×P×C patch
/// flattened row by row, channels fastest.
pub fn patch_embed<T: Element>(f: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[n, c, h, w] = f.shape() else {
        return Err(TensorError::ShapeMismatch {
            op: "patch_embed",
            lhs: f.shape().to_vec(),
            rhs: vec![0; 4],
        }
        .into());
    };
    let (gh, gw) = grid_of("patch_embed", h, w, patch)?;
    Ok(f.reshape([n, c, gh, patch, gw, patch])?
        .permute(&[0, 2, 4, 3, 5, 1])?
        .reshape([n, gh * gw, patch * patch * c])?)
}

/// Inverse of [`patch_embed`].
pub fn patch_fold<T: Element>(tokens: &Tensor<T>, patch: usize, c: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "patch_fold",
        lhs: tokens.shape().to_vec(),
        rhs: vec![h * w / (patch * patch).max(1), patch * patch * c],
    };
    let &[n, count, d] = tokens.shape() else {
        return Err(mismatch().into());
    };
    let (gh, gw) = grid_of("patch_fold", h, w, patch)?;
    if count != gh * gw || d != patch * patch * c {
        return Err(mismatch().into());
    }
    Ok(tokens
        .reshape([n, gh, gw, patch, patch, c])?
        .permute(&[0, 5, 1, 3, 2, 4])?
        .reshape([n, c, h, w])?)
}

/// Views `[n, gh·gw, D]` tokens as a `[n, D, gh, gw]` map.
pub fn tokens_to_map<T: Element>(tokens: &Tensor<T>, grid: (usize, usize)) -> Result<Tensor<T>> {
    let &[n, count, d] = tokens.shape() else {
        return Err(TensorError::ShapeMismatch {
            op: "tokens_to_map",
            lhs: tokens.shape().to_vec(),
            rhs: vec![grid.0 * grid.1],
        }
        .into());
    };
    if count != grid.0 * grid.1 {
        return Err(TensorError::ShapeMismatch {
            op: "tokens_to_map",
            lhs: tokens.shape().to_vec(),
            rhs: vec![n, grid.0 * grid.1, d],
        }
        .into());
    }
    Ok(tokens.reshape([n, grid.0, grid.1, d])?.permute(&[0, 3, 1, 2])?)
}

pub fn map_to_tokens<T: Element>(map: &Tensor<T>) -> Result<Tensor<T>> {
    let &[n, d, gh, gw] = map.shape() else {
        return Err(TensorError::ShapeMismatch {
            op: "map_to_tokens",
            lhs: map.shape().to_vec(),
            rhs: vec![0; 4],
        }
        .into());
    };
    Ok(map.permute(&[0, 2, 3, 1])?.reshape([n, gh * gw, d])?)
}

/// Linear resampling matrix `[out, in]` with half-pixel centers and edge clamp.
pub fn interpolation_matrix<T: Element>(out: usize, inp: usize) -> Tensor<T> {
    let mut m = vec![0.0f64; out * inp];
    for i in 0..out {
        let src = ((i as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        let frac = src - lo as f64;
        m[i * inp + lo] += 1.0 - frac;
        m[i * inp + hi] += frac;
    }
    Tensor::new([out, inp], m.into_iter().map(cast).collect()).expect("sized above")
}

/// Position signal added to the patch tokens.
#[derive(Debug, Clone)]
pub enum PositionEncoding {
    None,
    /// Learned `[D, gh, gw]` table, linearly resized when the grid differs.
    Learned { table: String, grid: (usize, usize) },
    /// Depthwise 3×3 convolution over the token map.
    Conditional { conv: Conv2d },
    /// 3×3 convolution over the token map, gated per channel.
    Attention { conv: Conv2d, gate: ChannelGate },
}

impl PositionEncoding {
    pub fn new(
        b: &mut ParamBuilder,
        name: &str,
        mode: ApeMode,
        d: usize,
        reduction: usize,
        table_grid: (usize, usize),
    ) -> Self {
        match mode {
            ApeMode::None => Self::None,
            ApeMode::Pe => Self::Learned {
                table: b.declare(
                    format!("{name}.table"),
                    [d, table_grid.0, table_grid.1],
                    Init::Uniform(0.02),
                ),
                grid: table_grid,
            },
            ApeMode::Cpe => Self::Conditional {
                conv: Conv2d::new(
                    b,
                    &format!("{name}.conv"),
                    d,
                    d,
                    3,
                    Conv2dOptions {
                        groups: d,
                        ..Conv2dOptions::same(3, 1)
                    },
                ),
            },
            ApeMode::Ape => Self::Attention {
                conv: Conv2d::same(b, &format!("{name}.conv"), d, d, 3),
                gate: ChannelGate::new(b, &format!("{name}.gate"), d, (d / reduction).max(1)),
            },
        }
    }

    /// The encoding for `tokens: [n, gh·gw, D]`, or `None` when disabled.
    pub fn encode<T: Element>(
        &self,
        p: &ParamStore<T>,
        tokens: &Tensor<T>,
        grid: (usize, usize),
    ) -> Result<Option<Tensor<T>>> {
        let enc = match self {
            Self::None => return Ok(None),
            Self::Learned { table, grid: native } => {
                let table = p.get(table)?;
                let d = table.shape()[0];
                let resized = if *native == grid {
                    table.clone()
                } else {
                    let ry = interpolation_matrix::<T>(grid.0, native.0);
                    let rx_t = interpolation_matrix::<T>(grid.1, native.1).transpose_last()?;
                    ry.matmul(table)?.matmul(&rx_t)?
                };
                map_to_tokens(&resized.reshape([1, d, grid.0, grid.1])?)?
            }
            Self::Conditional { conv } => map_to_tokens(&conv.forward(p, &tokens_to_map(tokens, grid)?)?)?,
            Self::Attention { conv, gate } => {
                let f = conv.forward(p, &tokens_to_map(tokens, grid)?)?;
                map_to_tokens(&gate.forward(p, &f)?)?
            }
        };
        Ok(Some(enc))
    }
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidHyperparam {
                op: "attention",
                msg: format!("{heads} heads do not divide token dim {d}"),
            }
            .into());
        }
        Ok(Self {
            q: Linear::new(b, &format!("{name}.q"), d, d),
            k: Linear::new(b, &format!("{name}.k"), d, d),
            v: Linear::new(b, &format!("{name}.v"), d, d),
            out: Linear::new(b, &format!("{name}.out"), d, d),
            heads,
        })
    }

    fn split_heads<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let &[n, count, d] = x.shape() else { unreachable!("projections keep rank 3") };
        Ok(x.reshape([n, count, self.heads, d / self.heads])?.permute(&[0, 2, 1, 3])?)
    }

    /// Softmax attention weights `[n, heads, N, N]` and the head outputs.
    fn attend<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let &[n, count, d] = x.shape() else {
            return Err(TensorError::ShapeMismatch {
                op: "attention",
                lhs: x.shape().to_vec(),
                rhs: vec![0; 3],
            }
            .into());
        };
        let dh = d / self.heads;
        let q = self.split_heads(&self.q.forward(p, x)?)?;
        let k = self.split_heads(&self.k.forward(p, x)?)?;
        let v = self.split_heads(&self.v.forward(p, x)?)?;
        let scores = q.matmul(&k.transpose_last()?)?.scale(cast(1.0 / (dh as f64).sqrt()));
        let weights = scores.softmax(3)?;
        let heads = weights
            .matmul(&v)?
            .permute(&[0, 2, 1, 3])?
            .reshape([n, count, d])?;
        Ok((weights, heads))
    }

    pub fn weights<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.attend(p, x)?.0)
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, heads) = self.attend(p, x)?;
        self.out.forward(p, &heads)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize, ratio: usize) -> Self {
        Self {
            fc1: Linear::new(b, &format!("{name}.fc1"), d, ratio * d),
            fc2: Linear::new(b, &format!("{name}.fc2"), ratio * d, d),
        }
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.fc2.forward(p, &self.fc1.forward(p, x)?.gelu())
    }
}

/// Pre-norm encoder: `x + MHA(LN x)`, then `x + MLP(LN x)`.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(b, &format!("{name}.attn"), d, heads)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), d),
            mlp: Mlp::new(b, &format!("{name}.mlp"), d, mlp_ratio),
        })
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let x = x.add(&self.attn.forward(p, &self.ln1.forward(p, x)?)?)?;
        Ok(x.add(&self.mlp.forward(p, &self.ln2.forward(p, &x)?)?)?)
    }
}

/// Patch embedding, position encoding, encoder stack, fold back.
#[derive(Debug, Clone)]
pub struct ApeVit {
    pub patch: usize,
    pub channels: usize,
    pub position: PositionEncoding,
    pub layers: Vec<EncoderLayer>,
}

#[derive(Debug, Clone, Copy)]
pub struct ApeVitSpec {
    pub channels: usize,
    pub patch: usize,
    pub heads: usize,
    pub layers: usize,
    pub mode: ApeMode,
    pub reduction: usize,
    pub mlp_ratio: usize,
    /// Token grid the learned table is sized for.
    pub table_grid: (usize, usize),
}

impl ApeVit {
    pub fn new(b: &mut ParamBuilder, name: &str, spec: ApeVitSpec) -> Result<Self> {
        let d = spec.patch * spec.patch * spec.channels;
        let position = PositionEncoding::new(b, &format!("{name}.pos"), spec.mode, d, spec.reduction, spec.table_grid);
        let layers = (0..spec.layers)
            .map(|i| EncoderLayer::new(b, &format!("{name}.enc{i}"), d, spec.heads, spec.mlp_ratio))
            .collect::<Result<_>>()?;
        Ok(Self {
            patch: spec.patch,
            channels: spec.channels,
            position,
            layers,
        })
    }

    /// Embedded tokens plus position encoding, before the encoder stack.
    pub fn embed<T: Element>(&self, p: &ParamStore<T>, f: &Tensor<T>) -> Result<(Tensor<T>, (usize, usize))> {
        let tokens = patch_embed(f, self.patch)?;
        let grid = (f.shape()[2] / self.patch, f.shape()[3] / self.patch);
        let tokens = match self.position.encode(p, &tokens, grid)? {
            Some(enc) => tokens.add(&enc)?,
            None => tokens,
        };
        Ok((tokens, grid))
    }

    pub fn encode_tokens<T: Element>(&self, p: &ParamStore<T>, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = tokens.clone();
        for layer in &self.layers {
            x = layer.forward(p, &x)?;
        }
        Ok(x)
    }

    pub fn forward<T: Element>(&self, p: &ParamStore<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
        let &[_, c, h, w] = f.shape() else {
            return Err(TensorError::ShapeMismatch {
                op: "ape_vit",
                lhs: f.shape().to_vec(),
                rhs: vec![0; 4],
            }
            .into());
        };
        let (tokens, _) = self.embed(p, f)?;
        patch_fold(&self.encode_tokens(p, &tokens)?, self.patch, c, h, w)
    }
}
