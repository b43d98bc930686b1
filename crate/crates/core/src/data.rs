//! Image ingestion, bicubic degradation and training-sample assembly.
//!
//! Images are `[3, h, w]` tensors with values in [0, 1].

use std::collections::HashSet;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use hipa_tensor::{Tensor, TensorError};
use image::{ColorType, DynamicImage, ImageFormat, ImageReader};
use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{HipaError, Result};
use crate::io::write_atomic;
use crate::rng::Rng;

fn chw(op: &'static str, x: &Tensor) -> Result<[usize; 3]> {
    <[usize; 3]>::try_from(x.shape()).map_err(|_| {
        TensorError::ShapeMismatch {
            op,
            lhs: x.shape().to_vec(),
            rhs: vec![3, 0, 0],
        }
        .into()
    })
}

pub fn load_png(path: &Path) -> Result<Tensor> {
    let reader = ImageReader::open(path).map_err(|e| HipaError::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| HipaError::io(path, e))?;
    let img = reader.decode().map_err(|e| HipaError::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    decode_dynamic(img, path)
}

fn decode_dynamic(img: DynamicImage, path: &Path) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => {
            planar(&img.to_rgb8().into_raw(), h, w, |v| v as f32 / 255.0)
        }
        ColorType::L16 | ColorType::La16 | ColorType::Rgb16 | ColorType::Rgba16 => {
            planar(&img.to_rgb16().into_raw(), h, w, |v| v as f32 / 65535.0)
        }
        other => {
            return Err(HipaError::UnsupportedColorType {
                path: path.to_path_buf(),
                color: format!("{other:?}"),
            })
        }
    };
    Ok(Tensor::new([3, h, w], data)?)
}

/// Interleaved RGB to planar channels.
fn planar<V: Copy>(raw: &[V], h: usize, w: usize, f: impl Fn(V) -> f32) -> Vec<f32> {
    let mut out = vec![0.0; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * h * w + i] = f(px[c]);
        }
    }
    out
}

/// 8-bit PNG bytes of a `[3, h, w]` image, clamped and rounded.
pub fn encode_png(x: &Tensor) -> Result<Vec<u8>> {
    let [c, h, w] = chw("encode_png", x)?;
    if c != 3 {
        return Err(HipaError::InvalidSize(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = x.data();
    let raw: Vec<u8> = (0..plane)
        .flat_map(|i| (0..3).map(move |ch| (d[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized to image");
    let mut bytes = Cursor::new(Vec::new());
    img.write_to(&mut bytes, ImageFormat::Png).map_err(|e| HipaError::InvalidSize(e.to_string()))?;
    Ok(bytes.into_inner())
}

pub fn save_png(path: &Path, x: &Tensor) -> Result<()> {
    write_atomic(path, &encode_png(x)?)
}

const CUBIC_A: f64 = -0.5;

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        (CUBIC_A + 2.0) * x * x * x - (CUBIC_A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        CUBIC_A * x * x * x - 5.0 * CUBIC_A * x * x + 8.0 * CUBIC_A * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Four (source index, weight) taps per output position, half-pixel
/// centers, indices clamped to the edge.
pub fn bicubic_taps(inp: usize, out: usize) -> Vec<[(usize, f64); 4]> {
    let ratio = inp as f64 / out as f64;
    (0..out)
        .map(|dst| {
            let src = (dst as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let t = src - base;
            std::array::from_fn(|k| {
                let offset = k as f64 - 1.0;
                let idx = (base + offset).clamp(0.0, (inp - 1) as f64) as usize;
                (idx, cubic(t - offset))
            })
        })
        .collect()
}

pub fn bicubic_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [c, h, w] = chw("bicubic_resize", x)?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(HipaError::InvalidSize(format!("{h}×{w} -> {out_h}×{out_w}")));
    }
    let (ty, tx) = (bicubic_taps(h, out_h), bicubic_taps(w, out_w));
    let src = x.data();
    let mut rows = vec![0.0f64; c * h * out_w];
    for ch in 0..c {
        for r in 0..h {
            let line = &src[(ch * h + r) * w..][..w];
            for (j, taps) in tx.iter().enumerate() {
                rows[(ch * h + r) * out_w + j] = taps.iter().map(|&(i, wt)| wt * line[i] as f64).sum();
            }
        }
    }
    let mut out = vec![0.0f32; c * out_h * out_w];
    for ch in 0..c {
        for (i, taps) in ty.iter().enumerate() {
            for j in 0..out_w {
                let v: f64 = taps.iter().map(|&(r, wt)| wt * rows[(ch * h + r) * out_w + j]).sum();
                out[(ch * out_h + i) * out_w + j] = v as f32;
            }
        }
    }
    Ok(Tensor::new([c, out_h, out_w], out)?)
}

/// Bicubic upscale of a `[3, h, w]` LR image, clamped to [0, 1].
pub fn bicubic_upscale(lr: &Tensor, scale: usize) -> Result<Tensor> {
    let [_, h, w] = chw("bicubic_upscale", lr)?;
    let up = bicubic_resize(lr, h * scale, w * scale)?;
    Ok(Tensor::new(up.shape().to_vec(), up.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())?)
}

#[derive(Debug, Clone)]
pub struct ImagePair {
    pub lr: Tensor,
    pub hr: Tensor,
    pub id: String,
    pub scale: usize,
}

/// Crops `hr` to multiples of `scale` and derives the LR image by bicubic
/// downscaling.
pub fn make_pair(hr: &Tensor, scale: usize, id: impl Into<String>) -> Result<ImagePair> {
    let [_, h, w] = chw("make_pair", hr)?;
    if scale == 0 || h < scale || w < scale {
        return Err(HipaError::TooSmall(format!("{h}×{w} image at scale {scale}")));
    }
    let (ch, cw) = (h - h % scale, w - w % scale);
    let hr = hr.narrow(1, 0, ch)?.narrow(2, 0, cw)?;
    let lr = bicubic_resize(&hr, ch / scale, cw / scale)?;
    Ok(ImagePair {
        lr,
        hr,
        id: id.into(),
        scale,
    })
}

/// Aligned crop: LR window at `(y, x)` of side `size`, HR window at
/// `(s·y, s·x)` of side `s·size`.
pub fn crop_at(pair: &ImagePair, y: usize, x: usize, size: usize) -> Result<ImagePair> {
    let s = pair.scale;
    Ok(ImagePair {
        lr: pair.lr.narrow(1, y, size)?.narrow(2, x, size)?,
        hr: pair.hr.narrow(1, s * y, s * size)?.narrow(2, s * x, s * size)?,
        id: pair.id.clone(),
        scale: s,
    })
}

/// Uniform top-left offset for a `size` window inside `h × w`.
pub fn sample_offset(h: usize, w: usize, size: usize, rng: &mut Rng) -> Result<(usize, usize)> {
    if size == 0 || h < size || w < size {
        return Err(HipaError::TooSmall(format!("{h}×{w} image for a {size}×{size} crop")));
    }
    Ok((rng.random_range(0..=h - size), rng.random_range(0..=w - size)))
}

pub fn sample_crop(pair: &ImagePair, lr_crop: usize, rng: &mut Rng) -> Result<ImagePair> {
    let [_, h, w] = chw("sample_crop", &pair.lr)?;
    let (y, x) = sample_offset(h, w, lr_crop, rng)?;
    crop_at(pair, y, x, lr_crop)
}

/// Quarter turn counter-clockwise of a `[c, h, w]` image.
pub fn rot90(x: &Tensor) -> Tensor {
    let &[c, h, w] = x.shape() else { panic!("rot90 expects [c, h, w], got {:?}", x.shape()) };
    let d = x.data();
    Tensor::from_fn([c, w, h], |i| {
        let (ch, r, col) = (i / (w * h), i / h % w, i % h);
        d[(ch * h + col) * w + (w - 1 - r)]
    })
}

/// Mirror left to right.
pub fn flip_h(x: &Tensor) -> Tensor {
    let &[c, h, w] = x.shape() else { panic!("flip_h expects [c, h, w], got {:?}", x.shape()) };
    let d = x.data();
    Tensor::from_fn([c, h, w], |i| {
        let (row, col) = (i / w, i % w);
        d[row * w + (w - 1 - col)]
    })
}

/// One of the 8 symmetries of the square: `turns` quarter turns, then an
/// optional horizontal flip.
pub fn dihedral(x: &Tensor, turns: usize, flip: bool) -> Tensor {
    let mut y = x.clone();
    for _ in 0..turns % 4 {
        y = rot90(&y);
    }
    if flip {
        y = flip_h(&y);
    }
    y
}

pub fn augment(pair: &ImagePair, rng: &mut Rng) -> ImagePair {
    let k = rng.random_range(0..8usize);
    let (turns, flip) = (k % 4, k >= 4);
    ImagePair {
        lr: dihedral(&pair.lr, turns, flip),
        hr: dihedral(&pair.hr, turns, flip),
        id: pair.id.clone(),
        scale: pair.scale,
    }
}

/// Studio-swing BT.601 luma of a `[3, h, w]` image, as `[1, h, w]`.
pub fn rgb_to_y(x: &Tensor) -> Result<Tensor> {
    let [c, h, w] = chw("rgb_to_y", x)?;
    if c != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "rgb_to_y",
            lhs: x.shape().to_vec(),
            rhs: vec![3, h, w],
        }
        .into());
    }
    let plane = h * w;
    let d = x.data();
    let y = (0..plane)
        .map(|i| {
            let (r, g, b) = (d[i] as f64, d[plane + i] as f64, d[2 * plane + i] as f64);
            (((16.0 + 65.481 * r + 128.553 * g + 24.966 * b) / 255.0).clamp(0.0, 1.0)) as f32
        })
        .collect();
    Ok(Tensor::new([1, h, w], y)?)
}

/// Newline-separated list of HR image paths relative to the manifest file.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub root: PathBuf,
    pub split: String,
    pub entries: Vec<PathBuf>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HipaError::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let err = |msg: String| HipaError::Manifest {
            path: path.to_path_buf(),
            msg,
        };
        let mut seen = HashSet::new();
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if !seen.insert(line.to_string()) {
                return Err(err(format!("line {}: duplicate entry {line:?}", i + 1)));
            }
            let entry = PathBuf::from(line);
            if !root.join(&entry).is_file() {
                return Err(err(format!("line {}: {} does not exist", i + 1, root.join(&entry).display())));
            }
            entries.push(entry);
        }
        if entries.is_empty() {
            return Err(err("no images listed".into()));
        }
        Ok(Self {
            root,
            split: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default(),
            entries,
        })
    }

    pub fn write(path: &Path, entries: &[String]) -> Result<()> {
        let mut text = String::new();
        for e in entries {
            text.push_str(e);
            text.push('\n');
        }
        write_atomic(path, text.as_bytes())
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub pairs: Vec<ImagePair>,
    pub scale: usize,
}

impl Dataset {
    pub fn from_manifest(manifest: &Manifest, scale: usize) -> Result<Self> {
        let pairs = manifest
            .entries
            .par_iter()
            .map(|entry| {
                let hr = load_png(&manifest.root.join(entry))?;
                make_pair(&hr, scale, entry.to_string_lossy())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { pairs, scale })
    }

    pub fn from_images(images: &[(String, Tensor)], scale: usize) -> Result<Self> {
        let pairs = images
            .iter()
            .map(|(id, hr)| make_pair(hr, scale, id.clone()))
            .collect::<Result<_>>()?;
        Ok(Self { pairs, scale })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Order-sensitive hash of every id and pixel.
    pub fn fingerprint(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.scale.hash(&mut h);
        for p in &self.pairs {
            p.id.hash(&mut h);
            for t in [&p.lr, &p.hr] {
                t.shape().hash(&mut h);
                for v in t.data() {
                    v.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }
}

/// Same-size training crops stacked along n.
#[derive(Debug, Clone)]
pub struct Batch {
    pub lr: Tensor,
    pub hr: Tensor,
    pub ids: Vec<String>,
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let shape = parts[0].shape();
    let mut data = Vec::with_capacity(parts.len() * parts[0].numel());
    let mut out_shape = vec![parts.len()];
    out_shape.extend_from_slice(shape);
    for p in parts {
        if p.shape() != shape {
            return Err(TensorError::ShapeMismatch {
                op: "stack",
                lhs: shape.to_vec(),
                rhs: p.shape().to_vec(),
            }
            .into());
        }
        data.extend_from_slice(p.data());
    }
    Ok(Tensor::new(out_shape, data)?)
}

/// Draws `size` images with replacement, crops and augments each.
pub fn sample_batch(data: &Dataset, size: usize, lr_crop: usize, rng: &mut Rng) -> Result<Batch> {
    if data.is_empty() {
        return Err(HipaError::InvalidSize("empty dataset".into()));
    }
    let samples = (0..size)
        .map(|_| {
            let pair = &data.pairs[rng.random_range(0..data.len())];
            Ok(augment(&sample_crop(pair, lr_crop, rng)?, rng))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Batch {
        lr: stack(&samples.iter().map(|s| &s.lr).collect::<Vec<_>>())?,
        hr: stack(&samples.iter().map(|s| &s.hr).collect::<Vec<_>>())?,
        ids: samples.into_iter().map(|s| s.id).collect(),
    })
}

/// Adds a leading batch axis.
pub fn unsqueeze(x: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    Ok(x.reshape(shape)?)
}
