//! PSNR and SSIM on the luminance channel, and per-dataset reports.

use std::fmt::Write as _;

use hipa_tensor::{Tensor, TensorError};

use crate::data::{bicubic_upscale, rgb_to_y, unsqueeze, Dataset, ImagePair};
use crate::error::{HipaError, Result};
use crate::model::Hipa;
use crate::params::ParamStore;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Both images cropped by `border` on every side, as f64 planes.
fn cropped(a: &Tensor, b: &Tensor, border: usize) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(TensorError::ShapeMismatch {
            op: "metric",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
        .into());
    }
    let [c, h, w] = [a.shape()[0], a.shape()[1], a.shape()[2]];
    if h <= 2 * border || w <= 2 * border {
        return Err(HipaError::TooSmall(format!("{h}×{w} image with border {border}")));
    }
    let (ch, cw) = (h - 2 * border, w - 2 * border);
    let pick = |t: &Tensor| {
        let d = t.data();
        let mut out = Vec::with_capacity(c * ch * cw);
        for k in 0..c {
            for r in border..h - border {
                out.extend(d[(k * h + r) * w + border..][..cw].iter().map(|&v| v as f64));
            }
        }
        out
    };
    Ok((pick(a), pick(b), c * ch, cw))
}

/// Peak signal-to-noise ratio in dB for data in [0, 1]. Identical regions
/// give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor, border: usize) -> Result<f64> {
    let (x, y, _, _) = cropped(a, b, border)?;
    let mse = x.iter().zip(&y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / x.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let raw: [f64; SSIM_WINDOW] =
        std::array::from_fn(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    let total: f64 = raw.iter().sum();
    raw.map(|v| v / total)
}

/// Separable valid-mode filtering of one `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for j in 0..ow {
            rows[r * ow + j] = (0..SSIM_WINDOW).map(|t| k[t] * x[r * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..SSIM_WINDOW).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Single-scale SSIM, averaged over every valid window position of every
/// channel.
pub fn ssim(a: &Tensor, b: &Tensor, border: usize) -> Result<f64> {
    let (x, y, _, w) = cropped(a, b, border)?;
    let c = a.shape()[0];
    let h = a.shape()[1] - 2 * border;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(HipaError::TooSmall(format!("{h}×{w} region for an {SSIM_WINDOW}×{SSIM_WINDOW} window")));
    }
    let k = gaussian_window();
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        let (px, py) = (&x[ch * plane..][..plane], &y[ch * plane..][..plane]);
        let prod = |f: &dyn Fn(usize) -> f64| filter_valid(&(0..plane).map(f).collect::<Vec<_>>(), h, w, &k);
        let mu_x = filter_valid(px, h, w, &k);
        let mu_y = filter_valid(py, h, w, &k);
        let xx = prod(&|i| px[i] * px[i]);
        let yy = prod(&|i| py[i] * py[i]);
        let xy = prod(&|i| px[i] * py[i]);
        for i in 0..mu_x.len() {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let (vx, vy, cxy) = (xx[i] - mx * mx, yy[i] - my * my, xy[i] - mx * my);
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        count += mu_x.len();
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub scale: usize,
    pub border: usize,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>, scale: usize, border: usize) -> Self {
        let n = rows.len().max(1) as f64;
        Self {
            mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            rows,
            scale,
            border,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,psnr_db,ssim\n");
        for r in &self.rows {
            writeln!(out, "{},{},{:.6}", r.id, fmt_db(r.psnr), r.ssim).unwrap();
        }
        writeln!(out, "mean,{},{:.6}", fmt_db(self.mean_psnr), self.mean_ssim).unwrap();
        out
    }
}

/// Scores `predict(pair)` (a `[3, H, W]` SR image) against each HR image on
/// clamped Y with `border = scale`.
pub fn evaluate(data: &Dataset, mut predict: impl FnMut(&ImagePair) -> Result<Tensor>) -> Result<EvalReport> {
    let border = data.scale;
    let rows = data
        .pairs
        .iter()
        .map(|pair| {
            let sr = predict(pair)?;
            if sr.shape() != pair.hr.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "evaluate",
                    lhs: sr.shape().to_vec(),
                    rhs: pair.hr.shape().to_vec(),
                }
                .into());
            }
            let sr = Tensor::new(sr.shape().to_vec(), sr.data().iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
            let (ys, yh) = (rgb_to_y(&sr)?, rgb_to_y(&pair.hr)?);
            Ok(EvalRow {
                id: pair.id.clone(),
                psnr: psnr(&ys, &yh, border)?,
                ssim: ssim(&ys, &yh, border)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_rows(rows, data.scale, border))
}

/// Final-stage model output for one LR image.
pub fn model_predict(model: &Hipa, params: &ParamStore, lr: &Tensor) -> Result<Tensor> {
    let [_, _, out] = model.super_resolve(params, &unsqueeze(lr)?)?;
    let shape = out.shape()[1..].to_vec();
    Ok(out.reshape(shape)?)
}

pub fn evaluate_model(model: &Hipa, params: &ParamStore, data: &Dataset) -> Result<EvalReport> {
    if model.config.scale != data.scale {
        return Err(HipaError::ConfigMismatch(format!(
            "model scale {} vs data scale {}",
            model.config.scale, data.scale
        )));
    }
    evaluate(data, |pair| model_predict(model, params, &pair.lr))
}

pub fn evaluate_bicubic(data: &Dataset) -> Result<EvalReport> {
    evaluate(data, |pair| bicubic_upscale(&pair.lr, data.scale))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng as _;

    fn noise_image(seed: u64, shape: [usize; 3]) -> Tensor {
        let mut rng = stream(seed, 7);
        Tensor::from_fn(shape, |_| rng.random_range(0.2..0.8))
    }

    #[test]
    fn offset_gives_twenty_db() {
        let a = Tensor::zeros([1, 16, 16]);
        let b = Tensor::full([1, 16, 16], 0.1f32);
        // 0.1f32 is not exactly 0.1
        assert!((psnr(&a, &b, 2).unwrap() - 20.0).abs() < 1e-6);
        assert_eq!(psnr(&a, &a, 0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn border_excludes_edges() {
        let a = Tensor::zeros([1, 8, 8]);
        let b = Tensor::from_fn([1, 8, 8], |i| if i < 8 { 1.0 } else { 0.0 });
        assert_eq!(psnr(&a, &b, 1).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b, 0).unwrap().is_finite());
        assert!(psnr(&a, &b, 4).is_err());
    }

    #[test]
    fn psnr_falls_with_noise() {
        let a = noise_image(0, [1, 24, 24]);
        let n = noise_image(1, [1, 24, 24]);
        let vals: Vec<f64> = [0.01f32, 0.05, 0.2]
            .iter()
            .map(|&amp| psnr(&a, &a.add(&n.add_scalar(-0.5).scale(amp)).unwrap(), 0).unwrap())
            .collect();
        assert!(vals[0] > vals[1] && vals[1] > vals[2], "{vals:?}");
    }

    #[test]
    fn ssim_identity_symmetry_bounds() {
        let a = noise_image(2, [1, 20, 20]);
        let b = noise_image(3, [1, 20, 20]);
        assert!((ssim(&a, &a, 2).unwrap() - 1.0).abs() < 1e-12);
        let (ab, ba) = (ssim(&a, &b, 2).unwrap(), ssim(&b, &a, 2).unwrap());
        assert_eq!(ab, ba);
        assert!((-1.0..1.0).contains(&ab));
        let neg = Tensor::from_fn([1, 20, 20], |i| 1.0 - a.data()[i]);
        assert!(ssim(&a, &neg, 0).unwrap() < 0.0);
        assert!(ssim(&Tensor::zeros([1, 12, 12]), &Tensor::zeros([1, 12, 12]), 1).is_err());
    }

    #[test]
    fn ssim_constant_closed_form() {
        // flat images: only the luminance term survives
        let (x, y) = (0.3f32, 0.6f32);
        let a = Tensor::full([1, 11, 11], x);
        let b = Tensor::full([1, 11, 11], y);
        let (x, y) = (x as f64, y as f64);
        let expect = (2.0 * x * y + SSIM_C1) / (x * x + y * y + SSIM_C1);
        assert!((ssim(&a, &b, 0).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn window_is_normalised() {
        let k = gaussian_window();
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[10]);
    }

    #[test]
    fn report_means_and_csv() {
        let img = Tensor::full([3, 16, 16], 0.5f32);
        let data = Dataset::from_images(&[("flat".into(), img)], 2).unwrap();
        let rep = evaluate_bicubic(&data).unwrap();
        assert_eq!(rep.mean_psnr, f64::INFINITY);
        assert!((rep.mean_ssim - 1.0).abs() < 1e-12);
        assert_eq!(rep.to_csv(), "id,psnr_db,ssim\nflat,inf,1.000000\nmean,inf,1.000000\n");

        let rows = vec![
            EvalRow { id: "a".into(), psnr: 30.0, ssim: 0.5 },
            EvalRow { id: "b".into(), psnr: 20.0, ssim: 0.7 },
        ];
        let rep = EvalReport::from_rows(rows, 2, 2);
        assert_eq!(rep.mean_psnr, 25.0);
        assert!((rep.mean_ssim - 0.6).abs() < 1e-12);
    }
}
