//! Seeded structured images for toy training: checkerboards, gradients and
//! text-like strokes.

use hipa_tensor::Tensor;
use rand::Rng as _;

use crate::rng::{stream, Rng, STREAM_SYNTH};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pattern {
    Checkerboard,
    Gradient,
    Strokes,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Self::Checkerboard, Self::Gradient, Self::Strokes];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Checkerboard => "checker",
            Self::Gradient => "gradient",
            Self::Strokes => "strokes",
        }
    }
}

fn color(rng: &mut Rng) -> [f32; 3] {
    std::array::from_fn(|_| rng.random_range(0.05..0.95))
}

/// Two colors whose luma differs by at least 0.3.
fn contrasting(rng: &mut Rng) -> ([f32; 3], [f32; 3]) {
    loop {
        let (a, b) = (color(rng), color(rng));
        let luma = |c: [f32; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        if (luma(a) - luma(b)).abs() >= 0.3 {
            return (a, b);
        }
    }
}

fn paint(size: usize, f: impl Fn(f32, f32) -> [f32; 3]) -> Tensor {
    let plane = size * size;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        let px = f((i % size) as f32 + 0.5, (i / size) as f32 + 0.5);
        for c in 0..3 {
            data[c * plane + i] = px[c].clamp(0.0, 1.0);
        }
    }
    Tensor::new([3, size, size], data).expect("sized buffer")
}

fn mix(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    std::array::from_fn(|c| a[c] + (b[c] - a[c]) * t)
}

pub fn checkerboard(size: usize, rng: &mut Rng) -> Tensor {
    let cell = rng.random_range(3..=9) as f32;
    let (ox, oy) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
    let (a, b) = contrasting(rng);
    paint(size, |x, y| {
        let parity = (((x + ox) / cell).floor() + ((y + oy) / cell).floor()) as i64 & 1;
        if parity == 0 {
            a
        } else {
            b
        }
    })
}

/// Linear ramp at a random angle with a faint ripple across it.
pub fn gradient(size: usize, rng: &mut Rng) -> Tensor {
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let (a, b) = contrasting(rng);
    let period = rng.random_range(6.0..16.0f32);
    let n = size as f32;
    paint(size, |x, y| {
        let u = ((x - n / 2.0) * dx + (y - n / 2.0) * dy) / n + 0.5;
        let ripple = 0.08 * ((x * dy - y * dx) * std::f32::consts::TAU / period).sin();
        mix(a, b, u.clamp(0.0, 1.0) + ripple)
    })
}

fn segment_distance(p: (f32, f32), a: (f32, f32), b: (f32, f32)) -> f32 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * vx).powi(2) + (p.1 - a.1 - t * vy).powi(2)).sqrt()
}

/// Antialiased polylines on a flat background, loosely glyph-like.
pub fn strokes(size: usize, rng: &mut Rng) -> Tensor {
    let (bg, ink) = contrasting(rng);
    let n = size as f32;
    let mut segments = Vec::new();
    for _ in 0..rng.random_range(3..=6) {
        let width = rng.random_range(1.2..3.0f32);
        let mut p = (rng.random_range(0.1..0.9) * n, rng.random_range(0.1..0.9) * n);
        for _ in 0..rng.random_range(2..=4) {
            let q = (
                (p.0 + rng.random_range(-0.35..0.35) * n).clamp(2.0, n - 2.0),
                (p.1 + rng.random_range(-0.35..0.35) * n).clamp(2.0, n - 2.0),
            );
            segments.push((p, q, width));
            p = q;
        }
    }
    paint(size, |x, y| {
        let cover = segments
            .iter()
            .map(|&(a, b, w)| (w / 2.0 + 0.5 - segment_distance((x, y), a, b)).clamp(0.0, 1.0))
            .fold(0.0f32, f32::max);
        mix(bg, ink, cover)
    })
}

/// `count` images of side `size`, cycling through the patterns. Ids look
/// like `synth_003_strokes`.
pub fn generate(count: usize, size: usize, seed: u64) -> Vec<(String, Tensor)> {
    let mut rng = stream(seed, STREAM_SYNTH);
    (0..count)
        .map(|i| {
            let pattern = Pattern::ALL[i % 3];
            let img = match pattern {
                Pattern::Checkerboard => checkerboard(size, &mut rng),
                Pattern::Gradient => gradient(size, &mut rng),
                Pattern::Strokes => strokes(size, &mut rng),
            };
            (format!("synth_{i:03}_{}", pattern.as_str()), img)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_and_in_range() {
        let a = generate(6, 64, 3);
        let b = generate(6, 64, 3);
        assert_eq!(a.len(), 6);
        for ((ia, ta), (ib, tb)) in a.iter().zip(&b) {
            assert_eq!(ia, ib);
            assert_eq!(ta.shape(), &[3, 64, 64]);
            assert_eq!(ta.data(), tb.data());
            assert!(ta.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_ne!(generate(1, 16, 4)[0].1.data(), generate(1, 16, 5)[0].1.data());
    }

    #[test]
    fn images_have_structure() {
        for (id, img) in generate(9, 64, 0) {
            let d = img.data();
            let (lo, hi) = d.iter().fold((1.0f32, 0.0f32), |(l, h), &v| (l.min(v), h.max(v)));
            assert!(hi - lo > 0.2, "{id} is nearly flat");
        }
    }

    #[test]
    fn segment_distance_closed_form() {
        assert_eq!(segment_distance((0.0, 3.0), (-1.0, 0.0), (1.0, 0.0)), 3.0);
        assert_eq!(segment_distance((4.0, 0.0), (-1.0, 0.0), (1.0, 0.0)), 3.0);
    }
}
