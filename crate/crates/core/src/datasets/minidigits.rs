//! Procedural 16x16 digit-like glyphs.
//!
//! Each class is a fixed set of polylines in a `[-1, 1]^2` box (y pointing
//! down). A sample applies a seeded random similarity transform, per-vertex
//! wobble and stroke width to its class template and rasterises it with a
//! one-pixel anti-aliased edge. Glyphs stay inside the inscribed circle so
//! rotations about the image center do not clip them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::LabeledImages;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MINIDIGITS_SIZE: usize = 16;

type Polyline = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, steps: usize) -> Polyline {
    (0..=steps)
        .map(|i| {
            let t = i as f64 / steps as f64 * std::f64::consts::TAU;
            (cx + rx * t.cos(), cy + ry * t.sin())
        })
        .collect()
}

fn templates() -> Vec<Vec<Polyline>> {
    vec![
        vec![ellipse(0.0, 0.0, 0.5, 0.8, 14)],
        vec![
            vec![(-0.3, -0.5), (0.05, -0.8), (0.05, 0.8)],
            vec![(-0.3, 0.8), (0.4, 0.8)],
        ],
        vec![vec![
            (-0.5, -0.5),
            (-0.2, -0.8),
            (0.3, -0.8),
            (0.5, -0.5),
            (0.4, -0.1),
            (-0.5, 0.8),
            (0.55, 0.8),
        ]],
        vec![vec![
            (-0.5, -0.75),
            (0.45, -0.8),
            (0.0, -0.1),
            (0.5, 0.3),
            (0.3, 0.8),
            (-0.5, 0.7),
        ]],
        vec![vec![(0.25, 0.8), (0.25, -0.8), (-0.55, 0.3), (0.55, 0.3)]],
        vec![vec![
            (0.5, -0.8),
            (-0.4, -0.8),
            (-0.45, -0.1),
            (0.3, -0.1),
            (0.5, 0.35),
            (0.3, 0.8),
            (-0.5, 0.75),
        ]],
        vec![vec![
            (0.4, -0.8),
            (-0.3, -0.3),
            (-0.5, 0.3),
            (-0.2, 0.8),
            (0.3, 0.75),
            (0.45, 0.3),
            (0.1, 0.0),
            (-0.45, 0.2),
        ]],
        vec![
            vec![(-0.5, -0.8), (0.55, -0.8), (-0.1, 0.8)],
            vec![(-0.2, 0.0), (0.35, 0.0)],
        ],
        vec![ellipse(0.0, -0.42, 0.33, 0.36, 10), ellipse(0.0, 0.4, 0.42, 0.4, 10)],
        vec![ellipse(0.0, -0.4, 0.38, 0.38, 10), vec![(0.38, -0.4), (0.2, 0.8)]],
    ]
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

fn render(strokes: &[Polyline], half_width: f64, size: usize) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for r in 0..size {
        for c in 0..size {
            let p = (c as f64, r as f64);
            let d = strokes
                .iter()
                .flat_map(|s| s.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min);
            out[r * size + c] = (half_width + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    out
}

fn draw_sample(template: &[Polyline], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let size = MINIDIGITS_SIZE as f64;
    let center = (size - 1.0) / 2.0;
    let angle = rng.gen_range(-10f64..10.0).to_radians();
    let scale = rng.gen_range(4.6..5.4);
    let shear = rng.gen_range(-0.15..0.15);
    let shift = (rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6));
    let half_width = rng.gen_range(0.45..0.8);
    let (s, c) = angle.sin_cos();

    let strokes: Vec<Polyline> = template
        .iter()
        .map(|line| {
            line.iter()
                .map(|&(x, y)| {
                    let x = x + rng.gen_range(-0.06..0.06) + shear * y;
                    let y = y + rng.gen_range(-0.06..0.06);
                    let (rx, ry) = (c * x - s * y, s * x + c * y);
                    (center + shift.0 + scale * rx, center + shift.1 + scale * ry)
                })
                .collect()
        })
        .collect();

    let mut pixels = render(&strokes, half_width, MINIDIGITS_SIZE);
    for p in &mut pixels {
        *p = (*p + rng.gen_range(0.0..0.04)).min(1.0);
    }
    pixels
}

/// `n` glyphs of `classes` balanced classes (sample `i` has label
/// `i % classes`), deterministic in `seed`.
pub fn gen_minidigits(seed: u64, n: usize, classes: usize) -> Result<LabeledImages> {
    let templates = templates();
    if !(2..=templates.len()).contains(&classes) {
        return Err(Error::Argument(format!(
            "minidigits supports 2..={} classes, got {classes}",
            templates.len()
        )));
    }
    if n < classes {
        return Err(Error::Argument(format!(
            "need at least one sample per class: n = {n} < k = {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * MINIDIGITS_SIZE * MINIDIGITS_SIZE);
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for &l in &labels {
        data.extend(draw_sample(&templates[l], &mut rng));
    }
    let images = Tensor::new(vec![n, MINIDIGITS_SIZE, MINIDIGITS_SIZE], data)?;
    LabeledImages::new(images, labels, classes)
}
