//! Procedural handwritten-glyph classes.
//!
//! Classes come in alphabets: runs of `alphabet_size` consecutive classes whose
//! glyphs are assembled from one shared pool of quadratic strokes, so sibling
//! classes look alike. Examples of a class redraw its strokes under a random
//! affine jitter with per-stroke and per-point noise, an occasional missing
//! stroke and a random pen width. Pixels are quantized to 8 bits so a saved
//! dataset reloads bit-exactly.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::FewShotDataset;
use crate::error::{Error, Result};
use crate::seed::{self, Rng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub n_per_class: usize,
    /// Square image side in pixels.
    pub size: usize,
    pub seed: u64,
    /// Consecutive classes drawn from one shared stroke pool.
    pub alphabet_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_classes: 50,
            n_per_class: 20,
            size: 28,
            seed: 0,
            alphabet_size: 5,
        }
    }
}

type Pt = (f64, f64);

/// Control points of a quadratic Bezier, unit-square coordinates.
type Stroke = [Pt; 3];

const SEGMENTS: usize = 12;

/// Seed index offset separating alphabet pools from class glyphs.
const ALPHABET_BASE: u32 = 1 << 24;

fn random_stroke(rng: &mut Rng, start: Option<Pt>) -> Stroke {
    let pen = start.unwrap_or_else(|| (rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)));
    let mut step = || -> Pt {
        let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r: f64 = rng.random_range(0.15..0.35);
        (a.cos() * r, a.sin() * r)
    };
    let d1 = step();
    let d2 = step();
    let c = clamp((pen.0 + d1.0, pen.1 + d1.1));
    let end = clamp((c.0 + d2.0, c.1 + d2.1));
    [pen, c, end]
}

fn clamp(p: Pt) -> Pt {
    (p.0.clamp(0.12, 0.88), p.1.clamp(0.12, 0.88))
}

fn alphabet(rng: &mut Rng) -> Vec<Stroke> {
    let n = rng.random_range(5..=7);
    (0..n).map(|_| random_stroke(rng, None)).collect()
}

/// 2 to 4 strokes: mostly pool strokes placed anywhere, some fresh ones.
fn glyph(pool: &[Stroke], rng: &mut Rng) -> Vec<Stroke> {
    let n = rng.random_range(2..=4);
    let mut strokes: Vec<Stroke> = Vec::with_capacity(n);
    for _ in 0..n {
        let prev = strokes.last().map(|s| s[2]);
        if rng.random_bool(0.25) {
            let start = if rng.random_bool(0.5) { prev } else { None };
            strokes.push(random_stroke(rng, start));
            continue;
        }
        let base = pool[rng.random_range(0..pool.len())];
        let anchor = match prev {
            Some(p) if rng.random_bool(0.5) => p,
            _ => (rng.random_range(0.25..0.75), rng.random_range(0.25..0.75)),
        };
        let (dx, dy) = (anchor.0 - base[0].0, anchor.1 - base[0].1);
        strokes.push(base.map(|(x, y)| clamp((x + dx, y + dy))));
    }
    strokes
}

fn bezier(s: &Stroke, t: f64) -> Pt {
    let u = 1.0 - t;
    (
        u * u * s[0].0 + 2.0 * u * t * s[1].0 + t * t * s[2].0,
        u * u * s[0].1 + 2.0 * u * t * s[1].1 + t * t * s[2].1,
    )
}

fn seg_dist2(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    qx * qx + qy * qy
}

fn render(strokes: &[Stroke], size: usize, rng: &mut Rng, out: &mut [f32]) {
    let s = size as f64;
    let rot: f64 = rng.random_range(-0.25..0.25);
    let scale: f64 = rng.random_range(0.8..1.2);
    let shear: f64 = rng.random_range(-0.25..0.25);
    let (tx, ty): Pt = (rng.random_range(-0.08..0.08), rng.random_range(-0.08..0.08));
    let width_px: f64 = rng.random_range(1.0..2.4);
    let (cr, sr) = (rot.cos(), rot.sin());
    let warp = |p: Pt, rng: &mut Rng| -> Pt {
        let p = (
            p.0 + rng.random_range(-0.05..0.05),
            p.1 + rng.random_range(-0.05..0.05),
        );
        let (x, y) = (p.0 - 0.5, p.1 - 0.5);
        let x = x + shear * y;
        let (x, y) = (scale * (cr * x - sr * y), scale * (sr * x + cr * y));
        ((x + 0.5 + tx) * s, (y + 0.5 + ty) * s)
    };

    let mut polylines: Vec<Vec<Pt>> = Vec::with_capacity(strokes.len());
    let drop = if strokes.len() > 2 && rng.random_bool(0.2) {
        Some(rng.random_range(0..strokes.len()))
    } else {
        None
    };
    for (k, st) in strokes.iter().enumerate() {
        let (ox, oy): Pt = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
        if drop == Some(k) {
            continue;
        }
        let st = st.map(|(x, y)| (x + ox, y + oy));
        let jittered = [warp(st[0], rng), warp(st[1], rng), warp(st[2], rng)];
        polylines.push(
            (0..=SEGMENTS)
                .map(|i| bezier(&jittered, i as f64 / SEGMENTS as f64))
                .collect(),
        );
    }

    let half = width_px / 2.0;
    for yi in 0..size {
        for xi in 0..size {
            let p = (xi as f64 + 0.5, yi as f64 + 0.5);
            let mut best = f64::INFINITY;
            for line in &polylines {
                for w in line.windows(2) {
                    best = best.min(seg_dist2(p, w[0], w[1]));
                }
            }
            // one-pixel antialiasing ramp around the pen edge
            let v = (half - best.sqrt() + 0.5).clamp(0.0, 1.0);
            out[yi * size + xi] = ((v * 255.0).round() / 255.0) as f32;
        }
    }
}

/// Generate a single-channel dataset of `spec.n_classes` glyph classes.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<FewShotDataset> {
    if spec.size < 8 || spec.n_classes == 0 || spec.n_per_class == 0 || spec.alphabet_size == 0 {
        return Err(Error::Data(format!("unusable synthetic spec {spec:?}")));
    }
    let img = spec.size * spec.size;
    let mut pixels = vec![0f32; spec.n_classes * spec.n_per_class * img];
    crate::par::for_each_chunk(&mut pixels, spec.n_per_class * img, |c, class_px| {
        let a = c / spec.alphabet_size;
        let pool = alphabet(&mut seed::rng(spec.seed, Stream::Synthetic, ALPHABET_BASE + a as u32));
        let mut class_rng = seed::rng(spec.seed, Stream::Synthetic, c as u32);
        let strokes = glyph(&pool, &mut class_rng);
        for (e, out) in class_px.chunks_mut(img).enumerate() {
            let mut ex_rng = seed::rng_from(seed::derive(
                seed::derive(spec.seed, Stream::Synthetic, c as u32),
                Stream::Synthetic,
                e as u32 + 1,
            ));
            render(&strokes, spec.size, &mut ex_rng, out);
        }
    });
    let names = (0..spec.n_classes).map(|c| format!("glyph{c:03}")).collect();
    FewShotDataset::new(names, spec.n_per_class, (spec.size, spec.size, 1), pixels)
}
