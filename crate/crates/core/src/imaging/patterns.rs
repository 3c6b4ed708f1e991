//! Procedural base images for synthetic pairs.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ImageBuffer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    Checkerboard,
    Vessels,
    Blobs,
}

impl PatternKind {
    pub const ALL: [PatternKind; 3] = [PatternKind::Checkerboard, PatternKind::Vessels, PatternKind::Blobs];
}

/// Renders a `size x size` grayscale pattern quantized to 8-bit levels.
pub fn render<R: Rng>(kind: PatternKind, size: usize, rng: &mut R) -> ImageBuffer {
    let img = match kind {
        PatternKind::Checkerboard => checkerboard(size, rng),
        PatternKind::Vessels => vessels(size, rng),
        PatternKind::Blobs => blobs(size, rng),
    };
    img.quantized()
}

/// Picks a pattern kind using `weights` (checkerboard, vessels, blobs).
pub fn pick_kind<R: Rng>(weights: [f64; 3], rng: &mut R) -> PatternKind {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, w) in PatternKind::ALL.iter().zip(weights) {
        if u < w {
            return *k;
        }
        u -= w;
    }
    PatternKind::Vessels
}

fn checkerboard<R: Rng>(size: usize, rng: &mut R) -> ImageBuffer {
    let cell = rng.gen_range(0.12..0.22) * size as f64;
    let angle = rng.gen_range(0.0..std::f64::consts::FRAC_PI_2);
    let (phx, phy) = (rng.gen_range(0.0..cell), rng.gen_range(0.0..cell));
    let (lo, hi) = (rng.gen_range(0.1..0.35), rng.gen_range(0.65..0.9));
    let (s, c) = angle.sin_cos();
    let shade_gx = rng.gen_range(-0.15..0.15);
    ImageBuffer::from_fn(size, size, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let u = (c * xf + s * yf + phx) / cell;
        let v = (-s * xf + c * yf + phy) / cell;
        let su = (std::f64::consts::PI * u).sin();
        let sv = (std::f64::consts::PI * v).sin();
        let t = 0.5 + 0.5 * (4.0 * su * sv).tanh();
        (lo + (hi - lo) * t + shade_gx * (xf / size as f64 - 0.5)).clamp(0.0, 1.0)
    })
}

fn blobs<R: Rng>(size: usize, rng: &mut R) -> ImageBuffer {
    let n = rng.gen_range(14..24);
    let sz = size as f64;
    let centers: Vec<(f64, f64, f64, f64)> = (0..n)
        .map(|_| {
            (
                rng.gen_range(-0.05..1.05) * sz,
                rng.gen_range(-0.05..1.05) * sz,
                rng.gen_range(0.03..0.12) * sz,
                rng.gen_range(-0.45..0.45),
            )
        })
        .collect();
    ImageBuffer::from_fn(size, size, |x, y| {
        let mut v = 0.5;
        for &(cx, cy, s, a) in &centers {
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            v += a * (-d2 / (2.0 * s * s)).exp();
        }
        v.clamp(0.0, 1.0)
    })
}

struct Branch {
    x: f64,
    y: f64,
    heading: f64,
    width: f64,
    depth: usize,
}

/// Fundus-like image: bright vignetted disc, branching dark vessels.
fn vessels<R: Rng>(size: usize, rng: &mut R) -> ImageBuffer {
    let sz = size as f64;
    let mut strength = vec![0.0f64; size * size];
    let wobble = Normal::new(0.0, 0.12).expect("valid normal");
    let (dx, dy) = (rng.gen_range(0.3..0.7) * sz, rng.gen_range(0.3..0.7) * sz);
    let roots = rng.gen_range(3..6);
    let mut stack: Vec<Branch> = (0..roots)
        .map(|i| Branch {
            x: dx,
            y: dy,
            heading: i as f64 * std::f64::consts::TAU / roots as f64 + rng.gen_range(-0.4..0.4),
            width: rng.gen_range(1.1..1.6) * sz / 64.0,
            depth: 0,
        })
        .collect();
    let step = 0.7;
    while let Some(mut b) = stack.pop() {
        let length = rng.gen_range(0.25..0.6) * sz;
        let mut travelled = 0.0;
        let mut next_split = rng.gen_range(0.2..0.45) * sz;
        while travelled < length {
            stamp(&mut strength, size, b.x, b.y, b.width);
            b.heading += wobble.sample(rng);
            b.x += step * b.heading.cos();
            b.y += step * b.heading.sin();
            travelled += step;
            if b.x < -4.0 || b.y < -4.0 || b.x > sz + 4.0 || b.y > sz + 4.0 {
                break;
            }
            if travelled > next_split && b.depth < 3 {
                next_split += rng.gen_range(0.2..0.45) * sz;
                let side = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                stack.push(Branch {
                    x: b.x,
                    y: b.y,
                    heading: b.heading + side * rng.gen_range(0.4..0.9),
                    width: (b.width * 0.72).max(0.45),
                    depth: b.depth + 1,
                });
                b.width = (b.width * 0.9).max(0.45);
            }
        }
    }
    let bg_blobs: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.gen_range(0.0..sz),
                rng.gen_range(0.0..sz),
                rng.gen_range(0.1..0.3) * sz,
                rng.gen_range(-0.08..0.08),
            )
        })
        .collect();
    let (cx, cy) = (sz / 2.0 + rng.gen_range(-0.1..0.1) * sz, sz / 2.0 + rng.gen_range(-0.1..0.1) * sz);
    let contrast = rng.gen_range(0.45..0.6);
    ImageBuffer::from_fn(size, size, |x, y| {
        let (xf, yf) = (x as f64, y as f64);
        let r2 = ((xf - cx).powi(2) + (yf - cy).powi(2)) / (sz * sz);
        let mut bg = 0.72 - 0.5 * r2;
        for &(bx, by, s, a) in &bg_blobs {
            bg += a * (-((xf - bx).powi(2) + (yf - by).powi(2)) / (2.0 * s * s)).exp();
        }
        let disc = 0.25 * (-((xf - dx).powi(2) + (yf - dy).powi(2)) / (2.0 * (0.05 * sz).powi(2))).exp();
        ((bg + disc) * (1.0 - contrast * strength[y * size + x])).clamp(0.0, 1.0)
    })
}

fn stamp(strength: &mut [f64], size: usize, px: f64, py: f64, width: f64) {
    let r = (3.0 * width).ceil() as i64;
    let (ix, iy) = (px.round() as i64, py.round() as i64);
    for y in (iy - r).max(0)..=(iy + r).min(size as i64 - 1) {
        for x in (ix - r).max(0)..=(ix + r).min(size as i64 - 1) {
            let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
            let s = (-d2 / (2.0 * width * width)).exp();
            let cell = &mut strength[y as usize * size + x as usize];
            *cell = cell.max(s);
        }
    }
}
