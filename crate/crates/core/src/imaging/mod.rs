//! Raster buffers, sampling and the image operators used by the alignment
//! chains.

mod appearance;
mod degrade;
pub mod io;
mod ncc;
pub mod patterns;
mod structure;
mod warp;

pub use appearance::{appearance_loss, appearance_loss_grad, AppearanceGrad};
pub use degrade::{degrade, gaussian_blur, Degradation};
pub use ncc::{ncc, ncc_grad, MIN_NCC_PIXELS};
pub use structure::{gradient_magnitude, structure_map, structure_map_backward, StructureRecord};
pub use warp::{warp_composite, warp_global, warp_stages, WarpStage};
pub(crate) use warp::{back_projection, offset_continuous};

use serde::{Deserialize, Serialize};

use crate::error::{AdmError, Result};

/// Row-major raster with interleaved channels, samples nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(AdmError::InvalidParameter("image dimensions must be positive".into()));
        }
        if channels != 1 && channels != 3 {
            return Err(AdmError::InvalidParameter(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(AdmError::shape(width * height * channels, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(AdmError::InvalidParameter("non-finite sample".into()));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Channel mean as a single-channel image.
    pub fn to_gray(&self) -> ImageBuffer {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|px| px.iter().sum::<f64>() / self.channels as f64)
            .collect();
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Snaps every sample to the nearest 8-bit level.
    pub fn quantized(&self) -> ImageBuffer {
        let mut out = self.clone();
        for v in &mut out.data {
            *v = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
        out
    }

    /// Resizes to `width x height`: box averaging for integer reduction
    /// factors, bilinear interpolation of pixel centers otherwise.
    pub fn resized(&self, width: usize, height: usize) -> ImageBuffer {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let c = self.channels;
        let mut data = vec![0.0; width * height * c];
        if self.width % width == 0 && self.height % height == 0 {
            let (fx, fy) = (self.width / width, self.height / height);
            let norm = (fx * fy) as f64;
            for y in 0..height {
                for x in 0..width {
                    for ch in 0..c {
                        let mut acc = 0.0;
                        for dy in 0..fy {
                            for dx in 0..fx {
                                acc += self.get(x * fx + dx, y * fy + dy, ch);
                            }
                        }
                        data[(y * width + x) * c + ch] = acc / norm;
                    }
                }
            }
        } else {
            let sx = self.width as f64 / width as f64;
            let sy = self.height as f64 / height as f64;
            for y in 0..height {
                for x in 0..width {
                    let px = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                    let py = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
                    for ch in 0..c {
                        data[(y * width + x) * c + ch] = bilinear_channel(self, ch, px, py);
                    }
                }
            }
        }
        ImageBuffer {
            width,
            height,
            channels: c,
            data,
        }
    }

    /// Rotates by a multiple of 90 degrees counter-clockwise (square images
    /// keep their dimensions, others swap them for odd turns).
    pub fn rotated90(&self, turns: usize) -> ImageBuffer {
        let mut img = self.clone();
        for _ in 0..turns % 4 {
            let (w, h, c) = (img.width, img.height, img.channels);
            let mut data = vec![0.0; w * h * c];
            // new(x', y') = old(w - 1 - y', x') with new dims (h, w)
            for ny in 0..w {
                for nx in 0..h {
                    for ch in 0..c {
                        data[(ny * h + nx) * c + ch] = img.get(w - 1 - ny, nx, ch);
                    }
                }
            }
            img = ImageBuffer {
                width: h,
                height: w,
                channels: c,
                data,
            };
        }
        img
    }

    pub fn mean_abs_diff(&self, other: &ImageBuffer) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / self.data.len() as f64
    }
}

/// Per-pixel flags marking warped samples that fell inside the source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidityMask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl ValidityMask {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn fraction(&self) -> f64 {
        self.count() as f64 / self.data.len() as f64
    }

    pub fn and(&self, other: &ValidityMask) -> ValidityMask {
        ValidityMask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }

    pub fn to_image(&self) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Two-channel field of pixel offsets. A field coarser than the image it is
/// applied to is bilinearly upsampled on the fly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplacementField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl DisplacementField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    pub fn constant(width: usize, height: usize, du: f64, dv: f64) -> Self {
        Self {
            width,
            height,
            u: vec![du; width * height],
            v: vec![dv; width * height],
        }
    }

    /// Builds a field from a `[2, h, w]` channel-major buffer.
    pub fn from_planar(width: usize, height: usize, data: &[f64]) -> Result<Self> {
        let n = width * height;
        if data.len() != 2 * n {
            return Err(AdmError::shape(2 * n, data.len()));
        }
        Ok(Self {
            width,
            height,
            u: data[..n].to_vec(),
            v: data[n..].to_vec(),
        })
    }

    pub fn to_planar(&self) -> Vec<f64> {
        let mut out = self.u.clone();
        out.extend_from_slice(&self.v);
        out
    }

    pub fn is_zero(&self) -> bool {
        self.u.iter().chain(&self.v).all(|v| *v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.u.iter().chain(&self.v).all(|v| v.is_finite())
    }

    pub fn scaled(&self, s: f64) -> DisplacementField {
        DisplacementField {
            width: self.width,
            height: self.height,
            u: self.u.iter().map(|v| v * s).collect(),
            v: self.v.iter().map(|v| v * s).collect(),
        }
    }

    pub fn max_magnitude(&self) -> f64 {
        self.u.iter().zip(&self.v).map(|(a, b)| a.hypot(*b)).fold(0.0, f64::max)
    }

    /// Bilinear weights of the (up to four) coarse cells that contribute to
    /// fine pixel `(x, y)` of a `fine_w x fine_h` image.
    pub(crate) fn upsample_weights(&self, x: usize, y: usize, fine_w: usize, fine_h: usize) -> [(usize, f64); 4] {
        if self.width == fine_w && self.height == fine_h {
            let i = y * self.width + x;
            return [(i, 1.0), (i, 0.0), (i, 0.0), (i, 0.0)];
        }
        let cx = ((x as f64 + 0.5) * self.width as f64 / fine_w as f64 - 0.5).clamp(0.0, (self.width - 1) as f64);
        let cy = ((y as f64 + 0.5) * self.height as f64 / fine_h as f64 - 0.5).clamp(0.0, (self.height - 1) as f64);
        let (x0, fx) = cell(cx, self.width);
        let (y0, fy) = cell(cy, self.height);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        [
            (y0 * self.width + x0, (1.0 - fx) * (1.0 - fy)),
            (y0 * self.width + x1, fx * (1.0 - fy)),
            (y1 * self.width + x0, (1.0 - fx) * fy),
            (y1 * self.width + x1, fx * fy),
        ]
    }

    /// Offset applied at fine pixel `(x, y)`.
    #[inline]
    pub fn offset_at(&self, x: usize, y: usize, fine_w: usize, fine_h: usize) -> (f64, f64) {
        if self.width == fine_w && self.height == fine_h {
            let i = y * self.width + x;
            return (self.u[i], self.v[i]);
        }
        let mut du = 0.0;
        let mut dv = 0.0;
        for (i, w) in self.upsample_weights(x, y, fine_w, fine_h) {
            du += w * self.u[i];
            dv += w * self.v[i];
        }
        (du, dv)
    }

    pub fn upsampled(&self, width: usize, height: usize) -> DisplacementField {
        let mut out = DisplacementField::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                let (du, dv) = self.offset_at(x, y, width, height);
                out.u[y * width + x] = du;
                out.v[y * width + x] = dv;
            }
        }
        out
    }

    /// Area-averaged reduction to a coarser grid (integer factors only).
    pub fn downsampled(&self, width: usize, height: usize) -> Result<DisplacementField> {
        if self.width % width != 0 || self.height % height != 0 {
            return Err(AdmError::InvalidParameter(format!(
                "cannot reduce {}x{} field to {width}x{height}",
                self.width, self.height
            )));
        }
        let (fx, fy) = (self.width / width, self.height / height);
        let mut out = DisplacementField::zeros(width, height);
        let norm = (fx * fy) as f64;
        for y in 0..height {
            for x in 0..width {
                let (mut su, mut sv) = (0.0, 0.0);
                for dy in 0..fy {
                    for dx in 0..fx {
                        let i = (y * fy + dy) * self.width + x * fx + dx;
                        su += self.u[i];
                        sv += self.v[i];
                    }
                }
                out.u[y * width + x] = su / norm;
                out.v[y * width + x] = sv / norm;
            }
        }
        Ok(out)
    }
}

/// Sum of squared forward differences of both channels in x and y.
pub fn smoothness_energy(field: &DisplacementField) -> f64 {
    let (w, h) = (field.width, field.height);
    let mut e = 0.0;
    for ch in [&field.u, &field.v] {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let d = ch[i + 1] - ch[i];
                    e += d * d;
                }
                if y + 1 < h {
                    let d = ch[i + w] - ch[i];
                    e += d * d;
                }
            }
        }
    }
    e
}

/// Gradient of [`smoothness_energy`] with respect to every offset.
pub fn smoothness_energy_grad(field: &DisplacementField) -> DisplacementField {
    let (w, h) = (field.width, field.height);
    let mut g = DisplacementField::zeros(w, h);
    for (src, dst) in [(&field.u, &mut g.u), (&field.v, &mut g.v)] {
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let d = 2.0 * (src[i + 1] - src[i]);
                    dst[i + 1] += d;
                    dst[i] -= d;
                }
                if y + 1 < h {
                    let d = 2.0 * (src[i + w] - src[i]);
                    dst[i + w] += d;
                    dst[i] -= d;
                }
            }
        }
    }
    g
}

#[inline]
fn cell(c: f64, n: usize) -> (usize, f64) {
    if n < 2 {
        return (0, 0.0);
    }
    let i = (c.floor() as usize).min(n - 2);
    (i, c - i as f64)
}

#[inline]
pub(crate) fn in_bounds(img_w: usize, img_h: usize, x: f64, y: f64) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (img_w - 1) as f64 && y <= (img_h - 1) as f64
}

/// Bilinear interpolation of one channel at an in-bounds location.
#[inline]
pub(crate) fn bilinear_channel(img: &ImageBuffer, ch: usize, x: f64, y: f64) -> f64 {
    let (x0, fx) = cell(x, img.width);
    let (y0, fy) = cell(y, img.height);
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let a = img.get(x0, y0, ch);
    let b = img.get(x1, y0, ch);
    let c = img.get(x0, y1, ch);
    let d = img.get(x1, y1, ch);
    (1.0 - fx) * (1.0 - fy) * a + fx * (1.0 - fy) * b + (1.0 - fx) * fy * c + fx * fy * d
}

/// Value and spatial derivatives of bilinear interpolation of a
/// single-channel image.
#[inline]
pub(crate) fn bilinear_with_grad(img: &ImageBuffer, x: f64, y: f64) -> (f64, f64, f64) {
    let (x0, fx) = cell(x, img.width);
    let (y0, fy) = cell(y, img.height);
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let a = img.get(x0, y0, 0);
    let b = img.get(x1, y0, 0);
    let c = img.get(x0, y1, 0);
    let d = img.get(x1, y1, 0);
    let v = (1.0 - fx) * (1.0 - fy) * a + fx * (1.0 - fy) * b + (1.0 - fx) * fy * c + fx * fy * d;
    let gx = if img.width > 1 { (1.0 - fy) * (b - a) + fy * (d - c) } else { 0.0 };
    let gy = if img.height > 1 { (1.0 - fx) * (c - a) + fx * (d - b) } else { 0.0 };
    (v, gx, gy)
}

/// Samples every channel at `(x, y)`. Out-of-bounds locations return zeros
/// with `in_bounds == false`.
pub fn sample_bilinear(img: &ImageBuffer, x: f64, y: f64) -> (Vec<f64>, bool) {
    if !in_bounds(img.width, img.height, x, y) {
        return (vec![0.0; img.channels], false);
    }
    ((0..img.channels).map(|c| bilinear_channel(img, c, x, y)).collect(), true)
}
