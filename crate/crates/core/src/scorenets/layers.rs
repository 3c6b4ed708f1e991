//! Layer primitives with explicit forward and backward passes. Feature maps
//! are channel-major `(C, H, W)` slices.

use rand::Rng;

use super::params::{Gradients, Init, ParamId, ParamStore};

/// Fully connected layer `y = W x + b` with `W` stored row-major `(out, in)`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, out: usize, zero: bool, rng: &mut R) -> Self {
        let init = if zero {
            Init::Zeros
        } else {
            Init::Normal {
                fan_in: inp,
                gain: 2f64.sqrt(),
            }
        };
        let w = store.add(&format!("{name}.weight"), &[out, inp], init, rng);
        let b = store.add(&format!("{name}.bias"), &[out], Init::Zeros, rng);
        Self { w, b, inp, out }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inp);
        let w = p.get(self.w);
        let b = p.get(self.b);
        (0..self.out)
            .map(|o| {
                let row = &w[o * self.inp..(o + 1) * self.inp];
                b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&self, p: &ParamStore, x: &[f64], gy: &[f64], g: &mut Gradients) -> Vec<f64> {
        let w = p.get(self.w);
        let mut gx = vec![0.0; self.inp];
        {
            let gw = g.get_mut(self.w);
            for o in 0..self.out {
                let go = gy[o];
                if go == 0.0 {
                    continue;
                }
                let row = &w[o * self.inp..(o + 1) * self.inp];
                let grow = &mut gw[o * self.inp..(o + 1) * self.inp];
                for i in 0..self.inp {
                    grow[i] += go * x[i];
                    gx[i] += go * row[i];
                }
            }
        }
        let gb = g.get_mut(self.b);
        for o in 0..self.out {
            gb[o] += gy[o];
        }
        gx
    }
}

/// 3x3 convolution, stride 1, zero padding 1. Weight layout `(out, in, 3, 3)`.
#[derive(Debug, Clone, Copy)]
pub struct Conv3x3 {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `d`.
#[inline]
fn span(n: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { n - d as usize } else { n };
    (lo, hi.max(lo))
}

impl Conv3x3 {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, zero: bool, rng: &mut R) -> Self {
        let init = if zero {
            Init::Zeros
        } else {
            Init::Normal {
                fan_in: cin * 9,
                gain: 2f64.sqrt(),
            }
        };
        let w = store.add(&format!("{name}.weight"), &[cout, cin, 3, 3], init, rng);
        let b = store.add(&format!("{name}.bias"), &[cout], Init::Zeros, rng);
        Self { w, b, cin, cout }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f64], h: usize, w: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cin * h * w);
        let hw = h * w;
        let wt = p.get(self.w);
        let bias = p.get(self.b);
        let mut y = vec![0.0; self.cout * hw];
        for o in 0..self.cout {
            let yo = &mut y[o * hw..(o + 1) * hw];
            yo.fill(bias[o]);
            for i in 0..self.cin {
                let xi = &x[i * hw..(i + 1) * hw];
                for ky in 0..3 {
                    let dy = ky as isize - 1;
                    let (y0, y1) = span(h, dy);
                    for kx in 0..3 {
                        let wv = wt[((o * self.cin + i) * 3 + ky) * 3 + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let dx = kx as isize - 1;
                        let (x0, x1) = span(w, dx);
                        for yy in y0..y1 {
                            let sy = (yy as isize + dy) as usize;
                            let dst = &mut yo[yy * w + x0..yy * w + x1];
                            let sx0 = (x0 as isize + dx) as usize;
                            let src = &xi[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                            for (a, b) in dst.iter_mut().zip(src) {
                                *a += wv * b;
                            }
                        }
                    }
                }
            }
        }
        y
    }

    pub fn backward(&self, p: &ParamStore, x: &[f64], h: usize, w: usize, gy: &[f64], g: &mut Gradients) -> Vec<f64> {
        let hw = h * w;
        let wt = p.get(self.w);
        let mut gx = vec![0.0; self.cin * hw];
        {
            let gw = g.get_mut(self.w);
            for o in 0..self.cout {
                let go = &gy[o * hw..(o + 1) * hw];
                for i in 0..self.cin {
                    let xi = &x[i * hw..(i + 1) * hw];
                    let gxi = &mut gx[i * hw..(i + 1) * hw];
                    for ky in 0..3 {
                        let dy = ky as isize - 1;
                        let (y0, y1) = span(h, dy);
                        for kx in 0..3 {
                            let widx = ((o * self.cin + i) * 3 + ky) * 3 + kx;
                            let wv = wt[widx];
                            let dx = kx as isize - 1;
                            let (x0, x1) = span(w, dx);
                            let sx0 = (x0 as isize + dx) as usize;
                            let mut acc = 0.0;
                            for yy in y0..y1 {
                                let sy = (yy as isize + dy) as usize;
                                let gsl = &go[yy * w + x0..yy * w + x1];
                                let xs = &xi[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                                acc += gsl.iter().zip(xs).map(|(a, b)| a * b).sum::<f64>();
                                let gxs = &mut gxi[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
                                for (a, b) in gxs.iter_mut().zip(gsl) {
                                    *a += wv * b;
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        let gb = g.get_mut(self.b);
        for o in 0..self.cout {
            gb[o] += gy[o * hw..(o + 1) * hw].iter().sum::<f64>();
        }
        gx
    }
}

/// Adds a per-channel bias computed from an embedding: `y[c] = x[c] + (W e + b)[c]`.
#[derive(Debug, Clone, Copy)]
pub struct ChannelBias {
    pub proj: Linear,
}

impl ChannelBias {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, emb: usize, channels: usize, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(store, name, emb, channels, false, rng),
        }
    }

    pub fn forward(&self, p: &ParamStore, x: &[f64], emb: &[f64], hw: usize) -> Vec<f64> {
        let bias = self.proj.forward(p, emb);
        let mut y = x.to_vec();
        for (c, b) in bias.iter().enumerate() {
            y[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v += b);
        }
        y
    }

    /// Returns the gradient with respect to the embedding; the gradient with
    /// respect to `x` is `gy` itself.
    pub fn backward(&self, p: &ParamStore, emb: &[f64], gy: &[f64], hw: usize, g: &mut Gradients) -> Vec<f64> {
        let gbias: Vec<f64> = (0..self.proj.out)
            .map(|c| gy[c * hw..(c + 1) * hw].iter().sum())
            .collect();
        self.proj.backward(p, emb, &gbias, g)
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward(x: &[f64], gy: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(gy)
        .map(|(&v, &g)| {
            let s = sigmoid(v);
            g * (s + v * s * (1.0 - s))
        })
        .collect()
}

/// 2x2 average pooling (even sizes).
pub fn avgpool2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for yy in 0..oh {
            for xx in 0..ow {
                let base = ch * h * w + 2 * yy * w + 2 * xx;
                y[ch * oh * ow + yy * ow + xx] = 0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1]);
            }
        }
    }
    y
}

pub fn avgpool2_backward(gy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for yy in 0..oh {
            for xx in 0..ow {
                let g = 0.25 * gy[ch * oh * ow + yy * ow + xx];
                let base = ch * h * w + 2 * yy * w + 2 * xx;
                gx[base] += g;
                gx[base + 1] += g;
                gx[base + w] += g;
                gx[base + w + 1] += g;
            }
        }
    }
    gx
}

/// Nearest-neighbour 2x upsampling of an `(c, h, w)` map.
pub fn upsample2(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for yy in 0..oh {
            for xx in 0..ow {
                y[ch * oh * ow + yy * ow + xx] = x[ch * h * w + (yy / 2) * w + xx / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward(gy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for yy in 0..oh {
            for xx in 0..ow {
                gx[ch * h * w + (yy / 2) * w + xx / 2] += gy[ch * oh * ow + yy * ow + xx];
            }
        }
    }
    gx
}

/// Per-channel spatial softmax followed by the first and second moments of
/// the pixel coordinates (scaled to `[-1, 1]`): five values per channel.
pub fn spatial_moments(x: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut probs = vec![0.0; c * hw];
    let mut out = vec![0.0; 5 * c];
    for ch in 0..c {
        let xs = &x[ch * hw..(ch + 1) * hw];
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let ps = &mut probs[ch * hw..(ch + 1) * hw];
        let mut z = 0.0;
        for (p, v) in ps.iter_mut().zip(xs) {
            *p = (v - m).exp();
            z += *p;
        }
        ps.iter_mut().for_each(|p| *p /= z);
        let o = &mut out[5 * ch..5 * ch + 5];
        for yy in 0..h {
            let cy = coord(yy, h);
            for xx in 0..w {
                let cx = coord(xx, w);
                let p = ps[yy * w + xx];
                o[0] += p * cx;
                o[1] += p * cy;
                o[2] += p * cx * cx;
                o[3] += p * cx * cy;
                o[4] += p * cy * cy;
            }
        }
    }
    (out, probs)
}

#[inline]
fn coord(i: usize, n: usize) -> f64 {
    if n < 2 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

pub fn spatial_moments_backward(probs: &[f64], out: &[f64], gy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut gx = vec![0.0; c * hw];
    for ch in 0..c {
        let o = &out[5 * ch..5 * ch + 5];
        let g = &gy[5 * ch..5 * ch + 5];
        let base: f64 = (0..5).map(|k| g[k] * o[k]).sum();
        for yy in 0..h {
            let cy = coord(yy, h);
            for xx in 0..w {
                let cx = coord(xx, w);
                let i = yy * w + xx;
                let feat = g[0] * cx + g[1] * cy + g[2] * cx * cx + g[3] * cx * cy + g[4] * cy * cy;
                gx[ch * hw + i] = probs[ch * hw + i] * (feat - base);
            }
        }
    }
    gx
}

pub fn global_avg(x: &[f64], c: usize, hw: usize) -> Vec<f64> {
    (0..c).map(|ch| x[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64).collect()
}

pub fn global_avg_backward(gy: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut gx = vec![0.0; c * hw];
    for ch in 0..c {
        let g = gy[ch] / hw as f64;
        gx[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v = g);
    }
    gx
}

/// Sinusoidal embedding of step `t` of a `steps`-long chain; the step is
/// rescaled to a 0..1000 range so chains of any length share frequencies.
pub fn time_embedding(t: usize, steps: usize, dim: usize) -> Vec<f64> {
    let tau = t as f64 / steps.max(1) as f64 * 1000.0;
    let half = dim / 2;
    let mut e = vec![0.0; dim];
    for k in 0..half {
        let freq = 1.0 / 10000f64.powf(k as f64 / half as f64);
        e[k] = (tau * freq).sin();
        e[half + k] = (tau * freq).cos();
    }
    e
}
