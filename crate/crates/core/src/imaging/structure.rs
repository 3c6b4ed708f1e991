use super::ImageBuffer;

const SMOOTH_SIGMA: f64 = 1.0;
const SMOOTH_RADIUS: usize = 3;
const THRESHOLD_PERCENTILE: f64 = 0.7;
const MAG_FLOOR: f64 = 1e-12;
const RANGE_EPS: f64 = 1e-12;

pub(crate) fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Separable convolution of one plane with replicated borders.
pub(crate) fn convolve_separable(plane: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                acc += k * plane[y * w + clamp_index(x as isize + j as isize - r, w)];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                acc += k * tmp[clamp_index(y as isize + j as isize - r, h) * w + x];
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Adjoint of [`convolve_separable`].
fn convolve_separable_adjoint(grad: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = grad[y * w + x];
            for (j, k) in kernel.iter().enumerate() {
                tmp[clamp_index(y as isize + j as isize - r, h) * w + x] += k * g;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let g = tmp[y * w + x];
            for (j, k) in kernel.iter().enumerate() {
                out[y * w + clamp_index(x as isize + j as isize - r, w)] += k * g;
            }
        }
    }
    out
}

/// Intermediate values kept for [`structure_map_backward`].
#[derive(Debug, Clone)]
pub struct StructureRecord {
    width: usize,
    height: usize,
    channels: usize,
    gx: Vec<f64>,
    gy: Vec<f64>,
    mag: Vec<f64>,
    out: Vec<f64>,
    percentile_index: usize,
    max_index: usize,
    span: f64,
    flat: bool,
}

fn gray_plane(img: &ImageBuffer) -> Vec<f64> {
    let c = img.channels;
    if c == 1 {
        return img.data.clone();
    }
    img.data
        .chunks_exact(c)
        .map(|px| px.iter().sum::<f64>() / c as f64)
        .collect()
}

fn gradients(img: &ImageBuffer) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (w, h) = (img.width, img.height);
    let kernel = gaussian_kernel(SMOOTH_SIGMA, SMOOTH_RADIUS);
    let b = convolve_separable(&gray_plane(img), w, h, &kernel);
    let mut gx = vec![0.0; w * h];
    let mut gy = vec![0.0; w * h];
    let mut mag = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let xl = clamp_index(x as isize - 1, w);
            let xr = clamp_index(x as isize + 1, w);
            let yu = clamp_index(y as isize - 1, h);
            let yd = clamp_index(y as isize + 1, h);
            gx[i] = 0.5 * (b[y * w + xr] - b[y * w + xl]);
            gy[i] = 0.5 * (b[yd * w + x] - b[yu * w + x]);
            mag[i] = (gx[i] * gx[i] + gy[i] * gy[i] + MAG_FLOOR).sqrt();
        }
    }
    (gx, gy, mag)
}

/// Gradient magnitude of the smoothed grayscale image.
pub fn gradient_magnitude(img: &ImageBuffer) -> ImageBuffer {
    let (_, _, mag) = gradients(img);
    ImageBuffer {
        width: img.width,
        height: img.height,
        channels: 1,
        data: mag,
    }
}

fn record(img: &ImageBuffer) -> StructureRecord {
    let (w, h) = (img.width, img.height);
    let (gx, gy, mag) = gradients(img);
    let n = w * h;
    let mut order: Vec<usize> = (0..n).collect();
    let k = (THRESHOLD_PERCENTILE * (n - 1) as f64).round() as usize;
    let cmp = |a: &usize, b: &usize| mag[*a].total_cmp(&mag[*b]).then(a.cmp(b));
    order.select_nth_unstable_by(k, cmp);
    let percentile_index = order[k];
    let mut max_index = 0;
    let mut min_value = mag[0];
    for (i, &m) in mag.iter().enumerate() {
        if m > mag[max_index] {
            max_index = i;
        }
        min_value = min_value.min(m);
    }
    let mq = mag[percentile_index];
    let mx = mag[max_index];
    let range = mx - min_value;
    let span = mx - mq;
    let flat = range <= RANGE_EPS || span <= RANGE_EPS * range.max(1.0);
    let out = if flat {
        vec![0.0; n]
    } else {
        mag.iter().map(|&m| (m - mq).max(0.0) / span).collect()
    };
    StructureRecord {
        width: w,
        height: h,
        channels: img.channels,
        gx,
        gy,
        mag,
        out,
        percentile_index,
        max_index,
        span,
        flat,
    }
}

/// Single-channel edge map in `[0, 1]`: smoothed gradient magnitude,
/// min-max normalized and soft-thresholded at its 70th percentile.
pub fn structure_map(img: &ImageBuffer) -> ImageBuffer {
    structure_map_recorded(img).0
}

pub(crate) fn structure_map_recorded(img: &ImageBuffer) -> (ImageBuffer, StructureRecord) {
    let rec = record(img);
    let out = ImageBuffer {
        width: rec.width,
        height: rec.height,
        channels: 1,
        data: rec.out.clone(),
    };
    (out, rec)
}

/// Pulls a gradient on the structure map back to the input samples.
pub fn structure_map_backward(rec: &StructureRecord, grad_out: &[f64]) -> Vec<f64> {
    let (w, h) = (rec.width, rec.height);
    let n = w * h;
    if rec.flat {
        return vec![0.0; n * rec.channels];
    }
    let mut gmag = vec![0.0; n];
    let mut g_percentile = 0.0;
    let mut g_max = 0.0;
    for i in 0..n {
        if rec.out[i] > 0.0 {
            let go = grad_out[i];
            gmag[i] += go / rec.span;
            g_percentile += go * (rec.out[i] - 1.0) / rec.span;
            g_max -= go * rec.out[i] / rec.span;
        }
    }
    gmag[rec.percentile_index] += g_percentile;
    gmag[rec.max_index] += g_max;

    let mut gb = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if gmag[i] == 0.0 {
                continue;
            }
            let cx = gmag[i] * rec.gx[i] / rec.mag[i] * 0.5;
            let cy = gmag[i] * rec.gy[i] / rec.mag[i] * 0.5;
            gb[y * w + clamp_index(x as isize + 1, w)] += cx;
            gb[y * w + clamp_index(x as isize - 1, w)] -= cx;
            gb[clamp_index(y as isize + 1, h) * w + x] += cy;
            gb[clamp_index(y as isize - 1, h) * w + x] -= cy;
        }
    }
    let kernel = gaussian_kernel(SMOOTH_SIGMA, SMOOTH_RADIUS);
    let gg = convolve_separable_adjoint(&gb, w, h, &kernel);
    if rec.channels == 1 {
        return gg;
    }
    let c = rec.channels;
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        for ch in 0..c {
            out[i * c + ch] = gg[i] / c as f64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_image_gives_zero_map() {
        let img = ImageBuffer::filled(16, 16, 3, 0.6);
        assert!(structure_map(&img).data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn step_edge_peaks_at_the_edge() {
        let img = ImageBuffer::from_fn(64, 64, |x, _| if x >= 32 { 1.0 } else { 0.0 });
        let sm = structure_map(&img);
        let row: Vec<f64> = (0..64).map(|x| sm.get(x, 20, 0)).collect();
        let best = row.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(best, 1.0);
        let argmax = (0..64).find(|&x| row[x] == best).unwrap();
        assert!(argmax == 31 || argmax == 32);
        assert!(row[31] > 0.999 && row[32] > 0.999);
        assert_eq!(row[0], 0.0);
        assert_eq!(row[63], 0.0);
    }

    /// Direct 2-D Gaussian convolution with replicated borders.
    fn smoothed_oracle(img: &ImageBuffer, x: usize, y: usize) -> f64 {
        let mut acc = 0.0;
        let mut norm = 0.0;
        for dy in -3i64..=3 {
            for dx in -3i64..=3 {
                let wgt = (-((dx * dx + dy * dy) as f64) / 2.0).exp();
                let sx = (x as i64 + dx).clamp(0, img.width as i64 - 1) as usize;
                let sy = (y as i64 + dy).clamp(0, img.height as i64 - 1) as usize;
                acc += wgt * img.get(sx, sy, 0);
                norm += wgt;
            }
        }
        acc / norm
    }

    #[test]
    fn grating_response_matches_derivative_of_smoothed_input() {
        let period = 8.0;
        let img = ImageBuffer::from_fn(48, 24, |x, _| 0.5 + 0.4 * (2.0 * std::f64::consts::PI * x as f64 / period).sin());
        let mag = gradient_magnitude(&img);
        for x in 4..44 {
            let d = 0.5 * (smoothed_oracle(&img, x + 1, 12) - smoothed_oracle(&img, x - 1, 12));
            assert!((mag.get(x, 12, 0) - (d * d + 1e-12).sqrt()).abs() < 1e-12);
        }
        let sm = structure_map(&img);
        for x in 4..36 {
            assert!((sm.get(x, 12, 0) - sm.get(x + 8, 12, 0)).abs() < 1e-9);
        }
    }

    #[test]
    fn output_range_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = ImageBuffer::from_fn(32, 32, |_, _| rng.gen());
        let a = structure_map(&img);
        let b = structure_map(&img);
        assert_eq!(a, b);
        assert!(a.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let active = a.data.iter().filter(|v| **v > 0.0).count();
        assert!(active <= 32 * 32 * 31 / 100 + 1);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = ImageBuffer::from_fn(12, 10, |x, y| 0.5 + 0.3 * ((x as f64) * 0.7 + (y as f64) * 0.4).sin() + 0.1 * rng.gen::<f64>());
        let weights: Vec<f64> = (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |im: &ImageBuffer| -> f64 {
            structure_map(im).data.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, rec) = structure_map_recorded(&img);
        let g = structure_map_backward(&rec, &weights);
        let eps = 1e-7;
        for i in 0..120 {
            let mut p = img.clone();
            let mut m = img.clone();
            p.data[i] += eps;
            m.data[i] -= eps;
            let fd = (objective(&p) - objective(&m)) / (2.0 * eps);
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()), "pixel {i}: fd {fd} analytic {}", g[i]);
        }
    }

    #[test]
    fn separable_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (w, h) = (9, 7);
        let a: Vec<f64> = (0..w * h).map(|_| rng.gen()).collect();
        let b: Vec<f64> = (0..w * h).map(|_| rng.gen()).collect();
        let k = gaussian_kernel(1.0, 3);
        let lhs: f64 = convolve_separable(&a, w, h, &k).iter().zip(&b).map(|(x, y)| x * y).sum();
        let rhs: f64 = convolve_separable_adjoint(&b, w, h, &k).iter().zip(&a).map(|(x, y)| x * y).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
