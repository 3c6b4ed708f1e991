use crate::error::{AdmError, Result};

use super::{ImageBuffer, ValidityMask};

/// Fewest masked pixels accepted by [`ncc`].
pub const MIN_NCC_PIXELS: usize = 16;
const MIN_VARIANCE: f64 = 1e-12;

struct Moments {
    count: usize,
    mean_a: f64,
    mean_b: f64,
    saa: f64,
    sbb: f64,
    sab: f64,
}

fn moments(a: &ImageBuffer, b: &ImageBuffer, mask: &ValidityMask) -> Result<Moments> {
    if !a.same_shape(b) {
        return Err(AdmError::shape(
            format!("{}x{}x{}", a.width, a.height, a.channels),
            format!("{}x{}x{}", b.width, b.height, b.channels),
        ));
    }
    if mask.width != a.width || mask.height != a.height {
        return Err(AdmError::shape(
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", mask.width, mask.height),
        ));
    }
    let c = a.channels;
    let pixels = mask.count();
    if pixels < MIN_NCC_PIXELS {
        return Err(AdmError::DegenerateRegion(format!("{pixels} masked pixels, need {MIN_NCC_PIXELS}")));
    }
    let count = pixels * c;
    let (mut sa, mut sb) = (0.0, 0.0);
    for (i, &m) in mask.data.iter().enumerate() {
        if m {
            for ch in 0..c {
                sa += a.data[i * c + ch];
                sb += b.data[i * c + ch];
            }
        }
    }
    let mean_a = sa / count as f64;
    let mean_b = sb / count as f64;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (i, &m) in mask.data.iter().enumerate() {
        if m {
            for ch in 0..c {
                let da = a.data[i * c + ch] - mean_a;
                let db = b.data[i * c + ch] - mean_b;
                saa += da * da;
                sbb += db * db;
                sab += da * db;
            }
        }
    }
    let n = count as f64;
    if saa / n <= MIN_VARIANCE || sbb / n <= MIN_VARIANCE {
        return Err(AdmError::DegenerateRegion("masked variance at or below 1e-12".into()));
    }
    Ok(Moments {
        count,
        mean_a,
        mean_b,
        saa,
        sbb,
        sab,
    })
}

/// Zero-mean normalized cross-correlation over the masked pixels.
pub fn ncc(a: &ImageBuffer, b: &ImageBuffer, mask: &ValidityMask) -> Result<f64> {
    let m = moments(a, b, mask)?;
    Ok((m.sab / (m.saa * m.sbb).sqrt()).clamp(-1.0, 1.0))
}

/// NCC and its gradient with respect to every sample of `a` (zero outside
/// the mask).
pub fn ncc_grad(a: &ImageBuffer, b: &ImageBuffer, mask: &ValidityMask) -> Result<(f64, Vec<f64>)> {
    let m = moments(a, b, mask)?;
    debug_assert!(m.count >= MIN_NCC_PIXELS);
    let norm = (m.saa * m.sbb).sqrt();
    let r = m.sab / norm;
    let c = a.channels;
    let mut grad = vec![0.0; a.data.len()];
    for (i, &on) in mask.data.iter().enumerate() {
        if on {
            for ch in 0..c {
                let k = i * c + ch;
                let da = a.data[k] - m.mean_a;
                let db = b.data[k] - m.mean_b;
                grad[k] = db / norm - r * da / m.saa;
            }
        }
    }
    Ok((r, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, seed: u64) -> ImageBuffer {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBuffer::from_fn(w, h, |_, _| rng.gen::<f64>())
    }

    fn map(img: &ImageBuffer, f: impl Fn(f64) -> f64) -> ImageBuffer {
        let mut out = img.clone();
        out.data.iter_mut().for_each(|v| *v = f(*v));
        out
    }

    #[test]
    fn ncc_examples() {
        let a = random(8, 8, 1);
        let full = ValidityMask::full(8, 8);
        assert!((ncc(&a, &a, &full).unwrap() - 1.0).abs() < 1e-12);
        assert!((ncc(&a, &map(&a, |v| 1.0 - v), &full).unwrap() + 1.0).abs() < 1e-12);
        assert!((ncc(&a, &map(&a, |v| 0.5 * v + 0.1), &full).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ncc_matches_textbook_pearson() {
        let a = random(9, 7, 2);
        let b = random(9, 7, 3);
        let mut mask = ValidityMask::full(9, 7);
        for i in (0..63).step_by(4) {
            mask.data[i] = false;
        }
        let xs: Vec<f64> = (0..63).filter(|i| mask.data[*i]).map(|i| a.data[i]).collect();
        let ys: Vec<f64> = (0..63).filter(|i| mask.data[*i]).map(|i| b.data[i]).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let cov: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let vx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
        let vy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
        let expected = cov / (vx * vy).sqrt();
        assert!((ncc(&a, &b, &mask).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ncc_degenerate_inputs() {
        let a = random(8, 8, 4);
        let flat = ImageBuffer::filled(8, 8, 1, 0.3);
        assert!(matches!(
            ncc(&a, &flat, &ValidityMask::full(8, 8)),
            Err(AdmError::DegenerateRegion(_))
        ));
        let mut mask = ValidityMask::full(8, 8);
        mask.data.iter_mut().skip(15).for_each(|v| *v = false);
        assert!(matches!(ncc(&a, &a, &mask), Err(AdmError::DegenerateRegion(_))));
    }

    #[test]
    fn ncc_gradient_matches_finite_differences() {
        let a = random(6, 6, 5);
        let b = random(6, 6, 6);
        let mut mask = ValidityMask::full(6, 6);
        mask.data[3] = false;
        let (_, g) = ncc_grad(&a, &b, &mask).unwrap();
        for i in 0..36 {
            let mut p = a.clone();
            let mut m = a.clone();
            p.data[i] += 1e-6;
            m.data[i] -= 1e-6;
            let fd = (ncc(&p, &b, &mask).unwrap() - ncc(&m, &b, &mask).unwrap()) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7, "pixel {i}: {fd} vs {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn ncc_affine_invariance(seed in 0u64..1000, s in 0.05f64..20.0, o in -3.0f64..3.0, t in 0.05f64..20.0, p in -3.0f64..3.0) {
            let a = random(10, 10, seed);
            let b = random(10, 10, seed + 7);
            let mask = ValidityMask::full(10, 10);
            let base = ncc(&a, &b, &mask).unwrap();
            let moved = ncc(&map(&a, |v| s * v + o), &map(&b, |v| t * v + p), &mask).unwrap();
            prop_assert!((base - moved).abs() < 1e-9);
            prop_assert!((-1.0..=1.0).contains(&base));
        }
    }
}
