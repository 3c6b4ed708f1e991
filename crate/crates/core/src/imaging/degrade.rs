use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{AdmError, Result};

use super::structure::{convolve_separable, gaussian_kernel};
use super::ImageBuffer;

/// Synthetic image corruption. Noise levels are in `[0, 1]` intensity units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Degradation {
    #[default]
    None,
    GaussNoise {
        sigma: f64,
    },
    GaussBlur {
        sigma: f64,
    },
    LowIllum {
        alpha: f64,
    },
}

impl Degradation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Degradation::None => Ok(()),
            Degradation::GaussNoise { sigma } | Degradation::GaussBlur { sigma } if !(sigma > 0.0 && sigma.is_finite()) => {
                Err(AdmError::InvalidParameter(format!("sigma must be positive, got {sigma}")))
            }
            Degradation::LowIllum { alpha } if !(alpha > 0.0 && alpha < 1.0) => {
                Err(AdmError::InvalidParameter(format!("alpha must lie in (0, 1), got {alpha}")))
            }
            _ => Ok(()),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Degradation::None => "none".into(),
            Degradation::GaussNoise { sigma } => format!("noise_{sigma}"),
            Degradation::GaussBlur { sigma } => format!("blur_{sigma}"),
            Degradation::LowIllum { alpha } => format!("illum_{alpha}"),
        }
    }
}

/// Separable Gaussian blur with radius `ceil(3 sigma)` and replicated borders.
pub fn gaussian_blur(img: &ImageBuffer, sigma: f64) -> ImageBuffer {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let kernel = gaussian_kernel(sigma, radius);
    let (w, h, c) = (img.width, img.height, img.channels);
    let mut out = img.clone();
    for ch in 0..c {
        let plane: Vec<f64> = (0..w * h).map(|i| img.data[i * c + ch]).collect();
        let blurred = convolve_separable(&plane, w, h, &kernel);
        for (i, v) in blurred.into_iter().enumerate() {
            out.data[i * c + ch] = v;
        }
    }
    out
}

pub fn degrade(img: &ImageBuffer, kind: &Degradation, seed: u64) -> Result<ImageBuffer> {
    kind.validate()?;
    Ok(match *kind {
        Degradation::None => img.clone(),
        Degradation::GaussNoise { sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut out = img.clone();
            for v in &mut out.data {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = (*v + sigma * z).clamp(0.0, 1.0);
            }
            out
        }
        Degradation::GaussBlur { sigma } => gaussian_blur(img, sigma),
        Degradation::LowIllum { alpha } => {
            let mut out = img.clone();
            out.data.iter_mut().for_each(|v| *v *= alpha);
            out
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn low_illumination_scales() {
        let img = ImageBuffer::filled(5, 5, 1, 0.8);
        let out = degrade(&img, &Degradation::LowIllum { alpha: 0.5 }, 0).unwrap();
        assert!(out.data.iter().all(|v| (*v - 0.4).abs() < 1e-15));
    }

    #[test]
    fn blur_keeps_constant_image() {
        let img = ImageBuffer::filled(12, 9, 3, 0.37);
        let out = degrade(&img, &Degradation::GaussBlur { sigma: 2.5 }, 0).unwrap();
        assert!(out.data.iter().all(|v| (*v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn noise_has_requested_spread() {
        let img = ImageBuffer::filled(64, 64, 1, 0.5);
        let out = degrade(&img, &Degradation::GaussNoise { sigma: 0.1 }, 42).unwrap();
        let n = out.data.len() as f64;
        let diffs: Vec<f64> = out.data.iter().map(|v| v - 0.5).collect();
        let mean = diffs.iter().sum::<f64>() / n;
        let std = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((std - 0.1).abs() < 0.01, "std {std}");
        assert!(out.data.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out, degrade(&img, &Degradation::GaussNoise { sigma: 0.1 }, 42).unwrap());
    }

    #[test]
    fn invalid_parameters() {
        let img = ImageBuffer::filled(4, 4, 1, 0.5);
        for bad in [
            Degradation::GaussNoise { sigma: 0.0 },
            Degradation::GaussBlur { sigma: -1.0 },
            Degradation::LowIllum { alpha: 1.0 },
            Degradation::LowIllum { alpha: 0.0 },
        ] {
            assert!(matches!(degrade(&img, &bad, 0), Err(AdmError::InvalidParameter(_))));
        }
    }

    #[test]
    fn serde_shape() {
        let d: Degradation = serde_json::from_str(r#"{"kind":"gauss_blur","sigma":2.5}"#).unwrap();
        assert_eq!(d, Degradation::GaussBlur { sigma: 2.5 });
        assert_eq!(serde_json::to_string(&Degradation::None).unwrap(), r#"{"kind":"none"}"#);
    }
}
