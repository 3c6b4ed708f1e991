use serde::{Deserialize, Serialize};

use crate::diffusion::Standardizer;
use crate::error::{AdmError, Result};
use crate::imaging::{DisplacementField, ImageBuffer};

use super::masked_appearance_loss;

/// Strength and finite-difference step of the appearance guidance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub g_l: f64,
    /// Step in standardized homography units.
    pub fd_step: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { g_l: 0.0, fd_step: 1e-3 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.g_l >= 0.0) || !self.g_l.is_finite() {
            return Err(AdmError::InvalidConfig(format!("g_l must be finite and non-negative, got {}", self.g_l)));
        }
        if !(self.fd_step > 0.0) || !self.fd_step.is_finite() {
            return Err(AdmError::InvalidConfig(format!("fd_step must be positive, got {}", self.fd_step)));
        }
        Ok(())
    }
}

fn is_degenerate(e: &AdmError) -> bool {
    matches!(
        e,
        AdmError::DegenerateRegion(_) | AdmError::DegenerateProjection(_) | AdmError::SingularHomography(_)
    )
}

/// Appearance loss at a standardized homography state.
fn loss_at(
    x_h: &[f64; 9],
    field: Option<&DisplacementField>,
    src_gray: &ImageBuffer,
    dest_gray: &ImageBuffer,
    std: &Standardizer,
) -> Result<f64> {
    masked_appearance_loss(src_gray, &std.destandardize(x_h), field, dest_gray)
}

/// Central finite-difference gradient of the appearance loss with respect to
/// the standardized homography state. `None` when the loss is undefined at any
/// probe.
pub(crate) fn appearance_gradient(
    x_h: &[f64; 9],
    field: Option<&DisplacementField>,
    src_gray: &ImageBuffer,
    dest_gray: &ImageBuffer,
    std: &Standardizer,
    fd_step: f64,
) -> Result<Option<[f64; 9]>> {
    let mut g = [0.0; 9];
    for k in 0..9 {
        let mut plus = *x_h;
        let mut minus = *x_h;
        plus[k] += fd_step;
        minus[k] -= fd_step;
        let lp = loss_at(&plus, field, src_gray, dest_gray, std);
        let lm = loss_at(&minus, field, src_gray, dest_gray, std);
        match (lp, lm) {
            (Ok(a), Ok(b)) => g[k] = (a - b) / (2.0 * fd_step),
            (Err(e), _) | (_, Err(e)) if is_degenerate(&e) => return Ok(None),
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Ok(Some(g))
}

/// Applies `score - g_l * grad` where `grad` is the gradient of the
/// appearance loss; a zero gradient when the loss is undefined.
pub(crate) fn apply_guidance(
    raw: &[f64],
    x_h: &[f64; 9],
    field: Option<&DisplacementField>,
    src_gray: &ImageBuffer,
    dest_gray: &ImageBuffer,
    std: &Standardizer,
    cfg: &GuidanceConfig,
) -> Result<(Vec<f64>, f64)> {
    if cfg.g_l == 0.0 {
        return Ok((raw.to_vec(), 0.0));
    }
    let g = appearance_gradient(x_h, field, src_gray, dest_gray, std, cfg.fd_step)?.unwrap_or([0.0; 9]);
    let norm = cfg.g_l * g.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((raw.iter().zip(g).map(|(s, d)| s - cfg.g_l * d).collect(), norm))
}

/// Guided homography score for a standardized state `x_h` and a field `v_t`
/// in pixels.
pub fn guided_h_score(
    raw_score: &[f64; 9],
    x_h: &[f64; 9],
    field: Option<&DisplacementField>,
    source: &ImageBuffer,
    dest: &ImageBuffer,
    standardizer: &Standardizer,
    cfg: &GuidanceConfig,
) -> Result<[f64; 9]> {
    cfg.validate()?;
    if cfg.g_l == 0.0 {
        return Ok(*raw_score);
    }
    let src_gray = source.to_gray();
    let dest_gray = dest.to_gray();
    let (s, _) = apply_guidance(raw_score, x_h, field, &src_gray, &dest_gray, standardizer, cfg)?;
    Ok(std::array::from_fn(|k| s[k]))
}
