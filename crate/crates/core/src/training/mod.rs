//! Training objectives, synthetic pair generation and the joint trainer.

mod data;
mod trainer;

pub use data::{
    generate_pair, generate_suite, read_dataset, read_index, read_pair, write_dataset, Dataset, DatasetIndex, PairSample,
    PairSpec, TransformRange, DEFAULT_PATTERN_WEIGHTS,
};
pub use trainer::{train, TrainConfig, TrainLogRow, TrainOutcome};
pub(crate) use data::{ext, read_ground_truth, read_json, sample_transforms, write_json};
pub(crate) use trainer::{field_on_grid, warped_structure_input};

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{AdmError, Result};
use crate::geometry::{p_norm_distance, Homography, PixelGrid};
use crate::imaging::{ncc, smoothness_energy, structure_map, DisplacementField, ImageBuffer, ValidityMask};

/// Loss weights and the time-dependent schedules of the joint objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_x: f64,
    pub lambda_r: f64,
    /// When false the displacement score loss is always on.
    pub schedule_s: bool,
    /// When false the pixel-matching point term has constant weight 1.
    pub schedule_x: bool,
    /// When false the regularizing point term has constant weight 1e-3.
    pub schedule_r: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_x: 1.0,
            lambda_r: 0.1,
            schedule_s: true,
            schedule_x: true,
            schedule_r: true,
        }
    }
}

const DELTA_R_MAX: f64 = 1e-3;

impl LossWeights {
    /// Gate on the displacement score loss: off for the first quarter of
    /// training.
    pub fn delta_s(&self, step: u64, total_steps: u64) -> f64 {
        if self.schedule_s && 4 * step < total_steps {
            0.0
        } else {
            1.0
        }
    }

    /// `(T - t)^2 / T^2`.
    pub fn delta_x(&self, t: usize, steps: usize) -> f64 {
        if !self.schedule_x {
            return 1.0;
        }
        let (t, n) = (t as f64, steps as f64);
        (n - t) * (n - t) / (n * n)
    }

    /// `1e-3 t^2 / T^2`.
    pub fn delta_r(&self, t: usize, steps: usize) -> f64 {
        if !self.schedule_r {
            return DELTA_R_MAX;
        }
        let (t, n) = (t as f64, steps as f64);
        DELTA_R_MAX * t * t / (n * n)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_x >= 0.0 && self.lambda_r >= 0.0) {
            return Err(AdmError::InvalidConfig("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// The four loss terms of one training sample.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub score_h: f64,
    pub score_v: f64,
    pub pixel: f64,
    pub reg: f64,
}

fn score_residual(pred: &[f64], z: &[f64], t: usize, sched: &NoiseSchedule) -> Result<f64> {
    if pred.len() != z.len() {
        return Err(AdmError::shape(z.len(), pred.len()));
    }
    let inv = 1.0 / (1.0 - sched.alpha_bar(t)).sqrt();
    Ok(pred.iter().zip(z).map(|(p, z)| (p + z * inv).powi(2)).sum())
}

/// `||pred + z / sqrt(1 - abar_t)||^2` for the homography state.
pub fn loss_score_h(pred: &[f64], z: &[f64], t: usize, sched: &NoiseSchedule) -> Result<f64> {
    score_residual(pred, z, t, sched)
}

/// Same objective over the planar displacement state.
pub fn loss_score_v(pred: &[f64], z: &[f64], t: usize, sched: &NoiseSchedule) -> Result<f64> {
    score_residual(pred, z, t, sched)
}

/// Point term weighted by `delta_x(t)` minus the structural NCC of the
/// aligned image against the destination.
#[allow(clippy::too_many_arguments)]
pub fn loss_pixel(
    h_t: &Homography,
    h_0: &Homography,
    aligned: &ImageBuffer,
    dest: &ImageBuffer,
    mask: &ValidityMask,
    t: usize,
    steps: usize,
    weights: &LossWeights,
) -> Result<f64> {
    let pts = PixelGrid::loss_points(dest.width, dest.height);
    let d = p_norm_distance(h_t, h_0, &pts, 2.0)?;
    let r = ncc(&structure_map(aligned), &structure_map(dest), mask)?;
    Ok(weights.delta_x(t, steps) * d - r)
}

/// Point distance to the identity weighted by `delta_r(t)` plus the
/// smoothness energy of the displacement field.
pub fn loss_reg(
    h_t: &Homography,
    v_t: &DisplacementField,
    width: usize,
    height: usize,
    t: usize,
    steps: usize,
    weights: &LossWeights,
) -> Result<f64> {
    let pts = PixelGrid::loss_points(width, height);
    let d = p_norm_distance(h_t, &Homography::identity(), &pts, 2.0)?;
    Ok(weights.delta_r(t, steps) * d + smoothness_energy(v_t))
}

/// `score_h + delta_s score_v + lambda_x pixel + lambda_r reg`.
pub fn total_loss(c: &LossComponents, weights: &LossWeights, step: u64, total_steps: u64) -> f64 {
    c.score_h + weights.delta_s(step, total_steps) * c.score_v + weights.lambda_x * c.pixel + weights.lambda_r * c.reg
}
