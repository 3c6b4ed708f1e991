//! Noise schedules, forward perturbation, reverse-chain updates and the
//! closed-form Gaussian score.

use serde::{Deserialize, Serialize};

use crate::error::{AdmError, Result};
use crate::geometry::Homography;

/// Smallest per-component spread used when standardizing residuals.
pub const STD_FLOOR: f64 = 1e-6;

/// Variance schedule of a discrete diffusion chain; steps are 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    beta: Vec<f64>,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = AdmError;
    fn try_from(r: ScheduleRepr) -> Result<Self> {
        NoiseSchedule::from_betas(r.beta)
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRepr { beta: s.beta }
    }
}

impl NoiseSchedule {
    /// Linear interpolation of `beta` between the two bounds over `steps`.
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(AdmError::InvalidParameter("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(AdmError::InvalidParameter(format!(
                "need 0 < beta_min <= beta_max < 1, got {beta_min}..{beta_max}"
            )));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(beta)
    }

    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() || beta.iter().any(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(AdmError::InvalidParameter("every beta must lie in (0, 1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(beta.len());
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Self { beta, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `beta` at 1-based step `t`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    /// Cumulative product at 1-based step `t`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(AdmError::InvalidParameter(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }
}

/// Number of v-chain updates per H-chain update.
pub fn interleave_ratio(steps_h: usize, steps_v: usize) -> usize {
    steps_v.div_ceil(steps_h.max(1)).max(1)
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(AdmError::shape(a.len(), b.len()));
    }
    Ok(())
}

/// Draws `x_t = sqrt(abar) x0 + sqrt(1 - abar) z`.
pub fn perturb_forward(x0: &[f64], t: usize, sched: &NoiseSchedule, z: &[f64]) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    same_len(x0, z)?;
    let ab = sched.alpha_bar(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(z).map(|(x, n)| a * x + s * n).collect())
}

/// Score of the forward kernel `q(x_t | x0)`.
pub fn oracle_score(x_t: &[f64], x0: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    same_len(x_t, x0)?;
    let ab = sched.alpha_bar(t);
    let a = ab.sqrt();
    Ok(x_t.iter().zip(x0).map(|(x, c)| -(x - a * c) / (1.0 - ab)).collect())
}

/// Clean-signal estimate implied by a score: `(x_t + (1 - abar) s) / sqrt(abar)`.
pub fn predict_x0(x_t: &[f64], score: &[f64], t: usize, sched: &NoiseSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    same_len(x_t, score)?;
    let ab = sched.alpha_bar(t);
    Ok(x_t.iter().zip(score).map(|(x, s)| (x + (1.0 - ab) * s) / ab.sqrt()).collect())
}

/// One ancestral update `x_{t-1} = x_t / sqrt(1 - beta) + beta s + sqrt(beta) z`;
/// the noise term is dropped at `t = 1`.
pub fn reverse_step(x_t: &[f64], score: &[f64], t: usize, sched: &NoiseSchedule, z: &[f64]) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    same_len(x_t, score)?;
    same_len(x_t, z)?;
    let b = sched.beta(t);
    let inv = 1.0 / (1.0 - b).sqrt();
    let nz = if t == 1 { 0.0 } else { b.sqrt() };
    Ok(x_t
        .iter()
        .zip(score)
        .zip(z)
        .map(|((x, s), n)| x * inv + b * s + nz * n)
        .collect())
}

/// Langevin update `x + eps s + sqrt(2 eps) z`.
pub fn langevin_step(x: &[f64], score: &[f64], eps: f64, z: &[f64]) -> Result<Vec<f64>> {
    if !(eps >= 0.0) {
        return Err(AdmError::InvalidParameter(format!("step size must be non-negative, got {eps}")));
    }
    same_len(x, score)?;
    same_len(x, z)?;
    let nz = (2.0 * eps).sqrt();
    Ok(x.iter().zip(score).zip(z).map(|((x, s), n)| x + eps * s + nz * n).collect())
}

/// A learned or analytic score function.
pub trait ScoreModel {
    type Context;
    /// Score of the noisy state at 1-based step `t`; same length as `state`.
    fn evaluate(&self, state: &[f64], t: usize, ctx: &Self::Context) -> Result<Vec<f64>>;
}

/// Per-chain sampler state.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    pub h_state: [f64; 9],
    pub v_state: Vec<f64>,
    pub t: usize,
}

/// Maps homographies to standardized residuals and back.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; 9],
    pub std: [f64; 9],
}

impl Default for Standardizer {
    fn default() -> Self {
        Self {
            mean: [0.0; 9],
            std: [1.0; 9],
        }
    }
}

impl Standardizer {
    /// Fits mean and spread of `h - I` over a set of (normalized) matrices.
    pub fn fit(hs: &[Homography]) -> Result<Self> {
        if hs.is_empty() {
            return Err(AdmError::EmptyInput("no homographies to fit".into()));
        }
        let n = hs.len() as f64;
        let mut mean = [0.0; 9];
        for h in hs {
            for (m, r) in mean.iter_mut().zip(h.residual()) {
                *m += r / n;
            }
        }
        let mut var = [0.0; 9];
        for h in hs {
            for (k, r) in h.residual().iter().enumerate() {
                var[k] += (r - mean[k]).powi(2) / n;
            }
        }
        Ok(Self {
            mean,
            std: var.map(|v| v.sqrt().max(STD_FLOOR)),
        })
    }

    pub fn standardize(&self, h: &Homography) -> [f64; 9] {
        let r = h.residual();
        std::array::from_fn(|k| (r[k] - self.mean[k]) / self.std[k])
    }

    pub fn destandardize(&self, x: &[f64]) -> Homography {
        let r: [f64; 9] = std::array::from_fn(|k| x[k] * self.std[k] + self.mean[k]);
        Homography::from_residual(&r)
    }

    /// Maps a gradient with respect to raw entries to standardized coordinates.
    pub fn grad_to_standardized(&self, g: &[f64; 9]) -> [f64; 9] {
        std::array::from_fn(|k| g[k] * self.std[k])
    }
}
