use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{perturb_forward, predict_x0, NoiseSchedule, Standardizer};
use crate::error::{AdmError, Result};
use crate::geometry::{p2_distance_grad, Homography, PixelGrid};
use crate::imaging::{
    appearance_loss_grad, smoothness_energy, smoothness_energy_grad, structure_map, warp_global, DisplacementField,
    ImageBuffer,
};
use crate::scorenets::{encoder_input, structure_input, AdamW, AdamWConfig, Checkpoint, Gradients, NetConfig};
use crate::seed::derive_seed;

use super::{LossComponents, LossWeights, PairSample};

/// Settings of a joint training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub steps_h: usize,
    pub steps_v: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub net: NetConfig,
    pub adam: AdamWConfig,
    /// The learning rate halves every this many steps.
    pub lr_halve_every: u64,
    /// Weight decay is applied on every this-many-th step only.
    pub weight_decay_every: u64,
    pub weights: LossWeights,
    /// Pixels per unit of the field state.
    pub v_scale: f64,
    /// Condition the displacement network on the ground-truth homography
    /// instead of the noisy one.
    pub clean_h_conditioning: bool,
    pub checkpoint_every: u64,
    /// Stop this invocation after reaching this step; the schedules still
    /// refer to `steps`.
    pub halt_at: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 2,
            seed: 0,
            steps_h: 100,
            steps_v: 500,
            beta_min: 1e-4,
            beta_max: 0.02,
            net: NetConfig::default(),
            adam: AdamWConfig::default(),
            lr_halve_every: 150_000,
            weight_decay_every: 100_000,
            weights: LossWeights::default(),
            v_scale: 2.0,
            clean_h_conditioning: false,
            checkpoint_every: 1000,
            halt_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.weights.validate()?;
        let bad = |m: &str| Err(AdmError::InvalidConfig(m.into()));
        if self.steps == 0 {
            return bad("steps must be positive");
        }
        if !(1..=4).contains(&self.batch_size) {
            return bad("batch_size must lie in 1..=4");
        }
        if self.steps_h == 0 || self.steps_v == 0 {
            return bad("chain lengths must be positive");
        }
        if !(self.v_scale > 0.0) {
            return bad("v_scale must be positive");
        }
        if self.lr_halve_every == 0 || self.weight_decay_every == 0 || self.checkpoint_every == 0 {
            return bad("intervals must be positive");
        }
        self.schedules().map(|_| ())
    }

    pub fn schedules(&self) -> Result<(NoiseSchedule, NoiseSchedule)> {
        Ok((
            NoiseSchedule::linear(self.steps_h, self.beta_min, self.beta_max)?,
            NoiseSchedule::linear(self.steps_v, self.beta_min, self.beta_max)?,
        ))
    }

    /// Learning rate in effect at `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        self.adam.lr * 0.5f64.powi((step / self.lr_halve_every) as i32)
    }
}

/// One row of the training log, averaged over the batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub step: u64,
    pub lr: f64,
    pub score_h: f64,
    pub score_v: f64,
    pub pixel: f64,
    pub reg: f64,
    pub total: f64,
    /// Norm of the gradient that the gated displacement score term sends
    /// into the network output.
    pub score_v_grad_norm: f64,
}

const LOG_HEADER: &str = "step,lr,score_h,score_v,pixel,reg,total,score_v_grad_norm";

impl TrainLogRow {
    fn csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.lr, self.score_h, self.score_v, self.pixel, self.reg, self.total, self.score_v_grad_norm
        )
    }
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<TrainLogRow>,
}

/// Fixed per-pair inputs derived once before training.
pub(crate) struct Prepared {
    enc_s: Vec<f64>,
    enc_d: Vec<f64>,
    src_gray: ImageBuffer,
    dest_struct: ImageBuffer,
    dest_in: Vec<f64>,
    x0_h: [f64; 9],
    x0_v: Vec<f64>,
    h_gt: Homography,
}

/// Field resampled to an `n x n` grid.
pub(crate) fn field_on_grid(f: &DisplacementField, n: usize) -> DisplacementField {
    if f.width == n && f.height == n {
        f.clone()
    } else if f.is_zero() {
        DisplacementField::zeros(n, n)
    } else if f.width % n == 0 && f.height % n == 0 {
        f.downsampled(n, n).expect("integer factor")
    } else {
        f.upsampled(n, n)
    }
}

/// Structure map of `src` warped by `h`, resized for the displacement
/// network; all zeros if the warp is degenerate.
pub(crate) fn warped_structure_input(src_gray: &ImageBuffer, h: &Homography, size: usize) -> Vec<f64> {
    match warp_global(src_gray, h) {
        Ok((w, _)) => structure_input(&structure_map(&w), size),
        Err(_) => vec![0.0; size * size],
    }
}

fn prepare(p: &PairSample, std: &Standardizer, cfg: &TrainConfig) -> Prepared {
    let net = &cfg.net;
    let src_gray = p.source.to_gray();
    let dest_struct = structure_map(&p.dest.to_gray());
    let v = field_on_grid(&p.v_gt, net.field_size);
    Prepared {
        enc_s: encoder_input(&p.source, net.enc_size),
        enc_d: encoder_input(&p.dest, net.enc_size),
        dest_in: structure_input(&dest_struct, net.v_input_size),
        dest_struct,
        src_gray,
        x0_h: std.standardize(&p.h_gt.normalize().unwrap_or(p.h_gt)),
        x0_v: v.to_planar().iter().map(|x| x / cfg.v_scale).collect(),
        h_gt: p.h_gt,
    }
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

struct SampleOut {
    comps: LossComponents,
    gh: Gradients,
    gv: Gradients,
    score_v_grad_norm: f64,
}

struct Ctx<'a> {
    cfg: &'a TrainConfig,
    ck: &'a Checkpoint,
    sched_h: &'a NoiseSchedule,
    sched_v: &'a NoiseSchedule,
    step: u64,
}

fn sample_gradients(ctx: &Ctx, p: &Prepared, rng: &mut ChaCha8Rng) -> Result<SampleOut> {
    let cfg = ctx.cfg;
    let net = &cfg.net;
    let std = &ctx.ck.header.standardizer;
    let (sh, sv) = (ctx.sched_h, ctx.sched_v);
    let w = &cfg.weights;
    let t_h = rng.gen_range(1..=sh.steps());
    let t_v = rng.gen_range(1..=sv.steps());
    let z_h = normals(rng, 9);
    let z_v = normals(rng, p.x0_v.len());

    // Homography chain.
    let x_h = perturb_forward(&p.x0_h, t_h, sh, &z_h)?;
    let (s_h, pass_h) = ctx.ck.hnet.forward_recorded(&p.enc_s, &p.enc_d, &x_h, t_h, sh)?;
    let ab_h = sh.alpha_bar(t_h);
    let inv_h = 1.0 / (1.0 - ab_h).sqrt();
    let mut g_sh: Vec<f64> = s_h.iter().zip(&z_h).map(|(s, z)| 2.0 * (1.0 - ab_h) * (s + z * inv_h)).collect();
    let score_h = (1.0 - ab_h) * s_h.iter().zip(&z_h).map(|(s, z)| (s + z * inv_h).powi(2)).sum::<f64>();

    // Displacement chain, conditioned on the noisy homography.
    let h_cond = if cfg.clean_h_conditioning { p.h_gt } else { std.destandardize(&x_h) };
    let in_warp = warped_structure_input(&p.src_gray, &h_cond, net.v_input_size);
    let x_v = perturb_forward(&p.x0_v, t_v, sv, &z_v)?;
    let (s_v, pass_v) = ctx.ck.vnet.forward_recorded(&in_warp, &p.dest_in, &x_v, t_v, sv)?;
    let ab_v = sv.alpha_bar(t_v);
    let inv_v = 1.0 / (1.0 - ab_v).sqrt();
    let score_v = (1.0 - ab_v) * s_v.iter().zip(&z_v).map(|(s, z)| (s + z * inv_v).powi(2)).sum::<f64>();
    let gate = w.delta_s(ctx.step, cfg.steps);
    let mut g_sv: Vec<f64> = s_v
        .iter()
        .zip(&z_v)
        .map(|(s, z)| gate * 2.0 * (1.0 - ab_v) * (s + z * inv_v))
        .collect();
    let score_v_grad_norm = g_sv.iter().map(|g| g * g).sum::<f64>().sqrt();

    // Clean-state estimates feed the pixel and regularization terms.
    let xh0 = predict_x0(&x_h, &s_h, t_h, sh)?;
    let h0 = std.destandardize(&xh0);
    let xv0 = predict_x0(&x_v, &s_v, t_v, sv)?;
    let f = net.field_size;
    let planar: Vec<f64> = xv0.iter().map(|x| x * cfg.v_scale).collect();
    let v0 = DisplacementField::from_planar(f, f, &planar)?;
    let (w_img, h_img) = (p.src_gray.width, p.src_gray.height);
    let pts = PixelGrid::loss_points(w_img, h_img);

    let mut g_h0 = [0.0; 9];
    let mut g_v0 = vec![0.0; planar.len()];
    let mut pixel = 0.0;
    let mut reg = 0.0;
    let dx = w.delta_x(t_h, sh.steps());
    let dr = w.delta_r(t_h, sh.steps());
    if let (Ok((d_gt, gd_gt)), Ok((d_id, gd_id))) =
        (p2_distance_grad(&h0, &p.h_gt, &pts), p2_distance_grad(&h0, &Homography::identity(), &pts))
    {
        pixel += dx * d_gt;
        reg += dr * d_id;
        for k in 0..9 {
            g_h0[k] += w.lambda_x * dx * gd_gt[k] + w.lambda_r * dr * gd_id[k];
        }
        match appearance_loss_grad(&p.src_gray, &h0, Some(&v0), &p.dest_struct) {
            Ok(a) => {
                pixel += a.loss;
                for k in 0..9 {
                    g_h0[k] += w.lambda_x * a.grad_h[k];
                }
                if let Some(gf) = a.grad_field {
                    for (g, a) in g_v0.iter_mut().zip(gf.to_planar()) {
                        *g += w.lambda_x * a;
                    }
                }
            }
            Err(AdmError::DegenerateRegion(_) | AdmError::DegenerateProjection(_) | AdmError::SingularHomography(_)) => {}
            Err(e) => return Err(e),
        }
    }
    reg += smoothness_energy(&v0);
    for (g, s) in g_v0.iter_mut().zip(smoothness_energy_grad(&v0).to_planar()) {
        *g += w.lambda_r * s;
    }

    let c_h = (1.0 - ab_h) / ab_h.sqrt();
    for k in 0..9 {
        g_sh[k] += c_h * std.std[k] * g_h0[k];
    }
    let c_v = cfg.v_scale * (1.0 - ab_v) / ab_v.sqrt();
    for (g, a) in g_sv.iter_mut().zip(&g_v0) {
        *g += c_v * a;
    }

    let gh = ctx.ck.hnet.backward(&pass_h, &g_sh)?;
    let gv = ctx.ck.vnet.backward(&pass_v, &g_sv)?;
    Ok(SampleOut {
        comps: LossComponents {
            score_h,
            score_v,
            pixel,
            reg,
        },
        gh,
        gv,
        score_v_grad_norm,
    })
}

fn fresh_checkpoint(cfg: &TrainConfig, pairs: &[PairSample], config_hash: &str) -> Result<Checkpoint> {
    let hs: Vec<Homography> = pairs.iter().map(|p| p.h_gt.normalize().unwrap_or(p.h_gt)).collect();
    let std = Standardizer::fit(&hs)?;
    let (sh, sv) = cfg.schedules()?;
    let mut ck = Checkpoint::fresh(cfg.net.clone(), std, sh, sv, cfg.v_scale, cfg.seed);
    ck.header.adam = cfg.adam.clone();
    ck.header.lr = cfg.adam.lr;
    ck.header.config_hash = config_hash.to_string();
    ck.header.training = serde_json::to_value(cfg)?;
    ck.opt_h = Some(AdamW::new(cfg.adam.clone(), &ck.hnet.params));
    ck.opt_v = Some(AdamW::new(cfg.adam.clone(), &ck.vnet.params));
    Ok(ck)
}

const LOG_FILE: &str = "train_log.csv";
const CHECKPOINT_DIR: &str = "checkpoint";

fn read_log(path: &Path, upto: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path).map_err(|e| AdmError::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < upto))
        .map(str::to_string)
        .collect())
}

/// Joint training of both score networks.
///
/// With `out_dir`, the log is written to `train_log.csv` and the state to
/// `checkpoint/` every `checkpoint_every` steps; an existing checkpoint
/// there is resumed. Per-step randomness depends only on the seed and the
/// step index, so a resumed run reproduces an uninterrupted one exactly.
pub fn train(cfg: &TrainConfig, pairs: &[PairSample], out_dir: Option<&Path>, config_hash: &str) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(AdmError::EmptyInput("training set is empty".into()));
    }
    let ck_dir = out_dir.map(|d| d.join(CHECKPOINT_DIR));
    let mut ck = match &ck_dir {
        Some(dir) if dir.join("header.json").exists() => Checkpoint::load(dir)?,
        _ => fresh_checkpoint(cfg, pairs, config_hash)?,
    };
    if ck.header.net != cfg.net {
        return Err(AdmError::InvalidConfig("checkpoint architecture differs from the configuration".into()));
    }
    let mut opt_h = ck.opt_h.take().unwrap_or_else(|| AdamW::new(cfg.adam.clone(), &ck.hnet.params));
    let mut opt_v = ck.opt_v.take().unwrap_or_else(|| AdamW::new(cfg.adam.clone(), &ck.vnet.params));
    let sched_h = ck.header.schedule_h.clone();
    let sched_v = ck.header.schedule_v.clone();
    let std = ck.header.standardizer;
    let prepared: Vec<Prepared> = pairs.par_iter().map(|p| prepare(p, &std, cfg)).collect();

    let start = ck.header.step;
    let log_path = out_dir.map(|d| d.join(LOG_FILE));
    let mut log_lines = match &log_path {
        Some(p) => read_log(p, start)?,
        None => Vec::new(),
    };
    let mut log = Vec::new();
    let flush = |ck: &Checkpoint, lines: &[String], opt_h: &AdamW, opt_v: &AdamW| -> Result<()> {
        if let (Some(dir), Some(lp), Some(od)) = (&ck_dir, &log_path, out_dir) {
            fs::create_dir_all(od).map_err(|e| AdmError::io(od, e))?;
            let mut snapshot = ck.clone();
            snapshot.opt_h = Some(opt_h.clone());
            snapshot.opt_v = Some(opt_v.clone());
            snapshot.save(dir)?;
            let mut f = fs::File::create(lp).map_err(|e| AdmError::io(lp, e))?;
            let mut text = String::with_capacity(lines.len() * 96);
            text.push_str(LOG_HEADER);
            text.push('\n');
            for l in lines {
                text.push_str(l);
                text.push('\n');
            }
            f.write_all(text.as_bytes()).map_err(|e| AdmError::io(lp, e))?;
        }
        Ok(())
    };

    let end = cfg.halt_at.map_or(cfg.steps, |h| h.min(cfg.steps));
    for step in start..end {
        let step_seed = derive_seed(cfg.seed, step);
        let ctx = Ctx {
            cfg,
            ck: &ck,
            sched_h: &sched_h,
            sched_v: &sched_v,
            step,
        };
        let outs: Vec<SampleOut> = (0..cfg.batch_size)
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(step_seed, b as u64));
                let idx = rng.gen_range(0..prepared.len());
                sample_gradients(&ctx, &prepared[idx], &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let inv = 1.0 / cfg.batch_size as f64;
        let mut gh = ck.hnet.params.zeros_like();
        let mut gv = ck.vnet.params.zeros_like();
        let mut c = LossComponents::default();
        let mut gnorm = 0.0;
        for o in &outs {
            gh.accumulate(&o.gh);
            gv.accumulate(&o.gv);
            c.score_h += o.comps.score_h * inv;
            c.score_v += o.comps.score_v * inv;
            c.pixel += o.comps.pixel * inv;
            c.reg += o.comps.reg * inv;
            gnorm += o.score_v_grad_norm * inv;
        }
        gh.scale(inv);
        gv.scale(inv);
        let total = super::total_loss(&c, &cfg.weights, step, cfg.steps);
        if !total.is_finite() || !gh.is_finite() || !gv.is_finite() {
            return Err(AdmError::DivergedTraining { step });
        }
        let lr = cfg.lr_at(step);
        let decay = (step + 1) % cfg.weight_decay_every == 0;
        opt_h.update_with_decay(&mut ck.hnet.params, &gh, lr, decay)?;
        opt_v.update_with_decay(&mut ck.vnet.params, &gv, lr, decay)?;
        let row = TrainLogRow {
            step,
            lr,
            score_h: c.score_h,
            score_v: c.score_v,
            pixel: c.pixel,
            reg: c.reg,
            total,
            score_v_grad_norm: gnorm,
        };
        log_lines.push(row.csv());
        log.push(row);
        ck.header.step = step + 1;
        ck.header.lr = lr;
        if (step + 1) % cfg.checkpoint_every == 0 || step + 1 == end {
            flush(&ck, &log_lines, &opt_h, &opt_v)?;
        }
    }
    ck.opt_h = Some(opt_h);
    ck.opt_v = Some(opt_v);
    Ok(TrainOutcome { checkpoint: ck, log })
}
