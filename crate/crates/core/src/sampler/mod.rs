//! Guided, coupled reverse diffusion over a homography chain and a
//! displacement-field chain, with iterative refinement and per-step traces.

mod export;
mod guidance;

pub use export::{write_result, write_trace_csv, ResultManifest, StageEntry};
pub use guidance::{guided_h_score, GuidanceConfig};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{interleave_ratio, oracle_score, reverse_step, NoiseSchedule, Standardizer};
use crate::error::{AdmError, Result};
use crate::geometry::{p_norm_distance, Homography, PixelGrid};
use crate::imaging::{
    ncc, structure_map, warp_composite, warp_stages, DisplacementField, ImageBuffer, ValidityMask,
    WarpStage,
};
use crate::scorenets::{encoder_input, structure_input, Checkpoint};
use crate::seed::derive_seed;
use crate::training::{field_on_grid, warped_structure_input, PairSample};

use guidance::{appearance_gradient, apply_guidance};

/// Chain parameters shared by learned and oracle scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSettings {
    pub standardizer: Standardizer,
    pub schedule_h: NoiseSchedule,
    pub schedule_v: NoiseSchedule,
    /// Pixels per unit of the field state.
    pub v_scale: f64,
    /// Side of the coarse field grid.
    pub field_size: usize,
}

impl ChainSettings {
    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        Self {
            standardizer: ck.header.standardizer,
            schedule_h: ck.header.schedule_h.clone(),
            schedule_v: ck.header.schedule_v.clone(),
            v_scale: ck.header.v_scale,
            field_size: ck.header.net.field_size,
        }
    }
}

/// Where the scores come from.
#[derive(Debug, Clone)]
pub enum ScoreSource<'a> {
    /// Trained networks.
    Learned(&'a Checkpoint),
    /// Exact forward-kernel scores towards a known transform.
    Oracle { h_gt: Homography, v_gt: DisplacementField },
}

/// A score source with its chain settings and, optionally, the true
/// homography used for tracing.
#[derive(Debug, Clone)]
pub struct SamplerModel<'a> {
    pub source: ScoreSource<'a>,
    pub settings: ChainSettings,
    pub reference: Option<Homography>,
}

impl<'a> SamplerModel<'a> {
    pub fn learned(ck: &'a Checkpoint) -> Self {
        Self {
            source: ScoreSource::Learned(ck),
            settings: ChainSettings::from_checkpoint(ck),
            reference: None,
        }
    }

    pub fn oracle(h_gt: Homography, v_gt: DisplacementField, settings: ChainSettings) -> Self {
        Self {
            source: ScoreSource::Oracle { h_gt, v_gt },
            settings,
            reference: Some(h_gt),
        }
    }

    pub fn with_reference(mut self, h: Option<Homography>) -> Self {
        self.reference = h;
        self
    }

    /// The same model re-targeted at the residual transform left after
    /// warping by `h_done`.
    fn residual(&self, h_done: &Homography) -> Result<Self> {
        let rest = |gt: &Homography| -> Result<Homography> { Homography::compose(gt, &h_done.invert()?) };
        let reference = self.reference.as_ref().map(rest).transpose()?;
        let source = match &self.source {
            ScoreSource::Learned(ck) => ScoreSource::Learned(ck),
            ScoreSource::Oracle { h_gt, v_gt } => ScoreSource::Oracle {
                h_gt: rest(h_gt)?,
                v_gt: DisplacementField::zeros(v_gt.width, v_gt.height),
            },
        };
        Ok(Self {
            source,
            settings: self.settings.clone(),
            reference,
        })
    }
}

/// Sampler options.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub guidance: GuidanceConfig,
    /// v-chain updates per homography update; derived from the chain lengths
    /// when absent.
    pub interleave: Option<usize>,
    pub max_restarts: usize,
    pub n_iter: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            guidance: GuidanceConfig::default(),
            interleave: None,
            max_restarts: 3,
            n_iter: 1,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        self.guidance.validate()?;
        if self.interleave == Some(0) {
            return Err(AdmError::InvalidConfig("interleave must be positive".into()));
        }
        if self.n_iter == 0 {
            return Err(AdmError::InvalidConfig("n_iter must be at least 1".into()));
        }
        Ok(())
    }
}

/// State of the homography chain at one recorded step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Diffusion step; 0 for the final state.
    pub t: usize,
    pub h: Homography,
    /// NCC of the structure maps, 0 when undefined.
    pub ncc: f64,
    pub pnorm_to_gt: Option<f64>,
    pub guidance_norm: f64,
}

/// Output of one alignment.
#[derive(Debug, Clone)]
pub struct AlignmentResult {
    /// Total homography, normalized.
    pub h: Homography,
    /// Final-round displacement field, upsampled to the image, in pixels.
    pub field: DisplacementField,
    /// Every round as one warp stage, earliest first.
    pub stages: Vec<WarpStage>,
    pub warped: ImageBuffer,
    pub mask: ValidityMask,
    pub trace: Vec<TraceRecord>,
    pub seed: u64,
    pub restarts: usize,
    /// Reason for failure; the transform fields are then identity and zero.
    pub failure: Option<String>,
}

impl AlignmentResult {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    fn failed_result(w: usize, h: usize, channels: usize, seed: u64, restarts: usize, trace: Vec<TraceRecord>, why: String) -> Self {
        Self {
            h: Homography::identity(),
            field: DisplacementField::zeros(w, h),
            stages: Vec::new(),
            warped: ImageBuffer::filled(w, h, channels, 0.0),
            mask: ValidityMask {
                width: w,
                height: h,
                data: vec![false; w * h],
            },
            trace,
            seed,
            restarts,
            failure: Some(why),
        }
    }

    /// NCC of the warped source against `dest` in structure space over the
    /// common valid region; `None` when undefined.
    pub fn final_ncc(&self, dest: &ImageBuffer) -> Option<f64> {
        if self.failed() {
            return None;
        }
        masked_ncc(&self.warped.to_gray(), &dest.to_gray(), &self.mask).ok()
    }
}

/// Per-pair inputs computed once.
struct Inputs {
    src_gray: ImageBuffer,
    dest_gray: ImageBuffer,
    enc: Option<(Vec<f64>, Vec<f64>)>,
    dest_in: Vec<f64>,
}

/// Structure-map NCC with both images zeroed outside `mask`, so that the
/// border of the valid region appears in both maps alike.
pub(crate) fn masked_ncc(warped_gray: &ImageBuffer, dest_gray: &ImageBuffer, mask: &ValidityMask) -> Result<f64> {
    let mut d = dest_gray.clone();
    for (v, &m) in d.data.iter_mut().zip(&mask.data) {
        if !m {
            *v = 0.0;
        }
    }
    ncc(&structure_map(warped_gray), &structure_map(&d), mask)
}

/// Negative [`masked_ncc`] of the source warped by `h` and `field`.
pub(crate) fn masked_appearance_loss(
    src_gray: &ImageBuffer,
    h: &Homography,
    field: Option<&DisplacementField>,
    dest_gray: &ImageBuffer,
) -> Result<f64> {
    let (warped, mask) = warp_composite(src_gray, h, field)?;
    Ok(-masked_ncc(&warped, dest_gray, &mask)?)
}

fn is_degenerate(e: &AdmError) -> bool {
    matches!(e, AdmError::DegenerateProjection(_) | AdmError::SingularHomography(_))
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn field_from_state(x_v: &[f64], s: &ChainSettings) -> Result<DisplacementField> {
    let planar: Vec<f64> = x_v.iter().map(|x| x * s.v_scale).collect();
    DisplacementField::from_planar(s.field_size, s.field_size, &planar)
}

struct Chain {
    h: Homography,
    field: DisplacementField,
    trace: Vec<TraceRecord>,
}

enum ChainEnd {
    Done(Chain),
    Degenerate(String, Vec<TraceRecord>),
}

fn trace_record(
    t: usize,
    x_h: &[f64; 9],
    field: &DisplacementField,
    inputs: &Inputs,
    model: &SamplerModel,
    guidance_norm: f64,
) -> TraceRecord {
    let raw = model.settings.standardizer.destandardize(x_h);
    let h = raw.normalize().unwrap_or(raw);
    let ncc = masked_appearance_loss(&inputs.src_gray, &h, Some(field), &inputs.dest_gray).map_or(0.0, |l| -l);
    let (w, hh) = (inputs.src_gray.width, inputs.src_gray.height);
    let pnorm_to_gt = model
        .reference
        .as_ref()
        .and_then(|gt| p_norm_distance(&h, gt, &PixelGrid::loss_points(w, hh), 2.0).ok());
    TraceRecord {
        t,
        h,
        ncc,
        pnorm_to_gt,
        guidance_norm,
    }
}

fn run_chain(inputs: &Inputs, model: &SamplerModel, cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> Result<ChainEnd> {
    let s = &model.settings;
    let (sh, sv) = (&s.schedule_h, &s.schedule_v);
    let std = &s.standardizer;
    let nv = 2 * s.field_size * s.field_size;
    let k = cfg.interleave.unwrap_or_else(|| interleave_ratio(sh.steps(), sv.steps()));
    let oracle_targets = match &model.source {
        ScoreSource::Oracle { h_gt, v_gt } => {
            let x0_h = std.standardize(&h_gt.normalize()?);
            let v = field_on_grid(v_gt, s.field_size);
            let x0_v: Vec<f64> = v.to_planar().iter().map(|x| x / s.v_scale).collect();
            Some((x0_h, x0_v))
        }
        ScoreSource::Learned(_) => None,
    };

    let z0 = normals(rng, 9);
    let mut x_h: [f64; 9] = std::array::from_fn(|i| z0[i]);
    let mut x_v = normals(rng, nv);
    let mut t_v = sv.steps();
    let mut trace = Vec::with_capacity(sh.steps() + 1);

    for t in (1..=sh.steps()).rev() {
        let field = field_from_state(&x_v, s)?;
        let raw = match (&model.source, &oracle_targets) {
            (ScoreSource::Learned(ck), _) => {
                let (e_s, e_d) = inputs.enc.as_ref().expect("encoder inputs for learned model");
                ck.hnet.forward_cached(e_s, e_d, &x_h, t, sh)?
            }
            (_, Some((x0_h, _))) => oracle_score(&x_h, x0_h, t, sh)?,
            _ => unreachable!(),
        };
        let h_t = std.destandardize(&x_h);
        if let Err(e) = h_t.normalize() {
            return Ok(ChainEnd::Degenerate(e.to_string(), trace));
        }
        let in_warp = match model.source {
            ScoreSource::Learned(ck) => Some(warped_structure_input(&inputs.src_gray, &h_t, ck.header.net.v_input_size)),
            ScoreSource::Oracle { .. } => None,
        };
        let (score, gnorm) =
            apply_guidance(&raw, &x_h, Some(&field), &inputs.src_gray, &inputs.dest_gray, std, &cfg.guidance)?;
        trace.push(trace_record(t, &x_h, &field, inputs, model, gnorm));

        let z = normals(rng, 9);
        let next = reverse_step(&x_h, &score, t, sh, &z)?;
        x_h = std::array::from_fn(|i| next[i]);

        for _ in 0..k {
            if t_v == 0 {
                break;
            }
            let s_v = match (&model.source, &oracle_targets) {
                (ScoreSource::Learned(ck), _) => {
                    ck.vnet.forward(in_warp.as_ref().expect("warp input"), &inputs.dest_in, &x_v, t_v, sv)?
                }
                (_, Some((_, x0_v))) => oracle_score(&x_v, x0_v, t_v, sv)?,
                _ => unreachable!(),
            };
            let z = normals(rng, nv);
            x_v = reverse_step(&x_v, &s_v, t_v, sv, &z)?;
            t_v -= 1;
        }
        if !x_h.iter().chain(&x_v).all(|v| v.is_finite()) {
            return Ok(ChainEnd::Degenerate("non-finite chain state".into(), trace));
        }
    }

    let field = field_from_state(&x_v, s)?;
    trace.push(trace_record(0, &x_h, &field, inputs, model, 0.0));
    match std.destandardize(&x_h).normalize() {
        Ok(h) => Ok(ChainEnd::Done(Chain { h, field, trace })),
        Err(e) => Ok(ChainEnd::Degenerate(e.to_string(), trace)),
    }
}

fn prepare(source: &ImageBuffer, dest: &ImageBuffer, model: &SamplerModel) -> Result<Inputs> {
    if source.width != dest.width || source.height != dest.height {
        return Err(AdmError::shape(
            format!("{}x{}", source.width, source.height),
            format!("{}x{}", dest.width, dest.height),
        ));
    }
    let dest_gray = dest.to_gray();
    let (enc, dest_in) = match model.source {
        ScoreSource::Learned(ck) => {
            let net = &ck.header.net;
            let e_s = ck.hnet.encode(&encoder_input(source, net.enc_size))?;
            let e_d = ck.hnet.encode(&encoder_input(dest, net.enc_size))?;
            (Some((e_s, e_d)), structure_input(&structure_map(&dest_gray), net.v_input_size))
        }
        ScoreSource::Oracle { .. } => (None, Vec::new()),
    };
    Ok(Inputs {
        src_gray: source.to_gray(),
        dest_gray,
        enc,
        dest_in,
    })
}

/// Aligns `source` to `dest` with one run of the coupled chains. Degenerate
/// chains restart with fresh noise up to `cfg.max_restarts` times before a
/// failed result is returned.
pub fn align(
    source: &ImageBuffer,
    dest: &ImageBuffer,
    model: &SamplerModel,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<AlignmentResult> {
    cfg.validate()?;
    let inputs = prepare(source, dest, model)?;
    let (w, h) = (source.width, source.height);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut last = (String::new(), Vec::new());
    for attempt in 0..=cfg.max_restarts {
        match run_chain(&inputs, model, cfg, &mut rng)? {
            ChainEnd::Done(chain) => {
                let stage = WarpStage::new(chain.h, Some(chain.field.clone()));
                match warp_composite(source, &chain.h, Some(&chain.field)) {
                    Ok((warped, mask)) => {
                        return Ok(AlignmentResult {
                            h: chain.h,
                            field: chain.field.upsampled(w, h),
                            stages: vec![stage],
                            warped,
                            mask,
                            trace: chain.trace,
                            seed,
                            restarts: attempt,
                            failure: None,
                        })
                    }
                    Err(e) if is_degenerate(&e) => last = (e.to_string(), chain.trace),
                    Err(e) => return Err(e),
                }
            }
            ChainEnd::Degenerate(why, trace) => last = (why, trace),
        }
    }
    Ok(AlignmentResult::failed_result(
        w,
        h,
        source.channels,
        seed,
        cfg.max_restarts,
        last.1,
        format!("degenerate after {} restarts: {}", cfg.max_restarts, last.0),
    ))
}

/// Runs `cfg.n_iter` rounds of [`align`], each taking the previous round's
/// warped source as input. The reported warp is the chain of all rounds
/// applied to the original source in one resampling.
pub fn align_iterative(
    source: &ImageBuffer,
    dest: &ImageBuffer,
    model: &SamplerModel,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<AlignmentResult> {
    cfg.validate()?;
    let mut result = align(source, dest, model, cfg, seed)?;
    if cfg.n_iter == 1 || result.failed() {
        return Ok(result);
    }
    let mut total = result.h;
    let mut current = result.warped.clone();
    for round in 1..cfg.n_iter {
        let round_model = model.residual(&total)?;
        let r = align(&current, dest, &round_model, cfg, derive_seed(seed, round as u64))?;
        result.trace.extend(r.trace.iter().cloned());
        result.restarts += r.restarts;
        if r.failed() {
            result.failure = r.failure;
            break;
        }
        total = Homography::compose(&r.h, &total)?;
        result.stages.extend(r.stages);
        result.field = r.field;
        current = r.warped;
    }
    if result.failed() {
        let (w, h) = (source.width, source.height);
        return Ok(AlignmentResult::failed_result(
            w,
            h,
            source.channels,
            seed,
            result.restarts,
            result.trace,
            result.failure.unwrap_or_default(),
        ));
    }
    let (warped, mask) = warp_stages(source, &result.stages)?;
    result.h = total;
    result.warped = warped;
    result.mask = mask;
    Ok(result)
}

/// Guidance strength at which the guidance term is `ratio` times the raw
/// homography score norm at `t = T/2`, as a median over `pairs`.
pub fn calibrate_guidance(
    ck: Option<&Checkpoint>,
    settings: &ChainSettings,
    pairs: &[PairSample],
    fd_step: f64,
    ratio: f64,
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(AdmError::EmptyInput("no pairs to calibrate on".into()));
    }
    let sh = &settings.schedule_h;
    let t = (sh.steps() / 2).max(1);
    let std = &settings.standardizer;
    let mut ratios = Vec::new();
    for p in pairs {
        let model = match ck {
            Some(ck) => SamplerModel::learned(ck),
            None => SamplerModel::oracle(p.h_gt, p.v_gt.clone(), settings.clone()),
        };
        let inputs = prepare(&p.source, &p.dest, &model)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, p.seed));
        let x0 = std.standardize(&p.h_gt.normalize()?);
        let z = normals(&mut rng, 9);
        let xt = crate::diffusion::perturb_forward(&x0, t, sh, &z)?;
        let x_h: [f64; 9] = std::array::from_fn(|i| xt[i]);
        let raw = match &model.source {
            ScoreSource::Learned(ck) => {
                let (e_s, e_d) = inputs.enc.as_ref().expect("encoder inputs");
                ck.hnet.forward_cached(e_s, e_d, &x_h, t, sh)?
            }
            ScoreSource::Oracle { .. } => oracle_score(&x_h, &x0, t, sh)?,
        };
        let field = field_on_grid(&p.v_gt, settings.field_size);
        let Some(g) = appearance_gradient(&x_h, Some(&field), &inputs.src_gray, &inputs.dest_gray, std, fd_step)?
        else {
            continue;
        };
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rn = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn > 1e-12 && rn.is_finite() {
            ratios.push(ratio * rn / gn);
        }
    }
    if ratios.is_empty() {
        return Err(AdmError::DegenerateRegion("guidance undefined on every calibration pair".into()));
    }
    ratios.sort_by(f64::total_cmp);
    Ok(ratios[ratios.len() / 2])
}
