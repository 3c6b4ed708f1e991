use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::Standardizer;
use crate::error::{AdmError, Result};
use crate::evaluation::{control_grid, evaluate_pair, report, write_report, PairEvaluation, Report};
use crate::geometry::Homography;
use crate::imaging::io::read_pnm;
use crate::imaging::{DisplacementField, WarpStage};
use crate::sampler::{
    align_iterative, calibrate_guidance, write_result, AlignmentResult, ChainSettings, ResultManifest, SamplerConfig,
    SamplerModel,
};
use crate::scorenets::{run_gradcheck, Checkpoint, GradCheckReport};
use crate::training::{
    generate_suite, read_dataset, read_ground_truth, read_index, read_json, read_pair, sample_transforms, train,
    write_dataset, write_json, PairSample, TrainLogRow,
};

use super::{pair_seed, with_jobs, RunConfig};

const GUIDANCE_FILE: &str = "guidance.json";
const RESULTS_INDEX: &str = "results.json";

fn invalid(msg: impl Into<String>) -> AdmError {
    AdmError::InvalidConfig(msg.into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenDataSummary {
    pub dir: PathBuf,
    pub pairs: usize,
}

/// Generates the synthetic suite described by the config into
/// `paths.dataset`.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<GenDataSummary> {
    cfg.validate()?;
    if cfg.data.pairs == 0 {
        return Err(invalid("data.pairs must be at least 1"));
    }
    let hash = cfg.hash();
    let pairs = with_jobs(cfg.jobs, || generate_suite(cfg.data.pairs, cfg.image_size, &cfg.data.spec, cfg.data.seed))??;
    let dir = &cfg.paths.dataset;
    write_dataset(dir, &pairs, cfg.data.seed, &hash)?;
    cfg.write_effective(dir)?;
    Ok(GenDataSummary {
        dir: dir.clone(),
        pairs: pairs.len(),
    })
}

/// Guidance strength chosen by calibration, stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceCalibration {
    pub g_l: f64,
    pub ratio: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub checkpoint_dir: PathBuf,
    pub steps: u64,
    pub last: Option<TrainLogRow>,
    pub guidance: Option<GuidanceCalibration>,
}

/// Trains on `paths.dataset`, writing the log and checkpoint under
/// `paths.run`; resumes from an existing checkpoint there. The guidance
/// strength is calibrated on the first training pairs afterwards.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = read_dataset(&cfg.paths.dataset)?;
    let hash = cfg.hash();
    cfg.write_effective(&cfg.paths.run)?;
    let out = with_jobs(cfg.jobs, || train(&cfg.train, &data.pairs, Some(&cfg.paths.run), &hash))??;
    let ck_dir = cfg.paths.run.join("checkpoint");
    let finished = out.checkpoint.header.step >= cfg.train.steps;
    let guidance = if finished {
        let settings = ChainSettings::from_checkpoint(&out.checkpoint);
        let n = cfg.align.calibration_pairs.clamp(1, data.pairs.len());
        let g = calibrate_guidance(
            Some(&out.checkpoint),
            &settings,
            &data.pairs[..n],
            cfg.align.fd_step,
            cfg.align.calibration_ratio,
            cfg.align.seed,
        )?;
        let cal = GuidanceCalibration {
            g_l: g,
            ratio: cfg.align.calibration_ratio,
            pairs: n,
        };
        write_json(&ck_dir.join(GUIDANCE_FILE), &cal)?;
        Some(cal)
    } else {
        None
    };
    Ok(TrainSummary {
        checkpoint_dir: ck_dir,
        steps: out.checkpoint.header.step,
        last: out.log.last().cloned(),
        guidance,
    })
}

/// What `align` runs on.
#[derive(Debug, Clone, PartialEq)]
pub enum AlignTarget {
    /// Every pair of `paths.dataset`, or one pair by id.
    Dataset { pair: Option<String> },
    /// Two image files; `gt` is a pair sidecar providing the true transform.
    Images {
        source: PathBuf,
        dest: PathBuf,
        gt: Option<PathBuf>,
    },
}

/// Index written next to the per-pair manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsIndex {
    pub pairs: Vec<String>,
    pub seed: u64,
    pub g_l: f64,
    pub oracle: bool,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignSummary {
    pub dir: PathBuf,
    pub pairs: usize,
    pub failed: usize,
    pub g_l: f64,
}

const ORACLE_FIT_DRAWS: usize = 1024;

/// Chain settings for oracle scores: schedules from the training config and
/// a standardizer fitted on transforms drawn from the data range.
pub(crate) fn oracle_settings(cfg: &RunConfig) -> Result<ChainSettings> {
    let (schedule_h, schedule_v) = cfg.schedules()?;
    let hs = sample_transforms(&cfg.data.spec.range, cfg.image_size, ORACLE_FIT_DRAWS, cfg.data.seed)
        .iter()
        .map(|h| h.normalize())
        .collect::<Result<Vec<_>>>()?;
    Ok(ChainSettings {
        standardizer: Standardizer::fit(&hs)?,
        schedule_h,
        schedule_v,
        v_scale: cfg.train.v_scale,
        field_size: cfg.train.net.field_size,
    })
}

/// Either a loaded checkpoint or oracle settings.
pub(crate) enum Scorer {
    Learned(Box<Checkpoint>),
    Oracle(ChainSettings),
}

impl Scorer {
    pub(crate) fn load(cfg: &RunConfig) -> Result<Self> {
        if cfg.align.oracle {
            Ok(Scorer::Oracle(oracle_settings(cfg)?))
        } else {
            Ok(Scorer::Learned(Box::new(Checkpoint::load(&cfg.paths.checkpoint_dir())?)))
        }
    }

    pub(crate) fn settings(&self) -> ChainSettings {
        match self {
            Scorer::Learned(ck) => ChainSettings::from_checkpoint(ck),
            Scorer::Oracle(s) => s.clone(),
        }
    }

    pub(crate) fn checkpoint(&self) -> Option<&Checkpoint> {
        match self {
            Scorer::Learned(ck) => Some(ck),
            Scorer::Oracle(_) => None,
        }
    }

    /// Model for one pair, with `settings` overriding the stored ones.
    pub(crate) fn model_for<'a>(&'a self, pair: &PairSample, settings: &ChainSettings) -> SamplerModel<'a> {
        match self {
            Scorer::Learned(ck) => {
                let mut m = SamplerModel::learned(ck).with_reference(Some(pair.h_gt));
                m.settings = settings.clone();
                m
            }
            Scorer::Oracle(_) => SamplerModel::oracle(pair.h_gt, pair.v_gt.clone(), settings.clone()),
        }
    }
}

/// Guidance strength: the configured value, else the one stored with the
/// checkpoint, else calibrated on `pairs`.
pub(crate) fn resolve_g_l(cfg: &RunConfig, scorer: &Scorer, pairs: &[PairSample]) -> Result<f64> {
    if let Some(g) = cfg.align.g_l {
        return Ok(g);
    }
    calibrated_g_l(cfg, scorer, pairs)
}

pub(crate) fn calibrated_g_l(cfg: &RunConfig, scorer: &Scorer, pairs: &[PairSample]) -> Result<f64> {
    if let Scorer::Learned(_) = scorer {
        let stored = cfg.paths.checkpoint_dir().join(GUIDANCE_FILE);
        if stored.exists() {
            let cal: GuidanceCalibration = read_json(&stored)?;
            return Ok(cal.g_l);
        }
    }
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let n = cfg.align.calibration_pairs.clamp(1, pairs.len());
    calibrate_guidance(
        scorer.checkpoint(),
        &scorer.settings(),
        &pairs[..n],
        cfg.align.fd_step,
        cfg.align.calibration_ratio,
        cfg.align.seed,
    )
}

pub(crate) fn align_pair(
    scorer: &Scorer,
    settings: &ChainSettings,
    pair: &PairSample,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<AlignmentResult> {
    let model = scorer.model_for(pair, settings);
    align_iterative(&pair.source, &pair.dest, &model, sampler, seed)
}

fn read_pairs(dir: &Path, ids: &[String], field_grid: usize) -> Vec<(String, Result<PairSample>)> {
    ids.par_iter()
        .map(|id| (id.clone(), read_pair(dir, id, field_grid)))
        .collect()
}

fn image_pair(source: &Path, dest: &Path, gt: Option<&Path>, field_grid: usize) -> Result<PairSample> {
    let (h_gt, v_gt) = match gt {
        Some(g) => read_ground_truth(g, field_grid)?,
        None => (Homography::identity(), DisplacementField::zeros(field_grid, field_grid)),
    };
    let id = source
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pair".into());
    Ok(PairSample {
        id,
        source: read_pnm(source)?,
        dest: read_pnm(dest)?,
        h_gt,
        v_gt,
        seed: 0,
        degradation: Default::default(),
    })
}

/// Aligns the target pairs and writes one manifest (plus artifacts) per pair
/// into `paths.results`. A pair that cannot be read or aligned gets a failed
/// manifest and the run continues.
pub fn cmd_align(cfg: &RunConfig, target: &AlignTarget) -> Result<AlignSummary> {
    cfg.validate()?;
    let grid = cfg.train.net.field_size;
    let (loaded, has_gt): (Vec<(String, Result<PairSample>)>, bool) = match target {
        AlignTarget::Dataset { pair } => {
            let index = read_index(&cfg.paths.dataset)?;
            let ids = match pair {
                Some(id) if index.pairs.contains(id) => vec![id.clone()],
                Some(id) => return Err(invalid(format!("pair '{id}' is not in the dataset"))),
                None => index.pairs,
            };
            (with_jobs(cfg.jobs, || read_pairs(&cfg.paths.dataset, &ids, grid))?, true)
        }
        AlignTarget::Images { source, dest, gt } => {
            if cfg.align.oracle && gt.is_none() {
                return Err(AdmError::MissingGroundTruth(source.display().to_string()));
            }
            let p = image_pair(source, dest, gt.as_deref(), grid)?;
            (vec![(p.id.clone(), Ok(p))], gt.is_some())
        }
    };
    let good: Vec<PairSample> = loaded.iter().filter_map(|(_, p)| p.as_ref().ok().cloned()).collect();
    let scorer = Scorer::load(cfg)?;
    let settings = scorer.settings();
    let g_l = if has_gt { resolve_g_l(cfg, &scorer, &good)? } else { cfg.align.g_l.unwrap_or(0.0) };
    let sampler = cfg.align.sampler(g_l);
    let hash = cfg.hash();
    let out = &cfg.paths.results;
    fs::create_dir_all(out).map_err(|e| AdmError::io(out, e))?;

    let failed = with_jobs(cfg.jobs, || {
        loaded
            .par_iter()
            .map(|(id, pair)| -> Result<bool> {
                let seed = pair_seed(cfg.align.seed, id);
                let outcome = pair
                    .as_ref()
                    .map_err(|e| e.to_string())
                    .and_then(|p| {
                        let p = p.clone();
                        align_pair(&scorer, &settings, &p, &sampler, seed)
                            .map(|r| (r, p))
                            .map_err(|e| e.to_string())
                    });
                match outcome {
                    Ok((r, p)) => {
                        let failed = r.failed();
                        let mut r = r;
                        if !has_gt {
                            r.trace.iter_mut().for_each(|t| t.pnorm_to_gt = None);
                        }
                        write_result(out, id, &r, r.final_ncc(&p.dest), &hash)?;
                        Ok(failed)
                    }
                    Err(reason) => {
                        ResultManifest::failure(id, seed, &hash, reason).write(out)?;
                        Ok(true)
                    }
                }
            })
            .collect::<Result<Vec<bool>>>()
    })??;
    let index = ResultsIndex {
        pairs: loaded.iter().map(|(id, _)| id.clone()).collect(),
        seed: cfg.align.seed,
        g_l,
        oracle: cfg.align.oracle,
        config_hash: hash,
    };
    write_json(&out.join(RESULTS_INDEX), &index)?;
    cfg.write_effective(out)?;
    Ok(AlignSummary {
        dir: out.clone(),
        pairs: failed.len(),
        failed: failed.iter().filter(|f| **f).count(),
        g_l,
    })
}

/// True warp chain of a pair.
pub(crate) fn gt_stages(p: &PairSample) -> Vec<WarpStage> {
    let field = (!p.v_gt.is_zero()).then(|| p.v_gt.clone());
    vec![WarpStage::new(p.h_gt, field)]
}

/// Scores the manifests in `paths.results` against `paths.dataset` and
/// writes `eval.csv` and `eval.json` there.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(Vec<PairEvaluation>, Report)> {
    let results = &cfg.paths.results;
    let index: ResultsIndex = read_json(&results.join(RESULTS_INDEX))?;
    let data = read_index(&cfg.paths.dataset)?;
    let have: BTreeSet<&String> = index.pairs.iter().collect();
    let want: BTreeSet<&String> = data.pairs.iter().collect();
    if have != want {
        let missing: Vec<&&String> = want.difference(&have).take(5).collect();
        let extra: Vec<&&String> = have.difference(&want).take(5).collect();
        return Err(AdmError::MismatchedPairs(format!("missing {missing:?}, unexpected {extra:?}")));
    }
    let grid_n = cfg.train.net.field_size;
    let evals = with_jobs(cfg.jobs, || {
        data.pairs
            .par_iter()
            .map(|id| -> Result<PairEvaluation> {
                let pair = read_pair(&cfg.paths.dataset, id, grid_n)?;
                let m = ResultManifest::read(&results.join(format!("{id}.json")))?;
                if m.pair_id != *id {
                    return Err(AdmError::MismatchedPairs(format!("manifest {} under {id}", m.pair_id)));
                }
                let pred = if m.failure.is_some() { None } else { Some(m.load_stages(results)?) };
                let grid = control_grid(pair.source.width, pair.source.height);
                evaluate_pair(id, pred.as_deref(), &gt_stages(&pair), &grid)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let summary = report(&evals)?;
    write_report(results, "eval", &evals, &summary)?;
    Ok((evals, summary))
}

/// Runs the finite-difference checks and writes `gradcheck.json` into
/// `paths.results`; a failing layer is an error.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<GradCheckReport> {
    let report = run_gradcheck(&cfg.gradcheck);
    write_json(&cfg.paths.results.join("gradcheck.json"), &report)
        .or_else(|_| {
            fs::create_dir_all(&cfg.paths.results).map_err(|e| AdmError::io(&cfg.paths.results, e))?;
            write_json(&cfg.paths.results.join("gradcheck.json"), &report)
        })?;
    if let Some(w) = report.rows.iter().filter(|r| !r.passed).max_by(|a, b| a.worst_relative_error.total_cmp(&b.worst_relative_error)) {
        return Err(AdmError::GradCheckFailure {
            layer: w.layer.clone(),
            worst: w.worst_relative_error,
        });
    }
    Ok(report)
}
