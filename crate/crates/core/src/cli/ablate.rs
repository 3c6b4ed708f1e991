use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{AdmError, Result};
use crate::evaluation::{control_grid, evaluate_pair, SuccessCategory};
use crate::geometry::{p_norm_distance, PixelGrid};
use crate::imaging::{degrade, Degradation};
use crate::sampler::{ChainSettings, SamplerConfig};
use crate::seed::derive_seed;
use crate::training::{read_index, read_pair, train, write_json, PairSample};

use super::commands::{align_pair, calibrated_g_l, gt_stages, resolve_g_l, Scorer};
use super::{pair_seed, with_jobs, RunConfig};

/// Inference or training knob swept by `ablate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    /// Appearance guidance off and on.
    Guidance,
    /// One round of alignment against two.
    Iterative,
    /// On/off combinations of the three loss weight schedules, each with its
    /// own trained model.
    Scheduling,
    /// Grid of reverse-chain lengths.
    Steps,
    /// Destination images corrupted by each configured degradation.
    Degradation,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::Guidance,
        AblationAxis::Iterative,
        AblationAxis::Scheduling,
        AblationAxis::Steps,
        AblationAxis::Degradation,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationAxis::Guidance => "guidance",
            AblationAxis::Iterative => "iterative",
            AblationAxis::Scheduling => "scheduling",
            AblationAxis::Steps => "steps",
            AblationAxis::Degradation => "degradation",
        }
    }
}

impl FromStr for AblationAxis {
    type Err = AdmError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.label() == s)
            .ok_or_else(|| AdmError::InvalidConfig(format!("unknown ablation axis '{s}'")))
    }
}

/// Schedule toggles of the scheduling axis: (displacement score gate,
/// pixel term schedule, regularizer schedule).
pub const SCHEDULING_ROWS: [(bool, bool, bool); 5] = [
    (true, true, true),
    (true, false, false),
    (false, true, false),
    (false, false, true),
    (false, false, false),
];

/// Outcome of one pair under one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOutcome {
    pub condition: String,
    pub pair_id: String,
    pub mee: Option<f64>,
    pub mae: Option<f64>,
    pub category: SuccessCategory,
    pub auc: f64,
    pub final_ncc: Option<f64>,
    /// Point distance between the estimated and true homographies.
    pub pnorm: Option<f64>,
    pub failure: Option<String>,
}

/// Suite statistics of one condition, with differences to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub pairs: usize,
    pub failed: f64,
    pub acceptable: f64,
    pub inaccurate: f64,
    pub mauc: f64,
    /// Pairs without a defined NCC count as 0.
    pub mean_final_ncc: f64,
    /// Over pairs that produced an estimate.
    pub mean_pnorm: Option<f64>,
    pub delta_mauc: f64,
    pub delta_acceptable: f64,
    pub delta_final_ncc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub conditions: Vec<ConditionSummary>,
    pub pairs: Vec<PairOutcome>,
}

impl AblationReport {
    pub fn condition(&self, name: &str) -> Option<&ConditionSummary> {
        self.conditions.iter().find(|c| c.condition == name)
    }

    /// Outcomes of one condition in suite order.
    pub fn outcomes(&self, name: &str) -> Vec<&PairOutcome> {
        self.pairs.iter().filter(|p| p.condition == name).collect()
    }
}

struct Condition {
    name: String,
    scorer: usize,
    settings: ChainSettings,
    sampler: SamplerConfig,
    degradation: Option<Degradation>,
}

/// Linear schedule over `steps` with the betas rescaled so the total noise
/// roughly matches a `base_steps` schedule.
fn respaced(steps: usize, base_steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    let r = base_steps as f64 / steps as f64;
    let hi = (beta_max * r).min(0.999);
    NoiseSchedule::linear(steps, (beta_min * r).min(hi), hi)
}

fn flag(b: bool) -> char {
    if b {
        'T'
    } else {
        'F'
    }
}

fn load_suite(dir: &Path, grid: usize) -> Result<Vec<PairSample>> {
    let index = read_index(dir)?;
    index.pairs.par_iter().map(|id| read_pair(dir, id, grid)).collect()
}

fn run_condition(scorer: &Scorer, cond: &Condition, pairs: &[PairSample], base_seed: u64) -> Result<Vec<PairOutcome>> {
    pairs
        .par_iter()
        .map(|p| -> Result<PairOutcome> {
            let mut pair = p.clone();
            if let Some(d) = &cond.degradation {
                pair.dest = degrade(&p.dest, d, derive_seed(p.seed, 0xDE6))?;
            }
            let seed = pair_seed(base_seed, &pair.id);
            let (w, h) = (pair.source.width, pair.source.height);
            let result = align_pair(scorer, &cond.settings, &pair, &cond.sampler, seed);
            let (stages, final_ncc, pnorm, failure) = match &result {
                Ok(r) if !r.failed() => (
                    Some(r.stages.as_slice()),
                    r.final_ncc(&pair.dest),
                    p_norm_distance(&r.h, &pair.h_gt, &PixelGrid::loss_points(w, h), 2.0).ok(),
                    None,
                ),
                Ok(r) => (None, None, None, r.failure.clone()),
                Err(e) => (None, None, None, Some(e.to_string())),
            };
            let ev = evaluate_pair(&pair.id, stages, &gt_stages(&pair), &control_grid(w, h))?;
            Ok(PairOutcome {
                condition: cond.name.clone(),
                pair_id: pair.id,
                mee: ev.mee,
                mae: ev.mae,
                category: ev.category,
                auc: ev.auc,
                final_ncc,
                pnorm,
                failure,
            })
        })
        .collect()
}

fn summarize(name: &str, outcomes: &[PairOutcome]) -> ConditionSummary {
    let n = outcomes.len().max(1) as f64;
    let pct = |c: SuccessCategory| 100.0 * outcomes.iter().filter(|o| o.category == c).count() as f64 / n;
    let pn: Vec<f64> = outcomes.iter().filter_map(|o| o.pnorm).collect();
    ConditionSummary {
        condition: name.to_string(),
        pairs: outcomes.len(),
        failed: pct(SuccessCategory::Failed),
        acceptable: pct(SuccessCategory::Acceptable),
        inaccurate: pct(SuccessCategory::Inaccurate),
        mauc: outcomes.iter().map(|o| o.auc).sum::<f64>() / n,
        mean_final_ncc: outcomes.iter().map(|o| o.final_ncc.unwrap_or(0.0)).sum::<f64>() / n,
        mean_pnorm: (!pn.is_empty()).then(|| pn.iter().sum::<f64>() / pn.len() as f64),
        delta_mauc: 0.0,
        delta_acceptable: 0.0,
        delta_final_ncc: 0.0,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_outputs(dir: &Path, report: &AblationReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AdmError::io(dir, e))?;
    let mut pairs = String::from("condition,pair_id,MEE,MAE,category,AUC,final_ncc,pnorm,failure\n");
    for o in &report.pairs {
        let reason = o.failure.as_deref().unwrap_or("").replace([',', '\n'], " ");
        let _ = writeln!(
            pairs,
            "{},{},{},{},{},{},{},{},{}",
            o.condition,
            o.pair_id,
            opt(o.mee),
            opt(o.mae),
            o.category.label(),
            o.auc,
            opt(o.final_ncc),
            opt(o.pnorm),
            reason
        );
    }
    let mut summary = String::from(
        "condition,pairs,Failed,Acceptable,Inaccurate,mAUC,mean_final_ncc,mean_pnorm,delta_mAUC,delta_Acceptable,delta_final_ncc\n",
    );
    for c in &report.conditions {
        let _ = writeln!(
            summary,
            "{},{},{},{},{},{},{},{},{},{},{}",
            c.condition,
            c.pairs,
            c.failed,
            c.acceptable,
            c.inaccurate,
            c.mauc,
            c.mean_final_ncc,
            opt(c.mean_pnorm),
            c.delta_mauc,
            c.delta_acceptable,
            c.delta_final_ncc
        );
    }
    let write = |name: &str, text: &str| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| AdmError::io(&p, e))
    };
    write("pairs.csv", &pairs)?;
    write("summary.csv", &summary)?;
    write_json(&dir.join("summary.json"), report)
}

/// Trains one model per scheduling row under `<run>/ablate_scheduling`.
fn scheduling_models(cfg: &RunConfig) -> Result<Vec<(String, Scorer, f64)>> {
    if cfg.align.oracle {
        return Err(AdmError::InvalidConfig("the scheduling axis trains models; it has no oracle mode".into()));
    }
    let train_dir = cfg.ablate.train_dataset.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
    let train_pairs = load_suite(&train_dir, cfg.train.net.field_size)?;
    let mut out = Vec::new();
    for (s, x, r) in SCHEDULING_ROWS {
        let name = format!("{}{}{}", flag(s), flag(x), flag(r));
        let mut sub = cfg.clone();
        sub.train.weights.schedule_s = s;
        sub.train.weights.schedule_x = x;
        sub.train.weights.schedule_r = r;
        sub.paths.run = cfg.paths.run.join("ablate_scheduling").join(&name);
        sub.paths.checkpoint = None;
        let outcome = train(&sub.train, &train_pairs, Some(&sub.paths.run), &sub.hash())?;
        let scorer = Scorer::Learned(Box::new(outcome.checkpoint));
        let g_l = match cfg.align.g_l {
            Some(g) => g,
            None => calibrated_g_l(&sub, &scorer, &train_pairs)?,
        };
        out.push((name, scorer, g_l));
    }
    Ok(out)
}

/// Runs the suite in `paths.dataset` under every condition of `axis` and
/// writes `pairs.csv`, `summary.csv` and `summary.json` into
/// `<results>/ablate_<axis>`. Every condition uses the same per-pair seeds.
pub fn cmd_ablate(cfg: &RunConfig, axis: AblationAxis) -> Result<AblationReport> {
    cfg.validate()?;
    with_jobs(cfg.jobs, || ablate_inner(cfg, axis))?
}

fn ablate_inner(cfg: &RunConfig, axis: AblationAxis) -> Result<AblationReport> {
    let suite = load_suite(&cfg.paths.dataset, cfg.train.net.field_size)?;
    let mut scorers = Vec::new();
    let mut conditions = Vec::new();
    let cond = |name: String, scorer: usize, settings: ChainSettings, sampler: SamplerConfig| Condition {
        name,
        scorer,
        settings,
        sampler,
        degradation: None,
    };
    if axis == AblationAxis::Scheduling {
        for (i, (name, scorer, g_l)) in scheduling_models(cfg)?.into_iter().enumerate() {
            conditions.push(cond(name, i, scorer.settings(), cfg.align.sampler(g_l)));
            scorers.push(scorer);
        }
    } else {
        let scorer = Scorer::load(cfg)?;
        let base = scorer.settings();
        match axis {
            AblationAxis::Guidance => {
                let g_l = match cfg.align.g_l {
                    Some(g) if g > 0.0 => g,
                    _ => calibrated_g_l(cfg, &scorer, &suite)?,
                };
                conditions.push(cond("unguided".into(), 0, base.clone(), cfg.align.sampler(0.0)));
                conditions.push(cond("guided".into(), 0, base, cfg.align.sampler(g_l)));
            }
            AblationAxis::Iterative => {
                let g_l = resolve_g_l(cfg, &scorer, &suite)?;
                let mut two = cfg.align.sampler(g_l);
                two.n_iter = cfg.align.n_iter.max(2);
                let mut one = cfg.align.sampler(g_l);
                one.n_iter = 1;
                conditions.push(cond("n_iter_1".into(), 0, base.clone(), one));
                conditions.push(cond(format!("n_iter_{}", two.n_iter), 0, base, two));
            }
            AblationAxis::Steps => {
                let g_l = resolve_g_l(cfg, &scorer, &suite)?;
                let t = &cfg.train;
                for &sh in &cfg.ablate.steps_h {
                    for &sv in &cfg.ablate.steps_v {
                        let mut s = base.clone();
                        s.schedule_h = respaced(sh, t.steps_h, t.beta_min, t.beta_max)?;
                        s.schedule_v = respaced(sv, t.steps_v, t.beta_min, t.beta_max)?;
                        conditions.push(cond(format!("h{sh}_v{sv}"), 0, s, cfg.align.sampler(g_l)));
                    }
                }
            }
            AblationAxis::Degradation => {
                let g_l = resolve_g_l(cfg, &scorer, &suite)?;
                for d in &cfg.ablate.degradations {
                    let mut c = cond(d.label(), 0, base.clone(), cfg.align.sampler(g_l));
                    c.degradation = (*d != Degradation::None).then_some(*d);
                    conditions.push(c);
                }
            }
            AblationAxis::Scheduling => unreachable!(),
        }
        scorers.push(scorer);
    }

    let mut pairs = Vec::new();
    let mut summaries: Vec<ConditionSummary> = Vec::new();
    for c in &conditions {
        let outcomes = run_condition(&scorers[c.scorer], c, &suite, cfg.align.seed)?;
        summaries.push(summarize(&c.name, &outcomes));
        pairs.extend(outcomes);
    }
    if let Some(first) = summaries.first().cloned() {
        for s in &mut summaries {
            s.delta_mauc = s.mauc - first.mauc;
            s.delta_acceptable = s.acceptable - first.acceptable;
            s.delta_final_ncc = s.mean_final_ncc - first.mean_final_ncc;
        }
    }
    let report = AblationReport {
        axis,
        conditions: summaries,
        pairs,
    };
    let dir = cfg.paths.results.join(format!("ablate_{}", axis.label()));
    write_outputs(&dir, &report)?;
    cfg.write_effective(&dir)?;
    Ok(report)
}
