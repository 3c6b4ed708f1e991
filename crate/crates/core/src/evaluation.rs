//! Registration metrics: control-point errors, success categories, AUC and
//! suite reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AdmError, Result};
use crate::geometry::{PixelGrid, Point2};
use crate::imaging::{back_projection, in_bounds, offset_continuous, WarpStage};

/// Acceptable iff the maximum error is below this (pixels).
pub const MAE_LIMIT: f64 = 50.0;
/// Acceptable iff the median error is below this (pixels).
pub const MEE_LIMIT: f64 = 20.0;
/// Largest threshold of the success curve (pixels).
pub const AUC_MAX_THRESHOLD: f64 = 25.0;
const AUC_STEPS: usize = 250;

/// Per-point alignment errors in pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub errors: Vec<f64>,
}

impl ErrorSample {
    /// Median error.
    pub fn mee(&self) -> f64 {
        let mut e = self.errors.clone();
        e.sort_by(f64::total_cmp);
        let n = e.len();
        if n == 0 {
            return 0.0;
        }
        if n % 2 == 1 {
            e[n / 2]
        } else {
            0.5 * (e[n / 2 - 1] + e[n / 2])
        }
    }

    /// Maximum error.
    pub fn mae(&self) -> f64 {
        self.errors.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SuccessCategory {
    Failed,
    Acceptable,
    Inaccurate,
}

impl SuccessCategory {
    pub fn label(self) -> &'static str {
        match self {
            SuccessCategory::Failed => "Failed",
            SuccessCategory::Acceptable => "Acceptable",
            SuccessCategory::Inaccurate => "Inaccurate",
        }
    }
}

/// Source-frame location that destination point `p` is sampled from under a
/// warp chain (last stage first, fields read continuously).
pub fn map_point(stages: &[WarpStage], p: Point2, width: usize, height: usize) -> Result<Point2> {
    let mut q = p;
    for st in stages.iter().rev() {
        let (du, dv) = st
            .field
            .as_ref()
            .map_or((0.0, 0.0), |f| offset_continuous(f, q.x, q.y, width, height));
        q = back_projection(&st.h)?.apply(Point2::new(q.x + du, q.y + dv))?;
    }
    Ok(q)
}

/// The default control points: a 10 x 10 lattice over the whole image.
pub fn control_grid(width: usize, height: usize) -> PixelGrid {
    PixelGrid::lattice(width, height, 10, 10, 0.0)
}

/// Distances between predicted and true source locations of the control
/// points whose true location lies inside the source.
pub fn control_point_errors(
    pred: &[WarpStage],
    gt: &[WarpStage],
    grid: &PixelGrid,
) -> Result<ErrorSample> {
    let (w, h) = (grid.width, grid.height);
    let mut errors = Vec::with_capacity(grid.len());
    for &p in &grid.points {
        let Ok(g) = map_point(gt, p, w, h) else { continue };
        if !in_bounds(w, h, g.x, g.y) {
            continue;
        }
        let q = map_point(pred, p, w, h)?;
        let e = q.distance(g);
        if !e.is_finite() {
            return Err(AdmError::DegenerateProjection(0.0));
        }
        errors.push(e);
    }
    if errors.is_empty() {
        return Err(AdmError::EmptyOverlap);
    }
    Ok(ErrorSample { errors })
}

/// Category of one pair; `None` means no transform was produced.
pub fn classify(errors: Option<&ErrorSample>) -> SuccessCategory {
    match errors {
        None => SuccessCategory::Failed,
        Some(e) if e.mae() < MAE_LIMIT && e.mee() < MEE_LIMIT => SuccessCategory::Acceptable,
        Some(_) => SuccessCategory::Inaccurate,
    }
}

/// Area under the success-rate curve of the given per-pair errors over
/// thresholds `0, 0.1, ..., 25`, scaled to `[0, 100]`. `None` entries count
/// as never successful.
pub fn auc(errors: &[Option<f64>]) -> Result<f64> {
    if errors.is_empty() {
        return Err(AdmError::EmptyInput("no pairs for AUC".into()));
    }
    let n = errors.len() as f64;
    let rate = |tau: f64| errors.iter().filter(|e| matches!(e, Some(v) if *v <= tau)).count() as f64 / n;
    let tau = |i: usize| i as f64 * AUC_MAX_THRESHOLD / AUC_STEPS as f64;
    let inner: f64 = (1..AUC_STEPS).map(|i| rate(tau(i))).sum();
    let total = 0.5 * (rate(0.0) + rate(AUC_MAX_THRESHOLD)) + inner;
    Ok(100.0 * total / AUC_STEPS as f64)
}

/// Evaluation of one pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairEvaluation {
    pub pair_id: String,
    pub mee: Option<f64>,
    pub mae: Option<f64>,
    pub category: SuccessCategory,
    pub auc: f64,
}

/// Scores a predicted warp chain against the true one; `pred = None` for a
/// failed alignment. Degenerate predicted maps count as failures.
pub fn evaluate_pair(pair_id: &str, pred: Option<&[WarpStage]>, gt: &[WarpStage], grid: &PixelGrid) -> Result<PairEvaluation> {
    let sample = match pred {
        Some(p) => match control_point_errors(p, gt, grid) {
            Ok(s) => Some(s),
            Err(AdmError::DegenerateProjection(_) | AdmError::SingularHomography(_)) => None,
            Err(e) => return Err(e),
        },
        None => None,
    };
    let category = classify(sample.as_ref());
    let mee = sample.as_ref().map(ErrorSample::mee);
    Ok(PairEvaluation {
        pair_id: pair_id.to_string(),
        mee,
        mae: sample.as_ref().map(ErrorSample::mae),
        category,
        auc: auc(&[mee])?,
    })
}

/// Category percentages and mean AUC of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub pairs: usize,
    pub failed: f64,
    pub acceptable: f64,
    pub inaccurate: f64,
    pub mauc: f64,
}

pub fn report(evals: &[PairEvaluation]) -> Result<Report> {
    if evals.is_empty() {
        return Err(AdmError::EmptyInput("no evaluated pairs".into()));
    }
    let n = evals.len() as f64;
    let pct = |c: SuccessCategory| 100.0 * evals.iter().filter(|e| e.category == c).count() as f64 / n;
    Ok(Report {
        pairs: evals.len(),
        failed: pct(SuccessCategory::Failed),
        acceptable: pct(SuccessCategory::Acceptable),
        inaccurate: pct(SuccessCategory::Inaccurate),
        mauc: evals.iter().map(|e| e.auc).sum::<f64>() / n,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-pair CSV with columns `pair_id,MEE,MAE,category,AUC`.
pub fn evaluations_csv(evals: &[PairEvaluation]) -> String {
    let mut s = String::from("pair_id,MEE,MAE,category,AUC\n");
    for e in evals {
        let _ = writeln!(s, "{},{},{},{},{}", e.pair_id, cell(e.mee), cell(e.mae), e.category.label(), e.auc);
    }
    s
}

/// Writes `<stem>.csv` (per pair) and `<stem>.json` (summary) into `dir`.
pub fn write_report(dir: &Path, stem: &str, evals: &[PairEvaluation], summary: &Report) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AdmError::io(dir, e))?;
    let csv = dir.join(format!("{stem}.csv"));
    fs::write(&csv, evaluations_csv(evals)).map_err(|e| AdmError::io(&csv, e))?;
    let json = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&serde_json::json!({
        "Failed": summary.failed,
        "Acceptable": summary.acceptable,
        "Inaccurate": summary.inaccurate,
        "mAUC": summary.mauc,
        "pairs": summary.pairs,
    }))?;
    fs::write(&json, text + "\n").map_err(|e| AdmError::io(&json, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Homography;
    use crate::imaging::DisplacementField;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stage(h: Homography) -> Vec<WarpStage> {
        vec![WarpStage::new(h, None)]
    }

    fn translation(tx: f64, ty: f64) -> Homography {
        Homography::new([1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0])
    }

    #[test]
    fn identical_warps_have_zero_error() {
        let h = Homography::similarity(1.1, 0.2, Point2::new(32.0, 32.0), 2.0, -3.0);
        let e = control_point_errors(&stage(h), &stage(h), &control_grid(64, 64)).unwrap();
        assert!(e.errors.iter().all(|v| *v < 1e-9));
    }

    #[test]
    fn translation_offset_gives_uniform_error() {
        let gt = stage(translation(3.0, 4.0));
        let e = control_point_errors(&stage(Homography::identity()), &gt, &control_grid(64, 64)).unwrap();
        assert!(!e.errors.is_empty());
        for v in &e.errors {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn no_overlap_is_reported() {
        let gt = stage(translation(200.0, 0.0));
        let r = control_point_errors(&stage(Homography::identity()), &gt, &control_grid(64, 64));
        assert!(matches!(r, Err(AdmError::EmptyOverlap)));
    }

    /// Independent point map: inverse matrix by cofactors, bilinear field
    /// read written out per point.
    fn brute_map(h: &[f64; 9], field: Option<&DisplacementField>, x: f64, y: f64, n: usize) -> (f64, f64) {
        let (mut px, mut py) = (x, y);
        if let Some(f) = field {
            let s = f.width as f64 / n as f64;
            let cx = ((x + 0.5) * s - 0.5).clamp(0.0, (f.width - 1) as f64);
            let cy = ((y + 0.5) * s - 0.5).clamp(0.0, (f.height - 1) as f64);
            let i0 = (cx.floor() as usize).min(f.width - 2);
            let j0 = (cy.floor() as usize).min(f.height - 2);
            let (a, b) = (cx - i0 as f64, cy - j0 as f64);
            let at = |c: &[f64], i: usize, j: usize| c[j * f.width + i];
            let lerp = |c: &[f64]| {
                at(c, i0, j0) * (1.0 - a) * (1.0 - b)
                    + at(c, i0 + 1, j0) * a * (1.0 - b)
                    + at(c, i0, j0 + 1) * (1.0 - a) * b
                    + at(c, i0 + 1, j0 + 1) * a * b
            };
            px += lerp(&f.u);
            py += lerp(&f.v);
        }
        let m = h;
        let inv = [
            m[4] * m[8] - m[5] * m[7],
            m[2] * m[7] - m[1] * m[8],
            m[1] * m[5] - m[2] * m[4],
            m[5] * m[6] - m[3] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[2] * m[3] - m[0] * m[5],
            m[3] * m[7] - m[4] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[0] * m[4] - m[1] * m[3],
        ];
        let d = inv[6] * px + inv[7] * py + inv[8];
        ((inv[0] * px + inv[1] * py + inv[2]) / d, (inv[3] * px + inv[4] * py + inv[5]) / d)
    }

    fn random_h(rng: &mut ChaCha8Rng) -> Homography {
        Homography::similarity(
            rng.gen_range(0.85..1.2),
            rng.gen_range(-0.4..0.4),
            Point2::new(32.0, 32.0),
            rng.gen_range(-6.0..6.0),
            rng.gen_range(-6.0..6.0),
        )
    }

    #[test]
    fn errors_match_brute_force_point_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = control_grid(64, 64);
        for _ in 0..200 {
            let hp = random_h(&mut rng);
            let hg = random_h(&mut rng);
            let mut f = DisplacementField::zeros(8, 8);
            f.u.iter_mut().chain(f.v.iter_mut()).for_each(|v| *v = rng.gen_range(-2.0..2.0));
            let pred = vec![WarpStage::new(hp, Some(f.clone()))];
            let e = control_point_errors(&pred, &stage(hg), &grid).unwrap();
            let mut k = 0;
            for p in &grid.points {
                let g = brute_map(&hg.h, None, p.x, p.y, 64);
                if !(g.0 >= 0.0 && g.1 >= 0.0 && g.0 <= 63.0 && g.1 <= 63.0) {
                    continue;
                }
                let q = brute_map(&hp.h, Some(&f), p.x, p.y, 64);
                let want = ((q.0 - g.0).powi(2) + (q.1 - g.1).powi(2)).sqrt();
                assert!((e.errors[k] - want).abs() < 1e-9, "{} vs {want}", e.errors[k]);
                k += 1;
            }
            assert_eq!(k, e.errors.len());
        }
    }

    #[test]
    fn classification_boundaries() {
        let s = |mae: f64, mee: f64| ErrorSample {
            errors: vec![0.0, mee, mee, mae],
        };
        assert_eq!(classify(Some(&s(49.9, 19.9))), SuccessCategory::Acceptable);
        assert_eq!(classify(Some(&s(50.0, 19.9))), SuccessCategory::Inaccurate);
        assert_eq!(classify(Some(&s(40.0, 20.0))), SuccessCategory::Inaccurate);
        assert_eq!(classify(None), SuccessCategory::Failed);
    }

    #[test]
    fn median_and_max() {
        let e = ErrorSample {
            errors: vec![4.0, 1.0, 3.0, 2.0],
        };
        assert_eq!(e.mee(), 2.5);
        assert_eq!(e.mae(), 4.0);
        let e = ErrorSample {
            errors: vec![5.0, 1.0, 3.0],
        };
        assert_eq!(e.mee(), 3.0);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[Some(0.0), Some(0.0)]).unwrap(), 100.0);
        assert_eq!(auc(&[Some(25.1), None]).unwrap(), 0.0);
        let half = auc(&[Some(0.0), Some(30.0), Some(0.0), Some(40.0)]).unwrap();
        assert!((half - 50.0).abs() < 1e-9);
        // A single pair at error e integrates to (25 - e) / 25 on the grid.
        let a = auc(&[Some(10.0)]).unwrap();
        assert!((a - 60.0).abs() < 0.2 + 1e-9, "{a}");
        assert!(matches!(auc(&[]), Err(AdmError::EmptyInput(_))));
    }

    #[test]
    fn report_percentages() {
        let ev = |c: SuccessCategory| PairEvaluation {
            pair_id: "p".into(),
            mee: None,
            mae: None,
            category: c,
            auc: 40.0,
        };
        let r = report(&[ev(SuccessCategory::Acceptable)]).unwrap();
        assert_eq!((r.failed, r.acceptable, r.inaccurate), (0.0, 100.0, 0.0));
        let mut v = vec![ev(SuccessCategory::Failed); 1];
        v.extend(vec![ev(SuccessCategory::Acceptable); 5]);
        v.extend(vec![ev(SuccessCategory::Inaccurate); 2]);
        let r = report(&v).unwrap();
        assert_eq!((r.failed, r.acceptable, r.inaccurate), (12.5, 62.5, 25.0));
        assert_eq!(r.mauc, 40.0);
    }

    #[test]
    fn report_files() {
        let e = evaluate_pair("pair_00000", Some(&stage(Homography::identity())), &stage(translation(3.0, 4.0)), &control_grid(64, 64)).unwrap();
        assert_eq!(e.category, SuccessCategory::Acceptable);
        assert_eq!(e.mee, Some(5.0));
        let f = evaluate_pair("pair_00001", None, &stage(Homography::identity()), &control_grid(64, 64)).unwrap();
        assert_eq!(f.category, SuccessCategory::Failed);
        assert_eq!(f.auc, 0.0);
        let evals = vec![e, f];
        let dir = tempfile::tempdir().unwrap();
        write_report(dir.path(), "eval", &evals, &report(&evals).unwrap()).unwrap();
        let csv = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "pair_id,MEE,MAE,category,AUC");
        assert!(csv.contains("pair_00001,,,Failed,0"));
        let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
        assert_eq!(json["Failed"], 50.0);
    }

    proptest! {
        #[test]
        fn mee_never_exceeds_mae(errors in prop::collection::vec(0.0f64..100.0, 1..40)) {
            let e = ErrorSample { errors };
            prop_assert!(e.mee() <= e.mae());
        }

        #[test]
        fn auc_is_monotone_in_errors(errors in prop::collection::vec(0.0f64..30.0, 1..20), bump in 0.0f64..5.0) {
            let a: Vec<Option<f64>> = errors.iter().map(|e| Some(*e)).collect();
            let b: Vec<Option<f64>> = errors.iter().map(|e| Some(e + bump)).collect();
            prop_assert!(auc(&b).unwrap() <= auc(&a).unwrap() + 1e-12);
        }

        #[test]
        fn doubling_errors_never_improves_category(errors in prop::collection::vec(0.0f64..80.0, 1..30)) {
            let e = ErrorSample { errors: errors.clone() };
            let d = ErrorSample { errors: errors.iter().map(|v| 2.0 * v).collect() };
            prop_assert!(!(classify(Some(&e)) == SuccessCategory::Inaccurate && classify(Some(&d)) == SuccessCategory::Acceptable));
        }

        #[test]
        fn categories_partition(cats in prop::collection::vec(0u8..3, 1..50)) {
            let evals: Vec<PairEvaluation> = cats.iter().map(|c| PairEvaluation {
                pair_id: String::new(), mee: None, mae: None, auc: 0.0,
                category: [SuccessCategory::Failed, SuccessCategory::Acceptable, SuccessCategory::Inaccurate][*c as usize],
            }).collect();
            let r = report(&evals).unwrap();
            prop_assert!((r.failed + r.acceptable + r.inaccurate - 100.0).abs() < 0.1);
        }
    }
}
