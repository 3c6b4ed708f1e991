//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion to
//! stderr (uncaptured). Set `ADM_ACCEPTANCE_STRICT=1` to turn any FAIL into a
//! test failure.
//!
//! The learned-model criteria train for 50k steps on first use; the run
//! directory under the cargo target tmp dir is reused afterwards.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adm::cli::{
    cmd_ablate, cmd_align, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_train, AblationAxis, AlignTarget, RunConfig,
};
use adm::diffusion::NoiseSchedule;
use adm::evaluation::{auc, classify, control_grid, evaluate_pair, report, ErrorSample, SuccessCategory};
use adm::geometry::{mean_corner_error, Homography};
use adm::imaging::WarpStage;
use adm::sampler::ResultManifest;
use adm::scorenets::NetConfig;
use adm::training::{
    generate_suite, loss_score_h, loss_score_v, read_dataset, train, LossWeights, PairSpec, TrainConfig,
    TransformRange,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

struct Ledger {
    failures: Vec<usize>,
}

impl Ledger {
    fn record(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        let mut err = std::io::stderr().lock();
        let _ = writeln!(err, "[{tag}] criterion {id} ({name}): {detail}");
        if !pass {
            self.failures.push(id);
        }
    }
}

fn work_dir(name: &str) -> PathBuf {
    let d = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    fs::create_dir_all(&d).unwrap();
    d
}

fn fresh_dir(name: &str) -> PathBuf {
    let d = work_dir(name);
    fs::remove_dir_all(&d).unwrap();
    fs::create_dir_all(&d).unwrap();
    d
}

fn with_paths(mut c: RunConfig, root: &Path) -> RunConfig {
    c.paths.dataset = root.join("data");
    c.paths.run = root.join("run");
    c.paths.results = root.join("results");
    c
}

fn similarity_suite_config(root: &Path, pairs: usize) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.pairs = pairs;
    c.data.seed = 1;
    c.data.spec.range = TransformRange {
        max_perspective: 0.0,
        ..TransformRange::default()
    };
    c.align.oracle = true;
    c.align.g_l = Some(0.0);
    with_paths(c, root)
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn criterion_1(l: &mut Ledger) {
    let root = fresh_dir("oracle");
    let c = similarity_suite_config(&root, 100);
    let t0 = Instant::now();
    cmd_gen_data(&c).unwrap();
    cmd_align(&c, &AlignTarget::Dataset { pair: None }).unwrap();
    let (_, rep) = cmd_eval(&c).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let data = read_dataset(&c.paths.dataset).unwrap();
    let mut errs: Vec<f64> = data
        .pairs
        .iter()
        .map(|p| {
            let m = ResultManifest::read(&c.paths.results.join(format!("{}.json", p.id))).unwrap();
            mean_corner_error(&Homography::new(m.h), &p.h_gt, 64, 64).unwrap_or(f64::INFINITY)
        })
        .collect();
    let med = median(&mut errs);
    l.record(
        1,
        "oracle-score convergence",
        med < 1.0 && rep.acceptable == 100.0 && secs < 120.0,
        format!(
            "100 pairs: median corner error {med:.2e} px (< 1), Acceptable {:.1}% (= 100), {secs:.1} s (< 120)",
            rep.acceptable
        ),
    );
}

fn criterion_2(l: &mut Ledger) {
    let root = fresh_dir("gradcheck");
    let c = with_paths(RunConfig::default(), &root);
    match cmd_gradcheck(&c) {
        Ok(r) => {
            let worst = r.worst().unwrap();
            let min_checked = r.rows.iter().map(|x| x.checked).min().unwrap();
            l.record(
                2,
                "gradient correctness",
                r.passed(),
                format!(
                    "{} layer checks, >= {min_checked} entries each, worst relative error {:.2e} in {} (< 1e-4)",
                    r.rows.len(),
                    worst.worst_relative_error,
                    worst.layer
                ),
            );
        }
        Err(e) => l.record(2, "gradient correctness", false, e.to_string()),
    }
}

fn criterion_3(l: &mut Ledger) {
    let sh = NoiseSchedule::linear(100, 1e-4, 0.02).unwrap();
    let sv = NoiseSchedule::linear(500, 1e-4, 0.02).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let (mut zero_ok, mut pos_ok) = (0, 0);
    for k in 0..1000 {
        let (sched, n) = if k % 2 == 0 { (&sh, 9) } else { (&sv, 2 * 16 * 16) };
        let t = rng.gen_range(1..=sched.steps());
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let inv = 1.0 / (1.0 - sched.alpha_bar(t)).sqrt();
        let target: Vec<f64> = z.iter().map(|v| -v * inv).collect();
        let mut probe = target.clone();
        probe[rng.gen_range(0..n)] += rng.gen_range(1e-3..1.0) * if rng.gen() { 1.0 } else { -1.0 };
        let loss = if k % 2 == 0 { loss_score_h } else { loss_score_v };
        zero_ok += usize::from(loss(&target, &z, t, sched).unwrap() == 0.0);
        pos_ok += usize::from(loss(&probe, &z, t, sched).unwrap() > 0.0);
    }
    l.record(
        3,
        "loss-target consistency",
        zero_ok == 1000 && pos_ok == 1000,
        format!("exactly 0 at target on {zero_ok}/1000 probes, > 0 off target on {pos_ok}/1000"),
    );
}

/// Independent reference: explicit sort for the median, linear scan for the
/// maximum, integer success counts for the AUC.
fn reference_metrics(errors: &[f64]) -> (f64, f64, SuccessCategory) {
    let mut s = errors.to_vec();
    for i in 1..s.len() {
        let mut j = i;
        while j > 0 && s[j - 1] > s[j] {
            s.swap(j - 1, j);
            j -= 1;
        }
    }
    let n = s.len();
    let mee = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
    let mut mae = 0.0;
    for &e in errors {
        if e > mae {
            mae = e;
        }
    }
    let cat = if mae < 50.0 && mee < 20.0 {
        SuccessCategory::Acceptable
    } else {
        SuccessCategory::Inaccurate
    };
    (mee, mae, cat)
}

fn reference_auc(mees: &[Option<f64>]) -> f64 {
    let count = |tau: f64| mees.iter().filter(|m| matches!(m, Some(v) if *v <= tau)).count() as u64;
    let thresholds: Vec<f64> = (0..=250).map(|i| i as f64 * 25.0 / 250.0).collect();
    let mut twice: u64 = 0;
    for w in thresholds.windows(2) {
        twice += count(w[0]) + count(w[1]);
    }
    100.0 * twice as f64 / (2.0 * 250.0 * mees.len() as f64)
}

fn criterion_4(l: &mut Ledger) {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut exact = 0;
    let mut auc_dev: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=100);
        let scale = [1.0, 10.0, 30.0, 80.0][rng.gen_range(0..4)];
        let errors: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..scale)).collect();
        let sample = ErrorSample { errors: errors.clone() };
        let (mee, mae, cat) = reference_metrics(&errors);
        if sample.mee() == mee && sample.mae() == mae && classify(Some(&sample)) == cat {
            exact += 1;
        }
        let batch: Vec<Option<f64>> = (0..rng.gen_range(1..20))
            .map(|_| (rng.gen_range(0.0..1.0) > 0.1).then(|| rng.gen_range(0.0..30.0)))
            .collect();
        auc_dev = auc_dev.max((auc(&batch).unwrap() - reference_auc(&batch)).abs());
    }
    let at = |mae: f64, mee: f64| {
        let s = ErrorSample {
            errors: vec![mee, mee, mae],
        };
        classify(Some(&s))
    };
    let boundary = at(50.0, 1.0) == SuccessCategory::Inaccurate
        && at(30.0, 20.0) == SuccessCategory::Inaccurate
        && at(49.999, 19.999) == SuccessCategory::Acceptable
        && classify(None) == SuccessCategory::Failed;
    l.record(
        4,
        "metric-suite oracle equivalence",
        exact == 1000 && auc_dev < 1e-9 && boundary,
        format!(
            "MEE/MAE/category identical on {exact}/1000 vectors, max AUC deviation {auc_dev:.1e}, MAE=50 and MEE=20 boundaries Inaccurate: {boundary}"
        ),
    );
}

/// Transform range of the learned-model suite, wide enough that the identity
/// transform is a weak baseline.
fn wide_spec() -> PairSpec {
    PairSpec {
        range: TransformRange {
            max_translation: 24.0,
            max_rotation_deg: 180.0,
            ..TransformRange::default()
        },
        ..PairSpec::default()
    }
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Registration {
    identity_acceptable: f64,
    identity_mauc: f64,
    required_acceptable: f64,
    required_mauc_above: f64,
}

fn learned_config(root: &Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.data.spec = wide_spec();
    c.train = TrainConfig {
        steps: 50_000,
        checkpoint_every: 5_000,
        ..TrainConfig::default()
    };
    c.paths.run = root.join("run");
    c.paths.results = root.join("results");
    c
}

fn criteria_5_and_7(l: &mut Ledger) {
    let root = work_dir("learned");
    let mut c = learned_config(&root);

    // Held-out suite and identity baseline, registered before training.
    c.data.pairs = 100;
    c.data.seed = 200;
    c.paths.dataset = root.join("test");
    cmd_gen_data(&c).unwrap();
    let test = read_dataset(&c.paths.dataset).unwrap();
    let grid = control_grid(64, 64);
    let identity = [WarpStage::new(Homography::identity(), None)];
    let base: Vec<_> = test
        .pairs
        .iter()
        .map(|p| evaluate_pair(&p.id, Some(&identity), &[WarpStage::new(p.h_gt, None)], &grid).unwrap())
        .collect();
    let base = report(&base).unwrap();
    let reg = Registration {
        identity_acceptable: base.acceptable,
        identity_mauc: base.mauc,
        required_acceptable: 2.0 * base.acceptable,
        required_mauc_above: base.mauc,
    };
    let reg_path = root.join("registration.json");
    if reg_path.exists() {
        let old: Registration = serde_json::from_str(&fs::read_to_string(&reg_path).unwrap()).unwrap();
        assert_eq!(old, reg, "held-out suite changed since registration");
    } else {
        fs::write(&reg_path, serde_json::to_string_pretty(&reg).unwrap()).unwrap();
    }
    let _ = writeln!(
        std::io::stderr().lock(),
        "registered: identity Acceptable {:.1}%, mAUC {:.2}; learned model needs Acceptable >= {:.1}% and mAUC > {:.2}",
        reg.identity_acceptable,
        reg.identity_mauc,
        reg.required_acceptable,
        reg.required_mauc_above
    );

    // Training suite.
    let test_dir = c.paths.dataset.clone();
    c.data.pairs = 500;
    c.data.seed = 100;
    c.paths.dataset = root.join("train");
    cmd_gen_data(&c).unwrap();
    let t0 = Instant::now();
    let trained = cmd_train(&c).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();

    c.paths.dataset = test_dir;
    let t1 = Instant::now();
    let r = cmd_ablate(&c, AblationAxis::Guidance).unwrap();
    let align_secs = t1.elapsed().as_secs_f64();
    let unguided = r.condition("unguided").unwrap();
    let guided = r.condition("guided").unwrap();
    let g_l = trained.guidance.as_ref().map_or(f64::NAN, |g| g.g_l);

    l.record(
        5,
        "guidance ablation direction",
        guided.mean_final_ncc > unguided.mean_final_ncc && guided.mauc >= unguided.mauc && align_secs < 1800.0,
        format!(
            "g_L {g_l:.3e}: mean final NCC {:.4} guided vs {:.4} unguided, mAUC {:.2} vs {:.2}, {align_secs:.0} s for both runs",
            guided.mean_final_ncc, unguided.mean_final_ncc, guided.mauc, unguided.mauc
        ),
    );
    l.record(
        7,
        "end-to-end learned run",
        trained.steps >= 50_000 && guided.mauc > reg.required_mauc_above && guided.acceptable >= reg.required_acceptable,
        format!(
            "{} steps on 500 pairs ({train_secs:.0} s this run); 100 held-out pairs: Acceptable {:.1}% (needs >= {:.1}%), mAUC {:.2} (needs > {:.2}); unguided Acceptable {:.1}%, mAUC {:.2}",
            trained.steps,
            guided.acceptable,
            reg.required_acceptable,
            guided.mauc,
            reg.required_mauc_above,
            unguided.acceptable,
            unguided.mauc
        ),
    );
}

fn criterion_6(l: &mut Ledger) {
    let root = fresh_dir("iterative");
    let c = similarity_suite_config(&root, 100);
    cmd_gen_data(&c).unwrap();
    let r = cmd_ablate(&c, AblationAxis::Iterative).unwrap();
    let one = r.outcomes("n_iter_1");
    let two = r.outcomes("n_iter_2");
    let mut better = 0;
    for (a, b) in one.iter().zip(&two) {
        assert_eq!(a.pair_id, b.pair_id);
        if let (Some(x), Some(y)) = (a.pnorm, b.pnorm) {
            better += usize::from(y <= x);
        }
    }
    let frac = better as f64 / one.len() as f64;
    l.record(
        6,
        "iterative alignment direction",
        frac >= 0.8,
        format!(
            "n_iter=2 at least as close as n_iter=1 on {better}/{} oracle pairs ({:.0}%, needs >= 80%); mean p-norm {:.3e} vs {:.3e}",
            one.len(),
            100.0 * frac,
            r.condition("n_iter_2").unwrap().mean_pnorm.unwrap_or(f64::NAN),
            r.condition("n_iter_1").unwrap().mean_pnorm.unwrap_or(f64::NAN)
        ),
    );
}

fn criterion_8(l: &mut Ledger) {
    let w = LossWeights::default();
    let t = 100;
    let endpoints = w.delta_x(t, t) == 0.0 && w.delta_x(0, t) == 1.0 && w.delta_r(0, t) == 0.0 && w.delta_r(t, t) == 1e-3;
    let cfg = TrainConfig {
        steps: 40,
        batch_size: 1,
        steps_h: 10,
        steps_v: 10,
        beta_min: 0.05,
        beta_max: 0.3,
        net: NetConfig {
            enc_size: 16,
            field_size: 8,
            v_input_size: 16,
            ..NetConfig::tiny()
        },
        ..TrainConfig::default()
    };
    let pairs = generate_suite(2, 32, &PairSpec::default(), 3).unwrap();
    let log = train(&cfg, &pairs, None, "").unwrap().log;
    let gated = log[..10].iter().all(|r| r.score_v_grad_norm == 0.0);
    let open = log[10..].iter().all(|r| r.score_v_grad_norm > 0.0);
    l.record(
        8,
        "schedule endpoint checks",
        endpoints && gated && open,
        format!(
            "delta_x(T)=0, delta_x(0)=1, delta_R(0)=0, delta_R(T)=1e-3: {endpoints}; displacement score gradient zero in steps 0-9 of 40: {gated}, nonzero after: {open}"
        ),
    );
}

fn snapshot(dirs: &[&Path]) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack: Vec<PathBuf> = dirs.iter().map(|d| d.to_path_buf()).collect();
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn criterion_9(l: &mut Ledger) {
    let root = work_dir("determinism");
    let mut c = similarity_suite_config(&root, 6);
    c.train = TrainConfig {
        steps: 6,
        batch_size: 1,
        steps_h: 20,
        steps_v: 60,
        checkpoint_every: 3,
        net: NetConfig {
            enc_size: 16,
            field_size: 8,
            v_input_size: 16,
            ..NetConfig::tiny()
        },
        ..TrainConfig::default()
    };
    c.gradcheck.samples = 20;
    c.ablate.steps_h = vec![10, 20];
    c.ablate.steps_v = vec![30];
    let run_all = |c: &RunConfig| {
        let _ = fs::remove_dir_all(&root);
        cmd_gen_data(c).unwrap();
        cmd_train(c).unwrap();
        let mut learned = c.clone();
        learned.align.oracle = false;
        learned.align.g_l = None;
        learned.paths.results = root.join("learned");
        cmd_align(&learned, &AlignTarget::Dataset { pair: None }).unwrap();
        cmd_eval(&learned).unwrap();
        cmd_align(c, &AlignTarget::Dataset { pair: None }).unwrap();
        cmd_eval(c).unwrap();
        for axis in [AblationAxis::Guidance, AblationAxis::Iterative, AblationAxis::Steps] {
            cmd_ablate(c, axis).unwrap();
        }
        cmd_gradcheck(c).unwrap();
        snapshot(&[&root])
    };
    let a = run_all(&c);
    let b = run_all(&c);
    let differing: Vec<String> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.strip_prefix(&root).unwrap().display().to_string())
        .collect();
    l.record(
        9,
        "determinism",
        differing.is_empty(),
        format!(
            "gen-data, train, align (oracle and learned), eval, ablate and gradcheck re-run: {} files compared, {} differ {:?}",
            a.len(),
            differing.len(),
            differing.iter().take(5).collect::<Vec<_>>()
        ),
    );
}

#[test]
fn acceptance() {
    let mut l = Ledger { failures: Vec::new() };
    criterion_1(&mut l);
    criterion_2(&mut l);
    criterion_3(&mut l);
    criterion_4(&mut l);
    criterion_6(&mut l);
    criteria_5_and_7(&mut l);
    criterion_8(&mut l);
    criterion_9(&mut l);
    let strict = std::env::var("ADM_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if strict {
        assert!(l.failures.is_empty(), "criteria failed: {:?}", l.failures);
    }
}
