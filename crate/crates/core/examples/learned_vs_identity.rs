//! Trains on a wide transform range and compares the learned aligner with
//! the identity transform on held-out pairs.
//!
//! `cargo run --release --example learned_vs_identity -- [train_steps] [test_pairs] [checkpoint_dir]`

use std::path::PathBuf;
use std::time::Instant;

use adm::evaluation::{control_grid, evaluate_pair, report};
use adm::geometry::Homography;
use adm::imaging::WarpStage;
use adm::sampler::{align, SamplerConfig, SamplerModel};
use adm::training::{generate_suite, train, PairSpec, TrainConfig, TransformRange};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(5000);
    let n_test: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(30);
    let dir = args.next().map(PathBuf::from);
    let spec = PairSpec {
        range: TransformRange {
            max_translation: 24.0,
            max_rotation_deg: 180.0,
            ..TransformRange::default()
        },
        ..PairSpec::default()
    };
    let train_pairs = generate_suite(500, 64, &spec, 100)?;
    let test = generate_suite(n_test, 64, &spec, 200)?;
    let cfg = TrainConfig {
        steps,
        checkpoint_every: 5000,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let ck = train(&cfg, &train_pairs, dir.as_deref(), "")?.checkpoint;
    println!("trained {steps} steps in {:.1} s", t0.elapsed().as_secs_f64());

    let model = SamplerModel::learned(&ck);
    let grid = control_grid(64, 64);
    let identity = [WarpStage::new(Homography::identity(), None)];
    let (mut learned, mut baseline) = (Vec::new(), Vec::new());
    for (i, p) in test.iter().enumerate() {
        let r = align(&p.source, &p.dest, &model, &SamplerConfig::default(), i as u64)?;
        let gt = [WarpStage::new(p.h_gt, None)];
        let pred = (!r.failed()).then_some(r.stages.as_slice());
        learned.push(evaluate_pair(&p.id, pred, &gt, &grid)?);
        baseline.push(evaluate_pair(&p.id, Some(&identity), &gt, &grid)?);
    }
    for (name, evals) in [("learned", &learned), ("identity", &baseline)] {
        let r = report(evals)?;
        println!("{name:<9} Acceptable {:5.1}%  Inaccurate {:5.1}%  mAUC {:6.2}", r.acceptable, r.inaccurate, r.mauc);
    }
    Ok(())
}
