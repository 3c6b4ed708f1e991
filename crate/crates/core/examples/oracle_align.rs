//! Aligns a suite with exact scores towards the ground truth. This checks
//! the coupled reverse chains end to end without any training.
//!
//! `cargo run --release --example oracle_align -- [pairs]`

use adm::diffusion::{NoiseSchedule, Standardizer};
use adm::evaluation::{control_grid, evaluate_pair, report};
use adm::geometry::{mean_corner_error, Homography};
use adm::imaging::WarpStage;
use adm::sampler::{align, ChainSettings, SamplerConfig, SamplerModel};
use adm::training::{generate_suite, PairSpec, TransformRange};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(20);
    let spec = PairSpec {
        range: TransformRange {
            max_perspective: 0.0,
            ..TransformRange::default()
        },
        ..PairSpec::default()
    };
    let pairs = generate_suite(n, 64, &spec, 11)?;
    let hs = pairs.iter().map(|p| p.h_gt.normalize()).collect::<Result<Vec<Homography>, _>>()?;
    let settings = ChainSettings {
        standardizer: Standardizer::fit(&hs)?,
        schedule_h: NoiseSchedule::linear(100, 1e-4, 0.02)?,
        schedule_v: NoiseSchedule::linear(500, 1e-4, 0.02)?,
        v_scale: 2.0,
        field_size: 16,
    };
    let grid = control_grid(64, 64);
    let mut evals = Vec::new();
    let mut errors = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        let model = SamplerModel::oracle(p.h_gt, p.v_gt.clone(), settings.clone());
        let r = align(&p.source, &p.dest, &model, &SamplerConfig::default(), i as u64)?;
        errors.push(mean_corner_error(&r.h, &p.h_gt, 64, 64)?);
        evals.push(evaluate_pair(&p.id, Some(&r.stages), &[WarpStage::new(p.h_gt, None)], &grid)?);
    }
    errors.sort_by(f64::total_cmp);
    println!("median corner error {:.4} px", errors[errors.len() / 2]);
    let rep = report(&evals)?;
    println!("Acceptable {:.1}%  mAUC {:.2}", rep.acceptable, rep.mauc);
    Ok(())
}
