//! Scores the identity transform and a slightly perturbed ground truth on a
//! synthetic suite with the control-point metrics.
//!
//! `cargo run --release --example evaluate_suite`

use adm::evaluation::{auc, control_grid, evaluate_pair, report};
use adm::geometry::Homography;
use adm::imaging::WarpStage;
use adm::training::{generate_suite, PairSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let pairs = generate_suite(50, 64, &PairSpec::default(), 5)?;
    let grid = control_grid(64, 64);
    let mut identity = Vec::new();
    let mut nudged = Vec::new();
    for p in &pairs {
        let gt = [WarpStage::new(p.h_gt, None)];
        let id = [WarpStage::new(Homography::identity(), None)];
        let off = [WarpStage::new(Homography::compose(&Homography::translation(3.0, -2.0), &p.h_gt)?, None)];
        identity.push(evaluate_pair(&p.id, Some(&id), &gt, &grid)?);
        nudged.push(evaluate_pair(&p.id, Some(&off), &gt, &grid)?);
    }
    for (name, evals) in [("identity", &identity), ("gt + (3, -2) px", &nudged)] {
        let r = report(evals)?;
        println!(
            "{name:<16} Failed {:5.1}%  Acceptable {:5.1}%  Inaccurate {:5.1}%  mAUC {:6.2}",
            r.failed, r.acceptable, r.inaccurate, r.mauc
        );
    }
    println!("AUC of MEEs [5, 10, 30, none]: {:.2}", auc(&[Some(5.0), Some(10.0), Some(30.0), None])?);
    Ok(())
}
