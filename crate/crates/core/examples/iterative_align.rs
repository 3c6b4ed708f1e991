//! Compares one alignment round against two on the same pairs. The second
//! round starts from the first round's warped source.
//!
//! `cargo run --release --example iterative_align -- [pairs]`

use adm::diffusion::{NoiseSchedule, Standardizer};
use adm::geometry::{p_norm_distance, Homography, PixelGrid};
use adm::sampler::{align_iterative, ChainSettings, SamplerConfig, SamplerModel};
use adm::training::{generate_suite, PairSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let n: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10);
    let pairs = generate_suite(n, 64, &PairSpec::default(), 21)?;
    let hs = pairs.iter().map(|p| p.h_gt.normalize()).collect::<Result<Vec<Homography>, _>>()?;
    let settings = ChainSettings {
        standardizer: Standardizer::fit(&hs)?,
        schedule_h: NoiseSchedule::linear(100, 1e-4, 0.02)?,
        schedule_v: NoiseSchedule::linear(500, 1e-4, 0.02)?,
        v_scale: 2.0,
        field_size: 16,
    };
    let points = PixelGrid::loss_points(64, 64);
    let mut better = 0;
    for (i, p) in pairs.iter().enumerate() {
        let model = SamplerModel::oracle(p.h_gt, p.v_gt.clone(), settings.clone());
        let mut dist = [0.0; 2];
        for (k, n_iter) in [1, 2].into_iter().enumerate() {
            let cfg = SamplerConfig {
                n_iter,
                ..SamplerConfig::default()
            };
            let r = align_iterative(&p.source, &p.dest, &model, &cfg, i as u64)?;
            dist[k] = p_norm_distance(&r.h, &p.h_gt, &points, 2.0)?;
        }
        better += usize::from(dist[1] <= dist[0]);
        println!("{}  one round {:.4}  two rounds {:.4}", p.id, dist[0], dist[1]);
    }
    println!("two rounds at least as close on {better}/{n} pairs");
    Ok(())
}
