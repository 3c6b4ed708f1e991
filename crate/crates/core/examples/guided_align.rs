//! Trains a small model, calibrates the appearance-guidance strength and
//! aligns held-out pairs with and without guidance.
//!
//! `cargo run --release --example guided_align -- [train_steps] [test_pairs]`

use adm::sampler::{align, calibrate_guidance, ChainSettings, GuidanceConfig, SamplerConfig, SamplerModel};
use adm::training::{generate_suite, train, PairSpec, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(2000);
    let n_test: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(10);
    let spec = PairSpec::default();
    let train_pairs = generate_suite(64, 64, &spec, 1)?;
    let test = generate_suite(n_test, 64, &spec, 2)?;
    let cfg = TrainConfig {
        steps,
        ..TrainConfig::default()
    };
    let ck = train(&cfg, &train_pairs, None, "")?.checkpoint;
    let settings = ChainSettings::from_checkpoint(&ck);
    let g_l = calibrate_guidance(Some(&ck), &settings, &train_pairs[..16], 1e-3, 0.1, 0)?;
    println!("calibrated g_L = {g_l:.4e}");

    let model = SamplerModel::learned(&ck);
    let mut mean = [0.0; 2];
    for (i, p) in test.iter().enumerate() {
        for (k, g) in [0.0, g_l].into_iter().enumerate() {
            let sc = SamplerConfig {
                guidance: GuidanceConfig {
                    g_l: g,
                    ..GuidanceConfig::default()
                },
                ..SamplerConfig::default()
            };
            let r = align(&p.source, &p.dest, &model, &sc, i as u64)?;
            mean[k] += r.final_ncc(&p.dest).unwrap_or(0.0) / n_test as f64;
        }
    }
    println!("mean final NCC  unguided {:.4}  guided {:.4}", mean[0], mean[1]);
    Ok(())
}
