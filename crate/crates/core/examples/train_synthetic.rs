//! Trains both score networks on a small synthetic set and prints the loss curve.
//!
//! `cargo run --release --example train_synthetic -- [steps]`

use adm::training::{generate_suite, train, PairSpec, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let steps: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(200);
    let pairs = generate_suite(32, 64, &PairSpec::default(), 1)?;
    let cfg = TrainConfig {
        steps,
        ..Default::default()
    };
    let start = std::time::Instant::now();
    let out = train(&cfg, &pairs, None, "")?;
    let elapsed = start.elapsed().as_secs_f64();
    for r in out.log.iter().step_by((steps as usize / 10).max(1)) {
        println!(
            "step {:6}  score_h {:8.4}  score_v {:8.4}  pixel {:9.3}  reg {:8.4}",
            r.step, r.score_h, r.score_v, r.pixel, r.reg
        );
    }
    println!("{steps} steps in {elapsed:.1} s ({:.1} ms/step)", 1e3 * elapsed / steps as f64);
    Ok(())
}
