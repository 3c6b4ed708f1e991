//! Noises a 9-vector forward and walks the reverse chain back with exact
//! scores, printing the distance to the clean vector along the way.
//!
//! `cargo run --release --example diffusion_chain`

use adm::diffusion::{oracle_score, perturb_forward, reverse_step, NoiseSchedule};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sched = NoiseSchedule::linear(100, 1e-4, 0.2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut noise = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let x0 = vec![0.5, -1.0, 0.2, 0.0, 1.5, -0.3, 0.8, -0.6, 0.1];
    let xt = perturb_forward(&x0, sched.steps(), &sched, &noise(9))?;
    println!("alpha_bar(T) = {:.3e}", sched.alpha_bar(sched.steps()));
    let dist = |x: &[f64]| x.iter().zip(&x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let mut x = xt;
    for t in (1..=sched.steps()).rev() {
        if t % 20 == 0 || t == 1 {
            println!("t = {t:3}  |x - x0| = {:.4}", dist(&x));
        }
        let s = oracle_score(&x, &x0, t, &sched)?;
        x = reverse_step(&x, &s, t, &sched, &noise(9))?;
    }
    println!("final  |x - x0| = {:.2e}", dist(&x));
    Ok(())
}
