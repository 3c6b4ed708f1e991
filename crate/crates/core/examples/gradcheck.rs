//! Compares every layer's analytic gradients with central finite
//! differences at double precision.
//!
//! `cargo run --release --example gradcheck -- [samples]`

use adm::scorenets::{run_gradcheck, GradCheckOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let samples: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(200);
    let opts = GradCheckOptions {
        samples,
        ..GradCheckOptions::default()
    };
    let report = run_gradcheck(&opts);
    for r in &report.rows {
        let status = if r.passed { "ok" } else { "FAIL" };
        println!("{:<24} {:>5} checked  worst {:.3e}  {status}", r.layer, r.checked, r.worst_relative_error);
    }
    println!("{}", if report.passed() { "all layers pass" } else { "gradient check failed" });
    Ok(())
}
