//! Sweeps an ablation axis in oracle mode and prints the per-condition
//! summary.
//!
//! `cargo run --release --example ablate_guidance -- [guidance|iterative|steps|degradation]`

use adm::cli::{cmd_ablate, cmd_gen_data, AblationAxis, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let axis: AblationAxis = std::env::args().nth(1).unwrap_or_else(|| "guidance".into()).parse()?;
    let root = std::env::temp_dir().join("adm_ablate_example");
    let cfg = RunConfig::default().with_overrides(&[
        "data.pairs=8".into(),
        "align.oracle=true".into(),
        "align.g_l=0.05".into(),
        "ablate.steps_h=[25,100]".into(),
        "ablate.steps_v=[125,500]".into(),
        format!("paths.dataset={}", root.join("data").display()),
        format!("paths.results={}", root.join("results").display()),
    ])?;
    cmd_gen_data(&cfg)?;
    let r = cmd_ablate(&cfg, axis)?;
    println!("{:<14} {:>10} {:>8} {:>10} {:>10}", "condition", "Acceptable", "mAUC", "final NCC", "dmAUC");
    for c in &r.conditions {
        println!(
            "{:<14} {:>9.1}% {:>8.2} {:>10.4} {:>+10.2}",
            c.condition, c.acceptable, c.mauc, c.mean_final_ncc, c.delta_mauc
        );
    }
    Ok(())
}
