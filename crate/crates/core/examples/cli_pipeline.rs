//! Runs the command layer end to end in a temporary directory: generate a
//! suite, align it with oracle scores and evaluate the results.
//!
//! `cargo run --release --example cli_pipeline`

use adm::cli::{cmd_align, cmd_eval, cmd_gen_data, AlignTarget, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::env::temp_dir().join("adm_cli_pipeline");
    let cfg = RunConfig::default().with_overrides(&[
        "data.pairs=12".into(),
        "align.oracle=true".into(),
        "align.g_l=0".into(),
        format!("paths.dataset={}", root.join("data").display()),
        format!("paths.results={}", root.join("results").display()),
    ])?;
    let g = cmd_gen_data(&cfg)?;
    println!("generated {} pairs in {}", g.pairs, g.dir.display());
    let a = cmd_align(&cfg, &AlignTarget::Dataset { pair: None })?;
    println!("aligned {} pairs, {} failed", a.pairs, a.failed);
    let (evals, rep) = cmd_eval(&cfg)?;
    for e in evals.iter().take(3) {
        println!("{}  MEE {:?}  {}", e.pair_id, e.mee, e.category.label());
    }
    println!("Acceptable {:.1}%  mAUC {:.2}  (config {})", rep.acceptable, rep.mauc, &cfg.hash()[..12]);
    Ok(())
}
