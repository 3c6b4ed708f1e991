use std::path::PathBuf;
use std::process::ExitCode;

use clap::{error::ErrorKind, Args, Parser, Subcommand};

use adm::cli::{
    cmd_ablate, cmd_align, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_train, exit_code, AblationAxis, AlignTarget,
    RunConfig,
};
use adm::error::Result;

/// Joint homography and displacement-field alignment with coupled diffusion chains.
#[derive(Parser)]
#[command(name = "adm", version)]
struct Cli {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.steps=5000`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Base seed of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct AlignFlags {
    /// Use exact scores from the ground truth instead of a checkpoint.
    #[arg(long)]
    oracle: bool,
    /// Guidance strength; 0 disables guidance.
    #[arg(long = "g-l", alias = "g_L", alias = "g_l")]
    g_l: Option<f64>,
    #[arg(long)]
    n_iter: Option<usize>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pair suite.
    GenData {
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train both score networks on a dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Align a dataset, one of its pairs, or two image files.
    Align {
        #[command(flatten)]
        flags: AlignFlags,
        #[arg(long, conflicts_with = "source")]
        pair: Option<String>,
        #[arg(long, requires = "dest")]
        source: Option<PathBuf>,
        #[arg(long, requires = "source")]
        dest: Option<PathBuf>,
        /// Pair sidecar JSON holding the true transform.
        #[arg(long, requires = "source")]
        gt: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score alignment results against the dataset ground truth.
    Eval {
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run the suite under each condition of one ablation axis.
    Ablate {
        #[arg(long)]
        axis: String,
        #[command(flatten)]
        flags: AlignFlags,
    },
    /// Finite-difference check of every layer's gradients.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt_layer: Option<String>,
    },
}

fn apply_align_flags(cfg: &mut RunConfig, f: &AlignFlags) {
    cfg.align.oracle |= f.oracle;
    if f.g_l.is_some() {
        cfg.align.g_l = f.g_l;
    }
    if let Some(n) = f.n_iter {
        cfg.align.n_iter = n;
    }
    if f.checkpoint.is_some() {
        cfg.paths.checkpoint = f.checkpoint.clone();
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .with_overrides(&cli.sets)?;
    set(&mut cfg.jobs, cli.jobs);
    match cli.command {
        Command::GenData { pairs, out } => {
            set(&mut cfg.data.pairs, pairs);
            set(&mut cfg.paths.dataset, out);
            set(&mut cfg.data.seed, cli.seed);
            let s = cmd_gen_data(&cfg)?;
            println!("wrote {} pairs to {}", s.pairs, s.dir.display());
        }
        Command::Train { dataset, run } => {
            set(&mut cfg.paths.dataset, dataset);
            set(&mut cfg.paths.run, run);
            set(&mut cfg.train.seed, cli.seed);
            let s = cmd_train(&cfg)?;
            if let Some(row) = s.last {
                println!("step {} total loss {:.6}", row.step, row.total);
            }
            println!("checkpoint at step {} in {}", s.steps, s.checkpoint_dir.display());
            if let Some(g) = s.guidance {
                println!("calibrated g_L = {:.6e} on {} pairs", g.g_l, g.pairs);
            }
        }
        Command::Align {
            flags,
            pair,
            source,
            dest,
            gt,
            dataset,
            out,
        } => {
            apply_align_flags(&mut cfg, &flags);
            set(&mut cfg.paths.dataset, dataset);
            set(&mut cfg.paths.results, out);
            set(&mut cfg.align.seed, cli.seed);
            let target = match (source, dest) {
                (Some(source), Some(dest)) => AlignTarget::Images { source, dest, gt },
                _ => AlignTarget::Dataset { pair },
            };
            let s = cmd_align(&cfg, &target)?;
            println!(
                "aligned {} pairs ({} failed) with g_L = {:.6e}; results in {}",
                s.pairs,
                s.failed,
                s.g_l,
                s.dir.display()
            );
        }
        Command::Eval { results, dataset } => {
            set(&mut cfg.paths.results, results);
            set(&mut cfg.paths.dataset, dataset);
            let (_, r) = cmd_eval(&cfg)?;
            println!(
                "pairs {}  Failed {:.2}%  Acceptable {:.2}%  Inaccurate {:.2}%  mAUC {:.2}",
                r.pairs, r.failed, r.acceptable, r.inaccurate, r.mauc
            );
        }
        Command::Ablate { axis, flags } => {
            let axis: AblationAxis = axis.parse()?;
            apply_align_flags(&mut cfg, &flags);
            set(&mut cfg.align.seed, cli.seed);
            let r = cmd_ablate(&cfg, axis)?;
            println!("condition\tAcceptable\tmAUC\tmean_final_ncc\tdelta_mAUC");
            for c in &r.conditions {
                println!(
                    "{}\t{:.2}\t{:.2}\t{:.4}\t{:+.2}",
                    c.condition, c.acceptable, c.mauc, c.mean_final_ncc, c.delta_mauc
                );
            }
        }
        Command::Gradcheck { corrupt_layer } => {
            set(&mut cfg.gradcheck.seed, cli.seed);
            cfg.gradcheck.corrupt = corrupt_layer;
            let report = cmd_gradcheck(&cfg)?;
            for r in &report.rows {
                println!("{:<24} {:>5} checked  worst {:.3e}", r.layer, r.checked, r.worst_relative_error);
            }
            println!("all layers pass");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
