//! Command implementations behind the `adm` binary: configuration,
//! persistence and experiment orchestration.

mod ablate;
mod commands;
mod config;

pub use ablate::{cmd_ablate, AblationAxis, AblationReport, ConditionSummary, PairOutcome, SCHEDULING_ROWS};
pub use commands::{
    cmd_align, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_train, AlignSummary, AlignTarget, GenDataSummary,
    GuidanceCalibration, ResultsIndex, TrainSummary,
};
pub use config::{AblateConfig, AlignConfig, DataConfig, PathsConfig, RunConfig};

use sha2::{Digest, Sha256};

use crate::error::{AdmError, Result};
use crate::seed::derive_seed;

/// Process exit code for an error: 1 for usage and configuration problems,
/// 3 for failed checks, 2 for everything else.
pub fn exit_code(e: &AdmError) -> i32 {
    match e {
        AdmError::InvalidConfig(_) | AdmError::InvalidParameter(_) => 1,
        AdmError::GradCheckFailure { .. } => 3,
        _ => 2,
    }
}

/// Seed of one pair, derived from the base seed and the pair id.
pub fn pair_seed(base: u64, pair_id: &str) -> u64 {
    let d = Sha256::digest(pair_id.as_bytes());
    let mut b = [0u8; 8];
    b.copy_from_slice(&d[..8]);
    derive_seed(base, u64::from_le_bytes(b))
}

/// Runs `f` on a pool with `jobs` threads (all cores when 0).
pub(crate) fn with_jobs<T: Send>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| AdmError::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
