use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AdmError, Result};
use crate::geometry::Homography;
use crate::imaging::io::{read_field, write_field, write_pnm};
use crate::imaging::WarpStage;
use crate::training::{ext, read_json, write_json};

use super::{AlignmentResult, TraceRecord};

/// One warp stage as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub h: [f64; 9],
    /// Coarse field tensor, relative to the manifest directory.
    pub field: Option<String>,
}

/// JSON manifest written next to the artifacts of one alignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultManifest {
    pub pair_id: String,
    pub seed: u64,
    pub config_hash: String,
    pub failure: Option<String>,
    pub restarts: usize,
    pub h: [f64; 9],
    pub field: String,
    pub warped: String,
    pub mask: String,
    pub trace: String,
    pub stages: Vec<StageEntry>,
    pub final_ncc: Option<f64>,
}

impl ResultManifest {
    pub fn read(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Manifest of a pair that produced no artifacts.
    pub fn failure(pair_id: &str, seed: u64, config_hash: &str, reason: String) -> Self {
        Self {
            pair_id: pair_id.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            failure: Some(reason),
            restarts: 0,
            h: Homography::identity().h,
            field: String::new(),
            warped: String::new(),
            mask: String::new(),
            trace: String::new(),
            stages: Vec::new(),
            final_ncc: None,
        }
    }

    /// Writes `<pair_id>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| AdmError::io(dir, e))?;
        write_json(&dir.join(format!("{}.json", self.pair_id)), self)
    }

    /// The warp stages, with fields loaded relative to `dir`.
    pub fn load_stages(&self, dir: &Path) -> Result<Vec<WarpStage>> {
        self.stages
            .iter()
            .map(|s| {
                let field = s.field.as_ref().map(|f| read_field(&dir.join(f))).transpose()?;
                Ok(WarpStage::new(Homography::new(s.h), field))
            })
            .collect()
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `t,h0..h8,ncc,guidance_norm,pnorm_to_gt`, one row per record.
pub fn write_trace_csv(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let mut s = String::from("t,h0,h1,h2,h3,h4,h5,h6,h7,h8,ncc,guidance_norm,pnorm_to_gt\n");
    for r in trace {
        let _ = write!(s, "{}", r.t);
        for v in r.h.h {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{},{},{}", r.ncc, r.guidance_norm, opt(r.pnorm_to_gt));
    }
    fs::write(path, s).map_err(|e| AdmError::io(path, e))
}

/// Writes the field, warped image, mask, trace and manifest of one
/// alignment into `dir` with names prefixed by `pair_id`.
pub fn write_result(
    dir: &Path,
    pair_id: &str,
    result: &AlignmentResult,
    final_ncc: Option<f64>,
    config_hash: &str,
) -> Result<ResultManifest> {
    fs::create_dir_all(dir).map_err(|e| AdmError::io(dir, e))?;
    let field = format!("{pair_id}_field.admt");
    let warped = format!("{pair_id}_warped.{}", ext(&result.warped));
    let mask = format!("{pair_id}_mask.pgm");
    let trace = format!("{pair_id}_trace.csv");
    write_field(&dir.join(&field), &result.field)?;
    write_pnm(&dir.join(&warped), &result.warped)?;
    write_pnm(&dir.join(&mask), &result.mask.to_image())?;
    write_trace_csv(&dir.join(&trace), &result.trace)?;
    let mut stages = Vec::with_capacity(result.stages.len());
    for (k, st) in result.stages.iter().enumerate() {
        let f = match &st.field {
            Some(fld) => {
                let name = format!("{pair_id}_stage{k}.admt");
                write_field(&dir.join(&name), fld)?;
                Some(name)
            }
            None => None,
        };
        stages.push(StageEntry { h: st.h.h, field: f });
    }
    let manifest = ResultManifest {
        pair_id: pair_id.to_string(),
        seed: result.seed,
        config_hash: config_hash.to_string(),
        failure: result.failure.clone(),
        restarts: result.restarts,
        h: result.h.h,
        field,
        warped,
        mask,
        trace,
        stages,
        final_ncc,
    };
    manifest.write(dir)?;
    Ok(manifest)
}
