use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, Standardizer};
use crate::error::{AdmError, Result};
use crate::imaging::io::{decode_named, encode_named, Tensor};

use super::params::{AdamW, AdamWConfig, ParamStore};
use super::{DisplacementScoreNet, HomographyScoreNet, NetConfig};

const FORMAT_VERSION: u32 = 1;
const HEADER_FILE: &str = "header.json";
const TENSOR_FILE: &str = "tensors.bin";

/// Everything besides tensors needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub net: NetConfig,
    pub standardizer: Standardizer,
    pub schedule_h: NoiseSchedule,
    pub schedule_v: NoiseSchedule,
    /// Pixels per unit of the standardized field state.
    pub v_scale: f64,
    pub step: u64,
    pub lr: f64,
    pub seed: u64,
    pub config_hash: String,
    pub adam: AdamWConfig,
    /// Free-form training configuration, stored for provenance.
    #[serde(default)]
    pub training: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub hnet: HomographyScoreNet,
    pub vnet: DisplacementScoreNet,
    pub opt_h: Option<AdamW>,
    pub opt_v: Option<AdamW>,
}

fn moments_named(prefix: &str, store: &ParamStore, opt: &AdamW) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    for (k, t) in store.tensors().iter().enumerate() {
        out.push((format!("{prefix}.m.{}", t.name), Tensor::from_f64(t.dims.clone(), &opt.m[k])?));
        out.push((format!("{prefix}.v.{}", t.name), Tensor::from_f64(t.dims.clone(), &opt.v[k])?));
    }
    Ok(out)
}

fn load_moments(
    prefix: &str,
    store: &ParamStore,
    config: &AdamWConfig,
    step: u64,
    named: &[(String, Tensor)],
    path: &Path,
) -> Result<Option<AdamW>> {
    let first = format!("{prefix}.m.");
    if !named.iter().any(|(n, _)| n.starts_with(&first)) {
        return Ok(None);
    }
    let mut opt = AdamW::new(config.clone(), store);
    opt.step = step;
    for (k, t) in store.tensors().iter().enumerate() {
        for (kind, dst) in [("m", &mut opt.m[k]), ("v", &mut opt.v[k])] {
            let key = format!("{prefix}.{kind}.{}", t.name);
            let found = named.iter().find(|(n, _)| *n == key).ok_or_else(|| AdmError::Format {
                path: path.display().to_string(),
                reason: format!("missing tensor {key}"),
            })?;
            if found.1.dims != t.dims {
                return Err(AdmError::shape(format!("{key} {:?}", t.dims), format!("{:?}", found.1.dims)));
            }
            *dst = found.1.to_f64();
        }
    }
    Ok(Some(opt))
}

impl Checkpoint {
    /// Writes `header.json` and `tensors.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| AdmError::io(dir, e))?;
        let mut named = self.hnet.params.to_named("hnet")?;
        named.extend(self.vnet.params.to_named("vnet")?);
        if let Some(o) = &self.opt_h {
            named.extend(moments_named("opt_h", &self.hnet.params, o)?);
        }
        if let Some(o) = &self.opt_v {
            named.extend(moments_named("opt_v", &self.vnet.params, o)?);
        }
        let tensor_path = dir.join(TENSOR_FILE);
        fs::write(&tensor_path, encode_named(&named)).map_err(|e| AdmError::io(&tensor_path, e))?;
        let header_path = dir.join(HEADER_FILE);
        let json = serde_json::to_string_pretty(&self.header)?;
        fs::write(&header_path, json).map_err(|e| AdmError::io(&header_path, e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let header_path = dir.join(HEADER_FILE);
        if !header_path.exists() {
            return Err(AdmError::MissingCheckpoint(PathBuf::from(dir)));
        }
        let text = fs::read_to_string(&header_path).map_err(|e| AdmError::io(&header_path, e))?;
        let header: CheckpointHeader = serde_json::from_str(&text).map_err(|e| AdmError::Format {
            path: header_path.display().to_string(),
            reason: e.to_string(),
        })?;
        if header.format_version != FORMAT_VERSION {
            return Err(AdmError::Format {
                path: header_path.display().to_string(),
                reason: format!("unsupported format version {}", header.format_version),
            });
        }
        header.net.validate()?;
        let tensor_path = dir.join(TENSOR_FILE);
        let bytes = fs::read(&tensor_path).map_err(|e| AdmError::io(&tensor_path, e))?;
        let named = decode_named(&bytes, &tensor_path)?;
        let mut hnet = HomographyScoreNet::new(header.net.clone(), 0);
        let mut vnet = DisplacementScoreNet::new(header.net.clone(), 0);
        hnet.params.load_named("hnet", &named)?;
        vnet.params.load_named("vnet", &named)?;
        let opt_h = load_moments("opt_h", &hnet.params, &header.adam, header.step, &named, &tensor_path)?;
        let opt_v = load_moments("opt_v", &vnet.params, &header.adam, header.step, &named, &tensor_path)?;
        Ok(Self {
            header,
            hnet,
            vnet,
            opt_h,
            opt_v,
        })
    }

    /// A fresh, untrained checkpoint.
    pub fn fresh(
        net: NetConfig,
        standardizer: Standardizer,
        schedule_h: NoiseSchedule,
        schedule_v: NoiseSchedule,
        v_scale: f64,
        seed: u64,
    ) -> Self {
        let hnet = HomographyScoreNet::new(net.clone(), seed);
        let vnet = DisplacementScoreNet::new(net.clone(), seed.wrapping_add(1));
        let adam = AdamWConfig::default();
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                net,
                standardizer,
                schedule_h,
                schedule_v,
                v_scale,
                step: 0,
                lr: adam.lr,
                seed,
                config_hash: String::new(),
                adam,
                training: serde_json::Value::Null,
            },
            hnet,
            vnet,
            opt_h: None,
            opt_v: None,
        }
    }
}
