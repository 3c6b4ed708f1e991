use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::diffusion::NoiseSchedule;
use crate::error::{AdmError, Result};
use crate::imaging::Degradation;
use crate::sampler::{GuidanceConfig, SamplerConfig};
use crate::scorenets::GradCheckOptions;
use crate::training::{PairSpec, TrainConfig};

/// Synthetic dataset generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub pairs: usize,
    pub seed: u64,
    pub spec: PairSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            pairs: 100,
            seed: 0,
            spec: PairSpec::default(),
        }
    }
}

/// Inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub seed: u64,
    /// Use exact scores towards the ground truth instead of a checkpoint.
    pub oracle: bool,
    /// Guidance strength; calibrated when absent.
    pub g_l: Option<f64>,
    pub fd_step: f64,
    /// Target ratio of guidance norm to raw score norm for calibration.
    pub calibration_ratio: f64,
    pub calibration_pairs: usize,
    pub n_iter: usize,
    pub interleave: Option<usize>,
    pub max_restarts: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            oracle: false,
            g_l: None,
            fd_step: 1e-3,
            calibration_ratio: 0.1,
            calibration_pairs: 32,
            n_iter: 1,
            interleave: None,
            max_restarts: 3,
        }
    }
}

impl AlignConfig {
    pub fn sampler(&self, g_l: f64) -> SamplerConfig {
        SamplerConfig {
            guidance: GuidanceConfig {
                g_l,
                fd_step: self.fd_step,
            },
            interleave: self.interleave,
            max_restarts: self.max_restarts,
            n_iter: self.n_iter,
        }
    }
}

/// Grids swept by the ablation axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    /// Training pairs for the scheduling axis; `paths.dataset` when absent.
    pub train_dataset: Option<PathBuf>,
    pub steps_h: Vec<usize>,
    pub steps_v: Vec<usize>,
    pub degradations: Vec<Degradation>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        let noise = |s: f64| Degradation::GaussNoise { sigma: s / 255.0 };
        Self {
            train_dataset: None,
            steps_h: vec![25, 50, 100, 200],
            steps_v: vec![125, 250, 500, 1000],
            degradations: vec![
                Degradation::None,
                noise(5.0),
                noise(10.0),
                noise(25.0),
                Degradation::GaussBlur { sigma: 1.0 },
                Degradation::GaussBlur { sigma: 2.5 },
                Degradation::GaussBlur { sigma: 5.0 },
                Degradation::LowIllum { alpha: 0.75 },
                Degradation::LowIllum { alpha: 0.5 },
                Degradation::LowIllum { alpha: 0.25 },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    /// Training output: log and checkpoint.
    pub run: PathBuf,
    /// Checkpoint to align with; `<run>/checkpoint` when absent.
    pub checkpoint: Option<PathBuf>,
    pub results: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            run: "run".into(),
            checkpoint: None,
            results: "results".into(),
        }
    }
}

impl PathsConfig {
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.run.join("checkpoint"))
    }
}

/// Every setting of a run, loaded from one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub image_size: usize,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub align: AlignConfig,
    pub ablate: AblateConfig,
    pub gradcheck: GradCheckOptions,
    pub paths: PathsConfig,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            align: AlignConfig::default(),
            ablate: AblateConfig::default(),
            gradcheck: GradCheckOptions::default(),
            paths: PathsConfig::default(),
            jobs: 0,
        }
    }
}

fn invalid(msg: impl Into<String>) -> AdmError {
    AdmError::InvalidConfig(msg.into())
}

impl RunConfig {
    /// Reads a config file; missing keys take their defaults, unknown keys
    /// are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| AdmError::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 {
            return Err(invalid(format!("image_size must be at least 8, got {}", self.image_size)));
        }
        self.data.spec.validate().map_err(|e| invalid(e.to_string()))?;
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        self.align.sampler(self.align.g_l.unwrap_or(0.0)).validate()?;
        if !(self.align.calibration_ratio > 0.0) {
            return Err(invalid("calibration_ratio must be positive"));
        }
        if self.ablate.steps_h.contains(&0) || self.ablate.steps_v.contains(&0) {
            return Err(invalid("ablation step counts must be positive"));
        }
        for d in &self.ablate.degradations {
            d.validate().map_err(|e| invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// Applies `key.path=value` overrides. Values parse as JSON, falling back
    /// to a plain string.
    pub fn with_overrides(&self, sets: &[String]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for s in sets {
            let (key, raw) = s.split_once('=').ok_or_else(|| invalid(format!("override '{s}' is not key=value")))?;
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut node = &mut root;
            let parts: Vec<&str> = key.split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let obj = node
                    .as_object_mut()
                    .ok_or_else(|| invalid(format!("'{key}': '{part}' is not inside an object")))?;
                if !obj.contains_key(*part) {
                    return Err(invalid(format!("unknown config key '{key}'")));
                }
                if i + 1 == parts.len() {
                    obj.insert(part.to_string(), value.clone());
                    break;
                }
                node = obj.get_mut(*part).expect("checked");
            }
        }
        serde_json::from_value(root).map_err(|e| invalid(e.to_string()))
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn write_effective(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| AdmError::io(dir, e))?;
        let path = dir.join("config.json");
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(&path, text).map_err(|e| AdmError::io(&path, e))
    }

    pub fn schedules(&self) -> Result<(NoiseSchedule, NoiseSchedule)> {
        self.train.schedules()
    }
}
