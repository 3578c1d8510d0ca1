//! Run configuration (TOML with dotted sections; unknown keys are rejected) and
//! seeded random substreams.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::SyntheticConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::positions::SkipConfig;
use crate::rope::ExtensionSpec;
use crate::tensor::DType;
use crate::trainer::TrainPlan;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory holding packed `D1`, `D2`, `D3` datasets.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Generate the datasets instead of reading them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
    /// Checkpoint of the original model; freshly initialized when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher: Option<PathBuf>,
    /// D3 sequences held out for distillation-layer selection.
    #[serde(default = "default_probe")]
    pub probe_sequences: usize,
}

fn default_probe() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    #[serde(default = "default_precision")]
    pub precision: DType,
    /// The original model's architecture.
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extension: Option<ExtensionSpec>,
    #[serde(default)]
    pub train: TrainPlan,
    pub skip: SkipConfig,
    pub data: DataConfig,
}

fn default_precision() -> DType {
    DType::F32
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The student's architecture: the original config with the extension applied.
    pub fn student_config(&self) -> Result<ModelConfig> {
        match &self.extension {
            Some(ext) => ext.apply(&self.model),
            None => Ok(self.model.clone()),
        }
    }

    /// Field checks plus cross-field consistency.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let student = self.student_config()?;
        self.train.effective().validate(self.model.layers)?;
        self.skip.validate()?;
        if let Some(ext) = &self.extension {
            if self.skip.target_len != ext.target_window {
                return Err(Error::config(format!(
                    "skip.target_len {} must equal extension.target_window {}",
                    self.skip.target_len, ext.target_window
                )));
            }
        }
        if self.skip.input_len != self.train.input_len || self.skip.target_len != self.train.long_len {
            return Err(Error::config(format!(
                "skip lengths (T={}, T_l={}) must match train lengths (T={}, T_l={})",
                self.skip.input_len, self.skip.target_len, self.train.input_len, self.train.long_len
            )));
        }
        if self.train.long_len > student.context {
            return Err(Error::config(format!(
                "train.long_len {} exceeds the student window {}",
                self.train.long_len, student.context
            )));
        }
        if self.data.dir.is_some() == self.data.synthetic.is_some() {
            return Err(Error::config("exactly one of data.dir and data.synthetic must be set"));
        }
        if self.data.probe_sequences == 0 {
            return Err(Error::config("data.probe_sequences must be positive"));
        }
        Ok(())
    }
}

/// An independent generator for the named component, derived from the run seed.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}
