//! Run configuration file (TOML) with `[model]`, `[train]`, `[eval]` and `[data]` tables.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use stsn_core::train::{EvalConfig, TrainConfig};
use stsn_core::ModelConfig;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Use only the first `max_clips` clips of the dataset.
    pub max_clips: Option<usize>,
    /// Scalar width the frames and parameters are trained in.
    pub precision: Precision,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |e: stsn_core::Error| CliError::Usage(format!("config: {e}"));
        self.model.validate().map_err(usage)?;
        self.train.validate().map_err(usage)?;
        self.eval.validate().map_err(usage)?;
        if self.data.max_clips == Some(0) {
            return Err(CliError::Usage("config: data.max_clips must be positive".into()));
        }
        Ok(())
    }
}
