//! Experiment configuration files.

use std::path::Path;

use headroute_core::degrade::Stage;
use headroute_core::model::ModelConfig;
use headroute_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::json::read_json;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub count: usize,
    pub seed: u64,
    pub stage: Stage,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            count: 8,
            seed: 12345,
            stage: Stage::S2,
        }
    }
}

/// Everything a run needs. Missing fields take their defaults; unknown
/// fields are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: Self = match path {
            Some(p) => read_json(p)?,
            None => Self::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Usage(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.eval.count == 0 {
            return Err(Error::Usage("eval.count must be positive".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::json::parse_json;

    #[test]
    fn partial_files_fill_defaults() {
        let c: ExperimentConfig =
            parse_json(r#"{"version": 1, "train": {"seed": 9, "adam": {"lr": 0.01}}}"#, Path::new("c")).unwrap();
        assert_eq!(c.train.seed, 9);
        assert_eq!(c.train.adam.lr, 0.01);
        assert_eq!(c.train.adam.beta2, 0.999);
        assert_eq!(c.model, ModelConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_fields_and_versions_fail() {
        assert!(parse_json::<ExperimentConfig>(r#"{"modle": {}}"#, Path::new("c")).is_err());
        assert!(parse_json::<ExperimentConfig>(r#"{"train": {"adam": {"lr": 1, "x": 2}}}"#, Path::new("c")).is_err());
        let c: ExperimentConfig = parse_json(r#"{"version": 7}"#, Path::new("c")).unwrap();
        assert_eq!(c.validate().unwrap_err().exit_code(), 2);
    }
}
