use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use structdyn::config::{ExperimentConfig, Method, ModelStructure, SystemName};
use structdyn::pipeline::RolloutMode;
use structdyn::systems::default_experiment_for;
use structdyn::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Everything one run needs, as stored in `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub experiment: ExperimentConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub prediction: PredictionSettings,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionSettings {
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Defaults to the prediction horizon.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: RolloutMode,
}

fn default_samples() -> usize {
    5
}

impl Default for PredictionSettings {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            steps: None,
            seed: 0,
            mode: RolloutMode::default(),
        }
    }
}

impl RunConfig {
    pub fn new(experiment: ExperimentConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            experiment,
            output_dir: None,
            prediction: PredictionSettings::default(),
        }
    }

    pub fn default_for(system: SystemName, method: Method, tableau: Option<&str>) -> Self {
        let mut experiment = default_experiment_for(system, method);
        if let Some(t) = tableau {
            experiment.model.structure = ModelStructure::Generic { tableau: t.to_string() };
        }
        Self::new(experiment)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == u64::from(SCHEMA_VERSION) => {}
            Some(v) => return Err(Error::InvalidArgument(format!("unsupported schema_version {v}"))),
            None => return Err(Error::InvalidArgument("missing schema_version".into())),
        }
        let cfg: RunConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_json()?)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        if self.prediction.samples == 0 {
            return Err(Error::InvalidArgument("prediction.samples must be at least 1".into()));
        }
        Ok(())
    }

    pub fn prediction_steps(&self) -> Result<usize> {
        match self.prediction.steps {
            Some(n) => Ok(n),
            None => self.experiment.predict_steps(),
        }
    }
}
