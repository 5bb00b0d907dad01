//! End-to-end experiment steps: data, training, selection and prediction.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method, ModelStructure, SystemName};
use crate::error::{Error, Result};
use crate::evaluation::RolloutEnsemble;
use crate::models::DynamicsModel;
use crate::rng::stream;
use crate::systems::{default_experiment_for, generate_dataset, Dataset};
use crate::trainer::{select_model, train, Checkpoint, TrainOutcome};
use crate::trajectory::Trajectory;

/// How prediction rollouts are integrated; output is always on the data grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RolloutMode {
    /// Fixed steps of the given size, or the training step size.
    Fixed { step_size: Option<f64> },
    /// Step-doubling control with the model's tableau.
    Adaptive { rtol: f64, atol: f64 },
}

impl Default for RolloutMode {
    fn default() -> Self {
        RolloutMode::Fixed { step_size: None }
    }
}

pub fn initial_model(config: &ExperimentConfig) -> Result<DynamicsModel> {
    DynamicsModel::from_experiment(config, &mut stream(config.train.seed, "model-init"))
}

pub fn dataset(config: &ExperimentConfig) -> Result<Dataset> {
    generate_dataset(config, config.train.seed)
}

/// Generate data, train and select.
pub fn run_training(
    config: &ExperimentConfig,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<(Dataset, TrainOutcome)> {
    config.validate()?;
    let data = dataset(config)?;
    let outcome = train(initial_model(config)?, &data.train_noisy, &config.train, on_checkpoint)?;
    Ok((data, outcome))
}

/// The selected model, or the final one when nothing was checkpointed.
pub fn selected_model(config: &ExperimentConfig, outcome: &TrainOutcome) -> Result<DynamicsModel> {
    if outcome.checkpoints.is_empty() {
        return Ok(outcome.model.clone());
    }
    Ok(select_model(&outcome.checkpoints, &config.train)?.model.clone())
}

/// Ensemble prediction settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    /// Data step of the output grid.
    pub dt: f64,
    pub n_steps: usize,
    pub samples: usize,
    pub features: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: RolloutMode,
}

impl Prediction {
    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| k as f64 * self.dt).collect()
    }

    /// One rollout per draw, handed to `on_rollout` as soon as it finishes.
    pub fn run_with(
        &self,
        model: &DynamicsModel,
        x0: &DVector<f64>,
        on_rollout: &mut dyn FnMut(usize, &Trajectory) -> Result<()>,
    ) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::InvalidArgument("at least one sample is required".into()));
        }
        let sub = self.substeps()?;
        let mut rng = stream(self.seed, "prediction");
        let times = self.times();
        for i in 0..self.samples {
            let draw = model.sample_model(self.features, &mut rng)?;
            let traj = match self.mode {
                RolloutMode::Fixed { step_size } => {
                    let h = step_size.unwrap_or(self.dt);
                    let fine = draw.with_step_size(h)?.rollout(x0, self.n_steps * sub)?;
                    let rows: Vec<DVector<f64>> = (0..=self.n_steps).map(|k| fine.state(k * sub)).collect();
                    Trajectory::from_rows(times.clone(), &rows)?
                }
                RolloutMode::Adaptive { rtol, atol } => draw.rollout_adaptive(x0, &times, rtol, atol)?,
            };
            on_rollout(i, &traj)?;
        }
        Ok(())
    }

    pub fn run(&self, model: &DynamicsModel, x0: &DVector<f64>) -> Result<RolloutEnsemble> {
        let mut rollouts = Vec::with_capacity(self.samples);
        self.run_with(model, x0, &mut |_, t| {
            rollouts.push(t.clone());
            Ok(())
        })?;
        RolloutEnsemble::new(rollouts)
    }

    fn substeps(&self) -> Result<usize> {
        match self.mode {
            RolloutMode::Fixed { step_size: Some(h) } => {
                let ratio = self.dt / h;
                let sub = ratio.round() as usize;
                if !(h > 0.0) || sub == 0 || (ratio - sub as f64).abs() > 1e-9 {
                    return Err(Error::InvalidArgument(format!(
                        "step size {h} does not divide the data step {}",
                        self.dt
                    )));
                }
                Ok(sub)
            }
            _ => Ok(1),
        }
    }
}

/// Pendulum baseline configuration trained with the Heun tableau.
pub fn heun_experiment() -> ExperimentConfig {
    let mut cfg = default_experiment_for(SystemName::Pendulum, Method::Euler);
    cfg.model.structure = ModelStructure::Generic {
        tableau: "heun".into(),
    };
    cfg
}
