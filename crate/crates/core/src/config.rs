//! Experiment, model and training configuration records.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemName {
    Pendulum,
    TwoBody,
    NonSeparable,
    RigidBody,
}

impl SystemName {
    pub const ALL: [SystemName; 4] = [
        SystemName::Pendulum,
        SystemName::TwoBody,
        SystemName::NonSeparable,
        SystemName::RigidBody,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SystemName::Pendulum => "pendulum",
            SystemName::TwoBody => "two_body",
            SystemName::NonSeparable => "non_separable",
            SystemName::RigidBody => "rigid_body",
        }
    }
}

impl fmt::Display for SystemName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::UnknownSystem(s.to_string()))
    }
}

/// Structured model of the system versus the unstructured baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sgpd,
    Euler,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgpd" => Ok(Method::Sgpd),
            "euler" => Ok(Method::Euler),
            other => Err(Error::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelStructure {
    /// `V'(q)` and `T'(p)` components under symplectic Euler.
    Separable,
    /// Scalar `H(p, q)` under implicit midpoint.
    NonSeparable,
    /// `f1, f2` on R³ with `f3` closing the tangency constraint, implicit midpoint.
    RigidBody,
    /// One GP per output dimension under a named tableau.
    Generic { tableau: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InducingInit {
    /// Tensor grid, first coordinate varying slowest.
    Grid {
        lower: Vec<f64>,
        upper: Vec<f64>,
        counts: Vec<usize>,
    },
    /// Independent Gaussian coordinates.
    Gaussian {
        means: Vec<f64>,
        stds: Vec<f64>,
        count: usize,
    },
    /// Grid over `(x1, x2)` lifted to the upper unit sphere, `x3 = sqrt(1 − x1² − x2²)`.
    SphereGrid {
        lower: [f64; 2],
        upper: [f64; 2],
        counts: [usize; 2],
    },
    Points { points: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpInit {
    pub input_dim: usize,
    pub signal_variance: f64,
    pub lengthscales_sq: Vec<f64>,
    pub inducing: InducingInit,
    /// Standard deviation of the Gaussian initialisation of `μ`.
    pub mean_std: f64,
    /// Initial diagonal of `Σ`.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub structure: ModelStructure,
    pub gps: Vec<GpInit>,
    #[serde(default = "default_jitter")]
    pub jitter: f64,
}

fn default_jitter() -> f64 {
    crate::sparse_gp::DEFAULT_JITTER
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrPhase {
    pub start_epoch: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ElboFactors {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SelectionRule {
    All,
    FinalK { k: usize },
    SmallestLrOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub n_rollouts: usize,
    pub rule: SelectionRule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub window_length: usize,
    pub epochs: usize,
    pub lr_schedule: Vec<LrPhase>,
    pub elbo_factors: ElboFactors,
    pub feature_count: usize,
    pub selection: SelectionConfig,
    pub seed: u64,
    /// Fresh draw per window instead of per batch.
    #[serde(default)]
    pub draw_per_window: bool,
    /// KL term added per window instead of per optimiser step.
    #[serde(default)]
    pub kl_per_window: bool,
    #[serde(default = "default_failure_rate")]
    pub max_failure_rate: f64,
}

fn default_failure_rate() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.window_length < 2 {
            return bad("window_length must be at least 2");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.feature_count == 0 {
            return bad("feature_count must be at least 1");
        }
        if self.selection.n_rollouts == 0 {
            return bad("selection.n_rollouts must be at least 1");
        }
        match self.lr_schedule.first() {
            Some(p) if p.start_epoch == 0 => {}
            _ => return bad("lr_schedule must start at epoch 0"),
        }
        if self.lr_schedule.windows(2).any(|w| w[1].start_epoch <= w[0].start_epoch) {
            return bad("lr_schedule epochs must be strictly increasing");
        }
        if self.lr_schedule.iter().any(|p| !(p.learning_rate > 0.0)) {
            return bad("learning rates must be positive");
        }
        Ok(())
    }

    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|p| p.start_epoch <= epoch)
            .last()
            .map_or(self.lr_schedule[0].learning_rate, |p| p.learning_rate)
    }

    /// Epochs eligible for model selection.
    pub fn eligible_epochs(&self) -> Vec<usize> {
        let n = self.epochs;
        match self.selection.rule {
            SelectionRule::All => (0..n).collect(),
            SelectionRule::FinalK { k } => (n.saturating_sub(k)..n).collect(),
            SelectionRule::SmallestLrOnly => {
                let min = (0..n).map(|e| self.learning_rate(e)).fold(f64::INFINITY, f64::min);
                (0..n).filter(|&e| self.learning_rate(e) == min).collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemName,
    pub method: Method,
    pub x0: Vec<f64>,
    pub dt: f64,
    pub train_horizon: f64,
    pub predict_horizon: f64,
    pub noise_variances: Vec<f64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    fn steps(&self, horizon: f64) -> Result<usize> {
        let n = horizon / self.dt;
        if !(n > 0.0) || (n - n.round()).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!(
                "horizon {horizon} is not a positive multiple of dt {}",
                self.dt
            )));
        }
        Ok(n.round() as usize)
    }

    /// Transitions in the training trajectory.
    pub fn train_steps(&self) -> Result<usize> {
        self.steps(self.train_horizon)
    }

    pub fn predict_steps(&self) -> Result<usize> {
        self.steps(self.predict_horizon)
    }

    pub fn elbo_factors(&self) -> ElboFactors {
        self.train.elbo_factors
    }

    pub fn hyper_init(&self) -> &GpInit {
        &self.model.gps[0]
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument("dt must be positive".into()));
        }
        self.train_steps()?;
        self.predict_steps()?;
        if self.x0.len() != self.noise_variances.len() {
            return Err(Error::DimensionMismatch {
                expected: self.x0.len(),
                got: self.noise_variances.len(),
            });
        }
        if self.noise_variances.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::InvalidArgument("noise variances must be non-negative".into()));
        }
        self.train.validate()
    }
}
