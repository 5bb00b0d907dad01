//! Rollout metrics: L² error, step-map determinants, energy and uncertainty statistics.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::SampledModel;
use crate::trajectory::Trajectory;

/// Rollouts sharing one time grid.
#[derive(Debug, Clone)]
pub struct RolloutEnsemble {
    rollouts: Vec<Trajectory>,
}

impl RolloutEnsemble {
    pub fn new(rollouts: Vec<Trajectory>) -> Result<Self> {
        let first = rollouts
            .first()
            .ok_or_else(|| Error::InvalidArgument("an ensemble needs at least one rollout".into()))?;
        if rollouts.iter().any(|r| !r.same_grid(first, 1e-9) || r.dim() != first.dim()) {
            return Err(Error::InvalidArgument("ensemble rollouts differ in time grid or dimension".into()));
        }
        Ok(Self { rollouts })
    }

    pub fn rollouts(&self) -> &[Trajectory] {
        &self.rollouts
    }

    pub fn count(&self) -> usize {
        self.rollouts.len()
    }

    pub fn len(&self) -> usize {
        self.rollouts[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn times(&self) -> &[f64] {
        self.rollouts[0].times()
    }

    /// Mean state per step.
    pub fn mean(&self) -> DMatrix<f64> {
        let mut sum = DMatrix::zeros(self.len(), self.rollouts[0].dim());
        for r in &self.rollouts {
            sum += r.states();
        }
        sum / self.count() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct L2Error {
    pub series: Vec<f64>,
    pub total: f64,
}

/// `‖X_i − X̄_i‖` per step and `sqrt((1/N) Σ_i ‖X_i − X̄_i‖²)` against the ensemble mean.
pub fn l2_error(ensemble: &RolloutEnsemble, truth: &Trajectory) -> Result<L2Error> {
    if !ensemble.rollouts[0].same_grid(truth, 1e-9) || truth.dim() != ensemble.rollouts[0].dim() {
        return Err(Error::InvalidArgument("ground truth grid differs from the ensemble".into()));
    }
    let diff = ensemble.mean() - truth.states();
    let series: Vec<f64> = diff.row_iter().map(|r| r.norm()).collect();
    let total = (series.iter().map(|v| v * v).sum::<f64>() / series.len() as f64).sqrt();
    Ok(L2Error { series, total })
}

/// `det(∂ψ/∂x)` of a step map at every state but the last.
pub fn determinant_series_of<J>(step_jacobian: J, traj: &Trajectory) -> Result<Vec<f64>>
where
    J: Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    (0..traj.len().saturating_sub(1))
        .map(|k| step_jacobian(&traj.state(k)).map(|j| j.determinant()).map_err(|e| e.at_step(k)))
        .collect()
}

/// Determinants from central differences of re-solved model steps.
pub fn determinant_series(draw: &SampledModel, traj: &Trajectory) -> Result<Vec<f64>> {
    determinant_series_of(|x| draw.step_jacobian(x), traj)
}

/// Determinants from the analytic (IFT) step Jacobian.
pub fn determinant_series_analytic(draw: &SampledModel, traj: &Trajectory) -> Result<Vec<f64>> {
    determinant_series_of(|x| draw.step_jacobian_analytic(x), traj)
}

pub fn max_abs_deviation(series: &[f64], target: f64) -> f64 {
    series.iter().map(|v| (v - target).abs()).fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyStats {
    pub series: Vec<f64>,
    pub mean: f64,
    pub error: f64,
    pub std: f64,
}

/// Ensemble-mean energy per step, its time average `Ê`, `|E − Ê|` and the spread about `E`.
pub fn energy_stats<E>(ensemble: &RolloutEnsemble, energy: E, true_energy: f64) -> Result<EnergyStats>
where
    E: Fn(&DVector<f64>) -> Result<f64>,
{
    let n = ensemble.len();
    let mut series = vec![0.0; n];
    for r in ensemble.rollouts() {
        for (k, s) in series.iter_mut().enumerate() {
            *s += energy(&r.state(k))?;
        }
    }
    for s in series.iter_mut() {
        *s /= ensemble.count() as f64;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (series.iter().map(|e| (e - true_energy).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(EnergyStats {
        series,
        mean,
        error: (true_energy - mean).abs(),
        std,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyStats {
    pub mean: DMatrix<f64>,
    pub std: DMatrix<f64>,
}

/// Per-step, per-dimension sample mean and (n−1)-normalised standard deviation.
pub fn uncertainty_stats(ensemble: &RolloutEnsemble) -> Result<UncertaintyStats> {
    let m = ensemble.count();
    if m < 2 {
        return Err(Error::InvalidArgument("standard deviation needs at least two rollouts".into()));
    }
    let mean = ensemble.mean();
    let mut var = DMatrix::zeros(mean.nrows(), mean.ncols());
    for r in ensemble.rollouts() {
        let d = r.states() - &mean;
        var += d.component_mul(&d);
    }
    Ok(UncertaintyStats {
        mean,
        std: (var / (m - 1) as f64).map(f64::sqrt),
    })
}

/// `max_n |‖x_n‖² − radius²|` over every rollout.
pub fn max_norm_sq_drift(ensemble: &RolloutEnsemble, radius_sq: f64) -> f64 {
    ensemble
        .rollouts()
        .iter()
        .flat_map(|r| r.rows())
        .map(|x| (x.norm_squared() - radius_sq).abs())
        .fold(0.0, f64::max)
}

/// Named series and scalar summaries.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub series: BTreeMap<String, Vec<f64>>,
    pub scalars: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn scalar(&mut self, name: &str, value: f64) -> &mut Self {
        self.scalars.insert(name.to_string(), value);
        self
    }

    pub fn add_series(&mut self, name: &str, values: Vec<f64>) -> &mut Self {
        self.series.insert(name.to_string(), values);
        self
    }
}
