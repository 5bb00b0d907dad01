//! Recurrent variational training of dynamics models.

use std::io::Write;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config::{ElboFactors, TrainConfig};
use crate::error::{check_dim, Error, Result};
use crate::gradient::rollout_gradient;
use crate::models::{DynamicsModel, ModelNoise, SampledModel};
use crate::rng::indexed_stream;
use crate::trajectory::Trajectory;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Subtrajectory `x̂_{start..start+L}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub start: usize,
    pub states: Vec<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowDataset {
    windows: Vec<Window>,
    noise_variances: Vec<f64>,
}

impl WindowDataset {
    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn noise_variances(&self) -> &[f64] {
        &self.noise_variances
    }
}

/// Sliding windows of `length` states with stride 1.
pub fn make_windows(traj: &Trajectory, length: usize) -> Result<WindowDataset> {
    let n = traj.len();
    if length < 2 {
        return Err(Error::InvalidArgument("window length must be at least 2".into()));
    }
    if length > n {
        return Err(Error::InvalidArgument(format!(
            "window length {length} exceeds trajectory length {n}"
        )));
    }
    let noise_variances = traj
        .noise_variances()
        .ok_or_else(|| Error::InvalidArgument("trajectory carries no noise variances".into()))?
        .to_vec();
    if noise_variances.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("noise variances must be positive for the likelihood".into()));
    }
    let rows = traj.rows();
    let windows = (0..=n - length)
        .map(|start| Window {
            start,
            states: rows[start..start + length].to_vec(),
        })
        .collect();
    Ok(WindowDataset {
        windows,
        noise_variances,
    })
}

/// Loss and parameter gradient of one window under a frozen draw.
#[derive(Debug, Clone)]
pub struct WindowLoss {
    pub loss: f64,
    pub gradient: DVector<f64>,
}

/// `a · Σ_n Σ_i −log N(x̂_n,i | x_n,i, σ_i²)` over the rolled-out window, started at `x̂_0`.
pub fn window_data_loss(draw: &SampledModel, window: &Window, variances: &[f64], a: f64) -> Result<WindowLoss> {
    let x0 = &window.states[0];
    check_dim(x0.len(), variances.len())?;
    let n_steps = window.states.len() - 1;
    let report = rollout_gradient(draw, x0, n_steps, |traj| {
        let mut value = 0.0;
        let mut grads = vec![DVector::zeros(x0.len())];
        for k in 1..=n_steps {
            let x = traj.state(k);
            let target = &window.states[k];
            let mut g = DVector::zeros(x.len());
            for i in 0..x.len() {
                let s2 = variances[i];
                let r = x[i] - target[i];
                value += 0.5 * (LN_2PI + s2.ln()) + r * r / (2.0 * s2);
                g[i] = a * r / s2;
            }
            grads.push(g);
        }
        Ok((a * value, grads))
    })?;
    Ok(WindowLoss {
        loss: report.loss,
        gradient: report.params,
    })
}

/// Negative ELBO contribution of one window, with the KL term when `include_kl`.
pub fn elbo_window_loss(
    model: &DynamicsModel,
    window: &Window,
    variances: &[f64],
    factors: ElboFactors,
    draw: &SampledModel,
    include_kl: bool,
) -> Result<WindowLoss> {
    let mut out = window_data_loss(draw, window, variances, factors.a)?;
    if include_kl && factors.b != 0.0 {
        let (kl, grad) = model.kl_with_gradient()?;
        out.loss += factors.b * kl;
        out.gradient += grad * factors.b;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn update(&mut self, theta: &mut DVector<f64>, grad: &DVector<f64>, lr: f64) -> Result<()> {
        check_dim(self.m.len(), theta.len())?;
        check_dim(self.m.len(), grad.len())?;
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..theta.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Model state at the start of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub model: DynamicsModel,
    pub optimizer: Adam,
    pub selection_error: Option<f64>,
    /// Random streams consumed by the epoch are `(seed, label#epoch)`.
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub selection_error: f64,
    pub skipped_windows: usize,
}

pub fn write_history_csv<W: Write>(history: &[EpochRecord], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_history_csv<R: std::io::Read>(reader: R) -> Result<Vec<EpochRecord>> {
    csv::Reader::from_reader(reader)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DynamicsModel,
    pub history: Vec<EpochRecord>,
    pub checkpoints: Vec<Checkpoint>,
}

/// `e = Σ_i ‖X̄_i − x̂_i‖²` with `X̄` the mean of `n_rollouts` rollouts from `x̂_0`.
pub fn selection_error(model: &DynamicsModel, observed: &Trajectory, config: &TrainConfig, epoch: usize) -> f64 {
    let mut rng = indexed_stream(config.seed, "selection", epoch as u64);
    let n_steps = observed.len() - 1;
    let x0 = observed.state(0);
    let mut sum = nalgebra::DMatrix::zeros(observed.len(), observed.dim());
    for _ in 0..config.selection.n_rollouts {
        let traj = model
            .sample_model(config.feature_count, &mut rng)
            .and_then(|draw| draw.rollout(&x0, n_steps));
        match traj {
            Ok(t) => sum += t.states(),
            Err(_) => return f64::INFINITY,
        }
    }
    let mean = sum / config.selection.n_rollouts as f64;
    let err = (mean - observed.states()).norm_squared();
    if err.is_finite() {
        err
    } else {
        f64::INFINITY
    }
}

/// Train from scratch; `on_checkpoint` sees each epoch-start checkpoint as it is taken.
pub fn train(
    model: DynamicsModel,
    observed: &Trajectory,
    config: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    let start = Checkpoint {
        epoch: 0,
        optimizer: Adam::new(model.param_len()),
        model,
        selection_error: None,
        seed: config.seed,
    };
    resume(start, observed, config, on_checkpoint)
}

/// Continue training from an epoch-start checkpoint, redoing that epoch.
pub fn resume(
    start: Checkpoint,
    observed: &Trajectory,
    config: &TrainConfig,
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if start.seed != config.seed {
        return Err(Error::InvalidArgument("checkpoint seed differs from the configuration".into()));
    }
    let dataset = make_windows(observed, config.window_length)?;
    let mut model = start.model;
    let mut adam = start.optimizer;
    let mut history = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in start.epoch..config.epochs {
        let sel = selection_error(&model, observed, config, epoch);
        let cp = Checkpoint {
            epoch,
            model: model.clone(),
            optimizer: adam.clone(),
            selection_error: Some(sel),
            seed: config.seed,
        };
        on_checkpoint(&cp)?;
        checkpoints.push(cp);

        let lr = config.learning_rate(epoch);
        let (mean_loss, skipped) = run_epoch(&mut model, &mut adam, &dataset, config, epoch, lr)?;
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            mean_loss,
            selection_error: sel,
            skipped_windows: skipped,
        });
    }
    Ok(TrainOutcome {
        model,
        history,
        checkpoints,
    })
}

fn run_epoch(
    model: &mut DynamicsModel,
    adam: &mut Adam,
    dataset: &WindowDataset,
    config: &TrainConfig,
    epoch: usize,
    lr: f64,
) -> Result<(f64, usize)> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut indexed_stream(config.seed, "shuffle", epoch as u64));
    let mut draw_rng = indexed_stream(config.seed, "draw", epoch as u64);
    let factors = config.elbo_factors;
    let mut total = 0.0;
    let mut batches = 0usize;
    let mut skipped = 0usize;
    for batch in order.chunks(config.batch_size) {
        let mut grad = DVector::zeros(model.param_len());
        let mut loss = 0.0;
        let mut shared: Option<SampledModel> = None;
        if !config.draw_per_window {
            let noise: ModelNoise = model.sample_noise(config.feature_count, &mut draw_rng)?;
            shared = Some(model.sample_with(&noise)?);
        }
        let mut used = 0usize;
        for &w in batch {
            let draw = match &shared {
                Some(d) => d.clone(),
                None => model.sample_model(config.feature_count, &mut draw_rng)?,
            };
            match elbo_window_loss(
                model,
                &dataset.windows()[w],
                dataset.noise_variances(),
                factors,
                &draw,
                config.kl_per_window,
            ) {
                Ok(wl) => {
                    loss += wl.loss;
                    grad += wl.gradient;
                    used += 1;
                }
                Err(e) if e.is_rollout_failure() => skipped += 1,
                Err(e) => return Err(e),
            }
        }
        if used == 0 {
            continue;
        }
        if !config.kl_per_window && factors.b != 0.0 {
            let (kl, g) = model.kl_with_gradient()?;
            loss += factors.b * kl;
            grad += g * factors.b;
        }
        if !loss.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        let mut theta = model.params();
        adam.update(&mut theta, &grad, lr)?;
        model.set_params(&theta).map_err(|_| Error::NonFiniteLoss { epoch })?;
        total += loss;
        batches += 1;
    }
    let total_windows = dataset.len();
    if skipped as f64 > config.max_failure_rate * total_windows as f64 {
        return Err(Error::SolverFailureRate {
            epoch,
            failed: skipped,
            total: total_windows,
        });
    }
    Ok((if batches > 0 { total / batches as f64 } else { f64::NAN }, skipped))
}

/// Eligible checkpoint with the smallest selection error, ties to the later epoch.
pub fn select_model<'a>(checkpoints: &'a [Checkpoint], config: &TrainConfig) -> Result<&'a Checkpoint> {
    let eligible = config.eligible_epochs();
    checkpoints
        .iter()
        .filter(|c| eligible.contains(&c.epoch))
        .filter_map(|c| c.selection_error.filter(|e| !e.is_nan()).map(|e| (e, c)))
        .fold(None, |best: Option<(f64, &Checkpoint)>, (e, c)| match best {
            Some((be, bc)) if be < e || (be == e && bc.epoch > c.epoch) => Some((be, bc)),
            _ => Some((e, c)),
        })
        .map(|(_, c)| c)
        .ok_or(Error::NoEligibleCheckpoint)
}
