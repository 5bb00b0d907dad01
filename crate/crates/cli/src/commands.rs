use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use structdyn::config::SystemName;
use structdyn::evaluation::{
    determinant_series, energy_stats, l2_error, max_abs_deviation, max_norm_sq_drift, uncertainty_stats, MetricReport,
    RolloutEnsemble,
};
use structdyn::pipeline::{dataset, initial_model, Prediction, RolloutMode};
use structdyn::rng::stream;
use structdyn::systems::SystemSpec;
use structdyn::trainer::{read_history_csv, resume, select_model, train, write_history_csv, Adam, Checkpoint};
use structdyn::trajectory::{format_f64, Trajectory};
use structdyn::{Error, Result};

use crate::run_config::RunConfig;

pub const RUN_FILE: &str = "run.json";
pub const SELECTED_FILE: &str = "selected.json";
pub const FINAL_FILE: &str = "final.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const MANIFEST_FILE: &str = "manifest.json";

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    Ok(fs::write(path, serde_json::to_string_pretty(value)?)?)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataManifest {
    pub system: SystemName,
    pub seed: u64,
    pub dt: f64,
    pub noise_variances: Vec<f64>,
    pub train_rows: usize,
    pub reference_rows: usize,
}

/// Writes `truth.csv` and `noisy.csv` over the training horizon and `reference.csv` over the prediction horizon.
pub fn generate(cfg: &RunConfig, out: &Path, seed: u64) -> Result<DataManifest> {
    fs::create_dir_all(out)?;
    let data = structdyn::systems::generate_dataset(&cfg.experiment, seed)?;
    data.train_truth.save_csv(&out.join("truth.csv"))?;
    data.train_noisy.save_csv(&out.join("noisy.csv"))?;
    data.truth.save_csv(&out.join("reference.csv"))?;
    let manifest = DataManifest {
        system: cfg.experiment.system,
        seed,
        dt: cfg.experiment.dt,
        noise_variances: cfg.experiment.noise_variances.clone(),
        train_rows: data.train_truth.len(),
        reference_rows: data.truth.len(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedPointer {
    pub epoch: Option<usize>,
    /// Relative to the run directory.
    pub checkpoint: PathBuf,
    pub selection_error: Option<f64>,
}

pub fn checkpoint_path(run_dir: &Path, epoch: usize) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.json"))
}

/// Every checkpoint in the run directory, by epoch.
pub fn load_checkpoints(run_dir: &Path) -> Result<Vec<Checkpoint>> {
    let dir = run_dir.join(CHECKPOINT_DIR);
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let mut cps = paths
        .iter()
        .map(|p| Checkpoint::from_json(&fs::read_to_string(p)?))
        .collect::<Result<Vec<_>>>()?;
    cps.sort_by_key(|c| c.epoch);
    Ok(cps)
}

pub struct TrainSummary {
    pub epochs_run: usize,
    pub selected: SelectedPointer,
}

/// Train into `run_dir`, or continue from its latest checkpoint when `resume_run` is set.
pub fn train_run(cfg: &RunConfig, run_dir: &Path, resume_run: bool) -> Result<TrainSummary> {
    fs::create_dir_all(run_dir.join(CHECKPOINT_DIR))?;
    let exp = &cfg.experiment;
    let data = dataset(exp)?;
    let data_dir = run_dir.join("data");
    fs::create_dir_all(&data_dir)?;
    data.train_truth.save_csv(&data_dir.join("truth.csv"))?;
    data.train_noisy.save_csv(&data_dir.join("noisy.csv"))?;
    data.truth.save_csv(&data_dir.join("reference.csv"))?;

    let mut previous = Vec::new();
    let mut history = Vec::new();
    let mut start = None;
    if resume_run {
        previous = load_checkpoints(run_dir)?;
        if let Some(last) = previous.pop() {
            let path = run_dir.join(HISTORY_FILE);
            if path.exists() {
                history = read_history_csv(fs::File::open(&path)?)?;
                history.retain(|r| r.epoch < last.epoch);
            }
            start = Some(last);
        }
    }
    cfg.save(&run_dir.join(RUN_FILE))?;

    let mut on_checkpoint = |cp: &Checkpoint| fs::write(checkpoint_path(run_dir, cp.epoch), cp.to_json()?).map_err(Error::from);
    let outcome = match start {
        Some(cp) => resume(cp, &data.train_noisy, &exp.train, &mut on_checkpoint)?,
        None => train(initial_model(exp)?, &data.train_noisy, &exp.train, &mut on_checkpoint)?,
    };
    let epochs_run = outcome.history.len();
    history.extend(outcome.history);
    write_history_csv(&history, fs::File::create(run_dir.join(HISTORY_FILE))?)?;

    let final_cp = Checkpoint {
        epoch: exp.train.epochs,
        optimizer: Adam::new(outcome.model.param_len()),
        model: outcome.model,
        selection_error: None,
        seed: exp.train.seed,
    };
    fs::write(run_dir.join(FINAL_FILE), final_cp.to_json()?)?;

    let mut all = previous;
    all.extend(outcome.checkpoints);
    let selected = if all.is_empty() {
        SelectedPointer {
            epoch: None,
            checkpoint: PathBuf::from(FINAL_FILE),
            selection_error: None,
        }
    } else {
        let best = select_model(&all, &exp.train)?;
        SelectedPointer {
            epoch: Some(best.epoch),
            checkpoint: PathBuf::from(CHECKPOINT_DIR).join(format!("epoch_{:04}.json", best.epoch)),
            selection_error: best.selection_error,
        }
    };
    write_json(&run_dir.join(SELECTED_FILE), &selected)?;
    Ok(TrainSummary { epochs_run, selected })
}

/// The checkpoint named by a run directory's selection pointer.
pub fn selected_checkpoint(run_dir: &Path) -> Result<(PathBuf, Checkpoint)> {
    let pointer: SelectedPointer = read_json(&run_dir.join(SELECTED_FILE))?;
    let path = run_dir.join(pointer.checkpoint);
    let cp = Checkpoint::from_json(&fs::read_to_string(&path)?)?;
    Ok((path, cp))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutManifest {
    pub system: SystemName,
    pub checkpoint: PathBuf,
    pub prediction: Prediction,
    /// Step size of the model's discrete map.
    pub step_size: f64,
    pub files: Vec<String>,
    pub complete: bool,
    pub error: Option<String>,
}

pub fn rollout_file(i: usize) -> String {
    format!("rollout_{i:03}.csv")
}

/// Rolls out the ensemble from the initial state of the ground truth; the manifest lists what was written even on failure.
pub fn rollout(cfg: &RunConfig, checkpoint: &Path, prediction: Prediction, out: &Path) -> Result<RolloutManifest> {
    fs::create_dir_all(out)?;
    let cp = Checkpoint::from_json(&fs::read_to_string(checkpoint)?)?;
    let x0 = dataset(&cfg.experiment)?.truth.state(0);
    let mut manifest = RolloutManifest {
        system: cfg.experiment.system,
        checkpoint: fs::canonicalize(checkpoint)?,
        prediction,
        step_size: match prediction.mode {
            RolloutMode::Fixed { step_size: Some(h) } => h,
            _ => cp.model.step_size(),
        },
        files: Vec::new(),
        complete: false,
        error: None,
    };
    let result = prediction.run_with(&cp.model, &x0, &mut |i, traj| {
        let name = rollout_file(i);
        traj.save_csv(&out.join(&name))?;
        manifest.files.push(name);
        Ok(())
    });
    match &result {
        Ok(()) => manifest.complete = true,
        Err(e) => manifest.error = Some(e.to_string()),
    }
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    result.map(|_| manifest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    L2,
    Energy,
    Determinant,
    Drift,
    Std,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(Metric::L2),
            "energy" => Ok(Metric::Energy),
            "det" => Ok(Metric::Determinant),
            "drift" => Ok(Metric::Drift),
            "std" => Ok(Metric::Std),
            other => Err(Error::InvalidArgument(format!("unknown metric '{other}'"))),
        }
    }
}

pub fn load_ensemble(dir: &Path) -> Result<(RolloutManifest, RolloutEnsemble)> {
    let manifest: RolloutManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let rollouts = manifest
        .files
        .iter()
        .map(|f| Trajectory::load_csv(&dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, RolloutEnsemble::new(rollouts)?))
}

/// Computes the requested metrics against `truth` (cut to the ensemble length) and writes `metrics.json` and `series.csv`.
pub fn evaluate(ensemble_dir: &Path, truth: &Path, metrics: &[Metric], out: &Path) -> Result<MetricReport> {
    let (manifest, ens) = load_ensemble(ensemble_dir)?;
    let truth = Trajectory::load_csv(truth)?;
    if truth.len() < ens.len() {
        return Err(Error::InvalidArgument(format!(
            "truth has {} rows, the ensemble {}",
            truth.len(),
            ens.len()
        )));
    }
    let truth = truth.truncated(ens.len());
    let spec = SystemSpec::new(manifest.system);
    let x0 = truth.state(0);
    let mut report = MetricReport::default();
    for m in metrics {
        match m {
            Metric::L2 => {
                let e = l2_error(&ens, &truth)?;
                report.scalar("l2_total", e.total).add_series("l2", e.series);
            }
            Metric::Energy => {
                let s = energy_stats(&ens, |x| spec.energy(x), spec.energy(&x0)?)?;
                report
                    .scalar("energy_mean", s.mean)
                    .scalar("energy_error", s.error)
                    .scalar("energy_std", s.std)
                    .add_series("energy", s.series);
            }
            Metric::Drift => {
                report.scalar("norm_sq_drift", max_norm_sq_drift(&ens, x0.norm_squared()));
            }
            Metric::Std => {
                let u = uncertainty_stats(&ens)?;
                for j in 0..u.std.ncols() {
                    report.add_series(&format!("mean_x{j}"), u.mean.column(j).iter().copied().collect());
                    report.add_series(&format!("std_x{j}"), u.std.column(j).iter().copied().collect());
                }
                report.scalar("std_mean", u.std.mean());
            }
            Metric::Determinant => {
                let cp = Checkpoint::from_json(&fs::read_to_string(&manifest.checkpoint)?)?;
                let p = manifest.prediction;
                let draw = cp
                    .model
                    .sample_model(p.features, &mut stream(p.seed, "prediction"))?
                    .with_step_size(manifest.step_size)?;
                let dets = determinant_series(&draw, &ens.rollouts()[0])?;
                report.scalar("det_max_deviation", max_abs_deviation(&dets, 1.0));
                report.add_series("det", dets);
            }
        }
    }
    fs::create_dir_all(out)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_series_csv(&out.join("series.csv"), ens.times(), &report)?;
    Ok(report)
}

/// One column per series; shorter series leave trailing cells empty.
fn write_series_csv(path: &Path, times: &[f64], report: &MetricReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(report.series.keys().cloned());
    w.write_record(&header)?;
    for (k, t) in times.iter().enumerate() {
        let mut rec = vec![format_f64(*t)];
        rec.extend(report.series.values().map(|s| s.get(k).map_or(String::new(), |v| format_f64(*v))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
