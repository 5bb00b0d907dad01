//! Ground-truth benchmark systems and their default experiments.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{
    ElboFactors, ExperimentConfig, GpInit, InducingInit, LrPhase, Method, ModelConfig, ModelStructure,
    SelectionConfig, SelectionRule, SystemName, TrainConfig,
};
use crate::error::{check_dim, Error, Result};
use crate::integrators::{integrate_adaptive_on_grid, ButcherTableau, VectorField};
use crate::rng::stream;
use crate::trajectory::Trajectory;

/// One of the four benchmark systems. States are laid out `(p, q)` for the
/// Hamiltonian systems and `(x1, x2, x3)` for the rigid body.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SystemSpec {
    pub name: SystemName,
}

const TWO_BODY_MIN_DISTANCE: f64 = 1e-8;

impl SystemSpec {
    pub fn new(name: SystemName) -> Self {
        Self { name }
    }

    pub fn state_dim(&self) -> usize {
        match self.name {
            SystemName::Pendulum | SystemName::NonSeparable => 2,
            SystemName::TwoBody => 8,
            SystemName::RigidBody => 3,
        }
    }

    pub fn field(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.state_dim(), x.len())?;
        Ok(match self.name {
            SystemName::Pendulum => DVector::from_vec(vec![-6.0 * x[1].sin(), x[0]]),
            SystemName::NonSeparable => {
                let (p, q) = (x[0], x[1]);
                DVector::from_vec(vec![-q * (p * p + 1.0), p * (q * q + 1.0)])
            }
            SystemName::RigidBody => DVector::from_vec(vec![
                0.5 * x[1] * x[2],
                -x[0] * x[2],
                0.5 * x[0] * x[1],
            ]),
            SystemName::TwoBody => {
                let (dx, dy, r) = two_body_separation(x)?;
                let r3 = r * r * r;
                DVector::from_vec(vec![
                    -dx / r3,
                    -dy / r3,
                    dx / r3,
                    dy / r3,
                    x[0],
                    x[1],
                    x[2],
                    x[3],
                ])
            }
        })
    }

    pub fn field_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.state_dim(), x.len())?;
        Ok(match self.name {
            SystemName::Pendulum => DMatrix::from_row_slice(2, 2, &[0.0, -6.0 * x[1].cos(), 1.0, 0.0]),
            SystemName::NonSeparable => {
                let (p, q) = (x[0], x[1]);
                DMatrix::from_row_slice(2, 2, &[-2.0 * p * q, -(p * p + 1.0), q * q + 1.0, 2.0 * p * q])
            }
            SystemName::RigidBody => DMatrix::from_row_slice(
                3,
                3,
                &[
                    0.0,
                    0.5 * x[2],
                    0.5 * x[1],
                    -x[2],
                    0.0,
                    -x[0],
                    0.5 * x[1],
                    0.5 * x[0],
                    0.0,
                ],
            ),
            SystemName::TwoBody => {
                let (dx, dy, r) = two_body_separation(x)?;
                let r3 = r * r * r;
                let r5 = r3 * r * r;
                // ∂(d/r³)/∂d for d = q1 − q2.
                let block = DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        1.0 / r3 - 3.0 * dx * dx / r5,
                        -3.0 * dx * dy / r5,
                        -3.0 * dx * dy / r5,
                        1.0 / r3 - 3.0 * dy * dy / r5,
                    ],
                );
                let mut jac = DMatrix::zeros(8, 8);
                for i in 0..2 {
                    for j in 0..2 {
                        let v = block[(i, j)];
                        jac[(i, 4 + j)] = -v;
                        jac[(i, 6 + j)] = v;
                        jac[(2 + i, 4 + j)] = v;
                        jac[(2 + i, 6 + j)] = -v;
                    }
                }
                for i in 0..4 {
                    jac[(4 + i, i)] = 1.0;
                }
                jac
            }
        })
    }

    /// Hamiltonian, or the quadratic energy of the rigid body.
    pub fn energy(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(self.state_dim(), x.len())?;
        Ok(match self.name {
            SystemName::Pendulum => 1.0 - 6.0 * x[1].cos() + 0.5 * x[0] * x[0],
            SystemName::NonSeparable => 0.5 * (x[1] * x[1] + 1.0) * (x[0] * x[0] + 1.0),
            SystemName::RigidBody => 0.5 * x[0] * x[0] + x[1] * x[1] + 1.5 * x[2] * x[2],
            SystemName::TwoBody => {
                let (_, _, r) = two_body_separation(x)?;
                0.5 * x.rows(0, 4).norm_squared() - 1.0 / r
            }
        })
    }

    pub fn default_experiment(&self) -> ExperimentConfig {
        default_experiment_for(self.name, Method::Sgpd)
    }
}

fn two_body_separation(x: &DVector<f64>) -> Result<(f64, f64, f64)> {
    let dx = x[4] - x[6];
    let dy = x[5] - x[7];
    let r = dx.hypot(dy);
    if !(r > TWO_BODY_MIN_DISTANCE) {
        return Err(Error::Singularity(format!("coincident particles (distance {r:.3e})")));
    }
    Ok((dx, dy, r))
}

impl VectorField for SystemSpec {
    fn dim(&self) -> usize {
        self.state_dim()
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.field(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.field_jacobian(x)
    }
}

pub fn system_field(spec: &SystemSpec, x: &DVector<f64>) -> Result<DVector<f64>> {
    spec.field(x)
}

pub const REFERENCE_RTOL: f64 = 1e-10;
pub const REFERENCE_ATOL: f64 = 1e-12;

/// High-accuracy trajectory on the grid `k dt`, `k = 0..=n`.
pub fn reference_trajectory(spec: &SystemSpec, x0: &DVector<f64>, dt: f64, n: usize) -> Result<Trajectory> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    let times: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
    integrate_adaptive_on_grid(&ButcherTableau::radau_ia(), spec, x0, &times, REFERENCE_RTOL, REFERENCE_ATOL)
}

/// I.i.d. Gaussian observation noise with per-dimension variances.
pub fn add_noise<R: Rng + ?Sized>(traj: &Trajectory, variances: &[f64], rng: &mut R) -> Result<Trajectory> {
    check_dim(traj.dim(), variances.len())?;
    if let Some(v) = variances.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative noise variance {v}")));
    }
    let sd: Vec<f64> = variances.iter().map(|v| v.sqrt()).collect();
    let mut states = traj.states().clone();
    for i in 0..states.nrows() {
        for j in 0..states.ncols() {
            let e: f64 = rng.sample(StandardNormal);
            states[(i, j)] += sd[j] * e;
        }
    }
    Trajectory::new(traj.times().to_vec(), states)?.with_noise_variances(variances.to_vec())
}

/// Ground truth over the prediction horizon plus the noisy training window.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub truth: Trajectory,
    pub train_truth: Trajectory,
    pub train_noisy: Trajectory,
}

pub fn generate_dataset(config: &ExperimentConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let spec = SystemSpec::new(config.system);
    let x0 = DVector::from_vec(config.x0.clone());
    let n_train = config.train_steps()?;
    let n_pred = config.predict_steps()?.max(n_train);
    let truth = reference_trajectory(&spec, &x0, config.dt, n_pred)?;
    let train_truth = truth.truncated(n_train + 1);
    let train_noisy = add_noise(&train_truth, &config.noise_variances, &mut stream(seed, "observation-noise"))?;
    Ok(Dataset {
        truth,
        train_truth,
        train_noisy,
    })
}

fn grid(lower: &[f64], upper: &[f64], counts: &[usize]) -> InducingInit {
    InducingInit::Grid {
        lower: lower.to_vec(),
        upper: upper.to_vec(),
        counts: counts.to_vec(),
    }
}

fn gp(input_dim: usize, sv: f64, ls: Vec<f64>, inducing: InducingInit, variance: f64) -> GpInit {
    GpInit {
        input_dim,
        signal_variance: sv,
        lengthscales_sq: ls,
        inducing,
        mean_std: 0.05,
        variance,
    }
}

fn schedule(phases: &[(usize, f64)]) -> Vec<LrPhase> {
    phases
        .iter()
        .map(|&(start_epoch, learning_rate)| LrPhase { start_epoch, learning_rate })
        .collect()
}

const TWO_BODY_P_LS: [[f64; 4]; 2] = [[8.52, 4.97, 8.52, 4.97], [9.0, 4.62, 9.0, 4.62]];
const TWO_BODY_Q_LS: [[f64; 4]; 2] = [[169.0, 841.0, 169.0, 841.0], [256.0, 324.0, 129.0, 324.0]];

/// Row of the two-body lengthscale table for output dimension `i`.
fn two_body_row(i: usize, width: usize) -> Vec<f64> {
    let row = if i < 4 { TWO_BODY_P_LS[i % 2] } else { TWO_BODY_Q_LS[i % 2] };
    (0..width).map(|k| row[k % 4]).collect()
}

/// Default experiment configuration for a system and method.
pub fn default_experiment_for(system: SystemName, method: Method) -> ExperimentConfig {
    let sqrt2 = 2f64.sqrt();
    let (x0, dt, train_horizon, predict_horizon, noise): (Vec<f64>, f64, f64, f64, Vec<f64>) = match system {
        SystemName::Pendulum => (vec![2.0, 2.0], 0.1, 10.0, 40.0, vec![0.1, 0.1]),
        SystemName::TwoBody => (
            vec![-0.241, 0.313, 0.241, -0.313, 1.144, 0.880, -1.144, -0.880],
            0.15,
            18.75,
            30.0,
            vec![1e-3; 8],
        ),
        SystemName::NonSeparable => (vec![0.0, -0.375], 0.1, 10.0, 40.0, vec![5e-4, 5e-4]),
        SystemName::RigidBody => (
            vec![1.1f64.cos(), 0.0, 1.1f64.sin()],
            0.1,
            15.0,
            50.0,
            vec![1e-3, 1e-3, 1e-4],
        ),
    };

    let (structure, gps) = match (system, method) {
        (SystemName::Pendulum, Method::Sgpd) => (
            ModelStructure::Separable,
            vec![
                gp(1, 0.01, vec![sqrt2], grid(&[-3.0], &[3.0], &[9]), 1e-8),
                gp(1, 0.01, vec![sqrt2], grid(&[-5.0], &[5.0], &[9]), 1e-8),
            ],
        ),
        (SystemName::Pendulum, Method::Euler) => {
            let g = gp(2, 0.01, vec![sqrt2; 2], grid(&[-5.0, -3.0], &[5.0, 3.0], &[3, 3]), 1e-8);
            (ModelStructure::Generic { tableau: "explicit_euler".into() }, vec![g.clone(), g])
        }
        (SystemName::TwoBody, Method::Sgpd) => {
            let q_init = InducingInit::Gaussian { means: vec![-0.7; 4], stds: vec![1.4; 4], count: 20 };
            let p_init = InducingInit::Gaussian { means: vec![-1.1; 4], stds: vec![2.2; 4], count: 20 };
            let mut gps: Vec<GpInit> = (0..4).map(|i| gp(4, 1e-4, two_body_row(i, 4), q_init.clone(), 1e-8)).collect();
            gps.extend((4..8).map(|i| gp(4, 1e-4, two_body_row(i, 4), p_init.clone(), 1e-8)));
            (ModelStructure::Separable, gps)
        }
        (SystemName::TwoBody, Method::Euler) => {
            let mut means = vec![-1.1; 4];
            means.extend([-0.7; 4]);
            let mut stds = vec![2.2; 4];
            stds.extend([1.4; 4]);
            let init = InducingInit::Gaussian { means, stds, count: 20 };
            (
                ModelStructure::Generic { tableau: "explicit_euler".into() },
                (0..8).map(|i| gp(8, 1e-4, two_body_row(i, 8), init.clone(), 1e-8)).collect(),
            )
        }
        (SystemName::NonSeparable, Method::Sgpd) => (
            ModelStructure::NonSeparable,
            vec![gp(2, 1e-4, vec![2.0; 2], grid(&[-0.5, -0.5], &[0.5, 0.5], &[4, 4]), 1e-7)],
        ),
        (SystemName::NonSeparable, Method::Euler) => {
            let g = gp(2, 1e-4, vec![2.0; 2], grid(&[-0.5, -0.5], &[0.5, 0.5], &[3, 3]), 1e-7);
            (ModelStructure::Generic { tableau: "explicit_euler".into() }, vec![g.clone(), g])
        }
        (SystemName::RigidBody, Method::Sgpd) => {
            let init = InducingInit::SphereGrid { lower: [-0.5, -0.7], upper: [0.5, 0.7], counts: [3, 3] };
            let g = gp(3, 1e-3, vec![1.0; 3], init, 1e-6);
            (ModelStructure::RigidBody, vec![g.clone(), g])
        }
        (SystemName::RigidBody, Method::Euler) => {
            let init = InducingInit::Gaussian {
                means: vec![-0.5, -0.7, 0.7],
                stds: vec![1.0, 1.7, 0.2],
                count: 11,
            };
            let g = gp(3, 1e-5, vec![1.0; 3], init, 1e-8);
            (ModelStructure::Generic { tableau: "explicit_euler".into() }, vec![g.clone(), g.clone(), g])
        }
    };

    let (batch_size, window_length, elbo) = match system {
        SystemName::Pendulum => (1, 10, (4.0, 1e-6)),
        SystemName::TwoBody => (5, 50, (20.0, 1e-6)),
        SystemName::NonSeparable => (1, 10, (1.0, 1e-6)),
        SystemName::RigidBody => (1, 20, (20.0, 1.0)),
    };

    let (epochs, lr_schedule, rule) = match (system, method) {
        (SystemName::Pendulum, _) => (149, schedule(&[(0, 1e-2)]), SelectionRule::All),
        (SystemName::TwoBody, _) => (149, schedule(&[(0, 1e-2), (100, 1e-3)]), SelectionRule::FinalK { k: 45 }),
        (SystemName::NonSeparable, Method::Sgpd) => (
            10,
            schedule(&[(0, 1e-4), (2, 1e-2), (5, 1e-5)]),
            SelectionRule::FinalK { k: 5 },
        ),
        (SystemName::NonSeparable, Method::Euler) => (49, schedule(&[(0, 1e-3)]), SelectionRule::All),
        (SystemName::RigidBody, Method::Sgpd) => (
            11,
            schedule(&[(0, 1e-2), (2, 1e-3), (4, 1e-4), (6, 1e-5)]),
            SelectionRule::FinalK { k: 4 },
        ),
        (SystemName::RigidBody, Method::Euler) => (
            20,
            schedule(&[(0, 1e-2), (10, 1e-3), (15, 1e-4)]),
            SelectionRule::All,
        ),
    };

    ExperimentConfig {
        system,
        method,
        x0,
        dt,
        train_horizon,
        predict_horizon,
        noise_variances: noise,
        model: ModelConfig {
            structure,
            gps,
            jitter: crate::sparse_gp::DEFAULT_JITTER,
        },
        train: TrainConfig {
            batch_size,
            window_length,
            epochs,
            lr_schedule,
            elbo_factors: ElboFactors { a: elbo.0, b: elbo.1 },
            feature_count: 10_000,
            selection: SelectionConfig { n_rollouts: 5, rule },
            seed: 0,
            draw_per_window: false,
            kl_per_window: false,
            max_failure_rate: 0.1,
        },
    }
}

/// Default experiment configuration of the structured model.
pub fn default_experiment(name: &str) -> Result<ExperimentConfig> {
    Ok(default_experiment_for(name.parse()?, Method::Sgpd))
}
