//! Structured dynamics models built from sparse GPs.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, GpInit, InducingInit, ModelConfig, ModelStructure};
use crate::error::{check_dim, Error, Result};
use crate::gradient::{rk_step_jacobian, rk_step_vjp, DifferentiableField, ParameterLayout};
use crate::integrators::{
    apply_inverse_symplectic, integrate_adaptive_on_grid, rk_step_with_stages, step_jacobian_of, ButcherTableau,
    SolverSettings, Stepper, VectorField,
};
use crate::kernel::ArdKernelParams;
use crate::sparse_gp::{DrawNoise, PointTerms, SampleAdjoint, SampledFunction, SparseGp};
use crate::trajectory::Trajectory;

/// Below this `|x3|` the rigid-body constraint cannot be solved for `f3`.
pub const X3_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Separable { half: usize },
    NonSeparable,
    RigidBody,
    Generic(ButcherTableau),
}

impl Kind {
    fn from_structure(structure: &ModelStructure, gps: &[SparseGp]) -> Result<(Self, usize)> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if gps.is_empty() {
            return bad("a model needs at least one GP".into());
        }
        let inputs: Vec<usize> = gps.iter().map(|g| g.input_dim()).collect();
        match structure {
            ModelStructure::Separable => {
                let half = gps.len() / 2;
                if gps.len() % 2 != 0 || inputs.iter().any(|&d| d != half) {
                    return bad(format!("separable model needs 2d GPs over R^d, got inputs {inputs:?}"));
                }
                Ok((Kind::Separable { half }, gps.len()))
            }
            ModelStructure::NonSeparable => {
                if gps.len() != 1 || inputs[0] % 2 != 0 {
                    return bad("non-separable model needs one GP over an even-dimensional space".into());
                }
                Ok((Kind::NonSeparable, inputs[0]))
            }
            ModelStructure::RigidBody => {
                if gps.len() != 2 || inputs.iter().any(|&d| d != 3) {
                    return bad("rigid-body model needs two GPs over R^3".into());
                }
                Ok((Kind::RigidBody, 3))
            }
            ModelStructure::Generic { tableau } => {
                let d = gps.len();
                if inputs.iter().any(|&i| i != d) {
                    return bad(format!("generic model needs {d} GPs over R^{d}"));
                }
                Ok((Kind::Generic(ButcherTableau::by_name(tableau)?), d))
            }
        }
    }

    fn tableau(&self) -> Option<ButcherTableau> {
        match self {
            Kind::Separable { .. } => None,
            Kind::NonSeparable | Kind::RigidBody => Some(ButcherTableau::implicit_midpoint()),
            Kind::Generic(t) => Some(t.clone()),
        }
    }
}

/// Trainable model: structure, one sparse GP per constituent and the step size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsModel {
    structure: ModelStructure,
    gps: Vec<SparseGp>,
    step_size: f64,
    solver: SolverSettings,
}

/// Frozen randomness of one model draw, one entry per GP.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelNoise(pub Vec<DrawNoise>);

impl DynamicsModel {
    pub fn new(structure: ModelStructure, gps: Vec<SparseGp>, step_size: f64) -> Result<Self> {
        Kind::from_structure(&structure, &gps)?;
        if !(step_size > 0.0) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {step_size}")));
        }
        Ok(Self {
            structure,
            gps,
            step_size,
            solver: SolverSettings::default(),
        })
    }

    /// Initialise inducing inputs and variational parameters per the configuration.
    pub fn from_config<R: Rng + ?Sized>(model: &ModelConfig, step_size: f64, rng: &mut R) -> Result<Self> {
        let gps = model
            .gps
            .iter()
            .map(|g| init_gp(g, model.jitter, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(model.structure.clone(), gps, step_size)
    }

    pub fn from_experiment<R: Rng + ?Sized>(config: &ExperimentConfig, rng: &mut R) -> Result<Self> {
        let m = Self::from_config(&config.model, config.dt, rng)?;
        check_dim(config.x0.len(), m.state_dim())?;
        Ok(m)
    }

    pub fn with_solver(mut self, solver: SolverSettings) -> Result<Self> {
        solver.validate()?;
        self.solver = solver;
        Ok(self)
    }

    pub fn with_step_size(&self, step_size: f64) -> Result<Self> {
        let mut m = self.clone();
        if !(step_size > 0.0) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {step_size}")));
        }
        m.step_size = step_size;
        Ok(m)
    }

    pub fn structure(&self) -> &ModelStructure {
        &self.structure
    }

    pub fn gps(&self) -> &[SparseGp] {
        &self.gps
    }

    pub fn gps_mut(&mut self) -> &mut [SparseGp] {
        &mut self.gps
    }

    pub fn state_dim(&self) -> usize {
        Kind::from_structure(&self.structure, &self.gps).map_or(0, |(_, d)| d)
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn solver(&self) -> &SolverSettings {
        &self.solver
    }

    /// RK tableau used by the model, `None` for the partitioned symplectic Euler.
    pub fn tableau(&self) -> Option<ButcherTableau> {
        Kind::from_structure(&self.structure, &self.gps).ok().and_then(|(k, _)| k.tableau())
    }

    pub fn layout(&self) -> ParameterLayout {
        ParameterLayout::new(self.gps.iter().map(|g| (g.n_inducing(), g.input_dim())).collect())
    }

    pub fn param_len(&self) -> usize {
        self.gps.iter().map(|g| g.param_len()).sum()
    }

    /// Flattened parameters, GP blocks in order.
    pub fn params(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.param_len());
        let mut offset = 0;
        for g in &self.gps {
            let n = g.param_len();
            g.write_params(&mut out.as_mut_slice()[offset..offset + n]);
            offset += n;
        }
        out
    }

    pub fn set_params(&mut self, theta: &DVector<f64>) -> Result<()> {
        check_dim(self.param_len(), theta.len())?;
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter".into()));
        }
        let mut offset = 0;
        for g in &mut self.gps {
            let n = g.param_len();
            g.read_params(&theta.as_slice()[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    /// Summed KL of all GPs and its gradient.
    pub fn kl_with_gradient(&self) -> Result<(f64, DVector<f64>)> {
        let mut total = 0.0;
        let mut grad = DVector::zeros(self.param_len());
        let mut offset = 0;
        for g in &self.gps {
            let (kl, block) = g.kl_with_gradient()?;
            total += kl;
            grad.rows_mut(offset, block.len()).copy_from(&block);
            offset += block.len();
        }
        Ok((total, grad))
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, features: usize, rng: &mut R) -> Result<ModelNoise> {
        self.gps
            .iter()
            .map(|g| DrawNoise::sample(features, g.input_dim(), g.n_inducing(), rng))
            .collect::<Result<Vec<_>>>()
            .map(ModelNoise)
    }

    /// One frozen draw per constituent GP.
    pub fn sample_model<R: Rng + ?Sized>(&self, features: usize, rng: &mut R) -> Result<SampledModel> {
        let noise = self.sample_noise(features, rng)?;
        self.sample_with(&noise)
    }

    pub fn sample_with(&self, noise: &ModelNoise) -> Result<SampledModel> {
        check_dim(self.gps.len(), noise.0.len())?;
        let (kind, dim) = Kind::from_structure(&self.structure, &self.gps)?;
        let fns = self
            .gps
            .iter()
            .zip(&noise.0)
            .map(|(g, n)| g.sample_with(n))
            .collect::<Result<Vec<_>>>()?;
        let param_lens = self.gps.iter().map(|g| g.param_len()).collect();
        Ok(SampledModel {
            kind,
            fns,
            dim,
            step_size: self.step_size,
            solver: self.solver,
            param_lens,
        })
    }
}

fn grid_points(lower: &[f64], upper: &[f64], counts: &[usize]) -> Result<Vec<Vec<f64>>> {
    if lower.len() != upper.len() || lower.len() != counts.len() || counts.contains(&0) {
        return Err(Error::InvalidArgument("inconsistent grid specification".into()));
    }
    let axes: Vec<Vec<f64>> = (0..counts.len())
        .map(|k| {
            let n = counts[k];
            (0..n)
                .map(|i| {
                    if n == 1 {
                        0.5 * (lower[k] + upper[k])
                    } else {
                        lower[k] + (upper[k] - lower[k]) * i as f64 / (n - 1) as f64
                    }
                })
                .collect()
        })
        .collect();
    let mut points = vec![Vec::new()];
    for axis in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                axis.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push(*v);
                    q
                })
            })
            .collect();
    }
    Ok(points)
}

pub fn inducing_points<R: Rng + ?Sized>(init: &InducingInit, dim: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    let points = match init {
        InducingInit::Grid { lower, upper, counts } => grid_points(lower, upper, counts)?,
        InducingInit::Gaussian { means, stds, count } => {
            if means.len() != stds.len() {
                return Err(Error::InvalidArgument("means and stds differ in length".into()));
            }
            (0..*count)
                .map(|_| {
                    means
                        .iter()
                        .zip(stds)
                        .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect()
        }
        InducingInit::SphereGrid { lower, upper, counts } => grid_points(lower, upper, counts)?
            .into_iter()
            .map(|p| {
                let z = (1.0 - p[0] * p[0] - p[1] * p[1]).max(0.0).sqrt();
                vec![p[0], p[1], z]
            })
            .collect(),
        InducingInit::Points { points } => points.clone(),
    };
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::InvalidArgument(format!("inducing points must have dimension {dim}")));
    }
    Ok(DMatrix::from_fn(points.len(), dim, |i, k| points[i][k]))
}

pub fn init_gp<R: Rng + ?Sized>(init: &GpInit, jitter: f64, rng: &mut R) -> Result<SparseGp> {
    let kernel = ArdKernelParams::new(init.signal_variance, init.lengthscales_sq.clone())?;
    check_dim(init.input_dim, kernel.dim())?;
    let inducing = inducing_points(&init.inducing, init.input_dim, rng)?;
    let p = inducing.nrows();
    let mean = DVector::from_fn(p, |_, _| init.mean_std * rng.sample::<f64, _>(StandardNormal));
    SparseGp::new(inducing, mean, DVector::from_element(p, init.variance), kernel)?.with_jitter(jitter)
}

/// A frozen draw of a [`DynamicsModel`]; evaluable anywhere and differentiable.
#[derive(Debug, Clone)]
pub struct SampledModel {
    kind: Kind,
    fns: Vec<SampledFunction>,
    dim: usize,
    step_size: f64,
    solver: SolverSettings,
    param_lens: Vec<usize>,
}

/// Per-step data retained by a rollout for the reverse sweep.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub x: DVector<f64>,
    pub stages: Option<DVector<f64>>,
}

impl SampledModel {
    pub fn functions(&self) -> &[SampledFunction] {
        &self.fns
    }

    pub fn state_dim(&self) -> usize {
        self.dim
    }

    pub fn step_size(&self) -> f64 {
        self.step_size
    }

    pub fn is_separable(&self) -> bool {
        matches!(self.kind, Kind::Separable { .. })
    }

    pub fn tableau(&self) -> Option<ButcherTableau> {
        self.kind.tableau()
    }

    /// Same draw with another step size.
    pub fn with_step_size(&self, h: f64) -> Result<Self> {
        if !(h > 0.0) {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {h}")));
        }
        let mut m = self.clone();
        m.step_size = h;
        Ok(m)
    }

    /// Same draw under another tableau (for non-partitioned models).
    pub fn with_tableau(&self, tableau: ButcherTableau) -> Result<Self> {
        if self.is_separable() {
            return Err(Error::InvalidArgument("separable models use symplectic Euler".into()));
        }
        let mut m = self.clone();
        m.kind = match m.kind {
            Kind::Generic(_) => Kind::Generic(tableau),
            _ => {
                return Err(Error::InvalidArgument(
                    "only generic models can change their tableau".into(),
                ))
            }
        };
        Ok(m)
    }

    fn stepper(&self) -> Result<Stepper> {
        let tableau = self
            .kind
            .tableau()
            .ok_or_else(|| Error::InvalidArgument("partitioned model has no tableau".into()))?;
        Stepper::with_solver(tableau, self.step_size, self.solver)
    }

    fn column(fns: &[SampledFunction], x: &[f64]) -> Result<DVector<f64>> {
        fns.iter().map(|f| f.eval(x)).collect::<Result<Vec<_>>>().map(DVector::from_vec)
    }

    fn gradients(fns: &[SampledFunction], x: &[f64]) -> Result<DMatrix<f64>> {
        let rows = fns.iter().map(|f| f.gradient(x)).collect::<Result<Vec<_>>>()?;
        let d = x.len();
        Ok(DMatrix::from_fn(rows.len(), d, |i, k| rows[i][k]))
    }

    fn rigid_x3(x: &DVector<f64>) -> Result<f64> {
        let x3 = x[2];
        if !(x3.abs() >= X3_FLOOR) {
            return Err(Error::SingularConstraint { x3, floor: X3_FLOOR });
        }
        Ok(x3)
    }

    /// `V'(q)` for separable models.
    pub fn v_prime(&self, q: &DVector<f64>) -> Result<DVector<f64>> {
        match self.kind {
            Kind::Separable { half } => {
                check_dim(half, q.len())?;
                Self::column(&self.fns[..half], q.as_slice())
            }
            _ => Err(Error::InvalidArgument("not a separable model".into())),
        }
    }

    /// `T'(p)` for separable models.
    pub fn t_prime(&self, p: &DVector<f64>) -> Result<DVector<f64>> {
        match self.kind {
            Kind::Separable { half } => {
                check_dim(half, p.len())?;
                Self::column(&self.fns[half..], p.as_slice())
            }
            _ => Err(Error::InvalidArgument("not a separable model".into())),
        }
    }

    pub fn field_eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim, x.len())?;
        match &self.kind {
            Kind::Separable { half } => {
                let d = *half;
                let q: Vec<f64> = x.rows(d, d).iter().copied().collect();
                let p: Vec<f64> = x.rows(0, d).iter().copied().collect();
                let v = Self::column(&self.fns[..d], &q)?;
                let t = Self::column(&self.fns[d..], &p)?;
                Ok(DVector::from_fn(2 * d, |i, _| if i < d { -v[i] } else { t[i - d] }))
            }
            Kind::NonSeparable => Ok(apply_inverse_symplectic(&self.fns[0].gradient(x.as_slice())?)),
            Kind::RigidBody => {
                let x3 = Self::rigid_x3(x)?;
                let f1 = self.fns[0].eval(x.as_slice())?;
                let f2 = self.fns[1].eval(x.as_slice())?;
                Ok(DVector::from_vec(vec![f1, f2, -(f1 * x[0] + f2 * x[1]) / x3]))
            }
            Kind::Generic(_) => Self::column(&self.fns, x.as_slice()),
        }
    }

    /// Per-function prior terms at the inputs each function sees at state `x`.
    pub fn point_terms(&self, x: &DVector<f64>) -> Result<Vec<PointTerms>> {
        check_dim(self.dim, x.len())?;
        match &self.kind {
            Kind::Separable { half } => {
                let d = *half;
                let p = &x.as_slice()[..d];
                let q = &x.as_slice()[d..];
                self.fns
                    .iter()
                    .enumerate()
                    .map(|(i, f)| f.point_terms(if i < d { q } else { p }, false))
                    .collect()
            }
            Kind::NonSeparable => Ok(vec![self.fns[0].point_terms(x.as_slice(), true)?]),
            _ => self.fns.iter().map(|f| f.point_terms(x.as_slice(), false)).collect(),
        }
    }

    pub fn field_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let terms = self.point_terms(x)?;
        self.field_jacobian_with(x, &terms)
    }

    fn gradient_rows(&self, range: std::ops::Range<usize>, x: &[f64], terms: &[PointTerms]) -> Result<DMatrix<f64>> {
        let rows = range
            .map(|i| self.fns[i].derivatives_with(x, &terms[i]).map(|d| d.gradient))
            .collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(rows.len(), x.len(), |i, k| rows[i][k]))
    }

    pub fn field_jacobian_with(&self, x: &DVector<f64>, terms: &[PointTerms]) -> Result<DMatrix<f64>> {
        check_dim(self.dim, x.len())?;
        check_dim(self.fns.len(), terms.len())?;
        match &self.kind {
            Kind::Separable { half } => {
                let d = *half;
                let p = &x.as_slice()[..d];
                let q = &x.as_slice()[d..];
                let gv = self.gradient_rows(0..d, q, terms)?;
                let gt = self.gradient_rows(d..2 * d, p, terms)?;
                let mut jac = DMatrix::zeros(2 * d, 2 * d);
                jac.view_mut((0, d), (d, d)).copy_from(&(-gv));
                jac.view_mut((d, 0), (d, d)).copy_from(&gt);
                Ok(jac)
            }
            Kind::NonSeparable => {
                let hess = self.fns[0]
                    .derivatives_with(x.as_slice(), &terms[0])?
                    .hessian
                    .ok_or_else(|| Error::InvalidArgument("point terms lack the Hessian".into()))?;
                let n = hess.nrows();
                let d = n / 2;
                Ok(DMatrix::from_fn(n, n, |i, c| if i < d { -hess[(i + d, c)] } else { hess[(i - d, c)] }))
            }
            Kind::RigidBody => {
                let x3 = Self::rigid_x3(x)?;
                let d1 = self.fns[0].derivatives_with(x.as_slice(), &terms[0])?;
                let d2 = self.fns[1].derivatives_with(x.as_slice(), &terms[1])?;
                let (f1, g1, f2, g2) = (d1.value, d1.gradient, d2.value, d2.gradient);
                let mut jac = DMatrix::zeros(3, 3);
                for k in 0..3 {
                    jac[(0, k)] = g1[k];
                    jac[(1, k)] = g2[k];
                    jac[(2, k)] = -(x[0] * g1[k] + x[1] * g2[k]) / x3;
                }
                jac[(2, 0)] -= f1 / x3;
                jac[(2, 1)] -= f2 / x3;
                jac[(2, 2)] += (f1 * x[0] + f2 * x[1]) / (x3 * x3);
                Ok(jac)
            }
            Kind::Generic(_) => self.gradient_rows(0..self.fns.len(), x.as_slice(), terms),
        }
    }

    pub fn zero_adjoints(&self) -> Vec<SampleAdjoint> {
        self.fns.iter().map(|f| f.zero_adjoint()).collect()
    }

    /// Accumulate `λᵀ ∂F(x)/∂θ` into the per-function adjoints.
    pub fn field_param_vjp(&self, x: &DVector<f64>, lambda: &DVector<f64>, adj: &mut [SampleAdjoint]) -> Result<()> {
        let terms = self.point_terms(x)?;
        self.field_param_vjp_with(x, lambda, &terms, adj)
    }

    pub fn field_param_vjp_with(
        &self,
        x: &DVector<f64>,
        lambda: &DVector<f64>,
        terms: &[PointTerms],
        adj: &mut [SampleAdjoint],
    ) -> Result<()> {
        check_dim(self.dim, x.len())?;
        check_dim(self.dim, lambda.len())?;
        check_dim(self.fns.len(), terms.len())?;
        match &self.kind {
            Kind::Separable { half } => {
                let d = *half;
                let p = &x.as_slice()[..d];
                let q = &x.as_slice()[d..];
                for i in 0..d {
                    self.fns[i].accumulate_value_vjp_with(q, -lambda[i], &terms[i], &mut adj[i])?;
                    self.fns[d + i].accumulate_value_vjp_with(p, lambda[d + i], &terms[d + i], &mut adj[d + i])?;
                }
            }
            Kind::NonSeparable => {
                let d = self.dim / 2;
                let u: Vec<f64> = (0..self.dim).map(|i| if i < d { lambda[i + d] } else { -lambda[i - d] }).collect();
                self.fns[0].accumulate_gradient_vjp_with(x.as_slice(), &u, &terms[0], &mut adj[0])?;
            }
            Kind::RigidBody => {
                let x3 = Self::rigid_x3(x)?;
                let c1 = lambda[0] - lambda[2] * x[0] / x3;
                let c2 = lambda[1] - lambda[2] * x[1] / x3;
                self.fns[0].accumulate_value_vjp_with(x.as_slice(), c1, &terms[0], &mut adj[0])?;
                self.fns[1].accumulate_value_vjp_with(x.as_slice(), c2, &terms[1], &mut adj[1])?;
            }
            Kind::Generic(_) => {
                for (i, f) in self.fns.iter().enumerate() {
                    f.accumulate_value_vjp_with(x.as_slice(), lambda[i], &terms[i], &mut adj[i])?;
                }
            }
        }
        Ok(())
    }

    /// Gradient in the model's flattened layout from per-function adjoints.
    pub fn backprop(&self, adj: &[SampleAdjoint]) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.param_lens.iter().sum());
        let mut offset = 0;
        for ((f, a), &n) in self.fns.iter().zip(adj).zip(&self.param_lens) {
            if !a.is_zero() {
                out.rows_mut(offset, n).copy_from(&f.backprop(a)?);
            }
            offset += n;
        }
        Ok(out)
    }

    pub fn param_len(&self) -> usize {
        self.param_lens.iter().sum()
    }

    fn separable_step(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let Kind::Separable { half: d } = self.kind else { unreachable!() };
        let h = self.step_size;
        let p: DVector<f64> = x.rows(0, d).into();
        let q: DVector<f64> = x.rows(d, d).into();
        let (p1, q1) = crate::integrators::symplectic_euler_step(
            |q| self.v_prime(q),
            |p| self.t_prime(p),
            &p,
            &q,
            h,
        )?;
        let mut out = DVector::zeros(2 * d);
        out.rows_mut(0, d).copy_from(&p1);
        out.rows_mut(d, d).copy_from(&q1);
        Ok(out)
    }

    /// One model step, with stages for RK structures.
    pub fn step_with_stages(
        &self,
        x: &DVector<f64>,
        init: Option<&DVector<f64>>,
    ) -> Result<(DVector<f64>, Option<DVector<f64>>)> {
        check_dim(self.dim, x.len())?;
        if self.is_separable() {
            return Ok((self.separable_step(x)?, None));
        }
        let (x1, g) = rk_step_with_stages(&self.stepper()?, self, x, init)?;
        Ok((x1, Some(g)))
    }

    pub fn model_step(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.step_with_stages(x, None)?.0)
    }

    /// Rollout keeping the per-step records needed for gradients.
    pub fn rollout_records(&self, x0: &DVector<f64>, n_steps: usize) -> Result<(Trajectory, Vec<StepRecord>)> {
        check_dim(self.dim, x0.len())?;
        let mut rows = vec![x0.clone()];
        let mut records = Vec::with_capacity(n_steps);
        let mut last: Option<DVector<f64>> = None;
        for k in 0..n_steps {
            let init = if self.solver.warm_start { last.as_ref() } else { None };
            let (x1, g) = self.step_with_stages(&rows[k], init).map_err(|e| e.at_step(k))?;
            if x1.iter().any(|v| !v.is_finite()) {
                return Err(Error::Singularity("non-finite state".into()).at_step(k));
            }
            records.push(StepRecord {
                x: rows[k].clone(),
                stages: g.clone(),
            });
            last = g;
            rows.push(x1);
        }
        Ok((Trajectory::uniform(0.0, self.step_size, &rows)?, records))
    }

    pub fn rollout(&self, x0: &DVector<f64>, n_steps: usize) -> Result<Trajectory> {
        Ok(self.rollout_records(x0, n_steps)?.0)
    }

    /// Adaptive step-doubling rollout sampled onto `times`, with the model's tableau.
    pub fn rollout_adaptive(&self, x0: &DVector<f64>, times: &[f64], rtol: f64, atol: f64) -> Result<Trajectory> {
        let tableau = self
            .kind
            .tableau()
            .ok_or_else(|| Error::InvalidArgument("adaptive rollouts need an RK model".into()))?;
        integrate_adaptive_on_grid(&tableau, self, x0, times, rtol, atol)
    }

    /// Reverse-mode step: given `x̄_{n+1}`, returns `x̄_n` and accumulates parameter adjoints.
    pub fn step_vjp(
        &self,
        record: &StepRecord,
        x_next: &DVector<f64>,
        xbar_next: &DVector<f64>,
        adj: &mut Vec<SampleAdjoint>,
    ) -> Result<DVector<f64>> {
        match self.kind {
            Kind::Separable { half: d } => {
                let h = self.step_size;
                let x = &record.x;
                let q: Vec<f64> = x.rows(d, d).iter().copied().collect();
                let p1: Vec<f64> = x_next.rows(0, d).iter().copied().collect();
                let mut pbar: DVector<f64> = xbar_next.rows(0, d).into();
                let qbar_next: DVector<f64> = xbar_next.rows(d, d).into();
                let mut qbar = qbar_next.clone();
                for i in 0..d {
                    let c = h * qbar_next[i];
                    if c != 0.0 {
                        let f = &self.fns[d + i];
                        let t = f.point_terms(&p1, false)?;
                        f.accumulate_value_vjp_with(&p1, c, &t, &mut adj[d + i])?;
                        pbar += f.derivatives_with(&p1, &t)?.gradient * c;
                    }
                }
                for i in 0..d {
                    let c = -h * pbar[i];
                    if c != 0.0 {
                        let f = &self.fns[i];
                        let t = f.point_terms(&q, false)?;
                        f.accumulate_value_vjp_with(&q, c, &t, &mut adj[i])?;
                        qbar += f.derivatives_with(&q, &t)?.gradient * c;
                    }
                }
                let mut out = DVector::zeros(2 * d);
                out.rows_mut(0, d).copy_from(&pbar);
                out.rows_mut(d, d).copy_from(&qbar);
                Ok(out)
            }
            _ => {
                let stages = record
                    .stages
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument("missing stages for RK step".into()))?;
                let stepper = self.stepper()?;
                rk_step_vjp(self, &stepper.tableau, stepper.step_size, &record.x, stages, xbar_next, adj)
            }
        }
    }

    /// `∂x_{n+1}/∂x_n` from the analytic field Jacobians (IFT for implicit stages).
    pub fn step_jacobian_analytic(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim, x.len())?;
        match self.kind {
            Kind::Separable { half: d } => {
                let h = self.step_size;
                let x1 = self.separable_step(x)?;
                let q: Vec<f64> = x.rows(d, d).iter().copied().collect();
                let p1: Vec<f64> = x1.rows(0, d).iter().copied().collect();
                let jv = Self::gradients(&self.fns[..d], &q)?;
                let jt = Self::gradients(&self.fns[d..], &p1)?;
                let mut jac = DMatrix::identity(2 * d, 2 * d);
                jac.view_mut((0, d), (d, d)).copy_from(&(-h * &jv));
                jac.view_mut((d, 0), (d, d)).copy_from(&(h * &jt));
                let lower = DMatrix::identity(d, d) - (h * h) * &jt * &jv;
                jac.view_mut((d, d), (d, d)).copy_from(&lower);
                Ok(jac)
            }
            _ => {
                let stepper = self.stepper()?;
                let (_, g) = rk_step_with_stages(&stepper, self, x, None)?;
                rk_step_jacobian(self, &stepper.tableau, stepper.step_size, x, &g)
            }
        }
    }

    /// `∂x_{n+1}/∂x_n` by central differences of re-solved steps.
    pub fn step_jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        step_jacobian_of(|y| self.model_step(y), x)
    }
}

impl VectorField for SampledModel {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.field_eval(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.field_jacobian(x)
    }
}

impl DifferentiableField for SampledModel {
    type Adjoint = Vec<SampleAdjoint>;
    type PointCache = Vec<PointTerms>;

    fn param_len(&self) -> usize {
        SampledModel::param_len(self)
    }
    fn zero_adjoint(&self) -> Self::Adjoint {
        self.zero_adjoints()
    }
    fn point_cache(&self, x: &DVector<f64>) -> Result<Self::PointCache> {
        self.point_terms(x)
    }
    fn jacobian_at(&self, x: &DVector<f64>, cache: &Self::PointCache) -> Result<DMatrix<f64>> {
        self.field_jacobian_with(x, cache)
    }
    fn accumulate_param_vjp_at(
        &self,
        x: &DVector<f64>,
        lambda: &DVector<f64>,
        cache: &Self::PointCache,
        adj: &mut Self::Adjoint,
    ) -> Result<()> {
        self.field_param_vjp_with(x, lambda, cache, adj)
    }
    fn finish_adjoint(&self, adj: &Self::Adjoint) -> Result<DVector<f64>> {
        self.backprop(adj)
    }
}

#[cfg(test)]
pub(crate) mod tests;
