//! Reverse-mode gradients of rollouts through explicit, implicit and partitioned steps.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::integrators::{stage_points, stage_residual_jacobian, ButcherTableau, VectorField};
use crate::models::SampledModel;
use crate::trajectory::Trajectory;

/// A vector field whose parameters admit vector-Jacobian products.
pub trait DifferentiableField: VectorField {
    type Adjoint;
    /// Work shared by the state Jacobian and the parameter VJP at one point.
    type PointCache;

    fn param_len(&self) -> usize;
    fn zero_adjoint(&self) -> Self::Adjoint;
    fn point_cache(&self, x: &DVector<f64>) -> Result<Self::PointCache>;
    fn jacobian_at(&self, x: &DVector<f64>, cache: &Self::PointCache) -> Result<DMatrix<f64>>;
    /// Adds `λᵀ ∂F(x)/∂θ` into `adj`.
    fn accumulate_param_vjp_at(
        &self,
        x: &DVector<f64>,
        lambda: &DVector<f64>,
        cache: &Self::PointCache,
        adj: &mut Self::Adjoint,
    ) -> Result<()>;
    fn accumulate_param_vjp(&self, x: &DVector<f64>, lambda: &DVector<f64>, adj: &mut Self::Adjoint) -> Result<()> {
        let cache = self.point_cache(x)?;
        self.accumulate_param_vjp_at(x, lambda, &cache, adj)
    }
    /// Flattened parameter gradient of an accumulated adjoint.
    fn finish_adjoint(&self, adj: &Self::Adjoint) -> Result<DVector<f64>>;
}

/// Position of one GP's parameters in the flattened vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpBlock {
    pub offset: usize,
    pub n_inducing: usize,
    pub input_dim: usize,
}

impl GpBlock {
    pub fn len(&self) -> usize {
        self.n_inducing * (self.input_dim + 2) + 1 + self.input_dim
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Inducing inputs, row-major.
    pub fn inducing(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.n_inducing * self.input_dim
    }

    pub fn mean(&self) -> std::ops::Range<usize> {
        let s = self.inducing().end;
        s..s + self.n_inducing
    }

    pub fn log_variance(&self) -> std::ops::Range<usize> {
        let s = self.mean().end;
        s..s + self.n_inducing
    }

    pub fn log_signal_variance(&self) -> usize {
        self.log_variance().end
    }

    pub fn log_lengthscales_sq(&self) -> std::ops::Range<usize> {
        let s = self.log_signal_variance() + 1;
        s..s + self.input_dim
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterLayout {
    blocks: Vec<GpBlock>,
}

impl ParameterLayout {
    /// From `(n_inducing, input_dim)` per GP.
    pub fn new(shapes: Vec<(usize, usize)>) -> Self {
        let mut offset = 0;
        let blocks = shapes
            .into_iter()
            .map(|(n_inducing, input_dim)| {
                let b = GpBlock {
                    offset,
                    n_inducing,
                    input_dim,
                };
                offset += b.len();
                b
            })
            .collect();
        Self { blocks }
    }

    pub fn blocks(&self) -> &[GpBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Stage derivatives `∂g*/∂x_n` (sd × d) and `∂g*/∂θ` (sd × |θ|).
#[derive(Debug, Clone)]
pub struct StageSensitivities {
    pub dg_dx: DMatrix<f64>,
    pub dg_dtheta: DMatrix<f64>,
}

fn stage_jacobians<F: VectorField + ?Sized>(field: &F, points: &[DVector<f64>]) -> Result<Vec<DMatrix<f64>>> {
    points.iter().map(|u| field.jacobian(u)).collect()
}

/// Rows of `∂F(U_j)/∂θ`, stacked stage by stage.
fn param_jacobian<F: DifferentiableField + ?Sized>(field: &F, points: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let d = field.dim();
    let n = field.param_len();
    let mut out = DMatrix::zeros(points.len() * d, n);
    for (j, u) in points.iter().enumerate() {
        for i in 0..d {
            let mut adj = field.zero_adjoint();
            let mut e = DVector::zeros(d);
            e[i] = 1.0;
            field.accumulate_param_vjp(u, &e, &mut adj)?;
            out.set_row(j * d + i, &field.finish_adjoint(&adj)?.transpose());
        }
    }
    Ok(out)
}

fn stack(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d = blocks.first().map_or(0, |b| b.nrows());
    let c = blocks.first().map_or(0, |b| b.ncols());
    let mut out = DMatrix::zeros(blocks.len() * d, c);
    for (j, b) in blocks.iter().enumerate() {
        out.view_mut((j * d, 0), (d, c)).copy_from(b);
    }
    out
}

fn solve_root_system(m: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    m.lu().solve(rhs).ok_or_else(|| Error::SingularSystem {
        context: "stage residual Jacobian".into(),
    })
}

/// Implicit-function sensitivities of the stage root `R(g) = g − F(U(g))`.
pub fn ift_stage_sensitivities<F: DifferentiableField + ?Sized>(
    field: &F,
    tableau: &ButcherTableau,
    h: f64,
    x_n: &DVector<f64>,
    g: &DVector<f64>,
) -> Result<StageSensitivities> {
    check_dim(field.dim(), x_n.len())?;
    check_dim(tableau.stages() * x_n.len(), g.len())?;
    let points = stage_points(tableau, h, x_n, g);
    let jacs = stage_jacobians(field, &points)?;
    let m = stage_residual_jacobian(tableau, h, &jacs);
    let mut rhs = stack(&jacs);
    let ptheta = param_jacobian(field, &points)?;
    let nx = rhs.ncols();
    rhs = DMatrix::from_fn(rhs.nrows(), nx + ptheta.ncols(), |r, c| {
        if c < nx {
            rhs[(r, c)]
        } else {
            ptheta[(r, c - nx)]
        }
    });
    let sol = solve_root_system(m, &rhs)?;
    Ok(StageSensitivities {
        dg_dx: sol.columns(0, nx).into(),
        dg_dtheta: sol.columns(nx, ptheta.ncols()).into(),
    })
}

/// Forward chain-rule recursion through an explicit tableau.
pub fn explicit_stage_sensitivities<F: DifferentiableField + ?Sized>(
    field: &F,
    tableau: &ButcherTableau,
    h: f64,
    x_n: &DVector<f64>,
    g: &DVector<f64>,
) -> Result<StageSensitivities> {
    if !tableau.is_explicit() {
        return Err(Error::InvalidArgument(format!("tableau '{}' is not explicit", tableau.name())));
    }
    let d = x_n.len();
    let s = tableau.stages();
    check_dim(field.dim(), d)?;
    check_dim(s * d, g.len())?;
    let points = stage_points(tableau, h, x_n, g);
    let jacs = stage_jacobians(field, &points)?;
    let ptheta = param_jacobian(field, &points)?;
    let n = ptheta.ncols();
    let mut dg_dx = DMatrix::zeros(s * d, d);
    let mut dg_dtheta = DMatrix::zeros(s * d, n);
    for j in 0..s {
        let mut du_dx = DMatrix::identity(d, d);
        let mut du_dtheta = DMatrix::zeros(d, n);
        for l in 0..j {
            let a = tableau.a(j, l);
            if a != 0.0 {
                du_dx += h * a * dg_dx.rows(l * d, d);
                du_dtheta += h * a * dg_dtheta.rows(l * d, d);
            }
        }
        dg_dx.rows_mut(j * d, d).copy_from(&(&jacs[j] * du_dx));
        let row = ptheta.rows(j * d, d) + &jacs[j] * du_dtheta;
        dg_dtheta.rows_mut(j * d, d).copy_from(&row);
    }
    Ok(StageSensitivities { dg_dx, dg_dtheta })
}

/// `∂x_{n+1}/∂x_n = I + h Σ_j b_j ∂g_j/∂x_n` with IFT stage derivatives.
pub fn rk_step_jacobian<F: VectorField + ?Sized>(
    field: &F,
    tableau: &ButcherTableau,
    h: f64,
    x_n: &DVector<f64>,
    g: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let d = x_n.len();
    check_dim(field.dim(), d)?;
    check_dim(tableau.stages() * d, g.len())?;
    let jacs = stage_jacobians(field, &stage_points(tableau, h, x_n, g))?;
    let m = stage_residual_jacobian(tableau, h, &jacs);
    let dg = solve_root_system(m, &stack(&jacs))?;
    let mut out = DMatrix::identity(d, d);
    for (j, b) in tableau.weights().iter().enumerate() {
        out += h * b * dg.rows(j * d, d);
    }
    Ok(out)
}

/// Adjoint of one RK step: returns `x̄_n` and adds the parameter VJP into `adj`.
pub fn rk_step_vjp<F: DifferentiableField + ?Sized>(
    field: &F,
    tableau: &ButcherTableau,
    h: f64,
    x_n: &DVector<f64>,
    g: &DVector<f64>,
    xbar_next: &DVector<f64>,
    adj: &mut F::Adjoint,
) -> Result<DVector<f64>> {
    let d = x_n.len();
    let s = tableau.stages();
    check_dim(field.dim(), d)?;
    check_dim(s * d, g.len())?;
    check_dim(d, xbar_next.len())?;
    let points = stage_points(tableau, h, x_n, g);
    let caches = points.iter().map(|u| field.point_cache(u)).collect::<Result<Vec<_>>>()?;
    let jacs = points
        .iter()
        .zip(&caches)
        .map(|(u, c)| field.jacobian_at(u, c))
        .collect::<Result<Vec<_>>>()?;
    let mut gbar = DVector::zeros(s * d);
    for (j, b) in tableau.weights().iter().enumerate() {
        gbar.rows_mut(j * d, d).copy_from(&(xbar_next * (h * b)));
    }
    let lambda = if tableau.is_explicit() && s == 1 {
        gbar
    } else {
        stage_residual_jacobian(tableau, h, &jacs)
            .transpose()
            .lu()
            .solve(&gbar)
            .ok_or_else(|| Error::SingularSystem {
                context: "transposed stage residual Jacobian".into(),
            })?
    };
    let mut xbar = xbar_next.clone();
    for j in 0..s {
        let lj: DVector<f64> = lambda.rows(j * d, d).into();
        xbar += jacs[j].transpose() * &lj;
        field.accumulate_param_vjp_at(&points[j], &lj, &caches[j], adj)?;
    }
    Ok(xbar)
}

/// Loss value and gradients of a rollout.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub loss: f64,
    pub params: DVector<f64>,
    pub initial_state: DVector<f64>,
    pub trajectory: Trajectory,
}

/// Roll out `n_steps` and back-propagate `loss`, which returns its value and `∂L/∂x_k` per state.
pub fn rollout_gradient<L>(model: &SampledModel, x0: &DVector<f64>, n_steps: usize, loss: L) -> Result<GradientReport>
where
    L: FnOnce(&Trajectory) -> Result<(f64, Vec<DVector<f64>>)>,
{
    let (trajectory, records) = model.rollout_records(x0, n_steps)?;
    let (value, cotangents) = loss(&trajectory)?;
    check_dim(n_steps + 1, cotangents.len())?;
    let mut adj = model.zero_adjoints();
    let mut xbar = cotangents[n_steps].clone();
    for k in (0..n_steps).rev() {
        let x_next: DVector<f64> = trajectory.state(k + 1);
        xbar = model
            .step_vjp(&records[k], &x_next, &xbar, &mut adj)
            .map_err(|e| e.at_step(k))?;
        xbar += &cotangents[k];
    }
    Ok(GradientReport {
        loss: value,
        params: model.backprop(&adj)?,
        initial_state: xbar,
        trajectory,
    })
}

/// Worst disagreement between an analytic gradient and central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
}

/// Compare `analytic` with central differences of `f`, relative errors floored at `|g| ≥ 1`.
pub fn check_gradient<F>(f: F, theta: &DVector<f64>, analytic: &DVector<f64>, eps: f64) -> Result<GradientCheck>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    check_dim(theta.len(), analytic.len())?;
    let mut out = GradientCheck {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
    };
    for i in 0..theta.len() {
        let mut tp = theta.clone();
        let mut tm = theta.clone();
        tp[i] += eps;
        tm[i] -= eps;
        let fd = (f(&tp)? - f(&tm)?) / (2.0 * eps);
        let err = (fd - analytic[i]).abs();
        out.max_abs_error = out.max_abs_error.max(err);
        out.max_rel_error = out.max_rel_error.max(err / fd.abs().max(1.0));
    }
    Ok(out)
}
