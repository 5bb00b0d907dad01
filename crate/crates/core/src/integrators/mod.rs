//! Runge-Kutta stepping over vector fields.

mod solver;
mod tableau;

pub use solver::{levenberg_marquardt, SolveReport, SolverSettings};
pub use tableau::ButcherTableau;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::trajectory::Trajectory;

/// A map `x ↦ ẋ` on `R^d`.
pub trait VectorField {
    fn dim(&self) -> usize;

    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>>;

    /// Forward differences unless overridden with an analytic Jacobian.
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        forward_difference_jacobian(|y| self.eval(y), x)
    }
}

impl<F: VectorField + ?Sized> VectorField for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        (**self).eval(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        (**self).jacobian(x)
    }
}

pub(crate) fn forward_difference_jacobian<F>(f: F, x: &DVector<f64>) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let f0 = f(x)?;
    let mut jac = DMatrix::zeros(f0.len(), x.len());
    for i in 0..x.len() {
        let eps = 1e-7 * (1.0 + x[i].abs());
        let mut xp = x.clone();
        xp[i] += eps;
        jac.set_column(i, &((f(&xp)? - &f0) / eps));
    }
    Ok(jac)
}

/// Closure-backed field, optionally with an analytic Jacobian.
pub struct FnField<F, J = fn(&DVector<f64>) -> DMatrix<f64>> {
    dim: usize,
    f: F,
    jac: Option<J>,
}

impl<F> FnField<F>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f, jac: None }
    }
}

impl<F, J> FnField<F, J>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    pub fn with_jacobian(dim: usize, f: F, jac: J) -> Self {
        Self { dim, f, jac: Some(jac) }
    }
}

impl<F, J> VectorField for FnField<F, J>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    J: Fn(&DVector<f64>) -> DMatrix<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim, x.len())?;
        Ok((self.f)(x))
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim, x.len())?;
        match &self.jac {
            Some(j) => Ok(j(x)),
            None => forward_difference_jacobian(|y| Ok((self.f)(y)), x),
        }
    }
}

/// `f(x) = M x`.
#[derive(Debug, Clone)]
pub struct LinearField(pub DMatrix<f64>);

impl VectorField for LinearField {
    fn dim(&self) -> usize {
        self.0.nrows()
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        Ok(&self.0 * x)
    }
    fn jacobian(&self, _x: &DVector<f64>) -> Result<DMatrix<f64>> {
        Ok(self.0.clone())
    }
}

/// Apply `J⁻¹ = [[0, −I], [I, 0]]` to a vector laid out as `(p, q)`.
pub fn apply_inverse_symplectic(v: &DVector<f64>) -> DVector<f64> {
    let d = v.len() / 2;
    DVector::from_fn(v.len(), |i, _| if i < d { -v[i + d] } else { v[i - d] })
}

/// Hamiltonian field `J⁻¹ ∇H` built from a gradient field `∇H`.
pub struct HamiltonianField<G> {
    pub grad_h: G,
}

impl<G: VectorField> VectorField for HamiltonianField<G> {
    fn dim(&self) -> usize {
        self.grad_h.dim()
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(apply_inverse_symplectic(&self.grad_h.eval(x)?))
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let hess = self.grad_h.jacobian(x)?;
        let d = hess.nrows() / 2;
        let mut out = DMatrix::zeros(hess.nrows(), hess.ncols());
        for c in 0..hess.ncols() {
            for i in 0..d {
                out[(i, c)] = -hess[(i + d, c)];
                out[(i + d, c)] = hess[(i, c)];
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stepper {
    pub tableau: ButcherTableau,
    pub step_size: f64,
    pub solver: SolverSettings,
}

impl Stepper {
    pub fn new(tableau: ButcherTableau, step_size: f64) -> Result<Self> {
        Self::with_solver(tableau, step_size, SolverSettings::default())
    }

    pub fn with_solver(tableau: ButcherTableau, step_size: f64, solver: SolverSettings) -> Result<Self> {
        if !(step_size > 0.0) || !step_size.is_finite() {
            return Err(Error::InvalidArgument(format!("step size must be positive, got {step_size}")));
        }
        solver.validate()?;
        Ok(Self {
            tableau,
            step_size,
            solver,
        })
    }

    pub fn with_step_size(&self, step_size: f64) -> Result<Self> {
        Self::with_solver(self.tableau.clone(), step_size, self.solver)
    }
}

/// Stage abscissae `U_j = x_n + h Σ_l a_jl g_l`.
pub fn stage_points(tableau: &ButcherTableau, h: f64, x_n: &DVector<f64>, g: &DVector<f64>) -> Vec<DVector<f64>> {
    let s = tableau.stages();
    let d = x_n.len();
    (0..s)
        .map(|j| {
            let mut u = x_n.clone();
            for l in 0..s {
                let a = tableau.a(j, l);
                if a != 0.0 {
                    u += h * a * g.rows(l * d, d);
                }
            }
            u
        })
        .collect()
}

fn stage_residual<F: VectorField + ?Sized>(
    tableau: &ButcherTableau,
    h: f64,
    field: &F,
    x_n: &DVector<f64>,
    g: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d = x_n.len();
    let mut r = g.clone();
    for (j, u) in stage_points(tableau, h, x_n, g).iter().enumerate() {
        let f = field.eval(u)?;
        let mut block = r.rows_mut(j * d, d);
        block -= f;
    }
    Ok(r)
}

/// `∂R/∂g = I − blockdiag(J_f(U_j)) (A ⊗ I) h`.
pub(crate) fn stage_residual_jacobian(
    tableau: &ButcherTableau,
    h: f64,
    jacobians: &[DMatrix<f64>],
) -> DMatrix<f64> {
    let s = tableau.stages();
    let d = jacobians.first().map_or(0, |j| j.nrows());
    let mut m = DMatrix::identity(s * d, s * d);
    for j in 0..s {
        for l in 0..s {
            let a = tableau.a(j, l);
            if a != 0.0 {
                let mut block = m.view_mut((j * d, l * d), (d, d));
                block -= &jacobians[j] * (h * a);
            }
        }
    }
    m
}

fn check_field<F: VectorField + ?Sized>(field: &F, x: &DVector<f64>) -> Result<()> {
    check_dim(field.dim(), x.len())
}

fn explicit_stages<F: VectorField + ?Sized>(
    tableau: &ButcherTableau,
    h: f64,
    field: &F,
    x_n: &DVector<f64>,
) -> Result<DVector<f64>> {
    let s = tableau.stages();
    let d = x_n.len();
    let mut g = DVector::zeros(s * d);
    for j in 0..s {
        let mut u = x_n.clone();
        for l in 0..j {
            let a = tableau.a(j, l);
            if a != 0.0 {
                u += h * a * g.rows(l * d, d);
            }
        }
        let f = field.eval(&u)?;
        g.rows_mut(j * d, d).copy_from(&f);
    }
    Ok(g)
}

fn least_squares_stages<F: VectorField + ?Sized>(
    stepper: &Stepper,
    field: &F,
    x_n: &DVector<f64>,
    init: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    let tableau = &stepper.tableau;
    let h = stepper.step_size;
    let s = tableau.stages();
    let d = x_n.len();
    let start = match init {
        Some(g0) if g0.len() == s * d => g0.clone(),
        _ => {
            let f0 = field.eval(x_n)?;
            DVector::from_fn(s * d, |i, _| f0[i % d])
        }
    };
    let residual = |g: &DVector<f64>| stage_residual(tableau, h, field, x_n, g);
    let jacobian = |g: &DVector<f64>| {
        let jacs = stage_points(tableau, h, x_n, g)
            .iter()
            .map(|u| field.jacobian(u))
            .collect::<Result<Vec<_>>>()?;
        Ok(stage_residual_jacobian(tableau, h, &jacs))
    };
    let (g, _) = levenberg_marquardt(residual, jacobian, start, &stepper.solver)?;
    Ok(g)
}

/// Internal stages `g*`, stacked stage by stage.
pub fn solve_stages<F: VectorField + ?Sized>(stepper: &Stepper, field: &F, x_n: &DVector<f64>) -> Result<DVector<f64>> {
    solve_stages_from(stepper, field, x_n, None)
}

/// Like [`solve_stages`], starting an implicit solve from `init` when given.
pub fn solve_stages_from<F: VectorField + ?Sized>(
    stepper: &Stepper,
    field: &F,
    x_n: &DVector<f64>,
    init: Option<&DVector<f64>>,
) -> Result<DVector<f64>> {
    check_field(field, x_n)?;
    if stepper.tableau.is_explicit() {
        explicit_stages(&stepper.tableau, stepper.step_size, field, x_n)
    } else {
        least_squares_stages(stepper, field, x_n, init)
    }
}

/// Stages through the least-squares solver even for explicit tableaux.
pub fn solve_stages_least_squares<F: VectorField + ?Sized>(
    stepper: &Stepper,
    field: &F,
    x_n: &DVector<f64>,
) -> Result<DVector<f64>> {
    check_field(field, x_n)?;
    least_squares_stages(stepper, field, x_n, None)
}

/// `x_n + h Σ b_j g_j`.
pub fn combine_stages(tableau: &ButcherTableau, h: f64, x_n: &DVector<f64>, g: &DVector<f64>) -> DVector<f64> {
    let d = x_n.len();
    let mut x = x_n.clone();
    for (j, b) in tableau.weights().iter().enumerate() {
        x += h * b * g.rows(j * d, d);
    }
    x
}

pub fn rk_step<F: VectorField + ?Sized>(stepper: &Stepper, field: &F, x_n: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(rk_step_with_stages(stepper, field, x_n, None)?.0)
}

/// One step returning the solved stages too.
pub fn rk_step_with_stages<F: VectorField + ?Sized>(
    stepper: &Stepper,
    field: &F,
    x_n: &DVector<f64>,
    init: Option<&DVector<f64>>,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let g = solve_stages_from(stepper, field, x_n, init)?;
    Ok((combine_stages(&stepper.tableau, stepper.step_size, x_n, &g), g))
}

/// `p' = p − h V'(q)`, then `q' = q + h T'(p')`.
pub fn symplectic_euler_step<V, T>(
    v_prime: V,
    t_prime: T,
    p_n: &DVector<f64>,
    q_n: &DVector<f64>,
    h: f64,
) -> Result<(DVector<f64>, DVector<f64>)>
where
    V: Fn(&DVector<f64>) -> Result<DVector<f64>>,
    T: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    check_dim(p_n.len(), q_n.len())?;
    let p = p_n - h * v_prime(q_n)?;
    let q = q_n + h * t_prime(&p)?;
    Ok((p, q))
}

/// Implicit midpoint on `ẋ = J⁻¹ ∇H(x)` with `x = (p, q)`.
pub fn implicit_midpoint_hamiltonian_step<G: VectorField>(
    grad_h: G,
    x_n: &DVector<f64>,
    h: f64,
    solver: &SolverSettings,
) -> Result<DVector<f64>> {
    if x_n.len() % 2 != 0 {
        return Err(Error::InvalidArgument("Hamiltonian state dimension must be even".into()));
    }
    let stepper = Stepper::with_solver(ButcherTableau::implicit_midpoint(), h, *solver)?;
    rk_step(&stepper, &HamiltonianField { grad_h }, x_n)
}

/// Fixed-step rollout on the grid `t_k = k h`.
pub fn integrate<F: VectorField + ?Sized>(
    stepper: &Stepper,
    field: &F,
    x_0: &DVector<f64>,
    n_steps: usize,
) -> Result<Trajectory> {
    check_field(field, x_0)?;
    let mut rows = Vec::with_capacity(n_steps + 1);
    rows.push(x_0.clone());
    let mut stages: Option<DVector<f64>> = None;
    for k in 0..n_steps {
        let init = if stepper.solver.warm_start { stages.as_ref() } else { None };
        let (x, g) = rk_step_with_stages(stepper, field, &rows[k], init).map_err(|e| e.at_step(k))?;
        stages = Some(g);
        rows.push(x);
    }
    Trajectory::uniform(0.0, stepper.step_size, &rows)
}

const MIN_STEP: f64 = 1e-12;

/// Step-doubling controller state shared by the adaptive drivers.
struct Doubling<'a, F: ?Sized> {
    tableau: &'a ButcherTableau,
    field: &'a F,
    solver: SolverSettings,
    rtol: f64,
    atol: f64,
}

impl<F: VectorField + ?Sized> Doubling<'_, F> {
    fn step(&self, x: &DVector<f64>, h: f64) -> Result<DVector<f64>> {
        let stepper = Stepper::with_solver(self.tableau.clone(), h, self.solver)?;
        rk_step(&stepper, self.field, x)
    }

    /// Attempt one step of size `h`; returns the new state and error norm.
    fn attempt(&self, x: &DVector<f64>, h: f64) -> Result<(DVector<f64>, f64)> {
        let full = self.step(x, h)?;
        let half = self.step(x, 0.5 * h)?;
        let two = self.step(&half, 0.5 * h)?;
        let p = self.tableau.order() as i32;
        let err = (&two - &full) / (2f64.powi(p) - 1.0);
        let mut norm: f64 = 0.0;
        for i in 0..x.len() {
            let scale = self.atol + self.rtol * x[i].abs().max(two[i].abs());
            norm = norm.max(err[i].abs() / scale);
        }
        if !norm.is_finite() {
            return Err(Error::NonConvergence {
                residual: norm,
                iterations: 0,
            });
        }
        Ok((two + err, norm))
    }

    fn factor(&self, norm: f64) -> f64 {
        let p = self.tableau.order() as f64;
        if norm == 0.0 {
            5.0
        } else {
            (0.9 * norm.powf(-1.0 / (p + 1.0))).clamp(0.2, 5.0)
        }
    }

    /// Advance from `t0` to exactly `t1`; `h` carries the controller's step across calls.
    fn advance(
        &self,
        x0: &DVector<f64>,
        t0: f64,
        t1: f64,
        h: &mut f64,
        mut record: impl FnMut(f64, &DVector<f64>),
    ) -> Result<DVector<f64>> {
        let mut t = t0;
        let mut x = x0.clone();
        let span = t1 - t0;
        while t1 - t > 1e-14 * span.abs().max(1.0) {
            let remaining = t1 - t;
            let last = *h >= remaining;
            let step = if last { remaining } else { *h };
            if step < MIN_STEP {
                return Err(Error::StepSizeUnderflow { t, h: step });
            }
            match self.attempt(&x, step) {
                Ok((x_new, norm)) if norm <= 1.0 => {
                    t = if last { t1 } else { t + step };
                    x = x_new;
                    record(t, &x);
                    let next = step * self.factor(norm);
                    *h = if last && step < *h { h.max(next) } else { next };
                }
                Ok((_, norm)) => *h = step * self.factor(norm),
                Err(e) if e.is_solver_failure() => *h = step * 0.25,
                Err(e) => return Err(e),
            }
            if *h < MIN_STEP {
                return Err(Error::StepSizeUnderflow { t, h: *h });
            }
        }
        Ok(x)
    }
}

fn check_tolerances(rtol: f64, atol: f64) -> Result<()> {
    if !(rtol > 0.0) || !(atol > 0.0) {
        return Err(Error::InvalidArgument(format!("tolerances must be positive (rtol {rtol}, atol {atol})")));
    }
    Ok(())
}

/// Adaptive integration over `t_span` by step doubling; returns every accepted step.
pub fn integrate_adaptive<F: VectorField + ?Sized>(
    tableau: &ButcherTableau,
    field: &F,
    x_0: &DVector<f64>,
    t_span: (f64, f64),
    rtol: f64,
    atol: f64,
) -> Result<Trajectory> {
    check_field(field, x_0)?;
    check_tolerances(rtol, atol)?;
    let (t0, t1) = t_span;
    if !(t1 >= t0) {
        return Err(Error::InvalidArgument("t_span must be increasing".into()));
    }
    let ctl = Doubling {
        tableau,
        field,
        solver: SolverSettings::default(),
        rtol,
        atol,
    };
    let mut times = vec![t0];
    let mut rows = vec![x_0.clone()];
    let mut h = ((t1 - t0) / 100.0).max(MIN_STEP);
    ctl.advance(x_0, t0, t1, &mut h, |t, x| {
        times.push(t);
        rows.push(x.clone());
    })?;
    Trajectory::from_rows(times, &rows)
}

/// Adaptive integration sampled onto `times`, integrating gap by gap.
pub fn integrate_adaptive_on_grid<F: VectorField + ?Sized>(
    tableau: &ButcherTableau,
    field: &F,
    x_0: &DVector<f64>,
    times: &[f64],
    rtol: f64,
    atol: f64,
) -> Result<Trajectory> {
    check_field(field, x_0)?;
    check_tolerances(rtol, atol)?;
    let ctl = Doubling {
        tableau,
        field,
        solver: SolverSettings::default(),
        rtol,
        atol,
    };
    let mut rows = vec![x_0.clone()];
    let mut h = times
        .windows(2)
        .next()
        .map_or(MIN_STEP, |w| ((w[1] - w[0]) / 10.0).max(MIN_STEP));
    for (k, w) in times.windows(2).enumerate() {
        let x = ctl
            .advance(&rows[k], w[0], w[1], &mut h, |_, _| {})
            .map_err(|e| e.at_step(k))?;
        rows.push(x);
    }
    Trajectory::from_rows(times.to_vec(), &rows)
}

/// Central-difference Jacobian of a one-step map, `ε_i = 1e-5 (1 + |x_i|)`.
pub fn step_jacobian_of<S>(step: S, x_n: &DVector<f64>) -> Result<DMatrix<f64>>
where
    S: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let d = x_n.len();
    let mut jac = DMatrix::zeros(d, d);
    for i in 0..d {
        let eps = 1e-5 * (1.0 + x_n[i].abs());
        let mut xp = x_n.clone();
        let mut xm = x_n.clone();
        xp[i] += eps;
        xm[i] -= eps;
        let col = (step(&xp)? - step(&xm)?) / (2.0 * eps);
        if col.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: col.len() });
        }
        jac.set_column(i, &col);
    }
    Ok(jac)
}

/// `∂x_{n+1}/∂x_n` of an RK step by central differences.
pub fn step_jacobian<F: VectorField + ?Sized>(stepper: &Stepper, field: &F, x_n: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_field(field, x_n)?;
    step_jacobian_of(|x| rk_step(stepper, field, x), x_n)
}

#[cfg(test)]
mod tests;
