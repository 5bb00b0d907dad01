use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Settings of the Levenberg-Marquardt stage solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub residual_tolerance: f64,
    pub max_iterations: usize,
    pub damping_init: f64,
    pub warm_start: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            residual_tolerance: 1e-10,
            max_iterations: 100,
            damping_init: 1e-3,
            warm_start: true,
        }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.residual_tolerance > 0.0) || self.max_iterations == 0 || !(self.damping_init > 0.0) {
            return Err(Error::InvalidArgument(format!("invalid solver settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual: f64,
}

fn inf_norm(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

/// Minimise `½‖r(g)‖²` until `‖r‖∞ ≤ tol`.
///
/// Once the tolerance is met, up to two undamped Newton steps are taken as
/// long as they keep reducing the residual.
pub fn levenberg_marquardt<R, J>(
    residual: R,
    jacobian: J,
    init: DVector<f64>,
    settings: &SolverSettings,
) -> Result<(DVector<f64>, SolveReport)>
where
    R: Fn(&DVector<f64>) -> Result<DVector<f64>>,
    J: Fn(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    settings.validate()?;
    let mut g = init;
    let mut r = residual(&g)?;
    let mut norm = inf_norm(&r);
    let mut cost = r.norm_squared();
    let mut lambda = settings.damping_init;
    let mut iterations = 0;

    while !(norm <= settings.residual_tolerance) {
        if iterations >= settings.max_iterations || !norm.is_finite() {
            return Err(Error::NonConvergence {
                residual: norm,
                iterations,
            });
        }
        iterations += 1;
        let jac = jacobian(&g)?;
        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &r;
        let mut accepted = false;
        for _ in 0..30 {
            let mut lhs = jtj.clone();
            for i in 0..lhs.nrows() {
                lhs[(i, i)] += lambda * (1.0 + jtj[(i, i)]);
            }
            let Some(delta) = lhs.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let trial = &g - delta;
            let r_trial = residual(&trial)?;
            let c_trial = r_trial.norm_squared();
            if c_trial.is_finite() && c_trial < cost {
                g = trial;
                r = r_trial;
                cost = c_trial;
                lambda = (lambda * 0.1).max(1e-12);
                accepted = true;
                break;
            }
            lambda *= 10.0;
        }
        norm = inf_norm(&r);
        if !accepted && !(norm <= settings.residual_tolerance) {
            return Err(Error::NonConvergence {
                residual: norm,
                iterations,
            });
        }
    }

    for _ in 0..2 {
        let jac = jacobian(&g)?;
        let Some(delta) = jac.lu().solve(&r) else { break };
        let trial = &g - delta;
        let r_trial = residual(&trial)?;
        let n_trial = inf_norm(&r_trial);
        if n_trial < norm {
            g = trial;
            r = r_trial;
            norm = n_trial;
        } else {
            break;
        }
    }

    Ok((g, SolveReport { iterations, residual: norm }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_nonlinear_system() {
        // x^2 + y^2 = 4, x - y = 0.
        let res = |v: &DVector<f64>| Ok(DVector::from_vec(vec![v[0] * v[0] + v[1] * v[1] - 4.0, v[0] - v[1]]));
        let jac = |v: &DVector<f64>| Ok(DMatrix::from_row_slice(2, 2, &[2.0 * v[0], 2.0 * v[1], 1.0, -1.0]));
        let (sol, rep) = levenberg_marquardt(res, jac, DVector::from_vec(vec![1.0, 0.5]), &SolverSettings::default()).unwrap();
        assert!((sol[0] - 2f64.sqrt()).abs() < 1e-12);
        assert!((sol[1] - 2f64.sqrt()).abs() < 1e-12);
        assert!(rep.residual <= 1e-10);
    }

    #[test]
    fn reports_non_convergence() {
        // No real root.
        let res = |v: &DVector<f64>| Ok(DVector::from_vec(vec![v[0] * v[0] + 1.0]));
        let jac = |v: &DVector<f64>| Ok(DMatrix::from_element(1, 1, 2.0 * v[0]));
        let settings = SolverSettings {
            max_iterations: 20,
            ..SolverSettings::default()
        };
        let err = levenberg_marquardt(res, jac, DVector::from_element(1, 0.3), &settings).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { .. }));
    }
}
