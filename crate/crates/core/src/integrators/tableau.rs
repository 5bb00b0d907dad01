use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Runge-Kutta coefficients `(A, b)` with the classical order of the method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ButcherTableau {
    name: String,
    stage_matrix: DMatrix<f64>,
    weights: DVector<f64>,
    order: usize,
}

impl ButcherTableau {
    pub fn new(name: &str, stage_matrix: DMatrix<f64>, weights: DVector<f64>, order: usize) -> Result<Self> {
        let s = weights.len();
        if s == 0 || stage_matrix.nrows() != s || stage_matrix.ncols() != s {
            return Err(Error::InvalidArgument(format!(
                "tableau '{name}': A must be {s}x{s} and non-empty"
            )));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "tableau '{name}' is inconsistent: weights sum to {sum}"
            )));
        }
        if order == 0 {
            return Err(Error::InvalidArgument("order must be at least 1".into()));
        }
        Ok(Self {
            name: name.to_string(),
            stage_matrix,
            weights,
            order,
        })
    }

    pub fn explicit_euler() -> Self {
        Self::new("explicit_euler", DMatrix::zeros(1, 1), DVector::from_element(1, 1.0), 1).unwrap()
    }

    pub fn heun() -> Self {
        Self::new(
            "heun",
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1.0, 0.0]),
            DVector::from_vec(vec![0.5, 0.5]),
            2,
        )
        .unwrap()
    }

    pub fn implicit_midpoint() -> Self {
        Self::new("implicit_midpoint", DMatrix::from_element(1, 1, 0.5), DVector::from_element(1, 1.0), 2).unwrap()
    }

    pub fn radau_ia() -> Self {
        Self::new(
            "radau_ia",
            DMatrix::from_row_slice(2, 2, &[0.25, -0.25, 0.25, 5.0 / 12.0]),
            DVector::from_vec(vec![0.25, 0.75]),
            3,
        )
        .unwrap()
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "explicit_euler" => Ok(Self::explicit_euler()),
            "heun" => Ok(Self::heun()),
            "implicit_midpoint" => Ok(Self::implicit_midpoint()),
            "radau_ia" => Ok(Self::radau_ia()),
            other => Err(Error::InvalidArgument(format!("unknown tableau '{other}'"))),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn stages(&self) -> usize {
        self.weights.len()
    }

    pub fn stage_matrix(&self) -> &DMatrix<f64> {
        &self.stage_matrix
    }

    pub fn a(&self, j: usize, l: usize) -> f64 {
        self.stage_matrix[(j, l)]
    }

    pub fn weights(&self) -> &DVector<f64> {
        &self.weights
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Strictly lower-triangular `A`.
    pub fn is_explicit(&self) -> bool {
        let s = self.stages();
        (0..s).all(|j| (j..s).all(|l| self.stage_matrix[(j, l)] == 0.0))
    }
}
