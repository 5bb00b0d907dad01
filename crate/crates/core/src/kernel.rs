//! ARD squared-exponential kernel, random Fourier feature bases and the
//! Gaussian helpers used by the variational objective.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Signal variance and per-dimension squared lengthscales of an ARD kernel.
///
/// `k(x, y) = σ_f² exp(-Σ_i (x_i - y_i)² / (2 l_i²))`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdKernelParams {
    signal_variance: f64,
    lengthscales_sq: Vec<f64>,
}

impl ArdKernelParams {
    pub fn new(signal_variance: f64, lengthscales_sq: Vec<f64>) -> Result<Self> {
        if !(signal_variance > 0.0 && signal_variance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "signal variance must be positive, got {signal_variance}"
            )));
        }
        if lengthscales_sq.is_empty() {
            return Err(Error::InvalidArgument(
                "at least one lengthscale is required".into(),
            ));
        }
        if let Some(bad) = lengthscales_sq
            .iter()
            .find(|l| !(**l > 0.0 && l.is_finite()))
        {
            return Err(Error::InvalidArgument(format!(
                "squared lengthscales must be positive, got {bad}"
            )));
        }
        Ok(Self {
            signal_variance,
            lengthscales_sq,
        })
    }

    /// Same squared lengthscale in every one of `dim` dimensions.
    pub fn isotropic(signal_variance: f64, lengthscale_sq: f64, dim: usize) -> Result<Self> {
        Self::new(signal_variance, vec![lengthscale_sq; dim])
    }

    /// Builds parameters from log-space values (the trainable representation).
    pub fn from_log(log_signal_variance: f64, log_lengthscales_sq: &[f64]) -> Result<Self> {
        Self::new(
            log_signal_variance.exp(),
            log_lengthscales_sq.iter().map(|l| l.exp()).collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.lengthscales_sq.len()
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    pub fn lengthscales_sq(&self) -> &[f64] {
        &self.lengthscales_sq
    }

    pub fn log_signal_variance(&self) -> f64 {
        self.signal_variance.ln()
    }

    pub fn log_lengthscales_sq(&self) -> Vec<f64> {
        self.lengthscales_sq.iter().map(|l| l.ln()).collect()
    }

    /// Kernel value without dimension checks; callers guarantee matching lengths.
    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for ((xi, yi), l2) in x.iter().zip(y).zip(&self.lengthscales_sq) {
            let d = xi - yi;
            r2 += d * d / l2;
        }
        self.signal_variance * (-0.5 * r2).exp()
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        check_dim(self.dim(), y.len())?;
        Ok(self.eval_unchecked(x, y))
    }
}

/// `σ_f² exp(-Σ (x_i - y_i)² / (2 l_i²))`.
pub fn kernel_eval(params: &ArdKernelParams, x: &[f64], y: &[f64]) -> Result<f64> {
    params.eval(x, y)
}

/// Kernel matrix between the rows of `x` (n×d) and the rows of `y` (m×d).
pub fn kernel_matrix(params: &ArdKernelParams, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_dim(params.dim(), x.ncols())?;
    check_dim(params.dim(), y.ncols())?;
    let xr = rows_of(x);
    let yr = rows_of(y);
    Ok(DMatrix::from_fn(x.nrows(), y.nrows(), |i, j| {
        params.eval_unchecked(&xr[i], &yr[j])
    }))
}

pub(crate) fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// Random Fourier feature basis for a stationary ARD kernel.
///
/// Frequencies are stored row-major (`count` rows of `dim` entries).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBasis {
    frequencies: Vec<f64>,
    dim: usize,
    count: usize,
    signal_variance: f64,
}

impl FeatureBasis {
    /// Scales standard-normal rows by `1/l_i`, giving `ω ~ N(0, diag(1/l_i²))`.
    pub fn from_standard_normals(params: &ArdKernelParams, standard: &[f64]) -> Result<Self> {
        let dim = params.dim();
        if standard.is_empty() || standard.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "standard-normal block of length {} does not hold whole rows of dimension {dim}",
                standard.len()
            )));
        }
        let inv_l: Vec<f64> = params
            .lengthscales_sq()
            .iter()
            .map(|l2| 1.0 / l2.sqrt())
            .collect();
        let frequencies = standard
            .chunks_exact(dim)
            .flat_map(|row| row.iter().zip(&inv_l).map(|(e, s)| e * s))
            .collect();
        Ok(Self {
            frequencies,
            dim,
            count: standard.len() / dim,
            signal_variance: params.signal_variance(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn signal_variance(&self) -> f64 {
        self.signal_variance
    }

    /// Feature amplitude `sqrt(σ_f² / S)`.
    pub fn amplitude(&self) -> f64 {
        (self.signal_variance / self.count as f64).sqrt()
    }

    pub fn frequency(&self, i: usize) -> &[f64] {
        &self.frequencies[i * self.dim..(i + 1) * self.dim]
    }

    pub(crate) fn raw_frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    /// Frequencies as an S×d matrix.
    pub fn frequencies(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.count, self.dim, &self.frequencies)
    }
}

/// Draws `count` frequency rows from the kernel's spectral density.
pub fn sample_feature_basis<R: Rng + ?Sized>(
    params: &ArdKernelParams,
    count: usize,
    rng: &mut R,
) -> Result<FeatureBasis> {
    if count == 0 {
        return Err(Error::InvalidArgument("feature count must be at least 1".into()));
    }
    let standard: Vec<f64> = (0..count * params.dim())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    FeatureBasis::from_standard_normals(params, &standard)
}

/// `φ(x)`: interleaved `sqrt(σ_f²/S) (cos xᵀω_i, sin xᵀω_i)` pairs, length 2S.
pub fn feature_map(basis: &FeatureBasis, x: &[f64]) -> Result<DVector<f64>> {
    check_dim(basis.dim, x.len())?;
    let amp = basis.amplitude();
    let mut out = DVector::zeros(2 * basis.count);
    for (i, w) in basis.frequencies.chunks_exact(basis.dim).enumerate() {
        let theta: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
        let (s, c) = theta.sin_cos();
        out[2 * i] = amp * c;
        out[2 * i + 1] = amp * s;
    }
    Ok(out)
}

/// Mean and covariance of a multivariate Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl GaussianMoments {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: covariance.nrows(),
            });
        }
        Ok(Self { mean, covariance })
    }

    pub fn diagonal(mean: DVector<f64>, variances: &DVector<f64>) -> Result<Self> {
        Self::new(mean, DMatrix::from_diagonal(variances))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Per-entry variances (the covariance diagonal).
    pub fn variances(&self) -> DVector<f64> {
        self.covariance.diagonal()
    }
}

/// Cholesky factor of `m`, retrying once with `jitter · mean(diag)` added.
pub(crate) fn cholesky_jittered(
    m: &DMatrix<f64>,
    jitter: f64,
    context: &str,
) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows().max(1);
    let scale = m.trace() / n as f64;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::NotPositiveDefinite {
            context: context.to_string(),
        });
    }
    let mut shifted = m.clone();
    for i in 0..m.nrows() {
        shifted[(i, i)] += jitter * scale;
    }
    Cholesky::new(shifted).ok_or_else(|| Error::NotPositiveDefinite {
        context: context.to_string(),
    })
}

pub(crate) fn chol_log_det(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Closed-form `KL(q ‖ p)` between two multivariate Gaussians.
pub fn gaussian_kl(q: &GaussianMoments, p: &GaussianMoments) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    let n = p.dim();
    let cp = cholesky_jittered(&p.covariance, 1e-10, "KL prior covariance")?;
    let cq = cholesky_jittered(&q.covariance, 1e-10, "KL posterior covariance")?;
    let trace_term = cp.solve(&q.covariance).trace();
    let diff = &p.mean - &q.mean;
    let maha = diff.dot(&cp.solve(&diff));
    let kl = 0.5 * (trace_term + maha - n as f64 + chol_log_det(&cp) - chol_log_det(&cq));
    // Clamp tiny negative round-off for identical arguments.
    Ok(kl.max(0.0))
}

/// `log N(x | mean, variance)` for a scalar.
pub fn gaussian_log_density(x: f64, mean: f64, variance: f64) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "variance must be positive, got {variance}"
        )));
    }
    let d = x - mean;
    Ok(-0.5 * (2.0 * std::f64::consts::PI * variance).ln() - d * d / (2.0 * variance))
}
