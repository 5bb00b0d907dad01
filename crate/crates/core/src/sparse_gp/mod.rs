//! Variational sparse GPs over inducing inputs, their posterior moments, and
//! globally consistent posterior function draws.

mod sample;

pub use sample::{Derivatives, DrawNoise, PointTerms, SampleAdjoint, SampledFunction};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{chol_log_det, kernel_matrix, rows_of, ArdKernelParams, GaussianMoments};

/// Default Gram jitter, relative to the signal variance.
pub const DEFAULT_JITTER: f64 = 1e-8;

/// Scalar sparse GP with a diagonal Gaussian over its inducing targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseGp {
    inducing: DMatrix<f64>,
    mean: DVector<f64>,
    log_variance: DVector<f64>,
    kernel: ArdKernelParams,
    jitter: f64,
}

impl SparseGp {
    /// `inducing` is P×d. A GP with zero inducing points is a pure prior.
    pub fn new(
        inducing: DMatrix<f64>,
        mean: DVector<f64>,
        variances: DVector<f64>,
        kernel: ArdKernelParams,
    ) -> Result<Self> {
        check_dim(kernel.dim(), inducing.ncols())?;
        check_dim(inducing.nrows(), mean.len())?;
        check_dim(inducing.nrows(), variances.len())?;
        if inducing.iter().any(|v| !v.is_finite()) || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("inducing inputs and means must be finite".into()));
        }
        if let Some(v) = variances.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!(
                "variational variances must be positive, got {v}"
            )));
        }
        Ok(Self {
            inducing,
            mean,
            log_variance: variances.map(f64::ln),
            kernel,
            jitter: DEFAULT_JITTER,
        })
    }

    pub fn with_jitter(mut self, jitter: f64) -> Result<Self> {
        if !(jitter > 0.0) {
            return Err(Error::InvalidArgument("jitter must be positive".into()));
        }
        self.jitter = jitter;
        Ok(self)
    }

    pub fn n_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.dim()
    }

    pub fn inducing_inputs(&self) -> &DMatrix<f64> {
        &self.inducing
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn variances(&self) -> DVector<f64> {
        self.log_variance.map(f64::exp)
    }

    pub fn kernel(&self) -> &ArdKernelParams {
        &self.kernel
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn set_mean(&mut self, mean: DVector<f64>) -> Result<()> {
        check_dim(self.n_inducing(), mean.len())?;
        self.mean = mean;
        Ok(())
    }

    /// `k(ξ, ξ) + jitter · σ_f² · I`.
    pub fn gram(&self) -> DMatrix<f64> {
        let mut k = kernel_matrix(&self.kernel, &self.inducing, &self.inducing)
            .expect("inducing inputs match the kernel dimension");
        let shift = self.jitter * self.kernel.signal_variance();
        for i in 0..k.nrows() {
            k[(i, i)] += shift;
        }
        k
    }

    pub(crate) fn gram_cholesky(&self) -> Result<(DMatrix<f64>, Cholesky<f64, Dyn>)> {
        let g = self.gram();
        let c = Cholesky::new(g.clone()).ok_or_else(|| Error::NotPositiveDefinite {
            context: format!(
                "inducing Gram matrix ({} points, jitter {:.1e})",
                self.n_inducing(),
                self.jitter
            ),
        })?;
        Ok((g, c))
    }

    /// Prior-conditioned moments at the rows of `xstar`:
    /// mean `k(x*,ξ) K⁻¹ μ`, covariance `k(x*,x*) − k(x*,ξ) K⁻¹ k(ξ,x*)`.
    pub fn posterior_moments(&self, xstar: &DMatrix<f64>) -> Result<GaussianMoments> {
        let kss = kernel_matrix(&self.kernel, xstar, xstar)?;
        if self.n_inducing() == 0 {
            return GaussianMoments::new(DVector::zeros(xstar.nrows()), kss);
        }
        let ksu = kernel_matrix(&self.kernel, xstar, &self.inducing)?;
        let (_, chol) = self.gram_cholesky()?;
        let mean = &ksu * chol.solve(&self.mean);
        let cov = kss - &ksu * chol.solve(&ksu.transpose());
        GaussianMoments::new(mean, cov)
    }

    /// Moments of `f(x*)` with the uncertainty of `q(z)` folded in:
    /// the posterior covariance plus `k(x*,ξ) K⁻¹ Σ K⁻¹ k(ξ,x*)`.
    pub fn predictive_moments(&self, xstar: &DMatrix<f64>) -> Result<GaussianMoments> {
        let base = self.posterior_moments(xstar)?;
        if self.n_inducing() == 0 {
            return Ok(base);
        }
        let ksu = kernel_matrix(&self.kernel, xstar, &self.inducing)?;
        let (_, chol) = self.gram_cholesky()?;
        let a = chol.solve(&ksu.transpose());
        let s = DMatrix::from_diagonal(&self.variances());
        let extra = a.transpose() * s * &a;
        GaussianMoments::new(base.mean, base.covariance + extra)
    }

    /// One posterior function draw with `features` random Fourier features.
    pub fn draw_function<R: Rng + ?Sized>(&self, features: usize, rng: &mut R) -> Result<SampledFunction> {
        let noise = DrawNoise::sample(features, self.input_dim(), self.n_inducing(), rng)?;
        self.sample_with(&noise)
    }

    /// Deterministic draw from frozen noise; the reparameterised path used for gradients.
    pub fn sample_with(&self, noise: &DrawNoise) -> Result<SampledFunction> {
        SampledFunction::from_noise(self, noise)
    }

    /// `KL(q(z) ‖ N(0, K + jitter))`.
    pub fn kl_to_prior(&self) -> Result<f64> {
        Ok(self.kl_with_gradient()?.0)
    }

    /// KL to the prior and its gradient in this GP's parameter layout.
    pub fn kl_with_gradient(&self) -> Result<(f64, DVector<f64>)> {
        let p = self.n_inducing();
        let mut grad = DVector::zeros(self.param_len());
        if p == 0 {
            return Ok((0.0, grad));
        }
        let (_, chol) = self.gram_cholesky()?;
        let ginv = chol.inverse();
        let s = self.variances();
        let alpha = chol.solve(&self.mean);
        let trace: f64 = (0..p).map(|j| ginv[(j, j)] * s[j]).sum();
        let kl = 0.5
            * (trace + self.mean.dot(&alpha) - p as f64 + chol_log_det(&chol)
                - self.log_variance.sum());

        let layout = BlockLayout::new(p, self.input_dim());
        for j in 0..p {
            grad[layout.mean + j] = alpha[j];
            grad[layout.log_variance + j] = 0.5 * (ginv[(j, j)] * s[j] - 1.0);
        }
        let ginv_s_ginv = &ginv * DMatrix::from_diagonal(&s) * &ginv;
        let gbar = (&ginv - ginv_s_ginv - &alpha * alpha.transpose()) * 0.5;
        let gram_grad = gram_backprop(&gbar, &self.inducing, &self.kernel, self.jitter);
        layout.add_kernel_terms(&mut grad, &gram_grad);
        Ok((kl.max(0.0), grad))
    }

    /// Length of this GP's block in a flattened parameter vector.
    pub fn param_len(&self) -> usize {
        BlockLayout::new(self.n_inducing(), self.input_dim()).len
    }

    /// Writes `[ξ (row-major), μ, log σ_z², log σ_f², log l²]` into `out`.
    pub fn write_params(&self, out: &mut [f64]) {
        let (p, d) = (self.n_inducing(), self.input_dim());
        let l = BlockLayout::new(p, d);
        for j in 0..p {
            for k in 0..d {
                out[l.inducing + j * d + k] = self.inducing[(j, k)];
            }
            out[l.mean + j] = self.mean[j];
            out[l.log_variance + j] = self.log_variance[j];
        }
        out[l.log_signal_variance] = self.kernel.log_signal_variance();
        for (k, v) in self.kernel.log_lengthscales_sq().into_iter().enumerate() {
            out[l.log_lengthscales_sq + k] = v;
        }
    }

    /// Inverse of [`SparseGp::write_params`]; keeps the block shape and jitter.
    pub fn read_params(&mut self, block: &[f64]) -> Result<()> {
        let (p, d) = (self.n_inducing(), self.input_dim());
        let l = BlockLayout::new(p, d);
        check_dim(l.len, block.len())?;
        if block.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite parameter value".into()));
        }
        let kernel = ArdKernelParams::from_log(
            block[l.log_signal_variance],
            &block[l.log_lengthscales_sq..l.log_lengthscales_sq + d],
        )?;
        for j in 0..p {
            for k in 0..d {
                self.inducing[(j, k)] = block[l.inducing + j * d + k];
            }
            self.mean[j] = block[l.mean + j];
            self.log_variance[j] = block[l.log_variance + j];
        }
        self.kernel = kernel;
        Ok(())
    }
}

/// Offsets of the parameter groups inside one GP block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockLayout {
    pub inducing: usize,
    pub mean: usize,
    pub log_variance: usize,
    pub log_signal_variance: usize,
    pub log_lengthscales_sq: usize,
    pub len: usize,
}

impl BlockLayout {
    pub fn new(p: usize, d: usize) -> Self {
        let mean = p * d;
        let log_variance = mean + p;
        let log_signal_variance = log_variance + p;
        let log_lengthscales_sq = log_signal_variance + 1;
        Self {
            inducing: 0,
            mean,
            log_variance,
            log_signal_variance,
            log_lengthscales_sq,
            len: log_lengthscales_sq + d,
        }
    }

    pub fn add_kernel_terms(&self, grad: &mut DVector<f64>, g: &GramGradient) {
        let d = g.log_lengthscales_sq.len();
        for j in 0..g.inducing.nrows() {
            for k in 0..d {
                grad[self.inducing + j * d + k] += g.inducing[(j, k)];
            }
        }
        grad[self.log_signal_variance] += g.log_signal_variance;
        for k in 0..d {
            grad[self.log_lengthscales_sq + k] += g.log_lengthscales_sq[k];
        }
    }
}

/// Gradient contributions of an adjoint on the jittered Gram matrix.
pub(crate) struct GramGradient {
    pub inducing: DMatrix<f64>,
    pub log_signal_variance: f64,
    pub log_lengthscales_sq: Vec<f64>,
}

pub(crate) fn gram_backprop(
    gbar: &DMatrix<f64>,
    inducing: &DMatrix<f64>,
    kernel: &ArdKernelParams,
    jitter: f64,
) -> GramGradient {
    let p = inducing.nrows();
    let d = kernel.dim();
    let rows = rows_of(inducing);
    let l2 = kernel.lengthscales_sq();
    let mut out = GramGradient {
        inducing: DMatrix::zeros(p, d),
        log_signal_variance: 0.0,
        log_lengthscales_sq: vec![0.0; d],
    };
    let shift = jitter * kernel.signal_variance();
    for j in 0..p {
        for l in 0..p {
            let gb = gbar[(j, l)];
            if gb == 0.0 {
                continue;
            }
            let kjl = kernel.eval_unchecked(&rows[j], &rows[l]);
            out.log_signal_variance += gb * (kjl + if j == l { shift } else { 0.0 });
            if j == l {
                continue;
            }
            for k in 0..d {
                let delta = rows[j][k] - rows[l][k];
                out.log_lengthscales_sq[k] += gb * kjl * delta * delta / (2.0 * l2[k]);
                let t = gb * kjl * delta / l2[k];
                out.inducing[(j, k)] -= t;
                out.inducing[(l, k)] += t;
            }
        }
    }
    out
}

/// Independent scalar GPs, one per output dimension, over a shared input space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiGp {
    components: Vec<SparseGp>,
}

impl MultiGp {
    pub fn new(components: Vec<SparseGp>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidArgument("a MultiGp needs at least one component".into()))?;
        let d = first.input_dim();
        for c in &components {
            check_dim(d, c.input_dim())?;
        }
        Ok(Self { components })
    }

    pub fn input_dim(&self) -> usize {
        self.components[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[SparseGp] {
        &self.components
    }

    pub fn components_mut(&mut self) -> &mut [SparseGp] {
        &mut self.components
    }

    /// One independent draw per component, consumed from `rng` in order.
    pub fn draw<R: Rng + ?Sized>(&self, features: usize, rng: &mut R) -> Result<Vec<SampledFunction>> {
        self.components
            .iter()
            .map(|gp| gp.draw_function(features, rng))
            .collect()
    }

    pub fn into_components(self) -> Vec<SparseGp> {
        self.components
    }
}
