use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{gram_backprop, BlockLayout, SparseGp};
use crate::error::{check_dim, Error, Result};
use crate::kernel::{ArdKernelParams, FeatureBasis};

/// The randomness behind one posterior draw, independent of the GP parameters.
///
/// Holding this fixed while the parameters move is the reparameterisation
/// that makes a draw differentiable.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawNoise {
    /// S×d standard normals, row-major; frequencies are these scaled by `1/l`.
    pub standard_frequencies: Vec<f64>,
    /// 2S prior weights, interleaved (cos, sin) like the feature map.
    pub weights: Vec<f64>,
    /// P standard normals; `z = μ + σ_z ⊙ ε`.
    pub target_noise: Vec<f64>,
}

impl DrawNoise {
    pub fn sample<R: Rng + ?Sized>(
        features: usize,
        dim: usize,
        n_inducing: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if features == 0 {
            return Err(Error::InvalidArgument("feature count must be at least 1".into()));
        }
        let mut normals = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample(StandardNormal)).collect() };
        let standard_frequencies = normals(features * dim);
        let weights = normals(2 * features);
        let target_noise = normals(n_inducing);
        Ok(Self {
            standard_frequencies,
            weights,
            target_noise,
        })
    }

    pub fn features(&self) -> usize {
        self.weights.len() / 2
    }
}

/// Value, gradient and (optionally) Hessian of a sampled function at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: Option<DMatrix<f64>>,
}

/// Accumulated adjoints of the quantities a draw is built from.
///
/// Evaluation-side VJPs add into this; [`SampledFunction::backprop`] then
/// pushes everything through the inducing-point solve into the GP block.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleAdjoint {
    amplitude: f64,
    freq_scale: Vec<f64>,
    coeffs: DVector<f64>,
    inducing: DMatrix<f64>,
    log_signal_variance: f64,
    log_lengthscales_sq: Vec<f64>,
}

impl SampleAdjoint {
    pub fn zeros(n_inducing: usize, dim: usize) -> Self {
        Self {
            amplitude: 0.0,
            freq_scale: vec![0.0; dim],
            coeffs: DVector::zeros(n_inducing),
            inducing: DMatrix::zeros(n_inducing, dim),
            log_signal_variance: 0.0,
            log_lengthscales_sq: vec![0.0; dim],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.amplitude == 0.0
            && self.log_signal_variance == 0.0
            && self.freq_scale.iter().all(|v| *v == 0.0)
            && self.coeffs.iter().all(|v| *v == 0.0)
            && self.inducing.iter().all(|v| *v == 0.0)
            && self.log_lengthscales_sq.iter().all(|v| *v == 0.0)
    }
}

/// Prior-feature sums at one input point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTerms {
    prior_value: f64,
    prior_gradient: Vec<f64>,
    prior_hessian: Option<Vec<f64>>,
}

/// One globally consistent posterior draw
/// `f(x) = φ(x)ᵀw + Σ_j v_j k(x, ξ_j)` with `v = K⁻¹(z − Φ_ξ w)`.
#[derive(Debug, Clone)]
pub struct SampledFunction {
    basis: FeatureBasis,
    weights: Vec<f64>,
    targets: DVector<f64>,
    coeffs: DVector<f64>,
    inducing: Vec<f64>,
    n_inducing: usize,
    kernel: ArdKernelParams,
    inv_ls2: Vec<f64>,
    jitter: f64,
    gram: Option<Cholesky<f64, Dyn>>,
    // dz / d(log σ_z²), per inducing point
    target_log_var_sens: DVector<f64>,
    inducing_matrix: DMatrix<f64>,
    // prior value and gradient at each inducing input
    inducing_prior: Vec<(f64, Vec<f64>)>,
}

impl SampledFunction {
    pub(super) fn from_noise(gp: &SparseGp, noise: &DrawNoise) -> Result<Self> {
        let d = gp.input_dim();
        let p = gp.n_inducing();
        check_dim(noise.features() * d, noise.standard_frequencies.len())?;
        check_dim(p, noise.target_noise.len())?;
        let basis = FeatureBasis::from_standard_normals(gp.kernel(), &noise.standard_frequencies)?;
        let eps = DVector::from_column_slice(&noise.target_noise);
        let sd = gp.variances().map(f64::sqrt);
        let targets = gp.mean() + sd.component_mul(&eps);
        let target_log_var_sens = sd.component_mul(&eps) * 0.5;

        let mut sf = Self {
            basis,
            weights: noise.weights.clone(),
            targets: targets.clone(),
            coeffs: DVector::zeros(p),
            inducing: row_major(gp.inducing_inputs()),
            n_inducing: p,
            kernel: gp.kernel().clone(),
            inv_ls2: gp.kernel().lengthscales_sq().iter().map(|l| 1.0 / l).collect(),
            jitter: gp.jitter(),
            gram: None,
            target_log_var_sens,
            inducing_matrix: gp.inducing_inputs().clone(),
            inducing_prior: Vec::new(),
        };
        if p > 0 {
            let (_, chol) = gp.gram_cholesky()?;
            sf.inducing_prior = (0..p)
                .map(|j| sf.prior_value_gradient(&sf.inducing[j * d..(j + 1) * d]))
                .collect();
            let prior_at_inducing = DVector::from_fn(p, |j, _| sf.inducing_prior[j].0);
            sf.coeffs = chol.solve(&(targets - prior_at_inducing));
            sf.gram = Some(chol);
        }
        Ok(sf)
    }

    /// Builds a function from explicit pieces, bypassing the inducing solve.
    /// Such a function has no variational parameters and cannot be backpropagated.
    pub fn from_parts(
        basis: FeatureBasis,
        weights: Vec<f64>,
        inducing: DMatrix<f64>,
        coeffs: DVector<f64>,
        kernel: ArdKernelParams,
    ) -> Result<Self> {
        check_dim(2 * basis.count(), weights.len())?;
        check_dim(kernel.dim(), basis.dim())?;
        check_dim(kernel.dim(), inducing.ncols())?;
        check_dim(inducing.nrows(), coeffs.len())?;
        let p = inducing.nrows();
        Ok(Self {
            basis,
            weights,
            targets: DVector::zeros(p),
            coeffs,
            inducing: row_major(&inducing),
            n_inducing: p,
            inv_ls2: kernel.lengthscales_sq().iter().map(|l| 1.0 / l).collect(),
            kernel,
            jitter: super::DEFAULT_JITTER,
            gram: None,
            target_log_var_sens: DVector::zeros(p),
            inducing_matrix: inducing,
            inducing_prior: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.basis.dim()
    }

    pub fn n_inducing(&self) -> usize {
        self.n_inducing
    }

    pub fn basis(&self) -> &FeatureBasis {
        &self.basis
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Sampled inducing targets `z`.
    pub fn targets(&self) -> &DVector<f64> {
        &self.targets
    }

    /// Update coefficients `v`.
    pub fn coeffs(&self) -> &DVector<f64> {
        &self.coeffs
    }

    pub fn inducing_inputs(&self) -> &DMatrix<f64> {
        &self.inducing_matrix
    }

    pub fn kernel(&self) -> &ArdKernelParams {
        &self.kernel
    }

    fn xi(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.inducing[j * d..(j + 1) * d]
    }

    fn prior_value(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (w, wt) in self
            .basis
            .raw_frequencies()
            .chunks_exact(x.len())
            .zip(self.weights.chunks_exact(2))
        {
            let theta: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            let (s, c) = theta.sin_cos();
            acc += wt[0] * c + wt[1] * s;
        }
        self.basis.amplitude() * acc
    }

    fn prior_value_gradient(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let d = x.len();
        let mut acc = 0.0;
        let mut grad = vec![0.0; d];
        for (w, wt) in self
            .basis
            .raw_frequencies()
            .chunks_exact(d)
            .zip(self.weights.chunks_exact(2))
        {
            let theta: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            let (s, c) = theta.sin_cos();
            acc += wt[0] * c + wt[1] * s;
            let d1 = wt[1] * c - wt[0] * s;
            for (g, wk) in grad.iter_mut().zip(w) {
                *g += d1 * wk;
            }
        }
        let a = self.basis.amplitude();
        grad.iter_mut().for_each(|g| *g *= a);
        (a * acc, grad)
    }

    fn prior_full(&self, x: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
        let d = x.len();
        let mut acc = 0.0;
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        for (w, wt) in self
            .basis
            .raw_frequencies()
            .chunks_exact(d)
            .zip(self.weights.chunks_exact(2))
        {
            let theta: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum();
            let (s, c) = theta.sin_cos();
            let v = wt[0] * c + wt[1] * s;
            acc += v;
            let d1 = wt[1] * c - wt[0] * s;
            for k in 0..d {
                grad[k] += d1 * w[k];
                for l in k..d {
                    hess[k * d + l] -= v * w[k] * w[l];
                }
            }
        }
        let a = self.basis.amplitude();
        grad.iter_mut().for_each(|g| *g *= a);
        for k in 0..d {
            for l in k..d {
                hess[k * d + l] *= a;
                hess[l * d + k] = hess[k * d + l];
            }
        }
        (a * acc, grad, hess)
    }

    /// `f(x)`.
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let mut value = self.prior_value(x);
        for j in 0..self.n_inducing {
            value += self.coeffs[j] * self.kernel.eval_unchecked(x, self.xi(j));
        }
        Ok(value)
    }

    /// Analytic `∇f(x)`.
    pub fn gradient(&self, x: &[f64]) -> Result<DVector<f64>> {
        Ok(self.derivatives(x, false)?.gradient)
    }

    pub fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, DVector<f64>)> {
        let d = self.derivatives(x, false)?;
        Ok((d.value, d.gradient))
    }

    /// Prior-feature sums at `x`, shared by value, derivative and VJP evaluations there.
    pub fn point_terms(&self, x: &[f64], with_hessian: bool) -> Result<PointTerms> {
        check_dim(self.dim(), x.len())?;
        Ok(if with_hessian {
            let (v, g, h) = self.prior_full(x);
            PointTerms {
                prior_value: v,
                prior_gradient: g,
                prior_hessian: Some(h),
            }
        } else {
            let (v, g) = self.prior_value_gradient(x);
            PointTerms {
                prior_value: v,
                prior_gradient: g,
                prior_hessian: None,
            }
        })
    }

    /// Value, gradient and optionally the Hessian in one pass over the features.
    pub fn derivatives(&self, x: &[f64], with_hessian: bool) -> Result<Derivatives> {
        let terms = self.point_terms(x, with_hessian)?;
        self.derivatives_with(x, &terms)
    }

    /// Like [`Self::derivatives`] from precomputed terms; the Hessian is present iff the terms carry it.
    pub fn derivatives_with(&self, x: &[f64], terms: &PointTerms) -> Result<Derivatives> {
        let d = self.dim();
        check_dim(d, x.len())?;
        let mut value = terms.prior_value;
        let mut grad = terms.prior_gradient.clone();
        let mut hess = terms.prior_hessian.clone();
        let mut delta = vec![0.0; d];
        for j in 0..self.n_inducing {
            let xi = self.xi(j);
            let kj = self.kernel.eval_unchecked(x, xi);
            let vk = self.coeffs[j] * kj;
            value += vk;
            for k in 0..d {
                delta[k] = (xi[k] - x[k]) * self.inv_ls2[k];
                grad[k] += vk * delta[k];
            }
            if let Some(h) = hess.as_mut() {
                for k in 0..d {
                    for l in 0..d {
                        h[k * d + l] += vk * delta[k] * delta[l];
                    }
                    h[k * d + k] -= vk * self.inv_ls2[k];
                }
            }
        }
        Ok(Derivatives {
            value,
            gradient: DVector::from_vec(grad),
            hessian: hess.map(|h| DMatrix::from_row_slice(d, d, &h)),
        })
    }

    /// Adds `c · ∂f(x)/∂(draw quantities)` to `adj`.
    pub fn accumulate_value_vjp(&self, x: &[f64], c: f64, adj: &mut SampleAdjoint) -> Result<()> {
        if c == 0.0 {
            return check_dim(self.dim(), x.len());
        }
        let terms = self.point_terms(x, false)?;
        self.accumulate_value_vjp_with(x, c, &terms, adj)
    }

    pub fn accumulate_value_vjp_with(
        &self,
        x: &[f64],
        c: f64,
        terms: &PointTerms,
        adj: &mut SampleAdjoint,
    ) -> Result<()> {
        let d = self.dim();
        check_dim(d, x.len())?;
        if c == 0.0 {
            return Ok(());
        }
        let (pv, pg) = (terms.prior_value, &terms.prior_gradient);
        adj.amplitude += c * pv / self.basis.amplitude();
        for k in 0..d {
            adj.freq_scale[k] += c * x[k] * pg[k];
        }
        let l2 = self.kernel.lengthscales_sq();
        for j in 0..self.n_inducing {
            let xi = self.xi(j);
            let kj = self.kernel.eval_unchecked(x, xi);
            adj.coeffs[j] += c * kj;
            let cvk = c * self.coeffs[j] * kj;
            adj.log_signal_variance += cvk;
            for k in 0..d {
                let diff = x[k] - xi[k];
                adj.inducing[(j, k)] += cvk * diff / l2[k];
                adj.log_lengthscales_sq[k] += cvk * diff * diff / (2.0 * l2[k]);
            }
        }
        Ok(())
    }

    /// Adds the parameter adjoint of `uᵀ∇f(x)` to `adj`.
    pub fn accumulate_gradient_vjp(&self, x: &[f64], u: &[f64], adj: &mut SampleAdjoint) -> Result<()> {
        if u.iter().all(|v| *v == 0.0) {
            check_dim(self.dim(), x.len())?;
            return check_dim(self.dim(), u.len());
        }
        let terms = self.point_terms(x, true)?;
        self.accumulate_gradient_vjp_with(x, u, &terms, adj)
    }

    /// Needs terms computed with the Hessian.
    pub fn accumulate_gradient_vjp_with(
        &self,
        x: &[f64],
        u: &[f64],
        terms: &PointTerms,
        adj: &mut SampleAdjoint,
    ) -> Result<()> {
        let d = self.dim();
        check_dim(d, x.len())?;
        check_dim(d, u.len())?;
        if u.iter().all(|v| *v == 0.0) {
            return Ok(());
        }
        let ph = terms
            .prior_hessian
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("point terms lack the Hessian".into()))?;
        let pg = &terms.prior_gradient;
        let s_prior: f64 = pg.iter().zip(u).map(|(g, ui)| g * ui).sum();
        adj.amplitude += s_prior / self.basis.amplitude();
        for k in 0..d {
            let hu: f64 = (0..d).map(|l| ph[k * d + l] * u[l]).sum();
            adj.freq_scale[k] += x[k] * hu + u[k] * pg[k];
        }
        let l2 = self.kernel.lengthscales_sq();
        let mut delta = vec![0.0; d];
        for j in 0..self.n_inducing {
            let xi = self.xi(j);
            let kj = self.kernel.eval_unchecked(x, xi);
            let mut beta = 0.0;
            for k in 0..d {
                delta[k] = (xi[k] - x[k]) / l2[k];
                beta += delta[k] * u[k];
            }
            adj.coeffs[j] += kj * beta;
            let vk = self.coeffs[j] * kj;
            adj.log_signal_variance += vk * beta;
            for k in 0..d {
                adj.inducing[(j, k)] += vk * (u[k] / l2[k] - delta[k] * beta);
                let diff = x[k] - xi[k];
                adj.log_lengthscales_sq[k] +=
                    vk * (diff * diff / (2.0 * l2[k]) * beta - delta[k] * u[k]);
            }
        }
        Ok(())
    }

    /// Length of the GP parameter block this draw came from.
    pub fn param_len(&self) -> usize {
        BlockLayout::new(self.n_inducing, self.dim()).len
    }

    /// Gradient with respect to the parent GP's parameter block, given the
    /// adjoints accumulated on this draw.
    pub fn backprop(&self, adj: &SampleAdjoint) -> Result<DVector<f64>> {
        let d = self.dim();
        let p = self.n_inducing;
        let layout = BlockLayout::new(p, d);
        let mut grad = DVector::zeros(layout.len);
        let mut amplitude = adj.amplitude;
        let mut freq_scale = adj.freq_scale.clone();
        let mut inducing = adj.inducing.clone();

        if p > 0 {
            let chol = self.gram.as_ref().ok_or_else(|| {
                Error::InvalidArgument("draw was not built from a sparse GP and has no parameters".into())
            })?;
            // v = G⁻¹ r with r = z − Φ_ξ w
            let rbar = chol.solve(&adj.coeffs);
            for j in 0..p {
                grad[layout.mean + j] += rbar[j];
                grad[layout.log_variance + j] += rbar[j] * self.target_log_var_sens[j];
                let c = -rbar[j];
                let (pv, pg) = &self.inducing_prior[j];
                amplitude += c * pv / self.basis.amplitude();
                for k in 0..d {
                    freq_scale[k] += c * self.xi(j)[k] * pg[k];
                    inducing[(j, k)] += c * pg[k];
                }
            }
            let gbar = -(&rbar * self.coeffs.transpose());
            let g = gram_backprop(&gbar, &self.inducing_matrix, &self.kernel, self.jitter);
            inducing += &g.inducing;
            grad[layout.log_signal_variance] += g.log_signal_variance;
            for k in 0..d {
                grad[layout.log_lengthscales_sq + k] += g.log_lengthscales_sq[k];
            }
        }

        for j in 0..p {
            for k in 0..d {
                grad[layout.inducing + j * d + k] += inducing[(j, k)];
            }
        }
        grad[layout.log_signal_variance] +=
            adj.log_signal_variance + 0.5 * self.basis.amplitude() * amplitude;
        for k in 0..d {
            grad[layout.log_lengthscales_sq + k] += adj.log_lengthscales_sq[k] - 0.5 * freq_scale[k];
        }
        Ok(grad)
    }

    pub fn zero_adjoint(&self) -> SampleAdjoint {
        SampleAdjoint::zeros(self.n_inducing, self.dim())
    }
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
    out
}
