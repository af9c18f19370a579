//! Exact Gaussian-process regression with a squared-exponential kernel.
//!
//! [`GpPosterior`] is immutable: conditioning on a new observation
//! ([`GpPosterior::fantasize`]) returns a new posterior. The same posterior
//! algebra is also available on a [`Graph`] so that acquisition objectives can
//! be differentiated with respect to query locations and actions.

use thiserror::Error;

use crate::diff::{sq_dist_value, DiffError, Graph, NodeId};
use crate::linalg::{self, cholesky, tri_solve, CholFactor, LinalgError, Matrix, Side};
use crate::space::halton;

/// Default diagonal jitter for kernel matrices.
pub const DEFAULT_JITTER: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("need at least {needed} observations, have {have}")]
    InsufficientData { needed: usize, have: usize },
    #[error("all observed outputs are identical; falling back to default parameters")]
    DegenerateData { fallback: KernelParams },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

/// Squared-exponential kernel hyperparameters.
///
/// `lengthscales` has either one entry (isotropic) or one per input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn isotropic(lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Self {
        KernelParams {
            lengthscales: vec![lengthscale],
            signal_variance,
            noise_variance,
        }
    }

    #[inline]
    pub fn lengthscale(&self, dim: usize) -> f64 {
        if self.lengthscales.len() == 1 {
            self.lengthscales[0]
        } else {
            self.lengthscales[dim]
        }
    }

    pub fn validate(&self, dim: usize) -> Result<(), GpError> {
        if self.lengthscales.is_empty()
            || (self.lengthscales.len() != 1 && self.lengthscales.len() != dim)
        {
            return Err(GpError::InvalidParams(format!(
                "expected 1 or {dim} lengthscales, got {}",
                self.lengthscales.len()
            )));
        }
        if !self.lengthscales.iter().all(|l| l.is_finite() && *l > 0.0) {
            return Err(GpError::InvalidParams("lengthscales must be positive".into()));
        }
        if !(self.signal_variance.is_finite() && self.signal_variance > 0.0) {
            return Err(GpError::InvalidParams("signal variance must be positive".into()));
        }
        if !(self.noise_variance.is_finite() && self.noise_variance >= 0.0) {
            return Err(GpError::InvalidParams("noise variance must be non-negative".into()));
        }
        Ok(())
    }

    /// Per-column multipliers `1 / lengthscale_i` for `dim` inputs.
    fn inverse_scales(&self, dim: usize) -> Vec<f64> {
        (0..dim).map(|i| 1.0 / self.lengthscale(i)).collect()
    }
}

/// `σ² exp(−Σ (xᵢ − x′ᵢ)² / (2 ℓᵢ²))`.
pub fn kernel(x: &[f64], x2: &[f64], params: &KernelParams) -> Result<f64, GpError> {
    if x.len() != x2.len() {
        return Err(GpError::DimensionMismatch {
            expected: x.len(),
            found: x2.len(),
        });
    }
    let r2: f64 = x
        .iter()
        .zip(x2)
        .enumerate()
        .map(|(i, (a, b))| {
            let d = (a - b) / params.lengthscale(i);
            d * d
        })
        .sum();
    Ok(params.signal_variance * (-0.5 * r2).exp())
}

fn scaled(points: &Matrix, params: &KernelParams) -> Matrix {
    let inv = params.inverse_scales(points.cols());
    let mut out = points.clone();
    for r in 0..out.rows() {
        for (v, s) in out.row_mut(r).iter_mut().zip(&inv) {
            *v *= s;
        }
    }
    out
}

/// Cross-covariance matrix `K(a, b)` between the rows of `a` and `b`.
pub fn kernel_matrix(a: &Matrix, b: &Matrix, params: &KernelParams) -> Matrix {
    let d2 = sq_dist_value(&scaled(a, params), &scaled(b, params));
    d2.map(|v| params.signal_variance * (-0.5 * v).exp())
}

/// Same as [`kernel_matrix`] on a graph.
pub fn kernel_nodes(g: &mut Graph, a: NodeId, b: NodeId, params: &KernelParams) -> NodeId {
    let scale_of = |g: &Graph, n: NodeId| {
        let (rows, cols) = g.value(n).shape();
        let inv = params.inverse_scales(cols);
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            m.row_mut(r).copy_from_slice(&inv);
        }
        m
    };
    let sa = scale_of(g, a);
    let sb = scale_of(g, b);
    let a = g.mul_const(a, sa);
    let b = g.mul_const(b, sb);
    let d2 = g.sq_dist(a, b);
    let e = g.scale(d2, -0.5);
    let e = g.exp(e);
    g.scale(e, params.signal_variance)
}

/// Observed inputs (one row per point) and outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    outputs: Vec<f64>,
}

impl Dataset {
    pub fn empty(dim: usize) -> Self {
        Dataset {
            inputs: Matrix::zeros(0, dim),
            outputs: Vec::new(),
        }
    }

    pub fn new(inputs: Matrix, outputs: Vec<f64>) -> Result<Self, GpError> {
        if inputs.rows() != outputs.len() {
            return Err(GpError::DimensionMismatch {
                expected: inputs.rows(),
                found: outputs.len(),
            });
        }
        if !inputs.is_finite() || !outputs.iter().all(|v| v.is_finite()) {
            return Err(GpError::NonFinite("dataset"));
        }
        Ok(Dataset { inputs, outputs })
    }

    pub fn push(&mut self, x: &[f64], y: f64) -> Result<(), GpError> {
        if x.len() != self.dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.dim(),
                found: x.len(),
            });
        }
        if !y.is_finite() || !x.iter().all(|v| v.is_finite()) {
            return Err(GpError::NonFinite("observation"));
        }
        self.inputs.push_row(x);
        self.outputs.push(y);
        Ok(())
    }

    pub fn with(&self, x: &[f64], y: f64) -> Result<Dataset, GpError> {
        let mut d = self.clone();
        d.push(x, y)?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn output_mean(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.outputs.iter().sum::<f64>() / self.len() as f64
        }
    }
}

/// How the constant prior mean is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PriorMean {
    Zero,
    /// Mean of the training outputs at construction time.
    DataMean,
    Constant(f64),
}

/// Mean vector and lower-triangular scale of a joint Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct JointGaussian {
    pub mean: Vec<f64>,
    pub scale: Matrix,
}

impl JointGaussian {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> Matrix {
        self.scale.matmul_t(&self.scale)
    }
}

/// `μ + U ε`.
pub fn sample_values(j: &JointGaussian, eps: &[f64]) -> Result<Vec<f64>, GpError> {
    if eps.len() != j.dim() {
        return Err(GpError::DimensionMismatch {
            expected: j.dim(),
            found: eps.len(),
        });
    }
    Ok(j.scale
        .matvec(eps)
        .into_iter()
        .zip(&j.mean)
        .map(|(u, m)| u + m)
        .collect())
}

/// Graph nodes describing the posterior at a set of points.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorBlock {
    pub points: NodeId,
    /// `L⁻¹ K(X, points)`, `n x K`.
    pub whitened: NodeId,
    /// Posterior mean, `K x 1`.
    pub mean: NodeId,
}

/// A GP conditioned on a dataset.
#[derive(Debug, Clone)]
pub struct GpPosterior {
    data: Dataset,
    params: KernelParams,
    chol: Option<CholFactor>,
    alpha: Vec<f64>,
    prior_mean: f64,
    jitter: f64,
}

impl GpPosterior {
    pub fn new(data: Dataset, params: KernelParams, mean: PriorMean) -> Result<Self, GpError> {
        let prior_mean = match mean {
            PriorMean::Zero => 0.0,
            PriorMean::DataMean => data.output_mean(),
            PriorMean::Constant(c) => c,
        };
        Self::build(data, params, prior_mean, DEFAULT_JITTER)
    }

    pub fn with_jitter(
        data: Dataset,
        params: KernelParams,
        mean: PriorMean,
        jitter: f64,
    ) -> Result<Self, GpError> {
        let prior_mean = match mean {
            PriorMean::Zero => 0.0,
            PriorMean::DataMean => data.output_mean(),
            PriorMean::Constant(c) => c,
        };
        Self::build(data, params, prior_mean, jitter)
    }

    fn build(data: Dataset, params: KernelParams, prior_mean: f64, jitter: f64) -> Result<Self, GpError> {
        params.validate(data.dim())?;
        if data.is_empty() {
            return Ok(GpPosterior {
                data,
                params,
                chol: None,
                alpha: Vec::new(),
                prior_mean,
                jitter,
            });
        }
        let mut k = kernel_matrix(data.inputs(), data.inputs(), &params);
        k.add_diagonal(params.noise_variance);
        let chol = cholesky(&k, jitter)?;
        let centered: Vec<f64> = data.outputs().iter().map(|y| y - prior_mean).collect();
        let alpha = chol.solve(&centered)?;
        Ok(GpPosterior {
            data,
            params,
            chol: Some(chol),
            alpha,
            prior_mean,
            jitter,
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn params(&self) -> &KernelParams {
        &self.params
    }

    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn dim(&self) -> usize {
        self.data.dim()
    }

    pub fn chol(&self) -> Option<&CholFactor> {
        self.chol.as_ref()
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn noise_variance(&self) -> f64 {
        self.params.noise_variance
    }

    fn check_points(&self, points: &Matrix) -> Result<(), GpError> {
        if points.cols() != self.dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.dim(),
                found: points.cols(),
            });
        }
        if !points.is_finite() {
            return Err(GpError::NonFinite("query points"));
        }
        Ok(())
    }

    /// Posterior mean and latent variance at each row of `points`.
    pub fn predict(&self, points: &Matrix) -> Result<(Vec<f64>, Vec<f64>), GpError> {
        self.check_points(points)?;
        let prior_var = self.params.signal_variance;
        let Some(chol) = &self.chol else {
            return Ok((
                vec![self.prior_mean; points.rows()],
                vec![prior_var; points.rows()],
            ));
        };
        let kx = kernel_matrix(self.data.inputs(), points, &self.params);
        let mean = kx
            .t_matmul(&Matrix::column(&self.alpha))
            .into_vec()
            .into_iter()
            .map(|m| m + self.prior_mean)
            .collect();
        let v = linalg::tri_solve_matrix(chol, &kx, Side::Lower)?;
        let var = (0..points.rows())
            .map(|c| {
                let s: f64 = (0..v.rows()).map(|r| v[(r, c)] * v[(r, c)]).sum();
                (prior_var - s).max(0.0)
            })
            .collect();
        Ok((mean, var))
    }

    pub fn mean_at(&self, x: &[f64]) -> Result<f64, GpError> {
        Ok(self.predict(&Matrix::row_vector(x))?.0[0])
    }

    pub fn variance_at(&self, x: &[f64]) -> Result<f64, GpError> {
        Ok(self.predict(&Matrix::row_vector(x))?.1[0])
    }

    /// Posterior mean vector and full covariance at `points`.
    pub fn mean_cov(&self, points: &Matrix) -> Result<(Vec<f64>, Matrix), GpError> {
        self.check_points(points)?;
        let kpp = kernel_matrix(points, points, &self.params);
        let Some(chol) = &self.chol else {
            return Ok((vec![self.prior_mean; points.rows()], kpp));
        };
        let kx = kernel_matrix(self.data.inputs(), points, &self.params);
        let mean = kx
            .t_matmul(&Matrix::column(&self.alpha))
            .into_vec()
            .into_iter()
            .map(|m| m + self.prior_mean)
            .collect();
        let v = linalg::tri_solve_matrix(chol, &kx, Side::Lower)?;
        let cov = kpp.sub(&v.t_matmul(&v)).symmetrized();
        Ok((mean, cov))
    }

    /// Joint posterior of `f` at the anchor points, with `U Uᵀ = Σ`.
    pub fn joint_posterior(&self, anchors: &Matrix) -> Result<JointGaussian, GpError> {
        if anchors.rows() == 0 {
            return Err(GpError::InsufficientData { needed: 1, have: 0 });
        }
        let (mean, cov) = self.mean_cov(anchors)?;
        let f = cholesky(&cov, self.jitter)?;
        Ok(JointGaussian {
            mean,
            scale: f.lower().clone(),
        })
    }

    /// `ȳ(x, λ) = μ(x) + sqrt(σ²(x) + η²) λ`.
    pub fn fantasy_observation(&self, x: &[f64], lambda: f64) -> Result<f64, GpError> {
        let (m, v) = self.predict(&Matrix::row_vector(x))?;
        Ok(m[0] + (v[0] + self.params.noise_variance).sqrt() * lambda)
    }

    /// Posterior after also observing `y` at `x`. The prior mean is kept fixed.
    pub fn fantasize(&self, x: &[f64], y: f64) -> Result<GpPosterior, GpError> {
        let data = self.data.with(x, y)?;
        Self::build(data, self.params.clone(), self.prior_mean, self.jitter)
    }

    /// Same model on a different dataset (prior mean and parameters kept).
    pub fn rebuild(&self, data: Dataset) -> Result<GpPosterior, GpError> {
        Self::build(data, self.params.clone(), self.prior_mean, self.jitter)
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Records the posterior at `points` on a graph. Training data is constant.
    pub fn block(&self, g: &mut Graph, points: NodeId) -> Result<PosteriorBlock, GpError> {
        let (k, d) = g.value(points).shape();
        if d != self.dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.dim(),
                found: d,
            });
        }
        let Some(chol) = &self.chol else {
            let whitened = g.constant(Matrix::zeros(0, k));
            let mean = g.constant(Matrix::filled(k, 1, self.prior_mean));
            return Ok(PosteriorBlock {
                points,
                whitened,
                mean,
            });
        };
        let x = g.constant(self.data.inputs().clone());
        let kx = kernel_nodes(g, x, points, &self.params);
        let l = g.constant(chol.lower().clone());
        let whitened = g.tri_solve(l, kx, Side::Lower)?;
        let alpha = g.constant(Matrix::row_vector(&self.alpha));
        let m = g.matmul(alpha, kx);
        let m = g.transpose(m);
        let mean = g.offset(m, self.prior_mean);
        Ok(PosteriorBlock {
            points,
            whitened,
            mean,
        })
    }

    /// Precomputes a block for fixed points and records it as constants.
    pub fn constant_block(&self, g: &mut Graph, values: &FixedBlock) -> PosteriorBlock {
        PosteriorBlock {
            points: g.constant(values.points.clone()),
            whitened: g.constant(values.whitened.clone()),
            mean: g.constant(Matrix::column(&values.mean)),
        }
    }

    /// Values of [`GpPosterior::block`] for points that never change.
    pub fn fixed_block(&self, points: &Matrix) -> Result<FixedBlock, GpError> {
        self.check_points(points)?;
        let (mean, _) = self.predict(points)?;
        let whitened = match &self.chol {
            Some(chol) => {
                let kx = kernel_matrix(self.data.inputs(), points, &self.params);
                linalg::tri_solve_matrix(chol, &kx, Side::Lower)?
            }
            None => Matrix::zeros(0, points.rows()),
        };
        Ok(FixedBlock {
            points: points.clone(),
            whitened,
            mean,
        })
    }

    /// Posterior cross-covariance `Σ(a, b)` between two blocks.
    pub fn cov_nodes(&self, g: &mut Graph, a: &PosteriorBlock, b: &PosteriorBlock) -> NodeId {
        let prior = kernel_nodes(g, a.points, b.points, &self.params);
        if self.chol.is_none() {
            return prior;
        }
        let wt = g.transpose(a.whitened);
        let reduction = g.matmul(wt, b.whitened);
        g.sub(prior, reduction)
    }

    /// Posterior latent variance of each point of a block, as a column.
    pub fn var_nodes(&self, g: &mut Graph, a: &PosteriorBlock) -> NodeId {
        let k = g.value(a.points).rows();
        let prior = g.constant(Matrix::filled(k, 1, self.params.signal_variance));
        if self.chol.is_none() {
            return prior;
        }
        let sq = g.square(a.whitened);
        let s = g.sum_rows(sq);
        let s = g.transpose(s);
        g.sub(prior, s)
    }

    /// Log marginal likelihood of the training outputs.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let Some(chol) = &self.chol else { return 0.0 };
        let n = self.data.len() as f64;
        let centered: Vec<f64> = self.data.outputs().iter().map(|y| y - self.prior_mean).collect();
        -0.5 * linalg::dot(&centered, &self.alpha)
            - 0.5 * chol.log_det()
            - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Posterior block values for points that stay fixed during an optimization.
#[derive(Debug, Clone)]
pub struct FixedBlock {
    pub points: Matrix,
    pub whitened: Matrix,
    pub mean: Vec<f64>,
}

/// Search box for hyperparameters, in natural units.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperBounds {
    pub lengthscale: (f64, f64),
    pub signal_variance: (f64, f64),
    pub noise_variance: (f64, f64),
    /// One lengthscale per input dimension instead of a shared one.
    pub per_dimension: bool,
    pub restarts: usize,
    pub steps: usize,
}

impl HyperBounds {
    pub fn new(lengthscale: (f64, f64), signal_variance: (f64, f64), noise_variance: (f64, f64)) -> Self {
        HyperBounds {
            lengthscale,
            signal_variance,
            noise_variance,
            per_dimension: false,
            restarts: 6,
            steps: 80,
        }
    }

    fn log_box(&self, dim: usize) -> Vec<(f64, f64)> {
        let nl = if self.per_dimension { dim } else { 1 };
        let mut b = vec![(self.lengthscale.0.ln(), self.lengthscale.1.ln()); nl];
        b.push((self.signal_variance.0.ln(), self.signal_variance.1.ln()));
        b.push((self.noise_variance.0.ln(), self.noise_variance.1.ln()));
        b
    }

    /// Geometric midpoint of every range.
    pub fn default_params(&self, dim: usize) -> KernelParams {
        let b = self.log_box(dim);
        from_log(&b.iter().map(|(l, h)| 0.5 * (l + h)).collect::<Vec<_>>())
    }
}

fn from_log(theta: &[f64]) -> KernelParams {
    let n = theta.len();
    KernelParams {
        lengthscales: theta[..n - 2].iter().map(|v| v.exp()).collect(),
        signal_variance: theta[n - 2].exp(),
        noise_variance: theta[n - 1].exp(),
    }
}

/// Outcome of a successful hyperparameter fit.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: KernelParams,
    pub log_likelihood: f64,
    /// Log likelihood at the end of each restart, starting with the default start.
    pub restart_likelihoods: Vec<f64>,
}

/// Log marginal likelihood and its gradient with respect to log-parameters.
fn lml_and_grad(data: &Dataset, theta: &[f64], mean: f64) -> Option<(f64, Vec<f64>)> {
    let params = from_log(theta);
    let n = data.len();
    let d = data.dim();
    let x = data.inputs();
    let kf = kernel_matrix(x, x, &params);
    let mut k = kf.clone();
    k.add_diagonal(params.noise_variance);
    let chol = cholesky(&k, DEFAULT_JITTER).ok()?;
    let centered: Vec<f64> = data.outputs().iter().map(|y| y - mean).collect();
    let alpha = chol.solve(&centered).ok()?;
    let lml = -0.5 * linalg::dot(&centered, &alpha)
        - 0.5 * chol.log_det()
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    // W = α αᵀ − K⁻¹; dL/dθ = ½ tr(W dK/dθ).
    let mut w = chol.inverse().scale(-1.0);
    for i in 0..n {
        for j in 0..n {
            w[(i, j)] += alpha[i] * alpha[j];
        }
    }
    let nl = theta.len() - 2;
    let mut grad = vec![0.0; theta.len()];
    for i in 0..n {
        for j in 0..n {
            let wk = w[(i, j)] * kf[(i, j)];
            grad[nl] += 0.5 * wk;
            if nl == 1 {
                let r2: f64 = (0..d)
                    .map(|c| {
                        let t = (x[(i, c)] - x[(j, c)]) / params.lengthscales[0];
                        t * t
                    })
                    .sum();
                grad[0] += 0.5 * wk * r2;
            } else {
                for c in 0..d {
                    let t = (x[(i, c)] - x[(j, c)]) / params.lengthscales[c];
                    grad[c] += 0.5 * wk * t * t;
                }
            }
        }
        grad[nl + 1] += 0.5 * w[(i, i)] * params.noise_variance;
    }
    lml.is_finite().then_some((lml, grad))
}

/// Maximizes the log marginal likelihood over log-parameters inside `bounds`.
///
/// Multi-start projected gradient ascent with backtracking: the first start
/// is [`HyperBounds::default_params`], the rest are Halton points of the log
/// box. The prior mean is the output mean. Every restart only accepts
/// improving steps, so the result is never worse than any start.
pub fn fit_hyperparams(data: &Dataset, bounds: &HyperBounds) -> Result<FitResult, GpError> {
    if data.len() < 2 {
        return Err(GpError::InsufficientData {
            needed: 2,
            have: data.len(),
        });
    }
    let dim = data.dim();
    let defaults = bounds.default_params(dim);
    let (lo, hi) = data
        .outputs()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    if hi - lo <= 1e-12 * (1.0 + hi.abs()) {
        return Err(GpError::DegenerateData { fallback: defaults });
    }
    let mean = data.output_mean();
    let bx = bounds.log_box(dim);
    let mut starts: Vec<Vec<f64>> = vec![bx.iter().map(|(l, h)| 0.5 * (l + h)).collect()];
    for u in halton(bounds.restarts.saturating_sub(1), bx.len().min(12)) {
        starts.push(
            bx.iter()
                .enumerate()
                .map(|(i, (l, h))| l + (h - l) * u.get(i).copied().unwrap_or(0.5))
                .collect(),
        );
    }
    let clamp = |t: &mut Vec<f64>| {
        for (v, (l, h)) in t.iter_mut().zip(&bx) {
            *v = v.clamp(*l, *h);
        }
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut restart_likelihoods = Vec::new();
    for start in starts {
        let Some((mut f, mut grad)) = lml_and_grad(data, &start, mean) else {
            restart_likelihoods.push(f64::NEG_INFINITY);
            continue;
        };
        let mut theta = start;
        let mut step = 0.5;
        for _ in 0..bounds.steps {
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm < 1e-8 {
                break;
            }
            let mut improved = false;
            while step > 1e-6 {
                let mut cand: Vec<f64> = theta
                    .iter()
                    .zip(&grad)
                    .map(|(t, g)| t + step * g / gnorm)
                    .collect();
                clamp(&mut cand);
                match lml_and_grad(data, &cand, mean) {
                    Some((fc, gc)) if fc > f => {
                        theta = cand;
                        f = fc;
                        grad = gc;
                        step = (step * 1.5).min(2.0);
                        improved = true;
                        break;
                    }
                    _ => step *= 0.5,
                }
            }
            if !improved {
                break;
            }
        }
        restart_likelihoods.push(f);
        if best.as_ref().is_none_or(|(bf, _)| f > *bf) {
            best = Some((f, theta));
        }
    }
    let (log_likelihood, theta) = best.ok_or(GpError::Linalg(LinalgError::NotPositiveDefinite {
        max_jitter: DEFAULT_JITTER,
    }))?;
    Ok(FitResult {
        params: from_log(&theta),
        log_likelihood,
        restart_likelihoods,
    })
}

/// Draws one joint sample of the prior at `points` (used to generate test data).
pub fn sample_prior(
    points: &Matrix,
    params: &KernelParams,
    normals: &[f64],
) -> Result<Vec<f64>, GpError> {
    let k = kernel_matrix(points, points, params);
    let f = cholesky(&k, 1e-10)?;
    Ok(f.lower().matvec(normals))
}

/// Convenience for tests and oracles: solve with a factor.
pub fn whiten(chol: &CholFactor, b: &[f64]) -> Result<Vec<f64>, GpError> {
    Ok(tri_solve(chol, b, Side::Lower)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::RngStream;

    fn one_d(points: &[(f64, f64)]) -> Dataset {
        let x = Matrix::from_vec(points.len(), 1, points.iter().map(|p| p.0).collect());
        Dataset::new(x, points.iter().map(|p| p.1).collect()).unwrap()
    }

    fn seeded_state(seed: u64, n: usize, dim: usize, noise: f64) -> GpPosterior {
        let mut rng = RngStream::new(seed);
        let mut x = Matrix::zeros(0, dim);
        for _ in 0..n {
            let p: Vec<f64> = (0..dim).map(|_| rng.uniform()).collect();
            x.push_row(&p);
        }
        let y: Vec<f64> = (0..n)
            .map(|i| (3.0 * x[(i, 0)]).sin() + 0.3 * rng.normal())
            .collect();
        let params = KernelParams::isotropic(0.3, 1.2, noise);
        GpPosterior::new(Dataset::new(x, y).unwrap(), params, PriorMean::DataMean).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let p = KernelParams::isotropic(1.0, 1.0, 0.0);
        assert_eq!(kernel(&[0.3, 0.2], &[0.3, 0.2], &p).unwrap(), 1.0);
        assert!((kernel(&[0.0], &[1.0], &p).unwrap() - (-0.5f64).exp()).abs() < 1e-15);
        let p2 = KernelParams::isotropic(1.0, 2.0, 0.0);
        let (a, b) = ([0.1, -0.4], [1.3, 0.6]);
        assert!((kernel(&a, &b, &p2).unwrap() - 2.0 * kernel(&a, &b, &p).unwrap()).abs() < 1e-15);
        assert_eq!(kernel(&a, &b, &p).unwrap(), kernel(&b, &a, &p).unwrap());
        assert!(matches!(
            kernel(&[0.0], &[0.0, 1.0], &p),
            Err(GpError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn empty_data_gives_prior() {
        let gp = GpPosterior::new(
            Dataset::empty(1),
            KernelParams::isotropic(1.0, 1.0, 0.0),
            PriorMean::Zero,
        )
        .unwrap();
        let j = gp.joint_posterior(&Matrix::from_rows(&[[0.4]])).unwrap();
        assert_eq!(j.mean, vec![0.0]);
        assert_eq!(j.scale, Matrix::scalar(1.0));
        let anchors = Matrix::from_rows(&[[0.0], [0.5], [2.0]]);
        let j = gp.joint_posterior(&anchors).unwrap();
        let prior = kernel_matrix(&anchors, &anchors, gp.params());
        assert!(j.covariance().max_abs_diff(&prior) < 1e-12);
    }

    #[test]
    fn one_point_posterior_by_hand() {
        let gp = GpPosterior::new(
            one_d(&[(0.0, 1.0)]),
            KernelParams::isotropic(1.0, 1.0, 0.0),
            PriorMean::Zero,
        )
        .unwrap();
        let at0 = gp.joint_posterior(&Matrix::from_rows(&[[0.0]]));
        // Zero variance at the training point needs jitter to factor.
        let (m0, v0) = gp.predict(&Matrix::from_rows(&[[0.0]])).unwrap();
        assert!((m0[0] - 1.0).abs() < 1e-12);
        assert!(v0[0] <= 1e-10);
        assert!(at0.is_ok());
        let j = gp.joint_posterior(&Matrix::from_rows(&[[1.0]])).unwrap();
        assert!((j.mean[0] - (-0.5f64).exp()).abs() <= 1e-10);
        assert!((j.covariance()[(0, 0)] - (1.0 - (-1.0f64).exp())).abs() <= 1e-10);
    }

    #[test]
    fn sample_values_examples() {
        let j = JointGaussian {
            mean: vec![0.5],
            scale: Matrix::scalar(2.0),
        };
        assert_eq!(sample_values(&j, &[1.0]).unwrap(), vec![2.5]);
        assert_eq!(sample_values(&j, &[0.0]).unwrap(), vec![0.5]);
        assert!(matches!(
            sample_values(&j, &[0.0, 1.0]),
            Err(GpError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn sample_covariance_matches_scale() {
        let gp = seeded_state(1, 6, 1, 0.01);
        let anchors = Matrix::from_rows(&[[0.1], [0.35], [0.9]]);
        let j = gp.joint_posterior(&anchors).unwrap();
        let mut rng = RngStream::new(99);
        let n = 100_000;
        let mut sum = [0.0; 3];
        let mut outer = Matrix::zeros(3, 3);
        for _ in 0..n {
            let s = sample_values(&j, &rng.normals(3)).unwrap();
            for a in 0..3 {
                sum[a] += s[a];
                for b in 0..3 {
                    outer[(a, b)] += s[a] * s[b];
                }
            }
        }
        let target = j.covariance();
        for a in 0..3 {
            for b in 0..3 {
                let cov = outer[(a, b)] / n as f64 - (sum[a] / n as f64) * (sum[b] / n as f64);
                assert!((cov - target[(a, b)]).abs() <= 0.05, "cov[{a},{b}]");
            }
        }
    }

    #[test]
    fn fantasy_observation_examples() {
        let gp = seeded_state(2, 5, 1, 0.05);
        let x = [0.42];
        assert_eq!(gp.fantasy_observation(&x, 0.0).unwrap(), gp.mean_at(&x).unwrap());
        let prior = GpPosterior::new(
            Dataset::empty(1),
            KernelParams::isotropic(1.0, 1.0, 0.0),
            PriorMean::Zero,
        )
        .unwrap();
        assert!((prior.fantasy_observation(&[0.3], 1.0).unwrap() - 1.0).abs() < 1e-15);

        let mu = gp.mean_at(&x).unwrap();
        let var = gp.variance_at(&x).unwrap() + gp.noise_variance();
        let mut rng = RngStream::new(5);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| gp.fantasy_observation(&x, rng.normal()).unwrap())
            .collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let v = draws.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (n - 1) as f64;
        assert!((m - mu).abs() <= 3.0 * (var / n as f64).sqrt());
        // Standard error of the sample variance of a Gaussian is var·sqrt(2/(n−1)).
        assert!((v - var).abs() <= 3.0 * var * (2.0 / (n - 1) as f64).sqrt());
    }

    #[test]
    fn noiseless_interpolation() {
        for seed in 0..5 {
            let gp = seeded_state(seed, 8, 2, 0.0);
            let (m, v) = gp.predict(gp.data().inputs()).unwrap();
            for (i, y) in gp.data().outputs().iter().enumerate() {
                assert!((m[i] - y).abs() <= 1e-8);
                assert!(v[i] <= 1e-8);
            }
        }
    }

    #[test]
    fn fantasize_interpolates_noiseless() {
        let gp = seeded_state(3, 5, 1, 0.0);
        let f = gp.fantasize(&[0.77], 0.25).unwrap();
        let (m, v) = f.predict(&Matrix::from_rows(&[[0.77]])).unwrap();
        assert!((m[0] - 0.25).abs() <= 1e-8);
        assert!(v[0] <= 1e-8);
    }

    #[test]
    fn fantasizing_the_mean_keeps_the_mean() {
        let gp = seeded_state(4, 6, 2, 0.0);
        let x = [0.31, 0.64];
        let f = gp.fantasize(&x, gp.fantasy_observation(&x, 0.0).unwrap()).unwrap();
        let test = crate::space::DesignBox::cube(2, 0.0, 1.0).quasi_uniform(50);
        let (a, _) = gp.predict(&test).unwrap();
        let (b, _) = f.predict(&test).unwrap();
        for (u, w) in a.iter().zip(&b) {
            assert!((u - w).abs() <= 1e-8);
        }
    }

    /// Rank-one conditioning formula, evaluated independently of `fantasize`.
    fn conditioned(gp: &GpPosterior, x: &[f64], y: f64, test: &Matrix) -> (Vec<f64>, Matrix) {
        let mut all = Matrix::zeros(0, gp.dim());
        all.push_row(x);
        for r in 0..test.rows() {
            all.push_row(test.row(r));
        }
        let (m, c) = gp.mean_cov(&all).unwrap();
        let s2 = c[(0, 0)] + gp.noise_variance();
        let k = test.rows();
        let mean = (0..k).map(|i| m[i + 1] + c[(i + 1, 0)] * (y - m[0]) / s2).collect();
        let mut cov = Matrix::zeros(k, k);
        for i in 0..k {
            for j in 0..k {
                cov[(i, j)] = c[(i + 1, j + 1)] - c[(i + 1, 0)] * c[(j + 1, 0)] / s2;
            }
        }
        (mean, cov)
    }

    #[test]
    fn fantasize_matches_rank_one_update() {
        for seed in 0..10 {
            let gp = seeded_state(10 + seed, 7, 2, 0.02);
            let mut rng = RngStream::new(seed);
            let x = vec![rng.uniform(), rng.uniform()];
            let y = gp.fantasy_observation(&x, rng.normal()).unwrap();
            let test = crate::space::DesignBox::cube(2, 0.0, 1.0).quasi_uniform(6);
            let f = gp.fantasize(&x, y).unwrap();
            let (m1, c1) = f.mean_cov(&test).unwrap();
            let (m2, c2) = conditioned(&gp, &x, y, &test);
            for (a, b) in m1.iter().zip(&m2) {
                assert!((a - b).abs() <= 1e-8);
            }
            assert!(c1.max_abs_diff(&c2) <= 1e-8);
        }
    }

    #[test]
    fn double_fantasy_commutes_with_batch_rebuild() {
        let gp = seeded_state(21, 6, 1, 0.01);
        let (x1, y1, x2, y2) = ([0.2], 0.4, [0.8], -0.3);
        let seq = gp.fantasize(&x1, y1).unwrap().fantasize(&x2, y2).unwrap();
        let rev = gp.fantasize(&x2, y2).unwrap().fantasize(&x1, y1).unwrap();
        let batch = gp
            .rebuild(gp.data().with(&x1, y1).unwrap().with(&x2, y2).unwrap())
            .unwrap();
        let test = crate::space::DesignBox::cube(1, 0.0, 1.0).grid(11);
        let (a, ca) = seq.mean_cov(&test).unwrap();
        let (b, cb) = rev.mean_cov(&test).unwrap();
        let (c, cc) = batch.mean_cov(&test).unwrap();
        for i in 0..a.len() {
            assert!((a[i] - c[i]).abs() <= 1e-8 && (b[i] - c[i]).abs() <= 1e-8);
        }
        assert!(ca.max_abs_diff(&cc) <= 1e-8 && cb.max_abs_diff(&cc) <= 1e-8);
    }

    #[test]
    fn posterior_variance_bounded_by_prior() {
        let gp = seeded_state(8, 10, 2, 0.01);
        let test = crate::space::DesignBox::cube(2, -0.5, 1.5).quasi_uniform(200);
        let (_, v) = gp.predict(&test).unwrap();
        assert!(v.iter().all(|s| *s <= gp.params().signal_variance + 1e-10));
    }

    #[test]
    fn graph_block_matches_direct_posterior() {
        let gp = seeded_state(9, 6, 2, 0.03);
        let pts = Matrix::from_rows(&[[0.1, 0.9], [0.5, 0.5], [0.7, 0.2]]);
        let mut g = Graph::new();
        let p = g.leaf(pts.clone());
        let b = gp.block(&mut g, p).unwrap();
        let cov = gp.cov_nodes(&mut g, &b, &b);
        let var = gp.var_nodes(&mut g, &b);
        let (m, c) = gp.mean_cov(&pts).unwrap();
        assert!(g.value(b.mean).max_abs_diff(&Matrix::column(&m)) < 1e-12);
        assert!(g.value(cov).max_abs_diff(&c) < 1e-12);
        assert!(g.value(var).max_abs_diff(&Matrix::column(&c.diagonal())) < 1e-12);
        let fixed = gp.fixed_block(&pts).unwrap();
        let mut g2 = Graph::new();
        let cb = gp.constant_block(&mut g2, &fixed);
        assert!(g2.value(cb.mean).max_abs_diff(&Matrix::column(&m)) < 1e-12);
    }

    #[test]
    fn constant_outputs_are_degenerate() {
        let d = one_d(&[(0.0, 2.0), (0.5, 2.0), (1.0, 2.0)]);
        let bounds = HyperBounds::new((0.05, 5.0), (0.1, 10.0), (1e-6, 0.1));
        match fit_hyperparams(&d, &bounds) {
            Err(GpError::DegenerateData { fallback }) => {
                assert_eq!(fallback, bounds.default_params(1))
            }
            other => panic!("expected DegenerateData, got {other:?}"),
        }
    }

    #[test]
    fn fit_never_worse_than_defaults() {
        let bounds = HyperBounds::new((0.02, 3.0), (0.05, 20.0), (1e-6, 0.5));
        for seed in 0..5 {
            let gp = seeded_state(30 + seed, 12, 2, 0.01);
            let fit = fit_hyperparams(gp.data(), &bounds).unwrap();
            let at_default = GpPosterior::new(
                gp.data().clone(),
                bounds.default_params(2),
                PriorMean::DataMean,
            )
            .unwrap()
            .log_marginal_likelihood();
            assert!(fit.log_likelihood >= at_default - 1e-9);
            for r in &fit.restart_likelihoods {
                assert!(fit.log_likelihood >= *r);
            }
            let refit = GpPosterior::new(gp.data().clone(), fit.params.clone(), PriorMean::DataMean)
                .unwrap()
                .log_marginal_likelihood();
            assert!((refit - fit.log_likelihood).abs() < 1e-6);
        }
    }

    #[test]
    fn lml_gradient_matches_finite_differences() {
        let gp = seeded_state(40, 9, 2, 0.05);
        for theta in [vec![-1.0, 0.2, -3.0], vec![-0.5, -1.2, 0.3, -4.0]] {
            let (_, g) = lml_and_grad(gp.data(), &theta, gp.data().output_mean()).unwrap();
            let fd = crate::diff::finite_difference(
                |t| lml_and_grad(gp.data(), t, gp.data().output_mean()).unwrap().0,
                &theta,
                1e-5,
            );
            assert!(crate::diff::relative_error(&g, &fd) < 1e-5);
        }
    }

    #[test]
    fn fit_recovers_lengthscale() {
        let truth = KernelParams::isotropic(1.0, 1.0, 0.01);
        let bounds = HyperBounds::new((0.05, 20.0), (0.01, 100.0), (1e-4, 1.0));
        let mut hits = 0;
        for seed in 0..10 {
            let mut rng = RngStream::new(1000 + seed);
            let n = 50;
            let x = Matrix::from_vec(n, 1, (0..n).map(|_| rng.uniform_in(0.0, 10.0)).collect());
            let f = sample_prior(&x, &truth, &rng.normals(n)).unwrap();
            let y: Vec<f64> = f.iter().map(|v| v + 0.1 * rng.normal()).collect();
            let fit = fit_hyperparams(&Dataset::new(x, y).unwrap(), &bounds).unwrap();
            if fit.params.lengthscales[0].ln().abs() <= 0.5 {
                hits += 1;
            }
        }
        assert!(hits >= 7, "recovered lengthscale on {hits}/10 seeds");
    }
}
