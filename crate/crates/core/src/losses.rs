//! Terminal-action decision problems and their Bayes actions.
//!
//! A [`LossSpec`] maps an action to a fixed number of anchor points and
//! reduces the function values at those anchors (plus the action itself) to a
//! scalar loss. Actions are flat vectors: `k x d` row-major points for the
//! point-valued losses, `J x m` row-major logits for the multi-level-set loss.

use rayon::prelude::*;
use thiserror::Error;

use crate::diff::{self, DiffError, Graph, NodeId};
use crate::gp::{FixedBlock, GpError, GpPosterior};
use crate::linalg::Matrix;
use crate::optim::{projected_descent, DescentConfig, DescentTrace};
use crate::space::{DesignBox, RngStream};

/// Default smoothing temperature for the k-guesses loss during optimization.
pub const DEFAULT_TEMPERATURE: f64 = 0.05;
/// Default diversity weight for the top-k loss.
pub const DEFAULT_DISTANCE_WEIGHT: f64 = 0.5;
/// Logits are kept in `[-LOGIT_BOUND, LOGIT_BOUND]`.
pub const LOGIT_BOUND: f64 = 40.0;
/// Per-coordinate descent scale for logits.
const LOGIT_SCALE: f64 = 20.0;

const TAG_EPS: u64 = 0x6570;
const TAG_RESTART: u64 = 0x7273;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("invalid loss specification: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("{0} has no closed-form expectation; use Monte Carlo")]
    NoExactExpectation(&'static str),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

impl From<crate::linalg::LinalgError> for LossError {
    fn from(e: crate::linalg::LinalgError) -> Self {
        LossError::Gp(GpError::Linalg(e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopKDiversityHyper {
    pub k: usize,
    pub distance_weight: f64,
    /// `f64::INFINITY` disables the cap.
    pub distance_cap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiLevelSetHyper {
    /// One grid point per row.
    pub grid: Matrix,
    /// Strictly increasing.
    pub thresholds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceHyper {
    pub targets: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossKind {
    TopK(TopKDiversityHyper),
    KGuesses { k: usize, temperature: f64 },
    MultiLevelSet(MultiLevelSetHyper),
    Sequence(SequenceHyper),
    NegValue,
}

/// How `max` is evaluated in the k-guesses loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaxMode {
    Hard,
    Smooth { temperature: f64 },
}

/// `−Σ f(aᵢ) − ω Σ_{i<j} min(‖aᵢ − aⱼ‖, cap)`.
pub fn topk_diversity_loss(f_values: &[f64], actions: &Matrix, hyper: &TopKDiversityHyper) -> f64 {
    -f_values.iter().sum::<f64>() - hyper.distance_weight * diversity(actions, hyper.distance_cap)
}

fn diversity(actions: &Matrix, cap: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..actions.rows() {
        for j in i + 1..actions.rows() {
            let d2: f64 = actions
                .row(i)
                .iter()
                .zip(actions.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            total += d2.sqrt().min(cap);
        }
    }
    total
}

/// `−max f` (hard) or `−smooth_max(f, τ)` (smooth).
pub fn k_guesses_loss(f_values: &[f64], mode: MaxMode) -> f64 {
    match mode {
        MaxMode::Hard => -f_values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        MaxMode::Smooth { temperature } => -diff::smooth_max(f_values, temperature),
    }
}

/// `−Σᵢ Σₓ logistic(zᵢ(x)) (f(x) − cᵢ)` with `logits` of shape `J x m`.
pub fn mlse_loss(f_values: &[f64], logits: &Matrix, thresholds: &[f64]) -> f64 {
    mlse_with(f_values, logits, thresholds, diff::logistic)
}

fn mlse_with(f_values: &[f64], logits: &Matrix, thresholds: &[f64], squash: impl Fn(f64) -> f64) -> f64 {
    let mut total = 0.0;
    for (x, f) in f_values.iter().enumerate() {
        for (i, c) in thresholds.iter().enumerate() {
            total += squash(logits[(x, i)]) * (f - c);
        }
    }
    -total
}

/// `Σ (f(aᵢ) − targetᵢ)²`.
pub fn sequence_loss(f_values: &[f64], targets: &[f64]) -> f64 {
    f_values
        .iter()
        .zip(targets)
        .map(|(f, t)| (f - t) * (f - t))
        .sum()
}

pub fn neg_value_loss(f_value: f64) -> f64 {
    -f_value
}

/// A decision problem over a design box.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSpec {
    kind: LossKind,
    bounds: DesignBox,
}

/// Posterior moments of `f` at one action's anchors, recorded on a graph.
#[derive(Debug, Clone, Copy)]
pub struct AnchorMoments {
    /// `K x 1`.
    pub mean: NodeId,
    /// `K x 1` marginal variances.
    pub var: Option<NodeId>,
    /// `K x K` covariance.
    pub cov: Option<NodeId>,
}

/// Which moments [`LossSpec::expected_loss_node`] needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Moments {
    Mean,
    MeanVar,
    MeanCov,
}

/// How the expectation over `f` is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExpectationMode {
    /// Closed form when the reduction is affine or quadratic in the values,
    /// otherwise the fixed Monte-Carlo bank.
    #[default]
    Auto,
    /// Always average over the fixed Monte-Carlo bank.
    MonteCarlo,
}

impl LossSpec {
    /// Top-k with diversity. Defaults: `ω = 0.5`, cap `= 2 · mean box width / k`.
    pub fn top_k(
        bounds: DesignBox,
        k: usize,
        distance_weight: Option<f64>,
        distance_cap: Option<f64>,
    ) -> Result<Self, LossError> {
        if k == 0 {
            return Err(LossError::InvalidSpec("top-k needs k >= 1".into()));
        }
        let w = distance_weight.unwrap_or(DEFAULT_DISTANCE_WEIGHT);
        let cap = distance_cap.unwrap_or(2.0 * bounds.mean_width() / k as f64);
        if !w.is_finite() || w < 0.0 || cap.is_nan() || cap <= 0.0 {
            return Err(LossError::InvalidSpec(
                "distance weight must be >= 0 and the cap > 0".into(),
            ));
        }
        Ok(LossSpec {
            kind: LossKind::TopK(TopKDiversityHyper {
                k,
                distance_weight: w,
                distance_cap: cap,
            }),
            bounds,
        })
    }

    pub fn k_guesses(bounds: DesignBox, k: usize, temperature: f64) -> Result<Self, LossError> {
        if k == 0 || !(temperature > 0.0 && temperature.is_finite()) {
            return Err(LossError::InvalidSpec(
                "k-guesses needs k >= 1 and a positive temperature".into(),
            ));
        }
        Ok(LossSpec {
            kind: LossKind::KGuesses { k, temperature },
            bounds,
        })
    }

    pub fn multi_level_set(bounds: DesignBox, grid: Matrix, thresholds: Vec<f64>) -> Result<Self, LossError> {
        if grid.rows() == 0 || grid.cols() != bounds.dim() {
            return Err(LossError::InvalidSpec(format!(
                "level-set grid must be a non-empty {}-column matrix",
                bounds.dim()
            )));
        }
        if thresholds.is_empty()
            || !thresholds.iter().all(|c| c.is_finite())
            || thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(LossError::InvalidSpec(
                "thresholds must be finite, non-empty and strictly increasing".into(),
            ));
        }
        Ok(LossSpec {
            kind: LossKind::MultiLevelSet(MultiLevelSetHyper { grid, thresholds }),
            bounds,
        })
    }

    pub fn sequence(bounds: DesignBox, targets: Vec<f64>) -> Result<Self, LossError> {
        if targets.is_empty() || !targets.iter().all(|t| t.is_finite()) {
            return Err(LossError::InvalidSpec("targets must be finite and non-empty".into()));
        }
        Ok(LossSpec {
            kind: LossKind::Sequence(SequenceHyper { targets }),
            bounds,
        })
    }

    pub fn neg_value(bounds: DesignBox) -> Self {
        LossSpec {
            kind: LossKind::NegValue,
            bounds,
        }
    }

    pub fn kind(&self) -> &LossKind {
        &self.kind
    }

    pub fn bounds(&self) -> &DesignBox {
        &self.bounds
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            LossKind::TopK(_) => "topk",
            LossKind::KGuesses { .. } => "kguesses",
            LossKind::MultiLevelSet(_) => "mlse",
            LossKind::Sequence(_) => "sequence",
            LossKind::NegValue => "negvalue",
        }
    }

    /// Number of anchor points `K`.
    pub fn num_anchors(&self) -> usize {
        match &self.kind {
            LossKind::TopK(h) => h.k,
            LossKind::KGuesses { k, .. } => *k,
            LossKind::MultiLevelSet(h) => h.grid.rows(),
            LossKind::Sequence(h) => h.targets.len(),
            LossKind::NegValue => 1,
        }
    }

    /// Whether actions are points in the design box (as opposed to logits).
    pub fn has_point_actions(&self) -> bool {
        !matches!(self.kind, LossKind::MultiLevelSet(_))
    }

    /// Shape of the action as a matrix.
    pub fn action_shape(&self) -> (usize, usize) {
        match &self.kind {
            LossKind::MultiLevelSet(h) => (h.grid.rows(), h.thresholds.len()),
            _ => (self.num_anchors(), self.bounds.dim()),
        }
    }

    pub fn action_len(&self) -> usize {
        let (r, c) = self.action_shape();
        r * c
    }

    fn check_action(&self, action: &[f64]) -> Result<(), LossError> {
        if action.len() != self.action_len() {
            return Err(LossError::DimensionMismatch {
                expected: self.action_len(),
                found: action.len(),
            });
        }
        Ok(())
    }

    fn action_matrix(&self, action: &[f64]) -> Matrix {
        let (r, c) = self.action_shape();
        Matrix::from_vec(r, c, action.to_vec())
    }

    /// The anchor points at which the loss reads the function.
    pub fn anchors(&self, action: &[f64]) -> Result<Matrix, LossError> {
        self.check_action(action)?;
        Ok(match &self.kind {
            LossKind::MultiLevelSet(h) => h.grid.clone(),
            _ => self.action_matrix(action),
        })
    }

    /// The differentiable reduction used during optimization (smooth max for
    /// k-guesses, soft memberships for the level-set loss).
    pub fn reduce(&self, f_values: &[f64], action: &[f64]) -> Result<f64, LossError> {
        self.reduce_with(f_values, action, false)
    }

    /// The reported loss: hard max for k-guesses, memberships thresholded at
    /// probability one half for the level-set loss.
    pub fn evaluate(&self, f_values: &[f64], action: &[f64]) -> Result<f64, LossError> {
        self.reduce_with(f_values, action, true)
    }

    fn reduce_with(&self, f: &[f64], action: &[f64], hard: bool) -> Result<f64, LossError> {
        self.check_action(action)?;
        if f.len() != self.num_anchors() {
            return Err(LossError::DimensionMismatch {
                expected: self.num_anchors(),
                found: f.len(),
            });
        }
        Ok(match &self.kind {
            LossKind::TopK(h) => topk_diversity_loss(f, &self.action_matrix(action), h),
            LossKind::KGuesses { temperature, .. } => {
                let mode = if hard {
                    MaxMode::Hard
                } else {
                    MaxMode::Smooth {
                        temperature: *temperature,
                    }
                };
                k_guesses_loss(f, mode)
            }
            LossKind::MultiLevelSet(h) => {
                let z = self.action_matrix(action);
                if hard {
                    mlse_with(f, &z, &h.thresholds, |v| if v >= 0.0 { 1.0 } else { 0.0 })
                } else {
                    mlse_loss(f, &z, &h.thresholds)
                }
            }
            LossKind::Sequence(h) => sequence_loss(f, &h.targets),
            LossKind::NegValue => neg_value_loss(f[0]),
        })
    }

    /// Exact loss of `action` on a known function.
    pub fn true_loss(&self, f_true: &dyn Fn(&[f64]) -> f64, action: &[f64]) -> Result<f64, LossError> {
        let anchors = self.anchors(action)?;
        let f: Vec<f64> = (0..anchors.rows()).map(|r| f_true(anchors.row(r))).collect();
        self.evaluate(&f, action)
    }

    /// True when `E[ℓ′]` over a Gaussian has a closed form in mean and variance.
    pub fn exact_expectation(&self) -> bool {
        !matches!(self.kind, LossKind::KGuesses { .. })
    }

    /// Whether a given mode integrates exactly.
    pub fn uses_exact(&self, mode: ExpectationMode) -> bool {
        mode == ExpectationMode::Auto && self.exact_expectation()
    }

    /// Moments needed for `mode`.
    pub fn moments_needed(&self, mode: ExpectationMode) -> Moments {
        if !self.uses_exact(mode) {
            Moments::MeanCov
        } else if matches!(self.kind, LossKind::Sequence(_)) {
            Moments::MeanVar
        } else {
            Moments::Mean
        }
    }

    /// Clamps point actions into the box and logits into their bound.
    pub fn project(&self, action: &mut [f64]) {
        if self.has_point_actions() {
            let d = self.bounds.dim();
            for p in action.chunks_mut(d) {
                self.bounds.clamp(p);
            }
        } else {
            for z in action.iter_mut() {
                *z = z.clamp(-LOGIT_BOUND, LOGIT_BOUND);
            }
        }
    }

    /// Per-coordinate descent scales.
    pub fn action_scales(&self) -> Vec<f64> {
        if self.has_point_actions() {
            let d = self.bounds.dim();
            (0..self.action_len()).map(|i| self.bounds.width(i % d)).collect()
        } else {
            vec![LOGIT_SCALE; self.action_len()]
        }
    }

    /// Records the action as a graph leaf of shape [`LossSpec::action_shape`].
    pub fn action_leaf(&self, g: &mut Graph, action: &[f64]) -> NodeId {
        g.leaf(self.action_matrix(action))
    }

    /// Diversity term `Σ_{i<j} min(‖aᵢ − aⱼ‖, cap)` on a graph.
    fn diversity_node(&self, g: &mut Graph, action: NodeId, cap: f64) -> NodeId {
        let k = g.value(action).rows();
        let d2 = g.sq_dist(action, action);
        let mut mask = Matrix::zeros(k, k);
        for i in 0..k {
            for j in i + 1..k {
                mask[(i, j)] = 1.0;
            }
        }
        let upper = g.mul_const(d2, mask);
        let dist = g.sqrt(upper);
        let capped = g.clip_max(dist, cap);
        g.sum(capped)
    }

    /// `Σᵢ Σₓ aᵢ(x) cᵢ` and the row sums `Σᵢ aᵢ(x)` (`J x 1`) for logits `z`.
    fn mlse_parts(g: &mut Graph, logits: NodeId, thresholds: &[f64]) -> (NodeId, NodeId) {
        let a = g.logistic(logits);
        let j = g.value(logits).rows();
        let mut c = Matrix::zeros(j, thresholds.len());
        for r in 0..j {
            c.row_mut(r).copy_from_slice(thresholds);
        }
        let ac = g.mul_const(a, c);
        let offset = g.sum(ac);
        let rows = g.sum_cols(a);
        (offset, rows)
    }

    /// `E[ℓ′(f, a)]` on a graph, with `f ~ N(mean, cov)` at the anchors.
    ///
    /// With `eps = None` the expectation is taken in closed form; otherwise
    /// `eps` is a `K x N` bank of standard normals and the result is the
    /// average of `ℓ′(mean + U eps_n, a)` with `U Uᵀ = cov`.
    pub fn expected_loss_node(
        &self,
        g: &mut Graph,
        moments: &AnchorMoments,
        action: NodeId,
        eps: Option<&Matrix>,
        jitter: f64,
    ) -> Result<NodeId, LossError> {
        match eps {
            None => self.closed_form_node(g, moments, action),
            Some(bank) => {
                let cov = moments
                    .cov
                    .ok_or_else(|| LossError::InvalidSpec("Monte-Carlo path needs the covariance".into()))?;
                let u = g.cholesky(cov, jitter)?;
                let e = g.constant(bank.clone());
                let noise = g.matmul(u, e);
                let centre = g.broadcast_cols(moments.mean, bank.cols());
                let samples = g.add(centre, noise);
                Ok(self.sampled_node(g, samples, action))
            }
        }
    }

    fn closed_form_node(&self, g: &mut Graph, m: &AnchorMoments, action: NodeId) -> Result<NodeId, LossError> {
        Ok(match &self.kind {
            LossKind::NegValue => {
                let s = g.sum(m.mean);
                g.neg(s)
            }
            LossKind::TopK(h) => {
                let s = g.sum(m.mean);
                let s = g.neg(s);
                if h.distance_weight == 0.0 || h.k == 1 {
                    s
                } else {
                    let div = self.diversity_node(g, action, h.distance_cap);
                    let div = g.scale(div, h.distance_weight);
                    g.sub(s, div)
                }
            }
            LossKind::Sequence(h) => {
                let var = m
                    .var
                    .ok_or_else(|| LossError::InvalidSpec("sequence loss needs variances".into()))?;
                let t = g.constant(Matrix::column(&h.targets));
                let r = g.sub(m.mean, t);
                let sq = g.square(r);
                let total = g.add(sq, var);
                g.sum(total)
            }
            LossKind::MultiLevelSet(h) => {
                let (offset, rows) = Self::mlse_parts(g, action, &h.thresholds);
                let weighted = g.mul(rows, m.mean);
                let s = g.sum(weighted);
                g.sub(offset, s)
            }
            LossKind::KGuesses { .. } => return Err(LossError::NoExactExpectation("k-guesses")),
        })
    }

    /// Mean over the columns of `samples` (`K x N`) of `ℓ′(column, a)`.
    pub fn sampled_node(&self, g: &mut Graph, samples: NodeId, action: NodeId) -> NodeId {
        let n = g.value(samples).cols() as f64;
        match &self.kind {
            LossKind::NegValue => {
                let s = g.sum(samples);
                g.scale(s, -1.0 / n)
            }
            LossKind::TopK(h) => {
                let s = g.sum(samples);
                let s = g.scale(s, -1.0 / n);
                if h.distance_weight == 0.0 || h.k == 1 {
                    s
                } else {
                    let div = self.diversity_node(g, action, h.distance_cap);
                    let div = g.scale(div, h.distance_weight);
                    g.sub(s, div)
                }
            }
            LossKind::KGuesses { temperature, .. } => {
                let m = g.smooth_max_cols(samples, *temperature);
                let s = g.sum(m);
                g.scale(s, -1.0 / n)
            }
            LossKind::Sequence(h) => {
                let cols = g.value(samples).cols();
                let mut t = Matrix::zeros(h.targets.len(), cols);
                for (r, v) in h.targets.iter().enumerate() {
                    t.row_mut(r).fill(*v);
                }
                let t = g.constant(t);
                let r = g.sub(samples, t);
                let sq = g.square(r);
                let s = g.sum(sq);
                g.scale(s, 1.0 / n)
            }
            LossKind::MultiLevelSet(h) => {
                let (offset, rows) = Self::mlse_parts(g, action, &h.thresholds);
                let rt = g.transpose(rows);
                let proj = g.matmul(rt, samples);
                let s = g.sum(proj);
                let s = g.scale(s, 1.0 / n);
                g.sub(offset, s)
            }
        }
    }
}

/// Bayes-action solver settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub restarts: usize,
    pub descent: DescentConfig,
    /// Size `N` of the fixed ε bank for Monte-Carlo expectations.
    pub samples: usize,
    pub expectation: ExpectationMode,
    /// Quasi-uniform candidates used to seed restarts.
    pub candidates: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            restarts: 10,
            descent: DescentConfig::default(),
            samples: 64,
            expectation: ExpectationMode::Auto,
            candidates: 1000,
        }
    }
}

/// A solved Bayes action.
#[derive(Debug, Clone, PartialEq)]
pub struct BayesAction {
    pub action: Vec<f64>,
    /// Estimate of `min_a E[ℓ(f, a)]` (exact for closed-form expectations).
    pub expected_loss: f64,
    /// Monte-Carlo standard error of `expected_loss` (zero when exact).
    pub std_error: f64,
    /// Final value of every restart.
    pub restart_values: Vec<f64>,
    /// Set when no restart improved on its initialization.
    pub no_improvement: bool,
}

/// Candidate points and posterior means used to seed actions and queries.
#[derive(Debug, Clone)]
pub struct Seeder {
    candidates: Matrix,
    means: Vec<f64>,
}

impl Seeder {
    pub fn new(gp: &GpPosterior, bounds: &DesignBox, n: usize) -> Result<Self, GpError> {
        let candidates = bounds.quasi_uniform(n.max(1));
        let (means, _) = gp.predict(&candidates)?;
        Ok(Seeder { candidates, means })
    }

    /// Candidate indices ordered by `key`, ascending.
    fn ranked(&self, key: impl Fn(f64) -> f64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.means.len()).collect();
        idx.sort_by(|a, b| key(self.means[*a]).total_cmp(&key(self.means[*b])));
        idx
    }

    /// Picks one of the `pool` best entries of `ranked`; the best on the
    /// first restart.
    fn pick(&self, ranked: &[usize], pool: usize, rng: &mut RngStream, first: bool) -> Vec<f64> {
        let i = if first { 0 } else { rng.below(pool.min(ranked.len()).max(1)) };
        self.candidates.row(ranked[i]).to_vec()
    }

    /// An action seeded from the posterior mean: high-mean points spread out
    /// for the max-type losses, points whose mean is closest to each target
    /// for sequence search, and neutral logits for the level-set loss.
    pub fn seeded_action(&self, spec: &LossSpec, rng: &mut RngStream, first: bool) -> Vec<f64> {
        match spec.kind() {
            LossKind::MultiLevelSet(_) => vec![0.0; spec.action_len()],
            LossKind::Sequence(h) => {
                let mut out = Vec::with_capacity(spec.action_len());
                for t in &h.targets {
                    let ranked = self.ranked(|m| (m - t).abs());
                    out.extend(self.pick(&ranked, 5, rng, first));
                }
                out
            }
            _ => {
                let k = spec.num_anchors();
                let ranked = self.ranked(|m| -m);
                let pool = (ranked.len() / 10).max(5 * k).min(ranked.len());
                let mut order: Vec<usize> = ranked[..pool].to_vec();
                if !first {
                    for i in (1..order.len()).rev() {
                        order.swap(i, rng.below(i + 1));
                    }
                }
                let sep = 0.1 * spec.bounds().mean_width();
                let mut chosen: Vec<usize> = Vec::with_capacity(k);
                for &c in &order {
                    if chosen.len() == k {
                        break;
                    }
                    let far = chosen.iter().all(|&o| {
                        let d2: f64 = self
                            .candidates
                            .row(c)
                            .iter()
                            .zip(self.candidates.row(o))
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum();
                        d2.sqrt() >= sep
                    });
                    if far {
                        chosen.push(c);
                    }
                }
                let mut i = 0;
                while chosen.len() < k {
                    chosen.push(order[i % order.len()]);
                    i += 1;
                }
                chosen
                    .iter()
                    .flat_map(|&c| self.candidates.row(c).to_vec())
                    .collect()
            }
        }
    }

    /// Up to `count` local maxima of the posterior mean over the upper half
    /// of the candidates, best first: a candidate counts when no higher one
    /// lies within a tenth of the mean box width. Empty for losses that do
    /// not reward high values.
    pub fn mean_peaks(&self, spec: &LossSpec, count: usize) -> Vec<Vec<f64>> {
        if !matches!(spec.kind(), LossKind::TopK(_) | LossKind::KGuesses { .. } | LossKind::NegValue) {
            return Vec::new();
        }
        let sep2 = (0.1 * spec.bounds().mean_width()).powi(2);
        let ranked = self.ranked(|m| -m);
        let mut out = Vec::new();
        for (n, &c) in ranked[..ranked.len().div_ceil(2)].iter().enumerate() {
            let p = self.candidates.row(c);
            let dominated = ranked[..n].iter().any(|&o| {
                let d2: f64 = p.iter().zip(self.candidates.row(o)).map(|(a, b)| (a - b) * (a - b)).sum();
                d2 < sep2
            });
            if !dominated {
                out.push(p.to_vec());
                if out.len() == count {
                    break;
                }
            }
        }
        out
    }

    /// A query point seeded from the posterior mean in the same way as the
    /// loss's actions (closest to a threshold for the level-set loss).
    pub fn seeded_query(&self, spec: &LossSpec, rng: &mut RngStream, first: bool) -> Vec<f64> {
        match spec.kind() {
            LossKind::MultiLevelSet(h) => {
                let ranked = self.ranked(|m| {
                    h.thresholds
                        .iter()
                        .map(|c| (m - c).abs())
                        .fold(f64::INFINITY, f64::min)
                });
                let pool = (ranked.len() / 20).max(5);
                self.pick(&ranked, pool, rng, first)
            }
            LossKind::Sequence(h) => {
                let t = h.targets[rng.below(h.targets.len())];
                let ranked = self.ranked(|m| (m - t).abs());
                self.pick(&ranked, 10, rng, first)
            }
            _ => {
                let ranked = self.ranked(|m| -m);
                let pool = (ranked.len() / 20).max(5);
                self.pick(&ranked, pool, rng, first)
            }
        }
    }

    /// Uniform random action (neutral logits for the level-set loss).
    pub fn uniform_action(spec: &LossSpec, rng: &mut RngStream) -> Vec<f64> {
        if spec.has_point_actions() {
            (0..spec.num_anchors())
                .flat_map(|_| spec.bounds().sample(rng))
                .collect()
        } else {
            vec![0.0; spec.action_len()]
        }
    }
}

/// Everything needed to evaluate `E[ℓ′(f, a)]` under one posterior.
pub struct ActionObjective<'a> {
    gp: &'a GpPosterior,
    spec: &'a LossSpec,
    eps: Option<Matrix>,
    fixed: Option<FixedBlock>,
}

impl<'a> ActionObjective<'a> {
    /// `eps` is the `K x N` bank used when the expectation is not closed-form.
    pub fn new(
        gp: &'a GpPosterior,
        spec: &'a LossSpec,
        mode: ExpectationMode,
        eps: Matrix,
    ) -> Result<Self, LossError> {
        if gp.dim() != spec.bounds().dim() {
            return Err(LossError::DimensionMismatch {
                expected: spec.bounds().dim(),
                found: gp.dim(),
            });
        }
        let fixed = match spec.kind() {
            LossKind::MultiLevelSet(h) => Some(gp.fixed_block(&h.grid)?),
            _ => None,
        };
        let eps = (!spec.uses_exact(mode)).then_some(eps);
        Ok(ActionObjective { gp, spec, eps, fixed })
    }

    fn build(&self, action: &[f64]) -> Result<(Graph, NodeId, NodeId), LossError> {
        let mut g = Graph::new();
        let a = self.spec.action_leaf(&mut g, action);
        let block = match &self.fixed {
            Some(f) => self.gp.constant_block(&mut g, f),
            None => self.gp.block(&mut g, a)?,
        };
        let needs = if self.eps.is_some() {
            Moments::MeanCov
        } else {
            self.spec.moments_needed(ExpectationMode::Auto)
        };
        let moments = AnchorMoments {
            mean: block.mean,
            var: (needs == Moments::MeanVar).then(|| self.gp.var_nodes(&mut g, &block)),
            cov: (needs == Moments::MeanCov).then(|| self.gp.cov_nodes(&mut g, &block, &block)),
        };
        let out = self
            .spec
            .expected_loss_node(&mut g, &moments, a, self.eps.as_ref(), self.gp.jitter())?;
        Ok((g, a, out))
    }

    pub fn value(&self, action: &[f64]) -> Result<f64, LossError> {
        let (g, _, out) = self.build(action)?;
        Ok(g.scalar(out))
    }

    pub fn value_and_grad(&self, action: &[f64]) -> Result<(f64, Vec<f64>), LossError> {
        let (g, a, out) = self.build(action)?;
        let grad = g.grad(out, &[a])?;
        Ok((g.scalar(out), grad[0].as_slice().to_vec()))
    }

    /// Monte-Carlo standard error of the estimate at `action` (zero when exact).
    pub fn std_error(&self, action: &[f64]) -> Result<f64, LossError> {
        let Some(eps) = &self.eps else { return Ok(0.0) };
        let anchors = self.spec.anchors(action)?;
        let joint = self.gp.joint_posterior(&anchors)?;
        let n = eps.cols();
        let per: Vec<f64> = (0..n)
            .map(|c| {
                let f = crate::gp::sample_values(&joint, &eps.col_vec(c))?;
                self.spec.reduce(&f, action)
            })
            .collect::<Result<_, LossError>>()?;
        Ok(std_error(&per))
    }
}

/// Sample standard error of the mean.
pub fn std_error(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

/// `K x N` bank of standard normals.
pub fn normal_bank(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, rng.normals(rows * cols))
}

/// Minimizes the posterior expected loss over a continuous action set.
///
/// Half of the restarts start from posterior-mean seeded actions and half
/// from uniform ones; `warm_start`, when given, adds one more restart.
/// All restarts share one ε bank.
pub fn bayes_action(
    gp: &GpPosterior,
    spec: &LossSpec,
    solver: &SolverConfig,
    rng: &RngStream,
    warm_start: Option<&[f64]>,
) -> Result<BayesAction, LossError> {
    if let Some(w) = warm_start {
        spec.check_action(w)?;
    }
    let eps = normal_bank(&mut rng.derive(TAG_EPS, 0), spec.num_anchors(), solver.samples.max(1));
    let objective = ActionObjective::new(gp, spec, solver.expectation, eps)?;
    let seeder = Seeder::new(gp, spec.bounds(), solver.candidates)?;

    let restarts = if spec.has_point_actions() {
        solver.restarts.max(1)
    } else {
        1
    };
    let mut starts: Vec<Vec<f64>> = (0..restarts)
        .map(|r| {
            let mut sub = rng.derive(TAG_RESTART, r as u64);
            if r % 2 == 0 {
                seeder.seeded_action(spec, &mut sub, r == 0)
            } else {
                Seeder::uniform_action(spec, &mut sub)
            }
        })
        .collect();
    if let Some(w) = warm_start {
        starts.push(w.to_vec());
    }

    let scales = spec.action_scales();
    let traces: Vec<Result<DescentTrace, LossError>> = starts
        .into_par_iter()
        .map(|start| {
            let mut f = |a: &[f64]| objective.value_and_grad(a);
            projected_descent(&mut f, start, &scales, &|a: &mut [f64]| spec.project(a), &solver.descent)
        })
        .collect();
    let traces: Vec<DescentTrace> = traces.into_iter().collect::<Result<_, _>>()?;
    let best = traces
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.value.total_cmp(&b.1.value).then(a.0.cmp(&b.0)))
        .map(|(_, t)| t)
        .expect("at least one restart");
    let no_improvement = traces.iter().all(|t| !t.improved());
    if no_improvement {
        log::debug!("bayes_action: no restart improved on its start");
    }
    Ok(BayesAction {
        action: best.point.clone(),
        expected_loss: best.value,
        std_error: objective.std_error(&best.point)?,
        restart_values: traces.iter().map(|t| t.value).collect(),
        no_improvement,
    })
}

/// Exact Bayes action of the negative-value loss over a finite action set:
/// the candidate with the largest posterior mean. Returns its row index and
/// the expected loss.
pub fn bayes_action_discrete(gp: &GpPosterior, candidates: &Matrix) -> Result<(usize, f64), LossError> {
    if candidates.rows() == 0 {
        return Err(LossError::InvalidSpec("empty candidate set".into()));
    }
    let (means, _) = gp.predict(candidates)?;
    let (i, m) = means
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, m)| if *m > acc.1 { (i, *m) } else { acc });
    Ok((i, -m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{finite_difference, relative_error};
    use crate::gp::{Dataset, KernelParams, PriorMean};

    fn unit(d: usize) -> DesignBox {
        DesignBox::cube(d, 0.0, 1.0)
    }

    fn state(seed: u64, n: usize, d: usize, noise: f64) -> GpPosterior {
        let mut rng = RngStream::new(seed);
        let mut x = Matrix::zeros(0, d);
        let mut y = Vec::new();
        for _ in 0..n {
            let p: Vec<f64> = (0..d).map(|_| rng.uniform()).collect();
            y.push((4.0 * p[0]).sin() + p.iter().sum::<f64>() + 0.1 * rng.normal());
            x.push_row(&p);
        }
        GpPosterior::new(
            Dataset::new(x, y).unwrap(),
            KernelParams::isotropic(0.25, 1.0, noise),
            PriorMean::DataMean,
        )
        .unwrap()
    }

    #[test]
    fn topk_examples() {
        let h = TopKDiversityHyper {
            k: 2,
            distance_weight: 1.0,
            distance_cap: f64::INFINITY,
        };
        let a = Matrix::from_rows(&[[0.0], [1.0]]);
        assert_eq!(topk_diversity_loss(&[1.0, 2.0], &a, &h), -4.0);
        let one = TopKDiversityHyper { k: 1, ..h.clone() };
        assert_eq!(topk_diversity_loss(&[3.0], &Matrix::from_rows(&[[0.2]]), &one), -3.0);
        let plain = TopKDiversityHyper {
            distance_weight: 0.0,
            ..h
        };
        assert_eq!(topk_diversity_loss(&[1.0, 2.0], &a, &plain), -3.0);
    }

    #[test]
    fn topk_decreases_when_values_increase() {
        let h = TopKDiversityHyper {
            k: 3,
            distance_weight: 0.5,
            distance_cap: 1.0,
        };
        let a = Matrix::from_rows(&[[0.1, 0.2], [0.5, 0.5], [0.9, 0.3]]);
        let base = topk_diversity_loss(&[1.0, 2.0, 3.0], &a, &h);
        assert!(topk_diversity_loss(&[1.0, 2.5, 3.0], &a, &h) < base);
    }

    #[test]
    fn k_guesses_examples() {
        assert_eq!(k_guesses_loss(&[1.0, 2.0], MaxMode::Hard), -2.0);
        let s = MaxMode::Smooth { temperature: 0.05 };
        assert_eq!(k_guesses_loss(&[1.5], MaxMode::Hard), -1.5);
        assert!((k_guesses_loss(&[1.5], s) + 1.5).abs() < 1e-15);
        let mut rng = RngStream::new(4);
        for _ in 0..100 {
            let f = rng.normals(4);
            assert!(k_guesses_loss(&f, s) <= k_guesses_loss(&f, MaxMode::Hard));
        }
    }

    #[test]
    fn mlse_examples() {
        let ones = Matrix::filled(2, 1, 50.0);
        assert!(mlse_loss(&[1.0, -1.0], &ones, &[0.0]).abs() < 1e-12);
        let half = Matrix::zeros(2, 1);
        let f = [1.0, 2.0];
        let full = mlse_loss(&f, &ones, &[0.0]);
        assert!((mlse_loss(&f, &half, &[0.0]) - 0.5 * full).abs() < 1e-12);
        // Pointwise optimum is the indicator of f > c.
        let f = [0.4, -0.3, 1.2];
        let best = Matrix::from_rows(&[[50.0], [-50.0], [50.0]]);
        let mut rng = RngStream::new(2);
        for _ in 0..50 {
            let z = Matrix::from_vec(3, 1, rng.normals(3).iter().map(|v| 3.0 * v).collect());
            assert!(mlse_loss(&f, &best, &[0.1]) <= mlse_loss(&f, &z, &[0.1]));
        }
    }

    #[test]
    fn sequence_examples() {
        assert_eq!(sequence_loss(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(sequence_loss(&[3.0], &[1.0]), 4.0);
        assert_eq!(
            sequence_loss(&[1.0, 5.0, 2.0], &[0.0, 1.0, 4.0]),
            sequence_loss(&[2.0, 1.0, 5.0], &[4.0, 0.0, 1.0])
        );
    }

    #[test]
    fn neg_value_examples() {
        assert_eq!(neg_value_loss(2.0), -2.0);
        assert!(neg_value_loss(3.0) < neg_value_loss(2.0));
        assert_eq!(neg_value_loss(2.0 + 1.5), neg_value_loss(2.0) - 1.5);
    }

    #[test]
    fn decomposition_matches_direct_evaluation() {
        let f_true = |x: &[f64]| (3.0 * x[0]).sin() + x[1];
        let b = unit(2);
        let topk = LossSpec::top_k(b.clone(), 2, Some(0.7), None).unwrap();
        let a = [0.1, 0.2, 0.8, 0.6];
        let direct = topk_diversity_loss(
            &[f_true(&a[0..2]), f_true(&a[2..4])],
            &Matrix::from_vec(2, 2, a.to_vec()),
            match topk.kind() {
                LossKind::TopK(h) => h,
                _ => unreachable!(),
            },
        );
        assert_eq!(topk.true_loss(&f_true, &a).unwrap(), direct);

        let grid = b.grid(3);
        let mlse = LossSpec::multi_level_set(b.clone(), grid.clone(), vec![0.2, 0.9]).unwrap();
        let z: Vec<f64> = (0..18).map(|i| i as f64 - 8.5).collect();
        let f: Vec<f64> = (0..9).map(|r| f_true(grid.row(r))).collect();
        let hard = mlse_with(&f, &Matrix::from_vec(9, 2, z.clone()), &[0.2, 0.9], |v| {
            if v >= 0.0 {
                1.0
            } else {
                0.0
            }
        });
        assert_eq!(mlse.true_loss(&f_true, &z).unwrap(), hard);
    }

    #[test]
    fn true_loss_sequence_at_level_sets_is_zero() {
        let f_true = |x: &[f64]| 2.0 * x[0];
        let spec = LossSpec::sequence(unit(1), vec![0.5, 1.0, 1.5]).unwrap();
        assert_eq!(spec.true_loss(&f_true, &[0.25, 0.5, 0.75]).unwrap(), 0.0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(LossSpec::top_k(unit(2), 0, None, None).is_err());
        assert!(LossSpec::multi_level_set(unit(2), unit(2).grid(2), vec![0.5, 0.5]).is_err());
        assert!(LossSpec::sequence(unit(2), vec![]).is_err());
        assert!(LossSpec::k_guesses(unit(2), 2, 0.0).is_err());
    }

    /// Checks the closed-form and Monte-Carlo objectives against finite
    /// differences on random actions.
    fn gradient_check(spec: &LossSpec, gp: &GpPosterior, mode: ExpectationMode, seed: u64) {
        let mut rng = RngStream::new(seed);
        let eps = normal_bank(&mut rng, spec.num_anchors(), 8);
        let obj = ActionObjective::new(gp, spec, mode, eps).unwrap();
        for _ in 0..20 {
            let a = if spec.has_point_actions() {
                Seeder::uniform_action(spec, &mut rng)
            } else {
                rng.normals(spec.action_len())
            };
            let (_, g) = obj.value_and_grad(&a).unwrap();
            let fd = finite_difference(|p| obj.value(p).unwrap(), &a, 1e-5);
            let err = relative_error(&g, &fd);
            assert!(err <= 1e-4, "{} rel err {err}", spec.name());
        }
    }

    #[test]
    fn objective_gradients_match_finite_differences() {
        let gp = state(3, 6, 2, 0.01);
        let b = unit(2);
        let specs = [
            LossSpec::top_k(b.clone(), 3, Some(0.5), Some(10.0)).unwrap(),
            LossSpec::k_guesses(b.clone(), 2, 0.3).unwrap(),
            LossSpec::multi_level_set(b.clone(), b.grid(3), vec![0.5, 1.5]).unwrap(),
            LossSpec::sequence(b.clone(), vec![0.3, 1.0]).unwrap(),
            LossSpec::neg_value(b.clone()),
        ];
        for (i, spec) in specs.iter().enumerate() {
            gradient_check(spec, &gp, ExpectationMode::MonteCarlo, i as u64);
            if spec.exact_expectation() {
                gradient_check(spec, &gp, ExpectationMode::Auto, 100 + i as u64);
            }
        }
    }

    #[test]
    fn closed_form_agrees_with_large_bank() {
        let gp = state(5, 5, 2, 0.01);
        let b = unit(2);
        let specs = [
            LossSpec::top_k(b.clone(), 2, None, None).unwrap(),
            LossSpec::sequence(b.clone(), vec![0.2, 1.4]).unwrap(),
            LossSpec::multi_level_set(b.clone(), b.grid(2), vec![1.0]).unwrap(),
        ];
        let mut rng = RngStream::new(1);
        for spec in &specs {
            let a = if spec.has_point_actions() {
                Seeder::uniform_action(spec, &mut rng)
            } else {
                rng.normals(spec.action_len())
            };
            let eps = normal_bank(&mut rng, spec.num_anchors(), 20_000);
            let exact = ActionObjective::new(&gp, spec, ExpectationMode::Auto, eps.clone())
                .unwrap()
                .value(&a)
                .unwrap();
            let mc = ActionObjective::new(&gp, spec, ExpectationMode::MonteCarlo, eps).unwrap();
            let se = mc.std_error(&a).unwrap();
            assert!((mc.value(&a).unwrap() - exact).abs() <= 4.0 * se + 1e-9, "{}", spec.name());
        }
    }

    #[test]
    fn neg_value_bayes_action_matches_grid_argmax() {
        let gp = state(11, 5, 1, 0.01);
        let b = unit(1);
        let spec = LossSpec::neg_value(b.clone());
        let ba = bayes_action(&gp, &spec, &SolverConfig::default(), &RngStream::new(0), None).unwrap();
        let grid = b.grid(1001);
        let (means, _) = gp.predict(&grid).unwrap();
        let best = means
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert!((ba.action[0] - grid[(best, 0)]).abs() <= 0.02);
        assert!(ba.std_error == 0.0);
    }

    #[test]
    fn mlse_logit_signs_follow_posterior_mean() {
        let gp = state(12, 12, 2, 0.01);
        let b = unit(2);
        let grid = b.grid(30);
        let spec = LossSpec::multi_level_set(b, grid.clone(), vec![0.8, 1.6]).unwrap();
        let ba = bayes_action(&gp, &spec, &SolverConfig::default(), &RngStream::new(0), None).unwrap();
        let (means, _) = gp.predict(&grid).unwrap();
        let mut agree = 0;
        for (x, m) in means.iter().enumerate() {
            for (i, c) in [0.8, 1.6].iter().enumerate() {
                if (ba.action[2 * x + i] > 0.0) == (m > c) {
                    agree += 1;
                }
            }
        }
        assert!(agree as f64 >= 0.95 * (2 * means.len()) as f64, "{agree}");
    }

    #[test]
    fn discrete_bayes_action_picks_max_mean() {
        let gp = state(13, 6, 1, 0.01);
        let (i, loss) = bayes_action_discrete(&gp, gp.data().inputs()).unwrap();
        let (means, _) = gp.predict(gp.data().inputs()).unwrap();
        let best = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(means[i], best);
        assert_eq!(loss, -best);
    }

    #[test]
    fn bayes_action_is_deterministic_and_warm_start_helps() {
        let gp = state(14, 8, 2, 0.01);
        let spec = LossSpec::top_k(unit(2), 2, None, None).unwrap();
        let solver = SolverConfig {
            restarts: 4,
            ..SolverConfig::default()
        };
        let a = bayes_action(&gp, &spec, &solver, &RngStream::new(9), None).unwrap();
        let b = bayes_action(&gp, &spec, &solver, &RngStream::new(9), None).unwrap();
        assert_eq!(a, b);
        let w = bayes_action(&gp, &spec, &solver, &RngStream::new(10), Some(&a.action)).unwrap();
        assert!(w.expected_loss <= a.expected_loss + 1e-12);
    }
}
