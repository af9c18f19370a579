//! Acquisition functions: the one-shot Monte-Carlo information-gain
//! objective with joint gradient optimization, and the classic baselines.
//!
//! The one-shot objective for a query `x` and one action per fantasy is
//!
//! ```text
//! (1 / NM) Σₘ Σₙ ℓ′(μₘ(aₘ) + Uₘ(aₘ) εₙ, aₘ)
//! ```
//!
//! where `μₘ, Uₘ` describe the posterior after observing the fantasy value
//! `μ(x) + sqrt(σ²(x) + η²) λₘ` at `x`. Fantasy posteriors are obtained by a
//! rank-one update of the current posterior, which keeps the whole objective
//! differentiable in `x` and the actions.

use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::diff::{Graph, NodeId};
use crate::gp::{FixedBlock, GpError, GpPosterior, PosteriorBlock};
use crate::linalg::Matrix;
use crate::losses::{
    bayes_action, normal_bank, AnchorMoments, ExpectationMode, LossError, LossKind, LossSpec, Moments,
    Seeder, SolverConfig,
};
use crate::optim::{projected_descent, DescentConfig, DescentTrace};
use crate::space::{DesignBox, RngStream};

/// Lower bound on the predictive variance at the query.
const VARIANCE_FLOOR: f64 = 1e-12;

const TAG_BANKS: u64 = 0x6261;
const TAG_INIT: u64 = 0x696e;
const TAG_RANDOM: u64 = 0x7273;
/// Posterior-mean peaks offered as alternative anchors to each fantasy.
const MEAN_PEAKS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcquisitionError {
    #[error("invalid acquisition configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown acquisition `{0}` (expected HES, RS, US, KG, EI or POM)")]
    UnknownAcquisition(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Gp(#[from] GpError),
}

impl From<crate::diff::DiffError> for AcquisitionError {
    fn from(e: crate::diff::DiffError) -> Self {
        AcquisitionError::Loss(LossError::Diff(e))
    }
}

/// `Φ(z)`.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `Φ⁻¹(p)` for `p` in `(0, 1)`.
pub fn normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p)
}

/// `φ(z)`.
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Settings of the one-shot optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    /// Number of fantasies `M`.
    pub fantasies: usize,
    /// Size `N` of the inner ε bank.
    pub inner_samples: usize,
    pub restarts: usize,
    pub descent: DescentConfig,
    pub expectation: ExpectationMode,
    /// Quasi-uniform candidates used to seed queries and actions.
    pub candidates: usize,
    /// Start queries scored per restart; the best one is kept. Only used
    /// for point actions, where the starting fantasy actions depend on the
    /// query.
    pub raw_samples: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            fantasies: 16,
            inner_samples: 32,
            restarts: 10,
            descent: DescentConfig {
                steps: 150,
                ..DescentConfig::default()
            },
            expectation: ExpectationMode::Auto,
            candidates: 1000,
            raw_samples: 8,
        }
    }
}

/// State of one one-shot optimization: query, fantasy actions and the fixed
/// sample banks.
#[derive(Debug, Clone)]
pub struct EhigProblem<'a> {
    pub gp: &'a GpPosterior,
    pub spec: &'a LossSpec,
    pub x: Vec<f64>,
    /// One flat action per fantasy.
    pub actions: Vec<Vec<f64>>,
    pub lambda_bank: Vec<f64>,
    /// `K x N`.
    pub eps_bank: Matrix,
    pub expectation: ExpectationMode,
    pub current_objective: f64,
    fixed: Option<FixedBlock>,
}

impl<'a> EhigProblem<'a> {
    pub fn new(
        gp: &'a GpPosterior,
        spec: &'a LossSpec,
        x: Vec<f64>,
        actions: Vec<Vec<f64>>,
        lambda_bank: Vec<f64>,
        eps_bank: Matrix,
        expectation: ExpectationMode,
    ) -> Result<Self, AcquisitionError> {
        if lambda_bank.is_empty() || lambda_bank.len() != actions.len() {
            return Err(AcquisitionError::InvalidConfig(format!(
                "need one action per fantasy and at least one fantasy ({} actions, {} draws)",
                actions.len(),
                lambda_bank.len()
            )));
        }
        if eps_bank.cols() == 0 || eps_bank.rows() != spec.num_anchors() {
            return Err(AcquisitionError::InvalidConfig(format!(
                "inner bank must be {} x N with N >= 1",
                spec.num_anchors()
            )));
        }
        if x.len() != gp.dim() || gp.dim() != spec.bounds().dim() {
            return Err(AcquisitionError::InvalidConfig("dimension mismatch".into()));
        }
        let fixed = match spec.kind() {
            LossKind::MultiLevelSet(h) => Some(gp.fixed_block(&h.grid)?),
            _ => None,
        };
        let mut p = EhigProblem {
            gp,
            spec,
            x,
            actions,
            lambda_bank,
            eps_bank,
            expectation,
            current_objective: f64::NAN,
            fixed,
        };
        p.current_objective = p.objective_at(&p.pack())?;
        Ok(p)
    }

    pub fn fantasies(&self) -> usize {
        self.lambda_bank.len()
    }

    /// `[x, a₁, …, a_M]` as one vector.
    pub fn pack(&self) -> Vec<f64> {
        let mut v = self.x.clone();
        for a in &self.actions {
            v.extend_from_slice(a);
        }
        v
    }

    pub fn unpack(&mut self, params: &[f64]) {
        let d = self.x.len();
        let len = self.spec.action_len();
        self.x.copy_from_slice(&params[..d]);
        for (m, a) in self.actions.iter_mut().enumerate() {
            a.copy_from_slice(&params[d + m * len..d + (m + 1) * len]);
        }
    }

    pub fn scales(&self) -> Vec<f64> {
        let b = self.spec.bounds();
        let mut s: Vec<f64> = (0..b.dim()).map(|i| b.width(i)).collect();
        let per = self.spec.action_scales();
        for _ in 0..self.fantasies() {
            s.extend_from_slice(&per);
        }
        s
    }

    pub fn project(&self, params: &mut [f64]) {
        let d = self.x.len();
        let len = self.spec.action_len();
        self.spec.bounds().clamp(&mut params[..d]);
        for chunk in params[d..].chunks_mut(len) {
            self.spec.project(chunk);
        }
    }

    fn build(&self, params: &[f64]) -> Result<(Graph, Vec<NodeId>, NodeId, Vec<NodeId>), AcquisitionError> {
        let gp = self.gp;
        let d = self.x.len();
        let len = self.spec.action_len();
        let (rows, cols) = self.spec.action_shape();
        let exact = self.spec.uses_exact(self.expectation);
        let needs = self.spec.moments_needed(self.expectation);

        let mut g = Graph::new();
        let x = g.leaf(Matrix::row_vector(&params[..d]));
        let xblk = gp.block(&mut g, x)?;
        let var_x = gp.var_nodes(&mut g, &xblk);
        let s2 = g.offset(var_x, gp.noise_variance());
        // max(s², floor) keeps the update finite at noiseless training inputs.
        let s2 = g.neg(s2);
        let s2 = g.clip_max(s2, -VARIANCE_FLOOR);
        let s2 = g.neg(s2);
        let log_s2 = g.log(s2);
        let inv_s = g.scale(log_s2, -0.5);
        let inv_s = g.exp(inv_s);
        let inv_s2 = g.square(inv_s);

        let mut leaves = vec![x];
        let shared: Option<PosteriorBlock> = self.fixed.as_ref().map(|f| gp.constant_block(&mut g, f));
        let mut terms = Vec::with_capacity(self.fantasies());
        for (m, lambda) in self.lambda_bank.iter().enumerate() {
            let a = g.leaf(Matrix::from_vec(
                rows,
                cols,
                params[d + m * len..d + (m + 1) * len].to_vec(),
            ));
            leaves.push(a);
            let blk = match &shared {
                Some(b) => *b,
                None => gp.block(&mut g, a)?,
            };
            let k = g.value(blk.mean).rows();
            // Cross-covariance between the anchors and the query.
            let c = gp.cov_nodes(&mut g, &blk, &xblk);
            let shift = g.scale(inv_s, *lambda);
            let shift = g.broadcast_rows(shift, k);
            let dmean = g.mul(c, shift);
            let mean = g.add(blk.mean, dmean);
            let var = if needs == Moments::MeanVar {
                let v = gp.var_nodes(&mut g, &blk);
                let c2 = g.square(c);
                let w = g.broadcast_rows(inv_s2, k);
                let drop = g.mul(c2, w);
                Some(g.sub(v, drop))
            } else {
                None
            };
            let cov = if needs == Moments::MeanCov {
                let base = gp.cov_nodes(&mut g, &blk, &blk);
                let ct = g.transpose(c);
                let outer = g.matmul(c, ct);
                let w = g.broadcast_rows(inv_s2, k);
                let w = g.broadcast_cols(w, k);
                let drop = g.mul(outer, w);
                Some(g.sub(base, drop))
            } else {
                None
            };
            let moments = AnchorMoments { mean, var, cov };
            let eps = (!exact).then_some(&self.eps_bank);
            terms.push(self.spec.expected_loss_node(&mut g, &moments, a, eps, gp.jitter())?);
        }
        let mut total = terms[0];
        for t in &terms[1..] {
            total = g.add(total, *t);
        }
        let out = g.scale(total, 1.0 / self.fantasies() as f64);
        Ok((g, leaves, out, terms))
    }

    /// Expected loss of each fantasy at packed parameters.
    pub fn fantasy_values(&self, params: &[f64]) -> Result<Vec<f64>, AcquisitionError> {
        let (g, _, _, terms) = self.build(params)?;
        Ok(terms.iter().map(|t| g.scalar(*t)).collect())
    }

    /// Objective at packed parameters.
    pub fn objective_at(&self, params: &[f64]) -> Result<f64, AcquisitionError> {
        let (g, _, out, _) = self.build(params)?;
        Ok(g.scalar(out))
    }

    /// Objective and gradient at packed parameters.
    pub fn objective_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>), AcquisitionError> {
        let (g, leaves, out, _) = self.build(params)?;
        let grads = g.grad(out, &leaves)?;
        let mut flat = Vec::with_capacity(params.len());
        for gm in grads {
            flat.extend_from_slice(gm.as_slice());
        }
        Ok((g.scalar(out), flat))
    }

    /// Reference value computed with explicit fantasy models.
    pub fn objective_by_refit(&self) -> Result<f64, AcquisitionError> {
        let exact = self.spec.uses_exact(self.expectation);
        let mut total = 0.0;
        for (lambda, a) in self.lambda_bank.iter().zip(&self.actions) {
            let y = self.gp.fantasy_observation(&self.x, *lambda)?;
            let fantasy = self.gp.fantasize(&self.x, y)?;
            let anchors = self.spec.anchors(a)?;
            let joint = fantasy.joint_posterior(&anchors)?;
            total += if exact {
                closed_form_value(self.spec, &joint, a)?
            } else {
                let n = self.eps_bank.cols();
                let mut s = 0.0;
                for c in 0..n {
                    let f = crate::gp::sample_values(&joint, &self.eps_bank.col_vec(c))?;
                    s += self.spec.reduce(&f, a)?;
                }
                s / n as f64
            };
        }
        Ok(total / self.fantasies() as f64)
    }
}

/// Closed-form `E[ℓ′]` from an explicit joint Gaussian.
fn closed_form_value(
    spec: &LossSpec,
    joint: &crate::gp::JointGaussian,
    action: &[f64],
) -> Result<f64, AcquisitionError> {
    let base = spec.reduce(&joint.mean, action)?;
    Ok(match spec.kind() {
        LossKind::Sequence(_) => base + joint.covariance().diagonal().iter().sum::<f64>(),
        _ => base,
    })
}

/// Starting action for every fantasy. For point actions, each fantasy gets
/// the base action or a copy with one anchor moved onto the query or onto
/// one of `peaks`, whichever has the lowest expected loss under that
/// fantasy. A fantasy that observes a high value at `x` thus starts with an
/// anchor there, and one that observes a low value can fall back to another
/// mode of the posterior mean.
#[allow(clippy::too_many_arguments)]
fn initial_fantasy_actions(
    gp: &GpPosterior,
    spec: &LossSpec,
    x: &[f64],
    base: &[f64],
    peaks: &[Vec<f64>],
    lambda: &[f64],
    eps: &Matrix,
    mode: ExpectationMode,
) -> Result<Vec<Vec<f64>>, AcquisitionError> {
    let m = lambda.len();
    if !spec.has_point_actions() {
        return Ok(vec![base.to_vec(); m]);
    }
    let d = x.len();
    let mut options = vec![base.to_vec()];
    for p in std::iter::once(x).chain(peaks.iter().map(|p| p.as_slice())) {
        for i in 0..spec.num_anchors() {
            let mut a = base.to_vec();
            a[i * d..(i + 1) * d].copy_from_slice(p);
            options.push(a);
        }
    }
    let mut best = vec![(f64::INFINITY, 0usize); m];
    for (j, a) in options.iter().enumerate() {
        let p = EhigProblem::new(gp, spec, x.to_vec(), vec![a.clone(); m], lambda.to_vec(), eps.clone(), mode)?;
        for (slot, v) in best.iter_mut().zip(p.fantasy_values(&p.pack())?) {
            if v < slot.0 {
                *slot = (v, j);
            }
        }
    }
    Ok(best.into_iter().map(|(_, j)| options[j].clone()).collect())
}

/// The one-shot objective at the problem's current parameters. Lower is better.
pub fn ehig_objective(p: &EhigProblem) -> Result<f64, AcquisitionError> {
    p.objective_at(&p.pack())
}

/// Outcome of an acquisition step.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionResult {
    pub chosen_x: Vec<f64>,
    pub objective_value: f64,
    pub restarts_log: Vec<f64>,
    /// Objective trace of each restart.
    pub histories: Vec<Vec<f64>>,
    pub wall_time: f64,
    pub no_improvement: bool,
}

/// Jointly minimizes the one-shot objective over the query and the fantasy
/// actions. Every restart draws its own banks. Start queries alternate
/// between posterior-mean seeded and uniform points; fantasy actions start
/// from `warm_action` when given (neutral logits for the level-set loss),
/// with one anchor moved onto the query or a posterior-mean peak for
/// fantasies where that is better.
/// For point actions each restart scores `raw_samples` start queries and
/// descends from the best.
pub fn optimize_ehig(
    gp: &GpPosterior,
    spec: &LossSpec,
    opt: &OptimizerConfig,
    rng: &RngStream,
    warm_action: Option<&[f64]>,
) -> Result<AcquisitionResult, AcquisitionError> {
    if opt.fantasies == 0 || opt.inner_samples == 0 || opt.restarts == 0 {
        return Err(AcquisitionError::InvalidConfig(
            "fantasies, inner samples and restarts must be positive".into(),
        ));
    }
    let started = Instant::now();
    let seeder = Seeder::new(gp, spec.bounds(), opt.candidates)?;
    let peaks = seeder.mean_peaks(spec, MEAN_PEAKS);
    let results: Vec<Result<(Vec<f64>, DescentTrace), AcquisitionError>> = (0..opt.restarts)
        .into_par_iter()
        .map(|r| {
            let mut banks = rng.derive(TAG_BANKS, r as u64);
            let lambda = banks.stratified_normals(opt.fantasies);
            let eps = normal_bank(&mut banks, spec.num_anchors(), opt.inner_samples);
            let mut init = rng.derive(TAG_INIT, r as u64);
            let action = match (warm_action, spec.has_point_actions()) {
                (Some(w), true) => w.to_vec(),
                (None, true) => seeder.seeded_action(spec, &mut init, true),
                (_, false) => vec![0.0; spec.action_len()],
            };
            let raw = if spec.has_point_actions() { opt.raw_samples.max(1) } else { 1 };
            let mut start: Option<(f64, Vec<f64>, Vec<Vec<f64>>)> = None;
            for j in 0..raw {
                let x = if (r + j) % 2 == 0 {
                    seeder.seeded_query(spec, &mut init, r == 0 && j == 0)
                } else {
                    spec.bounds().sample(&mut init)
                };
                let actions = initial_fantasy_actions(gp, spec, &x, &action, &peaks, &lambda, &eps, opt.expectation)?;
                let value = if raw > 1 {
                    EhigProblem::new(gp, spec, x.clone(), actions.clone(), lambda.clone(), eps.clone(), opt.expectation)?
                        .current_objective
                } else {
                    0.0
                };
                if start.as_ref().is_none_or(|s| value < s.0) {
                    start = Some((value, x, actions));
                }
            }
            let (_, x, actions) = start.expect("at least one start");
            let problem = EhigProblem::new(gp, spec, x, actions, lambda, eps, opt.expectation)?;
            let scales = problem.scales();
            let mut f = |p: &[f64]| problem.objective_and_grad(p);
            let trace = projected_descent(
                &mut f,
                problem.pack(),
                &scales,
                &|p: &mut [f64]| problem.project(p),
                &opt.descent,
            )?;
            Ok((trace.point[..gp.dim()].to_vec(), trace))
        })
        .collect();
    let results: Vec<(Vec<f64>, DescentTrace)> = results.into_iter().collect::<Result<_, _>>()?;
    let (best, _) = results
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.value.total_cmp(&b.1 .1.value).then(a.0.cmp(&b.0)))
        .expect("at least one restart");
    let no_improvement = results.iter().all(|(_, t)| !t.improved());
    if no_improvement {
        log::debug!("optimize_ehig: no restart improved on its start");
    }
    Ok(AcquisitionResult {
        chosen_x: results[best].0.clone(),
        objective_value: results[best].1.value,
        restarts_log: results.iter().map(|(_, t)| t.value).collect(),
        histories: results.iter().map(|(_, t)| t.history.clone()).collect(),
        wall_time: started.elapsed().as_secs_f64(),
        no_improvement,
    })
}

/// Minimum posterior expected loss and its Monte-Carlo standard error.
pub fn h_entropy(
    gp: &GpPosterior,
    spec: &LossSpec,
    solver: &SolverConfig,
    rng: &RngStream,
    warm_start: Option<&[f64]>,
) -> Result<(f64, f64), AcquisitionError> {
    let ba = bayes_action(gp, spec, solver, rng, warm_start)?;
    Ok((ba.expected_loss, ba.std_error))
}

/// Plug-in incumbent: the largest posterior mean over the observed inputs.
pub fn incumbent(gp: &GpPosterior) -> Result<f64, AcquisitionError> {
    if gp.data().is_empty() {
        return Err(AcquisitionError::InvalidConfig("incumbent needs observations".into()));
    }
    let (means, _) = gp.predict(gp.data().inputs())?;
    Ok(means.into_iter().fold(f64::NEG_INFINITY, f64::max))
}

/// Closed-form expected improvement over `f_star` of the noisy observation.
pub fn ei_analytic(x: &[f64], gp: &GpPosterior, f_star: f64) -> Result<f64, AcquisitionError> {
    let (m, v) = gp.predict(&Matrix::row_vector(x))?;
    Ok(ei_from_moments(m[0], (v[0] + gp.noise_variance()).sqrt(), f_star))
}

/// `(μ − f*) Φ(z) + s φ(z)` with `z = (μ − f*) / s`.
pub fn ei_from_moments(mean: f64, sd: f64, f_star: f64) -> f64 {
    let gap = mean - f_star;
    if sd <= 1e-12 {
        return gap.max(0.0);
    }
    let z = gap / sd;
    (gap * normal_cdf(z) + sd * normal_pdf(z)).max(0.0)
}

/// Probability that the latent value exceeds `tau`.
pub fn pi_analytic(x: &[f64], gp: &GpPosterior, tau: f64) -> Result<f64, AcquisitionError> {
    let (m, v) = gp.predict(&Matrix::row_vector(x))?;
    Ok(pi_from_moments(m[0], v[0].sqrt(), tau))
}

pub fn pi_from_moments(mean: f64, sd: f64, tau: f64) -> f64 {
    if sd <= 1e-12 {
        return match mean.partial_cmp(&tau) {
            Some(std::cmp::Ordering::Greater) => 1.0,
            Some(std::cmp::Ordering::Less) => 0.0,
            _ => 0.5,
        };
    }
    normal_cdf((mean - tau) / sd)
}

/// Predictive variance including observation noise.
pub fn us_score(x: &[f64], gp: &GpPosterior) -> Result<f64, AcquisitionError> {
    Ok(gp.variance_at(x)? + gp.noise_variance())
}

/// Uniform draw from the box.
pub fn rs_choice(bounds: &DesignBox, rng: &mut RngStream) -> Vec<f64> {
    bounds.sample(rng)
}

/// Negated distance of the label probability from one half at the nearest
/// threshold; larger is more uncertain.
pub fn pom_score(x: &[f64], gp: &GpPosterior, thresholds: &[f64]) -> Result<f64, AcquisitionError> {
    let (m, v) = gp.predict(&Matrix::row_vector(x))?;
    Ok(pom_from_moments(m[0], v[0].sqrt(), thresholds))
}

fn pom_from_moments(mean: f64, sd: f64, thresholds: &[f64]) -> f64 {
    -thresholds
        .iter()
        .map(|c| (pi_from_moments(mean, sd, *c) - 0.5).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Index of the largest score (first on ties).
pub fn argmax(scores: &[f64]) -> usize {
    scores
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, s)| if *s > acc.1 { (i, *s) } else { acc })
        .0
}

/// Query-selection rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AcquisitionKind {
    Hes,
    Rs,
    Us,
    Kg,
    Ei,
    Pom,
}

impl AcquisitionKind {
    pub const ALL: [AcquisitionKind; 6] = [
        AcquisitionKind::Hes,
        AcquisitionKind::Rs,
        AcquisitionKind::Us,
        AcquisitionKind::Kg,
        AcquisitionKind::Ei,
        AcquisitionKind::Pom,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AcquisitionKind::Hes => "HES",
            AcquisitionKind::Rs => "RS",
            AcquisitionKind::Us => "US",
            AcquisitionKind::Kg => "KG",
            AcquisitionKind::Ei => "EI",
            AcquisitionKind::Pom => "POM",
        }
    }
}

impl std::fmt::Display for AcquisitionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AcquisitionKind {
    type Err = AcquisitionError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AcquisitionKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| AcquisitionError::UnknownAcquisition(s.to_string()))
    }
}

/// Chooses the next query with the given rule.
///
/// `candidates` is the quasi-uniform set used by the gradient-free scores
/// (US, EI, POM). `warm_action` seeds the fantasy actions of HES.
pub fn select_query(
    kind: AcquisitionKind,
    gp: &GpPosterior,
    spec: &LossSpec,
    opt: &OptimizerConfig,
    candidates: &Matrix,
    rng: &RngStream,
    warm_action: Option<&[f64]>,
) -> Result<AcquisitionResult, AcquisitionError> {
    let started = Instant::now();
    let pick = |scores: Vec<f64>| {
        let i = argmax(&scores);
        AcquisitionResult {
            chosen_x: candidates.row(i).to_vec(),
            objective_value: -scores[i],
            restarts_log: Vec::new(),
            histories: Vec::new(),
            wall_time: started.elapsed().as_secs_f64(),
            no_improvement: false,
        }
    };
    match kind {
        AcquisitionKind::Hes => optimize_ehig(gp, spec, opt, rng, warm_action),
        AcquisitionKind::Kg => {
            let kg = LossSpec::neg_value(spec.bounds().clone());
            optimize_ehig(gp, &kg, opt, rng, None)
        }
        AcquisitionKind::Rs => {
            let x = rs_choice(spec.bounds(), &mut rng.derive(TAG_RANDOM, 0));
            Ok(AcquisitionResult {
                chosen_x: x,
                objective_value: 0.0,
                restarts_log: Vec::new(),
                histories: Vec::new(),
                wall_time: started.elapsed().as_secs_f64(),
                no_improvement: false,
            })
        }
        AcquisitionKind::Us => {
            let (_, v) = gp.predict(candidates)?;
            Ok(pick(v.into_iter().map(|s| s + gp.noise_variance()).collect()))
        }
        AcquisitionKind::Ei => {
            let f_star = incumbent(gp)?;
            let (m, v) = gp.predict(candidates)?;
            let s: Vec<f64> = m
                .iter()
                .zip(&v)
                .map(|(mu, var)| ei_from_moments(*mu, (var + gp.noise_variance()).sqrt(), f_star))
                .collect();
            Ok(pick(s))
        }
        AcquisitionKind::Pom => {
            let thresholds = match spec.kind() {
                LossKind::MultiLevelSet(h) => h.thresholds.clone(),
                LossKind::Sequence(h) => h.targets.clone(),
                _ => {
                    return Err(AcquisitionError::InvalidConfig(
                        "POM needs a level-set or sequence task for its thresholds".into(),
                    ))
                }
            };
            let (m, v) = gp.predict(candidates)?;
            let s = m
                .iter()
                .zip(&v)
                .map(|(mu, var)| pom_from_moments(*mu, var.sqrt(), &thresholds))
                .collect();
            Ok(pick(s))
        }
    }
}
