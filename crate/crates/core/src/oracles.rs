//! Reference checks: finite-difference gradient suites, the KG / EI / PI
//! equivalence oracles, and the information-gain sign check.
//!
//! Each oracle runs on seeded one-dimensional GP states with five
//! observations drawn from the prior, and reports a pass/fail per seed.

use std::time::Instant;

use crate::acquisition::{
    ei_from_moments, incumbent, normal_cdf, optimize_ehig, AcquisitionError, EhigProblem, OptimizerConfig,
};
use crate::diff::{finite_difference, relative_error, Graph};
use crate::gp::{sample_prior, Dataset, GpError, GpPosterior, KernelParams, PriorMean};
use crate::linalg::Matrix;
use crate::losses::{
    bayes_action, bayes_action_discrete, normal_bank, std_error, ExpectationMode, LossSpec, Seeder, SolverConfig,
};
use crate::optim::DescentConfig;
use crate::space::{DesignBox, RngStream};

/// Lengthscale of the prior the oracle states are drawn from.
pub const ORACLE_LENGTHSCALE: f64 = 0.15;

/// Outcome of one seed of an oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedCheck {
    pub seed: u64,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of an oracle over all its seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub name: &'static str,
    pub seeds: Vec<SeedCheck>,
    /// Seeds that must pass.
    pub required: usize,
    pub elapsed_s: f64,
}

impl OracleReport {
    pub fn passes(&self) -> usize {
        self.seeds.iter().filter(|s| s.passed).count()
    }

    pub fn passed(&self) -> bool {
        self.passes() >= self.required
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for s in &self.seeds {
            writeln!(f, "  seed {:>2}: {} {}", s.seed, if s.passed { "ok  " } else { "FAIL" }, s.detail)?;
        }
        write!(
            f,
            "{}: {} ({}/{} seeds, need {}, {:.1}s)",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.passes(),
            self.seeds.len(),
            self.required,
            self.elapsed_s
        )
    }
}

/// A 1-D state on `[0, 1]`: `n` uniform inputs, outputs drawn from the GP
/// prior with [`ORACLE_LENGTHSCALE`] plus noise, and the matching posterior
/// with zero prior mean.
pub fn oracle_state(seed: u64, n: usize, noise_variance: f64) -> Result<GpPosterior, GpError> {
    let mut rng = RngStream::new(seed);
    let mut x = Matrix::zeros(0, 1);
    for _ in 0..n {
        x.push_row(&[rng.uniform()]);
    }
    let params = KernelParams::isotropic(ORACLE_LENGTHSCALE, 1.0, noise_variance);
    let f = sample_prior(&x, &params, &rng.normals(n))?;
    let y = f.iter().map(|v| v + noise_variance.sqrt() * rng.normal()).collect();
    GpPosterior::new(Dataset::new(x, y)?, params, PriorMean::Zero)
}

fn unit_grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

fn argmax(v: &[f64]) -> usize {
    crate::acquisition::argmax(v)
}

/// Monte-Carlo EHIG with the past-query action set and `ℓ(f, a) = −f(a)`,
/// compared with analytic expected improvement after removing the mean over
/// the grid. Fantasy draws are stratified and shared across the grid. Passes
/// when the largest deviation is within three pooled standard errors, each
/// computed with the plain i.i.d. formula.
pub fn ei_oracle_seed(seed: u64, fantasies: usize, grid_points: usize) -> Result<SeedCheck, AcquisitionError> {
    let gp = oracle_state(seed, 5, 0.0)?;
    let past = gp.data().inputs().clone();
    let f_star = incumbent(&gp)?;
    let (_, h_before) = bayes_action_discrete(&gp, &past)?;
    let lambda = RngStream::new(seed).derive(0x6569, 0).stratified_normals(fantasies);
    let grid = unit_grid(grid_points);
    let mut ehig = Vec::with_capacity(grid.len());
    let mut ses = Vec::with_capacity(grid.len());
    let mut ei = Vec::with_capacity(grid.len());
    for &x in &grid {
        let mut actions = past.clone();
        actions.push_row(&[x]);
        let mut after = Vec::with_capacity(fantasies);
        for l in &lambda {
            let y = gp.fantasy_observation(&[x], *l)?;
            let fgp = gp.fantasize(&[x], y)?;
            after.push(bayes_action_discrete(&fgp, &actions)?.1);
        }
        let mean_after = after.iter().sum::<f64>() / after.len() as f64;
        ehig.push(h_before - mean_after);
        ses.push(std_error(&after));
        let (m, v) = (gp.mean_at(&[x])?, gp.variance_at(&[x])?);
        ei.push(ei_from_moments(m, v.max(0.0).sqrt(), f_star));
    }
    let centre = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| x - m).collect::<Vec<_>>()
    };
    let (a, b) = (centre(&ehig), centre(&ei));
    let max_dev = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let pooled = (ses.iter().map(|s| s * s).sum::<f64>() / ses.len() as f64).sqrt();
    Ok(SeedCheck {
        seed,
        passed: max_dev <= 3.0 * pooled,
        detail: format!("max deviation {max_dev:.3e}, pooled SE {pooled:.3e}"),
    })
}

/// Indicator-loss EHIG with the single-point action set `{x}` and threshold
/// at the incumbent, against analytic probability of improvement. Passes
/// when both argmaxes over the grid coincide.
pub fn pi_oracle_seed(seed: u64, fantasies: usize, grid_points: usize) -> Result<SeedCheck, AcquisitionError> {
    let gp = oracle_state(seed, 5, 0.0)?;
    let tau = incumbent(&gp)?;
    let lambda = RngStream::new(seed).derive(0x7069, 0).stratified_normals(fantasies);
    let grid = unit_grid(grid_points);
    let mut ehig = Vec::with_capacity(grid.len());
    let mut pi = Vec::with_capacity(grid.len());
    for &x in &grid {
        // The fantasy mean at x is affine in the fantasy observation and the
        // fantasy variance does not depend on it.
        let y0 = gp.fantasy_observation(&[x], 0.0)?;
        let y1 = gp.fantasy_observation(&[x], 1.0)?;
        let g0 = gp.fantasize(&[x], y0)?;
        let g1 = gp.fantasize(&[x], y1)?;
        let (m0, m1) = (g0.mean_at(&[x])?, g1.mean_at(&[x])?);
        let sd = g0.variance_at(&[x])?.max(0.0).sqrt();
        let prob = |m: f64| {
            if sd > 0.0 {
                normal_cdf((m - tau) / sd)
            } else if m > tau {
                1.0
            } else {
                0.0
            }
        };
        let after: f64 = lambda.iter().map(|l| -prob(m0 + (m1 - m0) * l)).sum::<f64>() / fantasies as f64;
        // The prior-side term is constant in x.
        ehig.push(-after);
        let (m, v) = (gp.mean_at(&[x])?, gp.variance_at(&[x])?);
        pi.push(crate::acquisition::pi_from_moments(m, v.max(0.0).sqrt(), tau));
    }
    let (i, j) = (argmax(&ehig), argmax(&pi));
    Ok(SeedCheck {
        seed,
        passed: i == j,
        detail: format!("EHIG argmax x = {:.2}, PI argmax x = {:.2}", grid[i], grid[j]),
    })
}

/// Nested Monte-Carlo knowledge gradient on the grid: for each candidate,
/// the average over `lambda` of the largest fantasy posterior mean on a
/// four-times finer grid.
pub fn nested_kg(gp: &GpPosterior, grid_points: usize, lambda: &[f64]) -> Result<Vec<f64>, GpError> {
    let fine = unit_grid(4 * (grid_points - 1) + 1);
    let pts = Matrix::from_vec(fine.len(), 1, fine.clone());
    let (mean, cov) = gp.mean_cov(&pts)?;
    let best_now = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((0..grid_points)
        .map(|i| {
            let c = 4 * i;
            let s = (cov[(c, c)] + gp.noise_variance()).max(1e-12).sqrt();
            let total: f64 = lambda
                .iter()
                .map(|l| {
                    (0..fine.len())
                        .map(|j| mean[j] + cov[(j, c)] * l / s)
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .sum();
            total / lambda.len() as f64 - best_now
        })
        .collect())
}

/// One-shot EHIG with the negative-value loss against nested-MC KG. Passes
/// when the one-shot query is within one grid cell of the KG argmax.
pub fn kg_oracle_seed(seed: u64, opt: &OptimizerConfig, grid_points: usize) -> Result<SeedCheck, AcquisitionError> {
    let gp = oracle_state(seed, 5, 0.01)?;
    let lambda = RngStream::new(seed).derive(0x6b67, 0).stratified_normals(1024);
    let kg = nested_kg(&gp, grid_points, &lambda)?;
    let grid = unit_grid(grid_points);
    let best = argmax(&kg);
    let spec = LossSpec::neg_value(DesignBox::cube(1, 0.0, 1.0));
    let res = optimize_ehig(&gp, &spec, opt, &RngStream::new(seed).derive(0x6f73, 0), None)?;
    let x = res.chosen_x[0];
    let cell = 1.0 / (grid_points - 1) as f64;
    Ok(SeedCheck {
        seed,
        passed: (x - grid[best]).abs() <= cell + 1e-12,
        detail: format!("one-shot x = {x:.3}, KG argmax x = {:.3}", grid[best]),
    })
}

/// Settings of the one-shot optimizer used by the KG oracle.
pub fn kg_oracle_optimizer() -> OptimizerConfig {
    OptimizerConfig {
        fantasies: 64,
        inner_samples: 1,
        restarts: 8,
        descent: DescentConfig {
            steps: 150,
            step_size: 0.05,
            ..DescentConfig::default()
        },
        expectation: ExpectationMode::Auto,
        candidates: 500,
        raw_samples: 8,
    }
}

fn run_oracle(
    name: &'static str,
    seeds: u64,
    required: usize,
    check: impl Fn(u64) -> Result<SeedCheck, AcquisitionError> + Sync,
) -> OracleReport {
    use rayon::prelude::*;
    let started = Instant::now();
    let seeds = (0..seeds)
        .into_par_iter()
        .map(|s| {
            check(s).unwrap_or_else(|e| SeedCheck {
                seed: s,
                passed: false,
                detail: format!("error: {e}"),
            })
        })
        .collect();
    OracleReport {
        name,
        seeds,
        required,
        elapsed_s: started.elapsed().as_secs_f64(),
    }
}

/// EI equivalence on 10 seeds, 2048 fantasies, 101 grid points; 9 must pass.
pub fn ei_oracle() -> OracleReport {
    run_oracle("oracle-ei", 10, 9, |s| ei_oracle_seed(s, 2048, 101))
}

/// PI equivalence on 10 seeds and 101 grid points; 9 must pass.
pub fn pi_oracle(fantasies: usize) -> OracleReport {
    run_oracle("oracle-pi", 10, 9, |s| pi_oracle_seed(s, fantasies, 101))
}

/// KG equivalence on 10 seeds and 51 grid points; 8 must pass.
pub fn kg_oracle() -> OracleReport {
    let opt = kg_oracle_optimizer();
    run_oracle("oracle-kg", 10, 8, |s| kg_oracle_seed(s, &opt, 51))
}

/// Result of one finite-difference suite.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<22} {} ({} instances, max rel err {:.2e})",
            self.name,
            if self.passed() { "PASS" } else { "FAIL" },
            self.instances,
            self.max_rel_err
        )
    }
}

/// One loss of each family on `[0, 1]²`.
pub fn loss_families() -> Vec<LossSpec> {
    let b = DesignBox::cube(2, 0.0, 1.0);
    vec![
        LossSpec::top_k(b.clone(), 2, Some(0.5), None).expect("valid"),
        LossSpec::k_guesses(b.clone(), 2, 0.2).expect("valid"),
        LossSpec::multi_level_set(b.clone(), b.grid(4), vec![-0.3, 0.6]).expect("valid"),
        LossSpec::sequence(b.clone(), vec![-0.5, 0.5]).expect("valid"),
        LossSpec::neg_value(b),
    ]
}

/// A 2-D state on `[0, 1]²` with noisy prior-drawn observations.
pub fn state_2d(seed: u64, n: usize, noise_variance: f64) -> Result<GpPosterior, GpError> {
    let mut rng = RngStream::new(seed);
    let mut x = Matrix::zeros(0, 2);
    for _ in 0..n {
        x.push_row(&[rng.uniform(), rng.uniform()]);
    }
    let params = KernelParams::isotropic(0.3, 1.0, noise_variance);
    let f = sample_prior(&x, &params, &rng.normals(n))?;
    let y = f.iter().map(|v| v + noise_variance.sqrt() * rng.normal()).collect();
    GpPosterior::new(Dataset::new(x, y)?, params, PriorMean::DataMean)
}

fn random_action(spec: &LossSpec, rng: &mut RngStream) -> Vec<f64> {
    if spec.has_point_actions() {
        Seeder::uniform_action(spec, rng)
    } else {
        rng.normals(spec.action_len()).iter().map(|v| 2.0 * v).collect()
    }
}

/// Value of the sampled reduction for a `K x N` sample matrix.
fn reduction_value(spec: &LossSpec, samples: &Matrix, action: &[f64]) -> f64 {
    let mut g = Graph::new();
    let s = g.leaf(samples.clone());
    let a = spec.action_leaf(&mut g, action);
    let out = spec.sampled_node(&mut g, s, a);
    g.value(out).to_scalar()
}

fn reduction_check(spec: &LossSpec, seed: u64) -> Result<f64, AcquisitionError> {
    let mut rng = RngStream::new(seed);
    let k = spec.num_anchors();
    let samples = Matrix::from_vec(k, 4, rng.normals(4 * k));
    let action = random_action(spec, &mut rng);
    let mut g = Graph::new();
    let s = g.leaf(samples.clone());
    let a = spec.action_leaf(&mut g, &action);
    let out = spec.sampled_node(&mut g, s, a);
    let grads = g.grad(out, &[s, a])?;
    let mut analytic = grads[0].as_slice().to_vec();
    analytic.extend_from_slice(grads[1].as_slice());
    let n = samples.len();
    let mut joint = samples.as_slice().to_vec();
    joint.extend_from_slice(&action);
    let fd = finite_difference(
        |p| {
            let sm = Matrix::from_vec(k, 4, p[..n].to_vec());
            reduction_value(spec, &sm, &p[n..])
        },
        &joint,
        1e-5,
    );
    Ok(relative_error(&analytic, &fd))
}

fn ehig_check(spec: &LossSpec, mode: ExpectationMode, seed: u64) -> Result<f64, AcquisitionError> {
    let gp = state_2d(seed, 6, 0.01)?;
    let mut rng = RngStream::new(seed).derive(0x6763, 0);
    let x = spec.bounds().sample(&mut rng);
    let m = 3;
    let actions = (0..m).map(|_| random_action(spec, &mut rng)).collect();
    let lambda = rng.normals(m);
    let eps = normal_bank(&mut rng, spec.num_anchors(), 6);
    let p = EhigProblem::new(&gp, spec, x, actions, lambda, eps, mode)?;
    let params = p.pack();
    let (_, g) = p.objective_and_grad(&params)?;
    let fd = finite_difference(|q| p.objective_at(q).unwrap_or(f64::NAN), &params, 1e-5);
    Ok(relative_error(&g, &fd))
}

type CheckFn = Box<dyn Fn(u64) -> Result<f64, AcquisitionError> + Send + Sync>;

/// Finite-difference suites: the sampled reduction of every loss family and
/// the full one-shot objective, in both expectation modes where they differ.
pub fn gradcheck_suite(instances: usize) -> Vec<GradcheckReport> {
    use rayon::prelude::*;
    let mut jobs: Vec<(String, CheckFn)> = Vec::new();
    for spec in loss_families() {
        let s = spec.clone();
        jobs.push((format!("reduction/{}", spec.name()), Box::new(move |seed| reduction_check(&s, seed))));
        let s = spec.clone();
        jobs.push((
            format!("ehig-mc/{}", spec.name()),
            Box::new(move |seed| ehig_check(&s, ExpectationMode::MonteCarlo, seed)),
        ));
        if spec.exact_expectation() {
            let s = spec.clone();
            jobs.push((
                format!("ehig-exact/{}", spec.name()),
                Box::new(move |seed| ehig_check(&s, ExpectationMode::Auto, seed)),
            ));
        }
    }
    jobs.par_iter()
        .map(|(name, check)| {
            let worst = (0..instances as u64)
                .map(|seed| check(seed).unwrap_or(f64::INFINITY))
                .map(|e| if e.is_nan() { f64::INFINITY } else { e })
                .fold(0.0, f64::max);
            GradcheckReport {
                name: name.clone(),
                instances,
                max_rel_err: worst,
                tolerance: 1e-4,
            }
        })
        .collect()
}

/// One (state, query) pair of the information-gain sign check.
#[derive(Debug, Clone, PartialEq)]
pub struct GainCheck {
    pub loss: &'static str,
    pub pair: u64,
    /// `H(before) − mean over fantasies of H(after)`.
    pub gain: f64,
    pub std_error: f64,
}

impl GainCheck {
    pub fn passed(&self) -> bool {
        self.gain >= -3.0 * self.std_error
    }
}

/// Estimates the expected H-entropy reduction at a random query for each
/// pair and loss family. After-fantasy Bayes actions are warm-started from
/// the prior Bayes action. The standard error combines the fantasy-sampling
/// spread with the inner Monte-Carlo errors.
pub fn information_gain_checks(pairs: u64, fantasies: usize, solver: &SolverConfig) -> Vec<GainCheck> {
    use rayon::prelude::*;
    let specs = loss_families();
    let jobs: Vec<(usize, u64)> = (0..specs.len()).flat_map(|i| (0..pairs).map(move |p| (i, p))).collect();
    jobs.par_iter()
        .map(|&(i, pair)| {
            let spec = &specs[i];
            let run = || -> Result<GainCheck, AcquisitionError> {
                let gp = state_2d(1000 + pair, 6, 0.01)?;
                let root = RngStream::new(pair).derive(0x6967, i as u64);
                let x = spec.bounds().sample(&mut root.derive(1, 0));
                let solver_rng = root.derive(2, 0);
                let before = bayes_action(&gp, spec, solver, &solver_rng, None)?;
                let lambda = root.derive(3, 0).normals(fantasies);
                let mut after = Vec::with_capacity(fantasies);
                let mut inner_var = 0.0;
                for l in &lambda {
                    let y = gp.fantasy_observation(&x, *l)?;
                    let fgp = gp.fantasize(&x, y)?;
                    let ba = bayes_action(&fgp, spec, solver, &solver_rng, Some(&before.action))?;
                    after.push(ba.expected_loss);
                    inner_var += ba.std_error * ba.std_error;
                }
                let l = fantasies as f64;
                let mean_after = after.iter().sum::<f64>() / l;
                let se = (std_error(&after).powi(2) + before.std_error.powi(2) + inner_var / (l * l)).sqrt();
                Ok(GainCheck {
                    loss: spec.name(),
                    pair,
                    gain: before.expected_loss - mean_after,
                    std_error: se,
                })
            };
            run().unwrap_or_else(|e| {
                log::error!("gain check {} pair {pair}: {e}", spec.name());
                GainCheck {
                    loss: spec.name(),
                    pair,
                    gain: f64::NEG_INFINITY,
                    std_error: 0.0,
                }
            })
        })
        .collect()
}
