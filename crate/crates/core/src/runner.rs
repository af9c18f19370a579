//! The experiment loop: initial design, query selection, noisy observation,
//! Bayes-action metric, and aggregation across seeds.
//!
//! Randomness for a trial comes from `RngStream::new(seed)` split by tag:
//! the initial design, the observation noise (one sequential stream), and
//! per-iteration streams for query selection and for the Bayes action.
//! Trials for different seeds run concurrently without sharing state, so
//! results do not depend on scheduling.

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::acquisition::{select_query, AcquisitionError, AcquisitionKind, OptimizerConfig};
use crate::benchfuncs::{speckled_peaks_raster, two_ridge_raster, BenchError, BlackBox, RasterGrid};
use crate::config::{ConfigError, ExperimentConfig, FunctionId, LossId};
use crate::gp::{fit_hyperparams, Dataset, GpError, GpPosterior, HyperBounds, KernelParams, PriorMean};
use crate::io::{self, CsvError, MetricRow, SummaryRow, TrialRecord};
use crate::linalg::Matrix;
use crate::losses::{
    bayes_action, ExpectationMode, LossError, LossKind, LossSpec, MultiLevelSetHyper, SolverConfig,
};
use crate::optim::DescentConfig;
use crate::space::RngStream;

const TAG_DESIGN: u64 = 0x6473;
const TAG_NOISE: u64 = 0x6e6f;
const TAG_QUERY: u64 = 0x7179;
const TAG_ACTION: u64 = 0x6163;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Csv(#[from] CsvError),
}

/// A configured benchmark: black box, terminal-action loss and the
/// candidate set of the gradient-free baselines.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub blackbox: BlackBox,
    pub spec: LossSpec,
    pub candidates: Matrix,
}

/// Linear-interpolation percentile (`p` in `[0, 100]`) of unsorted values.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (p / 100.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

impl Experiment {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self, RunError> {
        cfg.validate()?;
        let f = &cfg.function;
        let blackbox = match f.id {
            FunctionId::Alpine => BlackBox::alpine(f.dim, f.noise_std)?,
            FunctionId::Multihills => BlackBox::multihills(f.noise_std)?,
            FunctionId::TwoRidge => BlackBox::raster(two_ridge_raster(), f.noise_std)?,
            FunctionId::SpeckledPeaks => BlackBox::raster(speckled_peaks_raster(), f.noise_std)?,
            FunctionId::Raster => {
                let path = f.raster_path.as_ref().expect("validated");
                BlackBox::raster(RasterGrid::load(path)?, f.noise_std)?
            }
        };
        let bounds = blackbox.bounds().clone();
        let l = &cfg.loss;
        let grid_values = |grid: &Matrix| -> Vec<f64> { (0..grid.rows()).map(|r| blackbox.eval(grid.row(r))).collect() };
        let spec = match l.id {
            LossId::TopK => LossSpec::top_k(bounds.clone(), l.k, l.distance_weight, l.distance_cap)?,
            LossId::KGuesses => LossSpec::k_guesses(bounds.clone(), l.k, l.temperature)?,
            LossId::NegValue => LossSpec::neg_value(bounds.clone()),
            LossId::Mlse => {
                let grid = bounds.grid(l.grid);
                let thresholds = match &l.thresholds {
                    Some(t) => t.clone(),
                    None => {
                        let values = grid_values(&grid);
                        l.threshold_percentiles.iter().map(|p| percentile(&values, *p)).collect()
                    }
                };
                LossSpec::multi_level_set(bounds.clone(), grid, thresholds)?
            }
            LossId::Sequence => {
                let targets = match &l.targets {
                    Some(t) => t.clone(),
                    None => {
                        let values = grid_values(&bounds.grid(l.grid));
                        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let m = l.target_count;
                        (1..=m).map(|i| lo + (hi - lo) * i as f64 / (m + 1) as f64).collect()
                    }
                };
                LossSpec::sequence(bounds.clone(), targets)?
            }
        };
        let needs_candidates = matches!(
            cfg.acquisition.id,
            AcquisitionKind::Us | AcquisitionKind::Ei | AcquisitionKind::Pom
        );
        let candidates = if needs_candidates {
            bounds.quasi_uniform(cfg.acquisition.candidates)
        } else {
            Matrix::zeros(0, bounds.dim())
        };
        Ok(Experiment {
            config: cfg.clone(),
            blackbox,
            spec,
            candidates,
        })
    }

    fn expectation(&self) -> ExpectationMode {
        if self.config.acquisition.monte_carlo {
            ExpectationMode::MonteCarlo
        } else {
            ExpectationMode::Auto
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let a = &self.config.acquisition;
        OptimizerConfig {
            fantasies: a.fantasies,
            inner_samples: a.inner_samples,
            restarts: a.restarts,
            descent: DescentConfig {
                steps: a.steps,
                step_size: a.step_size,
                ..DescentConfig::default()
            },
            expectation: self.expectation(),
            candidates: a.seed_candidates,
            raw_samples: a.raw_samples,
        }
    }

    pub fn solver_config(&self) -> SolverConfig {
        let s = &self.config.solver;
        SolverConfig {
            restarts: s.restarts,
            descent: DescentConfig {
                steps: s.steps,
                step_size: s.step_size,
                ..DescentConfig::default()
            },
            samples: s.samples,
            expectation: self.expectation(),
            candidates: self.config.acquisition.seed_candidates,
        }
    }

    /// Name written to the `metric_name` column.
    pub fn metric_name(&self) -> &'static str {
        match self.spec.kind() {
            LossKind::MultiLevelSet(_) => "accuracy",
            _ => "neg_loss",
        }
    }

    /// Number of `action` columns in trial files.
    pub fn action_columns(&self) -> usize {
        self.spec.action_len()
    }

    /// Hyperparameter search box scaled to the box width and output spread.
    fn hyper_bounds(&self, data: &Dataset) -> HyperBounds {
        let w = self.spec.bounds().mean_width();
        let v = output_variance(data.outputs()).max(1e-12);
        let mut b = HyperBounds::new((0.02 * w, 2.0 * w), (0.05 * v, 20.0 * v), (1e-6 * v, 0.5 * v));
        b.per_dimension = self.config.gp.per_dimension;
        b
    }

    fn fixed_params(&self, initial_variance: f64) -> KernelParams {
        let g = &self.config.gp;
        let eta = self.blackbox.noise_std();
        KernelParams::isotropic(
            g.lengthscale.unwrap_or(0.2 * self.spec.bounds().mean_width()),
            g.signal_variance.unwrap_or(initial_variance.max(1e-12)),
            g.noise_variance.unwrap_or(eta * eta),
        )
    }

    fn posterior(&self, data: &Dataset, params: KernelParams) -> Result<GpPosterior, GpError> {
        GpPosterior::with_jitter(data.clone(), params, PriorMean::DataMean, self.config.gp.jitter)
    }

    fn current_params(&self, data: &Dataset, fixed: &KernelParams) -> KernelParams {
        if !self.config.gp.refit {
            return fixed.clone();
        }
        match fit_hyperparams(data, &self.hyper_bounds(data)) {
            Ok(fit) => fit.params,
            Err(GpError::DegenerateData { fallback }) => fallback,
            Err(e) => {
                log::warn!("hyperparameter fit failed ({e}); keeping fixed parameters");
                fixed.clone()
            }
        }
    }

    /// Metric of the Bayes action under the current posterior.
    fn metric(&self, gp: &GpPosterior, action: &[f64]) -> Result<f64, RunError> {
        let f = |x: &[f64]| self.blackbox.eval(x);
        match self.spec.kind() {
            LossKind::MultiLevelSet(h) => Ok(mlse_accuracy(gp, h, &f)?),
            _ => Ok(-self.spec.true_loss(&f, action)?),
        }
    }

    /// Action written to the trial file; level-set logits become 0/1 memberships.
    fn recorded_action(&self, action: &[f64]) -> Vec<f64> {
        match self.spec.kind() {
            LossKind::MultiLevelSet(_) => action.iter().map(|a| if *a >= 0.0 { 1.0 } else { 0.0 }).collect(),
            _ => action.to_vec(),
        }
    }
}

fn output_variance(y: &[f64]) -> f64 {
    if y.is_empty() {
        return 0.0;
    }
    let m = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64
}

/// Result of one trial. `error` is set when the trial stopped early; the
/// records up to that point are kept.
#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub seed: u64,
    pub records: Vec<TrialRecord>,
    pub dataset: Dataset,
    pub error: Option<String>,
}

/// Runs one trial of `exp` with root seed `seed`.
pub fn run_trial(exp: &Experiment, seed: u64) -> TrialOutcome {
    let root = RngStream::new(seed);
    let started = Instant::now();
    let bounds = exp.spec.bounds().clone();
    let mut data = Dataset::empty(bounds.dim());
    let mut noise = root.derive(TAG_NOISE, 0);
    let mut design = root.derive(TAG_DESIGN, 0);
    let mut records = Vec::with_capacity(exp.config.iterations);
    let mut error = None;

    for _ in 0..exp.config.n_init() {
        let x = bounds.sample(&mut design);
        let y = exp.blackbox.observe(&x, &mut noise);
        data.push(&x, y).expect("dimensions match");
    }
    let fixed = exp.fixed_params(output_variance(data.outputs()));
    let mut previous_action: Option<Vec<f64>> = None;

    for t in 1..=exp.config.iterations {
        let step = || -> Result<(TrialRecord, Vec<f64>, f64, RngStream), RunError> {
            let params = exp.current_params(&data, &fixed);
            let gp = exp.posterior(&data, params.clone())?;
            let warm = previous_action.as_deref().filter(|_| exp.spec.has_point_actions());
            let acq = select_query(
                exp.config.acquisition.id,
                &gp,
                &exp.spec,
                &exp.optimizer_config(),
                &exp.candidates,
                &root.derive(TAG_QUERY, t as u64),
                warm,
            )?;
            let x = acq.chosen_x;
            let mut noise_draw = noise.clone();
            let y = exp.blackbox.observe(&x, &mut noise_draw);
            let updated = data.with(&x, y)?;
            let gp = exp.posterior(&updated, params)?;
            let ba = bayes_action(
                &gp,
                &exp.spec,
                &exp.solver_config(),
                &root.derive(TAG_ACTION, t as u64),
                previous_action.as_deref(),
            )?;
            let metric = exp.metric(&gp, &ba.action)?;
            let wall = if exp.config.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            };
            let record = TrialRecord {
                seed,
                iteration: t,
                x,
                y,
                metric,
                metric_name: exp.metric_name().to_string(),
                action: exp.recorded_action(&ba.action),
                wall_time_s: wall,
            };
            Ok((record, ba.action, y, noise_draw))
        };
        match step() {
            Ok((record, action, y, noise_draw)) if record.metric.is_finite() => {
                data.push(&record.x, y).expect("dimensions match");
                noise = noise_draw;
                previous_action = Some(action);
                records.push(record);
            }
            Ok(_) => {
                error = Some(format!("iteration {t}: non-finite metric"));
                break;
            }
            Err(e) => {
                error = Some(format!("iteration {t}: {e}"));
                break;
            }
        }
    }
    if let Some(e) = &error {
        log::error!("trial seed {seed} aborted: {e}");
    }
    TrialOutcome {
        seed,
        records,
        dataset: data,
        error,
    }
}

/// Runs every configured seed concurrently; outcomes are in seed-list order.
pub fn run_experiment(exp: &Experiment) -> Vec<TrialOutcome> {
    exp.config.seeds.par_iter().map(|s| run_trial(exp, *s)).collect()
}

/// Runs the experiment and writes one CSV per trial plus `summary.csv` to
/// the configured output directory. Aborted trials also get a
/// `trial_seed<N>.error.txt` file.
pub fn run_and_write(exp: &Experiment) -> Result<(Vec<TrialOutcome>, Vec<SummaryRow>), RunError> {
    let dir = &exp.config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| CsvError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let outcomes = run_experiment(exp);
    let dim = exp.spec.bounds().dim();
    for o in &outcomes {
        let text = io::trial_csv(&o.records, dim, exp.action_columns());
        io::write_file(&dir.join(io::trial_file_name(o.seed)), &text)?;
        let err_path = dir.join(format!("trial_seed{}.error.txt", o.seed));
        if let Some(e) = &o.error {
            io::write_file(&err_path, &format!("{e}\n"))?;
        }
    }
    let rows: Vec<Vec<MetricRow>> = outcomes
        .iter()
        .map(|o| {
            o.records
                .iter()
                .map(|r| MetricRow {
                    seed: r.seed,
                    iteration: r.iteration,
                    metric: r.metric,
                })
                .collect()
        })
        .collect();
    let summary = aggregate(&rows);
    io::write_file(&dir.join("summary.csv"), &io::summary_csv(&summary))?;
    Ok((outcomes, summary))
}

/// Reads every trial file in `dir`, writes `summary.csv` next to them and
/// returns the rows.
pub fn aggregate_dir(dir: &Path) -> Result<Vec<SummaryRow>, RunError> {
    let files = io::trial_files(dir)?;
    if files.is_empty() {
        return Err(CsvError::Io {
            path: dir.display().to_string(),
            message: "no trial_seed*.csv files".into(),
        }
        .into());
    }
    let trials = files
        .iter()
        .map(|p| io::parse_trial_csv(&io::read_file(p)?))
        .collect::<Result<Vec<_>, _>>()?;
    let summary = aggregate(&trials);
    io::write_file(&dir.join("summary.csv"), &io::summary_csv(&summary))?;
    Ok(summary)
}

/// Per-iteration mean and standard error of the metric across trials.
///
/// Values are summed in sorted order so the result does not depend on the
/// order of the trials. The standard error uses the `n − 1` sample
/// deviation and is 0 for a single trial.
pub fn aggregate(trials: &[Vec<MetricRow>]) -> Vec<SummaryRow> {
    let mut by_iter: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    for t in trials {
        for r in t {
            by_iter.entry(r.iteration).or_default().push(r.metric);
        }
    }
    by_iter
        .into_iter()
        .map(|(iteration, mut v)| {
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let stderr = if n > 1 {
                let mut sq: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
                sq.sort_by(f64::total_cmp);
                (sq.iter().sum::<f64>() / (n - 1) as f64).sqrt() / (n as f64).sqrt()
            } else {
                0.0
            };
            SummaryRow {
                iteration,
                mean,
                stderr,
                n_seeds: n,
            }
        })
        .collect()
}

/// Fraction of grid points whose side of each threshold under the
/// posterior mean matches the true function, averaged over thresholds.
pub fn mlse_accuracy(gp: &GpPosterior, hyper: &MultiLevelSetHyper, f_true: &dyn Fn(&[f64]) -> f64) -> Result<f64, GpError> {
    let (means, _) = gp.predict(&hyper.grid)?;
    let truth: Vec<f64> = (0..hyper.grid.rows()).map(|r| f_true(hyper.grid.row(r))).collect();
    Ok(accuracy_from_means(&means, &truth, &hyper.thresholds))
}

/// [`mlse_accuracy`] given the mean and true values on the grid.
pub fn accuracy_from_means(means: &[f64], truth: &[f64], thresholds: &[f64]) -> f64 {
    let j = means.len() as f64;
    let total: f64 = thresholds
        .iter()
        .map(|c| {
            let hits = means.iter().zip(truth).filter(|(m, f)| (**m > *c) == (**f > *c)).count();
            hits as f64 / j
        })
        .sum();
    total / thresholds.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rows(seed: u64, metrics: &[f64]) -> Vec<MetricRow> {
        metrics
            .iter()
            .enumerate()
            .map(|(i, m)| MetricRow {
                seed,
                iteration: i + 1,
                metric: *m,
            })
            .collect()
    }

    #[test]
    fn single_seed_has_zero_stderr() {
        let s = aggregate(&[rows(0, &[0.5, 0.7, 0.9])]);
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|r| r.stderr == 0.0 && r.n_seeds == 1));
        assert_eq!(s[1].mean, 0.7);
    }

    #[test]
    fn two_seeds_zero_and_two() {
        let s = aggregate(&[rows(0, &[0.0]), rows(1, &[2.0])]);
        assert_eq!(s[0].mean, 1.0);
        assert!((s[0].stderr - 1.0).abs() < 1e-15);
        assert_eq!(s[0].n_seeds, 2);
    }

    proptest! {
        #[test]
        fn aggregate_is_permutation_invariant(
            metrics in proptest::collection::vec(-1e3f64..1e3, 2..8),
            shift in 0usize..8,
        ) {
            let trials: Vec<Vec<MetricRow>> =
                metrics.iter().enumerate().map(|(i, m)| rows(i as u64, &[*m])).collect();
            let mut rotated = trials.clone();
            rotated.rotate_left(shift % trials.len());
            rotated.reverse();
            prop_assert_eq!(aggregate(&trials), aggregate(&rotated));
        }
    }

    #[test]
    fn accuracy_examples() {
        let truth: Vec<f64> = (0..100).map(|i| i as f64 / 10.0).collect();
        assert_eq!(accuracy_from_means(&truth, &truth, &[2.5, 7.5]), 1.0);
        let low = vec![2.0 - 0.1; 50];
        let high: Vec<f64> = (0..50).map(|i| 3.0 + i as f64).collect();
        assert_eq!(accuracy_from_means(&low, &high, &[2.0]), 0.0);
    }

    #[test]
    fn random_sign_means_give_half_accuracy() {
        let mut rng = RngStream::new(5);
        let truth: Vec<f64> = (0..900).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let means: Vec<f64> = (0..900).map(|_| rng.normal()).collect();
        let acc = accuracy_from_means(&means, &truth, &[0.0]);
        assert!((acc - 0.5).abs() <= 0.05, "accuracy {acc}");
    }

    #[test]
    fn percentile_interpolates() {
        let v = [4.0, 1.0, 3.0, 2.0, 5.0];
        assert_eq!(percentile(&v, 0.0), 1.0);
        assert_eq!(percentile(&v, 50.0), 3.0);
        assert_eq!(percentile(&v, 100.0), 5.0);
        assert_eq!(percentile(&v, 60.0), 3.4);
    }

    fn small_config(acq: &str, loss: &str) -> ExperimentConfig {
        let text = format!(
            "function.id = alpine\nfunction.dim = 1\nloss.id = {loss}\nacquisition.id = {acq}\n\
             experiment.iterations = 2\nacquisition.restarts = 2\nacquisition.steps = 20\n\
             acquisition.fantasies = 4\nacquisition.inner_samples = 8\nacquisition.candidates = 200\n\
             acquisition.seed_candidates = 100\nsolver.restarts = 2\nsolver.steps = 30\nloss.grid = 10\n"
        );
        ExperimentConfig::parse(&text).unwrap()
    }

    #[test]
    fn one_iteration_random_search() {
        let mut cfg = small_config("RS", "topk");
        cfg.iterations = 1;
        let exp = Experiment::build(&cfg).unwrap();
        let out = run_trial(&exp, 3);
        assert!(out.error.is_none(), "{:?}", out.error);
        assert_eq!(out.records.len(), 1);
        assert_eq!(out.dataset.len(), cfg.n_init() + 1);
    }

    #[test]
    fn trials_are_deterministic() {
        for (acq, loss) in [("HES", "topk"), ("US", "mlse"), ("KG", "negvalue"), ("EI", "sequence")] {
            let exp = Experiment::build(&small_config(acq, loss)).unwrap();
            let a = run_trial(&exp, 11);
            let b = run_trial(&exp, 11);
            assert!(a.error.is_none(), "{acq}/{loss}: {:?}", a.error);
            assert_eq!(a.records, b.records, "{acq}/{loss}");
            assert_eq!(a.dataset.len(), exp.config.n_init() + exp.config.iterations);
            assert!(a.records.iter().all(|r| r.metric.is_finite()));
        }
    }

    #[test]
    fn mlse_thresholds_come_from_percentiles() {
        let cfg = ExperimentConfig::parse("function.id = multihills\nloss.id = mlse\n").unwrap();
        let exp = Experiment::build(&cfg).unwrap();
        match exp.spec.kind() {
            LossKind::MultiLevelSet(h) => {
                assert_eq!(h.grid.rows(), 900);
                assert_eq!(h.thresholds.len(), 2);
                let vals: Vec<f64> = (0..900).map(|r| exp.blackbox.eval(h.grid.row(r))).collect();
                let above = vals.iter().filter(|v| **v > h.thresholds[0]).count();
                assert!((355..=365).contains(&above), "{above}");
            }
            _ => panic!("expected a level-set loss"),
        }
    }
}
