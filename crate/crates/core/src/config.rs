//! Experiment configuration files.
//!
//! The format is plain text, one `key = value` per line. Keys are dotted
//! (`section.name`), `#` starts a comment, and lists are comma separated.
//! Unknown or repeated keys are errors. See [`KEYS`] for the full list.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::acquisition::AcquisitionKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key `{key}` given twice")]
    DuplicateKey { line: usize, key: String },
    #[error("line {line}: invalid value for `{key}`: {message}")]
    InvalidValue {
        line: usize,
        key: String,
        message: String,
    },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
}

/// Every accepted key with a short description.
pub const KEYS: &[(&str, &str)] = &[
    ("function.id", "alpine | multihills | raster | two_ridge | speckled_peaks"),
    ("function.dim", "input dimension of alpine (default 2)"),
    ("function.raster_path", "raster CSV file for function.id = raster"),
    ("function.noise_std", "observation noise standard deviation (default 1% of the output range)"),
    ("loss.id", "topk | kguesses | mlse | sequence | negvalue"),
    ("loss.k", "number of points for topk and kguesses (default 3)"),
    ("loss.distance_weight", "topk diversity weight (default 0.5)"),
    ("loss.distance_cap", "topk distance cap (default 2 x mean box width / k)"),
    ("loss.temperature", "kguesses smooth-max temperature (default 0.05)"),
    ("loss.grid", "mlse grid points per axis (default 30)"),
    ("loss.thresholds", "mlse thresholds in function units"),
    ("loss.threshold_percentiles", "mlse thresholds as percentiles of grid values (default 60, 85)"),
    ("loss.targets", "sequence targets in function units"),
    ("loss.target_count", "number of evenly spaced sequence targets when none are given (default 5)"),
    ("acquisition.id", "HES | RS | US | KG | EI | POM"),
    ("acquisition.fantasies", "fantasies per one-shot objective (default 16)"),
    ("acquisition.inner_samples", "inner Monte-Carlo samples (default 32)"),
    ("acquisition.restarts", "one-shot restarts (default 10)"),
    ("acquisition.steps", "descent steps per restart (default 150)"),
    ("acquisition.step_size", "initial step as a fraction of the coordinate scale (default 0.05)"),
    ("acquisition.candidates", "quasi-uniform candidates for US, EI and POM (default 10000)"),
    ("acquisition.seed_candidates", "candidates used to seed restarts (default 1000)"),
    ("acquisition.raw_samples", "start queries scored per restart (default 8)"),
    ("acquisition.monte_carlo", "always use the Monte-Carlo bank, even for closed-form losses (default false)"),
    ("solver.restarts", "Bayes-action restarts (default 10)"),
    ("solver.steps", "Bayes-action descent steps (default 200)"),
    ("solver.step_size", "Bayes-action initial step (default 0.05)"),
    ("solver.samples", "Bayes-action Monte-Carlo samples (default 64)"),
    ("experiment.iterations", "query budget T (default 30)"),
    ("experiment.n_init", "initial uniform design size (default 2d + 2)"),
    ("experiment.seeds", "comma-separated trial seeds (default 0)"),
    ("gp.refit", "refit hyperparameters every iteration (default true)"),
    ("gp.lengthscale", "fixed lengthscale (default 0.2 x mean box width)"),
    ("gp.signal_variance", "fixed signal variance (default: output variance of the initial design)"),
    ("gp.noise_variance", "fixed noise variance (default: square of the observation noise)"),
    ("gp.per_dimension", "one lengthscale per input dimension when refitting (default false)"),
    ("gp.jitter", "base diagonal jitter (default 1e-8)"),
    ("output.dir", "output directory (default results)"),
    ("output.record_wall_time", "write measured wall time instead of 0 (default false)"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FunctionId {
    Alpine,
    Multihills,
    Raster,
    TwoRidge,
    SpeckledPeaks,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossId {
    TopK,
    KGuesses,
    Mlse,
    Sequence,
    NegValue,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FunctionConfig {
    pub id: FunctionId,
    pub dim: usize,
    pub raster_path: Option<PathBuf>,
    pub noise_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub id: LossId,
    pub k: usize,
    pub distance_weight: Option<f64>,
    pub distance_cap: Option<f64>,
    pub temperature: f64,
    pub grid: usize,
    pub thresholds: Option<Vec<f64>>,
    pub threshold_percentiles: Vec<f64>,
    pub targets: Option<Vec<f64>>,
    pub target_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionConfig {
    pub id: AcquisitionKind,
    pub fantasies: usize,
    pub inner_samples: usize,
    pub restarts: usize,
    pub steps: usize,
    pub step_size: f64,
    pub candidates: usize,
    pub seed_candidates: usize,
    pub raw_samples: usize,
    pub monte_carlo: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverSettings {
    pub restarts: usize,
    pub steps: usize,
    pub step_size: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpSettings {
    pub refit: bool,
    pub lengthscale: Option<f64>,
    pub signal_variance: Option<f64>,
    pub noise_variance: Option<f64>,
    pub per_dimension: bool,
    pub jitter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub function: FunctionConfig,
    pub loss: LossConfig,
    pub acquisition: AcquisitionConfig,
    pub solver: SolverSettings,
    pub iterations: usize,
    /// `None` means `2d + 2`.
    pub n_init: Option<usize>,
    pub seeds: Vec<u64>,
    pub gp: GpSettings,
    pub output_dir: PathBuf,
    pub record_wall_time: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            function: FunctionConfig {
                id: FunctionId::Alpine,
                dim: 2,
                raster_path: None,
                noise_std: None,
            },
            loss: LossConfig {
                id: LossId::TopK,
                k: 3,
                distance_weight: None,
                distance_cap: None,
                temperature: crate::losses::DEFAULT_TEMPERATURE,
                grid: 30,
                thresholds: None,
                threshold_percentiles: vec![60.0, 85.0],
                targets: None,
                target_count: 5,
            },
            acquisition: AcquisitionConfig {
                id: AcquisitionKind::Hes,
                fantasies: 16,
                inner_samples: 32,
                restarts: 10,
                steps: 150,
                step_size: 0.05,
                candidates: 10_000,
                seed_candidates: 1000,
                raw_samples: 8,
                monte_carlo: false,
            },
            solver: SolverSettings {
                restarts: 10,
                steps: 200,
                step_size: 0.05,
                samples: 64,
            },
            iterations: 30,
            n_init: None,
            seeds: vec![0],
            gp: GpSettings {
                refit: true,
                lengthscale: None,
                signal_variance: None,
                noise_variance: None,
                per_dimension: false,
                jitter: crate::gp::DEFAULT_JITTER,
            },
            output_dir: PathBuf::from("results"),
            record_wall_time: false,
        }
    }
}

fn parse_list<T: std::str::FromStr>(v: &str) -> Option<Vec<T>> {
    v.split(',').map(|p| p.trim().parse().ok()).collect()
}

/// Parses a comma-separated seed list such as `0,1,2`.
pub fn parse_seeds(v: &str) -> Result<Vec<u64>, String> {
    let seeds: Vec<u64> = parse_list(v).ok_or_else(|| format!("`{v}` is not a list of seeds"))?;
    if seeds.is_empty() {
        return Err("seed list is empty".into());
    }
    Ok(seeds)
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// Parses and validates a configuration; unspecified keys keep defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: Vec<String> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            let value = value.trim();
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            seen.push(key.to_string());
            cfg.set(key, value).map_err(|message| ConfigError::InvalidValue {
                line,
                key: key.to_string(),
                message,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: std::str::FromStr>(v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("`{v}` is not a valid number"))
        }
        fn real(v: &str) -> Result<f64, String> {
            let x: f64 = num(v)?;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(format!("`{v}` is not finite"))
            }
        }
        fn flag(v: &str) -> Result<bool, String> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(format!("`{v}` is not true or false")),
            }
        }
        fn reals(v: &str) -> Result<Vec<f64>, String> {
            let xs: Vec<f64> = parse_list(v).ok_or_else(|| format!("`{v}` is not a list of numbers"))?;
            if xs.iter().all(|x| x.is_finite()) {
                Ok(xs)
            } else {
                Err("list values must be finite".into())
            }
        }
        match key {
            "function.id" => {
                self.function.id = match v_lower(value).as_str() {
                    "alpine" => FunctionId::Alpine,
                    "multihills" => FunctionId::Multihills,
                    "raster" => FunctionId::Raster,
                    "two_ridge" => FunctionId::TwoRidge,
                    "speckled_peaks" => FunctionId::SpeckledPeaks,
                    _ => return Err(format!("unknown function `{value}`")),
                }
            }
            "function.dim" => self.function.dim = num(value)?,
            "function.raster_path" => self.function.raster_path = Some(PathBuf::from(value)),
            "function.noise_std" => self.function.noise_std = Some(real(value)?),
            "loss.id" => {
                self.loss.id = match v_lower(value).as_str() {
                    "topk" => LossId::TopK,
                    "kguesses" => LossId::KGuesses,
                    "mlse" => LossId::Mlse,
                    "sequence" => LossId::Sequence,
                    "negvalue" => LossId::NegValue,
                    _ => return Err(format!("unknown loss `{value}`")),
                }
            }
            "loss.k" => self.loss.k = num(value)?,
            "loss.distance_weight" => self.loss.distance_weight = Some(real(value)?),
            "loss.distance_cap" => self.loss.distance_cap = Some(real(value)?),
            "loss.temperature" => self.loss.temperature = real(value)?,
            "loss.grid" => self.loss.grid = num(value)?,
            "loss.thresholds" => self.loss.thresholds = Some(reals(value)?),
            "loss.threshold_percentiles" => self.loss.threshold_percentiles = reals(value)?,
            "loss.targets" => self.loss.targets = Some(reals(value)?),
            "loss.target_count" => self.loss.target_count = num(value)?,
            "acquisition.id" => self.acquisition.id = value.parse().map_err(|e| format!("{e}"))?,
            "acquisition.fantasies" => self.acquisition.fantasies = num(value)?,
            "acquisition.inner_samples" => self.acquisition.inner_samples = num(value)?,
            "acquisition.restarts" => self.acquisition.restarts = num(value)?,
            "acquisition.steps" => self.acquisition.steps = num(value)?,
            "acquisition.step_size" => self.acquisition.step_size = real(value)?,
            "acquisition.candidates" => self.acquisition.candidates = num(value)?,
            "acquisition.seed_candidates" => self.acquisition.seed_candidates = num(value)?,
            "acquisition.raw_samples" => self.acquisition.raw_samples = num(value)?,
            "acquisition.monte_carlo" => self.acquisition.monte_carlo = flag(value)?,
            "solver.restarts" => self.solver.restarts = num(value)?,
            "solver.steps" => self.solver.steps = num(value)?,
            "solver.step_size" => self.solver.step_size = real(value)?,
            "solver.samples" => self.solver.samples = num(value)?,
            "experiment.iterations" => self.iterations = num(value)?,
            "experiment.n_init" => self.n_init = Some(num(value)?),
            "experiment.seeds" => self.seeds = parse_seeds(value)?,
            "gp.refit" => self.gp.refit = flag(value)?,
            "gp.lengthscale" => self.gp.lengthscale = Some(real(value)?),
            "gp.signal_variance" => self.gp.signal_variance = Some(real(value)?),
            "gp.noise_variance" => self.gp.noise_variance = Some(real(value)?),
            "gp.per_dimension" => self.gp.per_dimension = flag(value)?,
            "gp.jitter" => self.gp.jitter = real(value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            "output.record_wall_time" => self.record_wall_time = flag(value)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Checks cross-field constraints.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.iterations == 0 {
            return bad("experiment.iterations must be at least 1");
        }
        if self.seeds.is_empty() {
            return bad("experiment.seeds must not be empty");
        }
        if self.n_init == Some(0) {
            return bad("experiment.n_init must be at least 1");
        }
        if self.function.id == FunctionId::Raster && self.function.raster_path.is_none() {
            return bad("function.raster_path is required for function.id = raster");
        }
        if self.function.id == FunctionId::Alpine && !(1..=12).contains(&self.function.dim) {
            return bad("function.dim must be between 1 and 12");
        }
        if self.function.noise_std.is_some_and(|s| s < 0.0) {
            return bad("function.noise_std must be >= 0");
        }
        if self.loss.k == 0 || self.loss.grid < 2 || self.loss.target_count == 0 {
            return bad("loss.k and loss.target_count must be >= 1 and loss.grid >= 2");
        }
        if self.loss.temperature.is_nan() || self.loss.temperature <= 0.0 {
            return bad("loss.temperature must be positive");
        }
        if self.loss.threshold_percentiles.is_empty()
            || self.loss.threshold_percentiles.iter().any(|p| !(0.0..=100.0).contains(p))
        {
            return bad("loss.threshold_percentiles must be in [0, 100]");
        }
        let a = &self.acquisition;
        if a.fantasies == 0 || a.inner_samples == 0 || a.restarts == 0 || a.candidates == 0 || a.seed_candidates == 0 {
            return bad("acquisition counts must be positive");
        }
        if [a.step_size, self.solver.step_size].iter().any(|s| s.is_nan() || *s <= 0.0) {
            return bad("step sizes must be positive");
        }
        if self.solver.restarts == 0 || self.solver.samples == 0 {
            return bad("solver.restarts and solver.samples must be positive");
        }
        for (name, v) in [
            ("gp.lengthscale", self.gp.lengthscale),
            ("gp.signal_variance", self.gp.signal_variance),
        ] {
            if v.is_some_and(|x| x <= 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be positive")));
            }
        }
        if self.gp.noise_variance.is_some_and(|x| x < 0.0) || self.gp.jitter.is_nan() || self.gp.jitter < 0.0 {
            return bad("gp.noise_variance and gp.jitter must be >= 0");
        }
        Ok(())
    }

    /// Applies `HES_SEED` (a comma-separated seed list) if set.
    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        if let Ok(v) = std::env::var("HES_SEED") {
            self.seeds = parse_seeds(&v).map_err(|m| ConfigError::Invalid(format!("HES_SEED: {m}")))?;
        }
        Ok(())
    }

    /// Input dimension implied by the function choice.
    pub fn dim(&self) -> usize {
        match self.function.id {
            FunctionId::Alpine => self.function.dim,
            _ => 2,
        }
    }

    pub fn n_init(&self) -> usize {
        self.n_init.unwrap_or(2 * self.dim() + 2)
    }
}

fn v_lower(v: &str) -> String {
    v.to_ascii_lowercase()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_comments() {
        let text = "\
# Alpine top-k
function.id = alpine
function.dim = 3   # three inputs
loss.id = topk
loss.k = 2
acquisition.id = rs
experiment.seeds = 4, 5,6
gp.refit = false
gp.noise_variance = 0.01
loss.thresholds = 0.5, 1.5
";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.function.dim, 3);
        assert_eq!(cfg.loss.k, 2);
        assert_eq!(cfg.acquisition.id, AcquisitionKind::Rs);
        assert_eq!(cfg.seeds, vec![4, 5, 6]);
        assert!(!cfg.gp.refit);
        assert_eq!(cfg.gp.noise_variance, Some(0.01));
        assert_eq!(cfg.loss.thresholds, Some(vec![0.5, 1.5]));
        assert_eq!(cfg.n_init(), 8);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_errors() {
        assert_eq!(
            ExperimentConfig::parse("gp.refitt = true\n"),
            Err(ConfigError::UnknownKey {
                line: 1,
                key: "gp.refitt".into()
            })
        );
        assert!(matches!(
            ExperimentConfig::parse("loss.k = 2\n\nloss.k = 3\n"),
            Err(ConfigError::DuplicateKey { line: 3, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("loss.k two\n"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("loss.k = -1\n"),
            Err(ConfigError::InvalidValue { line: 1, .. })
        ));
    }

    #[test]
    fn validation_catches_inconsistent_settings() {
        assert!(ExperimentConfig::parse("function.id = raster\n").is_err());
        assert!(ExperimentConfig::parse("experiment.iterations = 0\n").is_err());
        assert!(ExperimentConfig::parse("gp.lengthscale = 0\n").is_err());
        assert!(ExperimentConfig::parse("loss.threshold_percentiles = 50, 120\n").is_err());
    }

    #[test]
    fn every_key_is_settable() {
        let mut cfg = ExperimentConfig::default();
        for (k, _) in KEYS {
            // Each documented key must be recognized by the setter.
            let r = cfg.set(k, "1");
            if let Err(m) = r {
                assert!(!m.starts_with("unknown key"), "{k}");
            }
        }
    }
}
