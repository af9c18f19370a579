//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line
//! to stderr (written directly so the lines survive output capture); the
//! test fails if any criterion fails.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hes_core::config::ExperimentConfig;
use hes_core::gp::{Dataset, GpPosterior, KernelParams, PriorMean};
use hes_core::linalg::Matrix;
use hes_core::losses::SolverConfig;
use hes_core::oracles;
use hes_core::runner::{run_and_write, Experiment};
use hes_core::space::{DesignBox, RngStream};

struct Verdict {
    failures: Vec<String>,
}

impl Verdict {
    fn record(&mut self, id: &str, passed: bool, detail: String) {
        let line = format!("criterion {id:<3} {} {detail}\n", if passed { "PASS" } else { "FAIL" });
        let _ = std::io::stderr().write_all(line.as_bytes());
        if !passed {
            self.failures.push(line);
        }
    }
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn load(name: &str, out: &Path, overrides: &[(&str, &str)]) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::from_file(&config_path(name)).unwrap();
    for (k, v) in overrides {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

/// Final-iteration mean metric per acquisition, plus elapsed seconds.
fn final_means(name: &str, acqs: &[&str], root: &Path) -> (Vec<f64>, f64) {
    let started = Instant::now();
    let means = acqs
        .iter()
        .map(|a| {
            let cfg = load(name, &root.join(a), &[("acquisition.id", a)]);
            let exp = Experiment::build(&cfg).unwrap();
            let (outcomes, summary) = run_and_write(&exp).unwrap();
            assert!(outcomes.iter().all(|o| o.error.is_none()), "{name} {a}: aborted trial");
            let last = summary.last().unwrap();
            assert_eq!(last.iteration, cfg.iterations);
            assert_eq!(last.n_seeds, 5);
            last.mean
        })
        .collect();
    (means, started.elapsed().as_secs_f64())
}

fn gp_oracles() -> (bool, String) {
    let mut worst_interp: f64 = 0.0;
    for seed in 0..5u64 {
        let mut rng = RngStream::new(seed);
        let bounds = DesignBox::cube(2, 0.0, 1.0);
        let x: Vec<Vec<f64>> = (0..8).map(|_| bounds.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
        let data = Dataset::new(Matrix::from_rows(&x), y.clone()).unwrap();
        let gp = GpPosterior::new(data, KernelParams::isotropic(0.3, 1.0, 0.0), PriorMean::Zero).unwrap();
        let (m, v) = gp.predict(&Matrix::from_rows(&x)).unwrap();
        for i in 0..x.len() {
            worst_interp = worst_interp.max((m[i] - y[i]).abs()).max(v[i]);
        }
    }

    let one = Dataset::new(Matrix::from_rows(&[[0.0]]), vec![1.0]).unwrap();
    let gp = GpPosterior::new(one, KernelParams::isotropic(1.0, 1.0, 0.0), PriorMean::Zero).unwrap();
    let (m, v) = gp.predict(&Matrix::from_rows(&[[1.0]])).unwrap();
    let hand = (m[0] - (-0.5f64).exp()).abs().max((v[0] - (1.0 - (-1.0f64).exp())).abs());

    // Rank-one conditioning on a fantasy observation against a rebuilt posterior.
    let mut worst_fantasy: f64 = 0.0;
    for seed in 0..10u64 {
        let gp = oracles::state_2d(seed, 6, 0.01).unwrap();
        let mut rng = RngStream::new(seed).derive(1, 0);
        let bounds = DesignBox::cube(2, 0.0, 1.0);
        let xq = bounds.sample(&mut rng);
        let test: Vec<Vec<f64>> = (0..12).map(|_| bounds.sample(&mut rng)).collect();
        let y = gp.fantasy_observation(&xq, rng.normal()).unwrap();
        let mut pts = vec![xq.clone()];
        pts.extend(test.iter().cloned());
        let (mean, cov) = gp.mean_cov(&Matrix::from_rows(&pts)).unwrap();
        let s2 = cov[(0, 0)] + gp.noise_variance();
        let rebuilt = gp.rebuild(gp.data().with(&xq, y).unwrap()).unwrap();
        let (m2, v2) = rebuilt.predict(&Matrix::from_rows(&test)).unwrap();
        for j in 0..test.len() {
            let c = cov[(j + 1, 0)];
            let m1 = mean[j + 1] + c * (y - mean[0]) / s2;
            let v1 = cov[(j + 1, j + 1)] - c * c / s2;
            worst_fantasy = worst_fantasy.max((m1 - m2[j]).abs()).max((v1 - v2[j]).abs());
        }
    }
    let passed = worst_interp <= 1e-8 && hand <= 1e-10 && worst_fantasy <= 1e-8;
    (
        passed,
        format!("interpolation {worst_interp:.1e}, one-point example {hand:.1e}, fantasy vs rebuild {worst_fantasy:.1e}"),
    )
}

fn byte_identical(a: &Path, b: &Path) -> bool {
    let mut names: Vec<_> = std::fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    !names.is_empty()
        && names
            .iter()
            .all(|n| std::fs::read(a.join(n)).unwrap() == std::fs::read(b.join(n)).unwrap_or_default())
}

#[test]
fn acceptance_criteria() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let mut v = Verdict { failures: Vec::new() };

    let started = Instant::now();
    let reports = oracles::gradcheck_suite(20);
    let secs = started.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    v.record(
        "1",
        reports.iter().all(|r| r.passed() && r.instances >= 20) && secs <= 120.0,
        format!("gradcheck: {} suites, max rel err {worst:.2e}, {secs:.1}s", reports.len()),
    );

    let (passed, detail) = gp_oracles();
    v.record("2", passed, format!("GP oracles: {detail}"));

    let ei = oracles::ei_oracle();
    v.record("3", ei.passed() && ei.elapsed_s <= 180.0, ei.to_string().lines().last().unwrap().to_string());

    let kg = oracles::kg_oracle();
    v.record("4", kg.passed() && kg.elapsed_s <= 300.0, kg.to_string().lines().last().unwrap().to_string());

    let pi = oracles::pi_oracle(4096);
    v.record("5", pi.passed() && pi.elapsed_s <= 180.0, pi.to_string().lines().last().unwrap().to_string());

    let gains = oracles::information_gain_checks(20, 32, &SolverConfig::default());
    let failed: Vec<_> = gains.iter().filter(|g| !g.passed()).collect();
    let worst = gains
        .iter()
        .map(|g| g.gain / g.std_error.max(1e-300))
        .fold(f64::INFINITY, f64::min);
    v.record(
        "6",
        failed.is_empty() && gains.len() == 20 * oracles::loss_families().len(),
        format!("information gain: {} checks, {} below -3 SE, worst {worst:.2} SE", gains.len(), failed.len()),
    );

    let (m, secs) = final_means("alpine_topk.conf", &["HES", "RS", "US"], &root.join("c7"));
    v.record(
        "7",
        m[0] >= m[1] && m[0] >= m[2] && secs <= 900.0,
        format!("alpine top-k neg loss HES {:.3}, RS {:.3}, US {:.3}, {secs:.0}s", m[0], m[1], m[2]),
    );

    let (m, secs) = final_means("multihills_mlse.conf", &["HES", "RS"], &root.join("c8"));
    v.record(
        "8",
        m[0] >= m[1],
        format!("multihills accuracy HES {:.4}, RS {:.4}, {secs:.0}s", m[0], m[1]),
    );

    let (m, secs) = final_means("two_ridge_sequence.conf", &["HES", "RS"], &root.join("c9"));
    v.record(
        "9",
        m[0] >= m[1],
        format!("two-ridge sequence neg loss HES {:.4}, RS {:.4}, {secs:.0}s", m[0], m[1]),
    );

    let mut same = true;
    for (name, acq) in [
        ("alpine_topk.conf", "HES"),
        ("multihills_mlse.conf", "POM"),
        ("two_ridge_sequence.conf", "HES"),
    ] {
        let overrides = [("acquisition.id", acq), ("experiment.iterations", "4"), ("experiment.seeds", "3,7")];
        let dirs: Vec<PathBuf> = (0..2).map(|i| root.join(format!("c10/{acq}-{name}-{i}"))).collect();
        for d in &dirs {
            let exp = Experiment::build(&load(name, d, &overrides)).unwrap();
            run_and_write(&exp).unwrap();
        }
        same &= byte_identical(&dirs[0], &dirs[1]);
    }
    v.record("10", same, "repeated runs write byte-identical CSVs".into());

    assert!(v.failures.is_empty(), "failed criteria:\n{}", v.failures.concat());
}
