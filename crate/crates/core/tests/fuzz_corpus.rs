//! Replays the checked-in fuzz corpus through the same properties the fuzz
//! targets assert, so parser regressions surface without a nightly toolchain.

use std::path::{Path, PathBuf};

use hes_core::benchfuncs::RasterGrid;
use hes_core::config::ExperimentConfig;
use hes_core::io::parse_trial_csv;

fn corpus(target: &str) -> Vec<(PathBuf, String)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "empty corpus {target}");
    files
        .into_iter()
        .filter_map(|p| String::from_utf8(std::fs::read(&p).unwrap()).ok().map(|t| (p, t)))
        .collect()
}

#[test]
fn raster_seeds_round_trip() {
    let mut accepted = 0;
    for (path, text) in corpus("raster_csv") {
        if let Ok(grid) = RasterGrid::parse(&text) {
            let again = RasterGrid::parse(&grid.to_csv()).unwrap();
            assert_eq!(again.to_csv(), grid.to_csv(), "{}", path.display());
            accepted += 1;
        }
    }
    assert!(accepted > 0);
}

#[test]
fn config_seeds_parse_to_valid_configs() {
    let mut accepted = 0;
    for (path, text) in corpus("config_file") {
        if let Ok(cfg) = ExperimentConfig::parse(&text) {
            cfg.validate().unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            accepted += 1;
        }
    }
    assert!(accepted > 0);
}

#[test]
fn trial_seeds_yield_finite_metrics() {
    let mut accepted = 0;
    for (_, text) in corpus("trial_csv") {
        if let Ok(rows) = parse_trial_csv(&text) {
            assert!(rows.iter().all(|r| r.metric.is_finite()));
            accepted += 1;
        }
    }
    assert!(accepted > 0);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        ExperimentConfig::from_file(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
