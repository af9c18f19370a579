//! CSV persistence for trial records and summaries.
//!
//! Trial files have the header
//! `seed,iteration,x1..xd,y,metric,metric_name,action1..actionA,wall_time_s`.
//! Numbers use Rust's shortest round-trip formatting, so files regenerate
//! byte-identically from identical records.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CsvError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

/// One iteration of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub seed: u64,
    pub iteration: usize,
    pub x: Vec<f64>,
    pub y: f64,
    pub metric: f64,
    pub metric_name: String,
    pub action: Vec<f64>,
    pub wall_time_s: f64,
}

/// Per-iteration aggregate across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub iteration: usize,
    pub mean: f64,
    pub stderr: f64,
    pub n_seeds: usize,
}

/// The metric column of a trial file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub seed: u64,
    pub iteration: usize,
    pub metric: f64,
}

pub const SUMMARY_HEADER: &str = "iteration,mean,stderr,n_seeds";

pub fn trial_header(dim: usize, action_len: usize) -> String {
    let mut h = String::from("seed,iteration");
    for i in 1..=dim {
        let _ = write!(h, ",x{i}");
    }
    h.push_str(",y,metric,metric_name");
    for i in 1..=action_len {
        let _ = write!(h, ",action{i}");
    }
    h.push_str(",wall_time_s");
    h
}

pub fn trial_file_name(seed: u64) -> String {
    format!("trial_seed{seed}.csv")
}

/// Renders a trial file. All records must share `x` and `action` lengths.
pub fn trial_csv(records: &[TrialRecord], dim: usize, action_len: usize) -> String {
    let mut out = trial_header(dim, action_len);
    out.push('\n');
    for r in records {
        debug_assert_eq!(r.x.len(), dim);
        debug_assert_eq!(r.action.len(), action_len);
        let _ = write!(out, "{},{}", r.seed, r.iteration);
        for v in &r.x {
            let _ = write!(out, ",{v}");
        }
        let _ = write!(out, ",{},{},{}", r.y, r.metric, r.metric_name);
        for v in &r.action {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", r.wall_time_s);
    }
    out
}

/// Extracts seed, iteration and metric from a trial file.
pub fn parse_trial_csv(text: &str) -> Result<Vec<MetricRow>, CsvError> {
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, h)) => h.trim_start_matches('\u{feff}'),
        None => {
            return Err(CsvError::Parse {
                line: 1,
                message: "empty file".into(),
            })
        }
    };
    let cols: Vec<&str> = header.split(',').collect();
    let find = |name: &str| {
        cols.iter().position(|c| c.trim() == name).ok_or_else(|| CsvError::Parse {
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    if cols.first().map(|c| c.trim()) != Some("seed") || cols.get(1).map(|c| c.trim()) != Some("iteration") {
        return Err(CsvError::Parse {
            line: 1,
            message: "header must start with `seed,iteration`".into(),
        });
    }
    let metric_col = find("metric")?;
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(CsvError::Parse {
                line: line_no,
                message: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let bad = |what: &str| CsvError::Parse {
            line: line_no,
            message: format!("invalid {what}"),
        };
        let metric: f64 = fields[metric_col].trim().parse().map_err(|_| bad("metric"))?;
        if !metric.is_finite() {
            return Err(bad("metric"));
        }
        rows.push(MetricRow {
            seed: fields[0].trim().parse().map_err(|_| bad("seed"))?,
            iteration: fields[1].trim().parse().map_err(|_| bad("iteration"))?,
            metric,
        });
    }
    Ok(rows)
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.iteration, r.mean, r.stderr, r.n_seeds);
    }
    out
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CsvError> {
    std::fs::write(path, contents).map_err(|e| CsvError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn read_file(path: &Path) -> Result<String, CsvError> {
    std::fs::read_to_string(path).map_err(|e| CsvError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Trial files (`trial_seed*.csv`) in `dir`, sorted by name.
pub fn trial_files(dir: &Path) -> Result<Vec<PathBuf>, CsvError> {
    let entries = std::fs::read_dir(dir).map_err(|e| CsvError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("trial_seed") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(seed: u64, iteration: usize, metric: f64) -> TrialRecord {
        TrialRecord {
            seed,
            iteration,
            x: vec![0.25, 1.0 / 3.0],
            y: -1.5e-7,
            metric,
            metric_name: "neg_loss".into(),
            action: vec![0.1],
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn header_is_expanded_per_dimension() {
        assert_eq!(
            trial_header(2, 3),
            "seed,iteration,x1,x2,y,metric,metric_name,action1,action2,action3,wall_time_s"
        );
        assert_eq!(trial_header(1, 0), "seed,iteration,x1,y,metric,metric_name,wall_time_s");
    }

    #[test]
    fn metrics_round_trip_exactly() {
        let recs = vec![record(3, 1, -0.123456789012345), record(3, 2, 2.0 / 3.0)];
        let text = trial_csv(&recs, 2, 1);
        let rows = parse_trial_csv(&text).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].metric, -0.123456789012345);
        assert_eq!(rows[1].metric, 2.0 / 3.0);
        assert_eq!(rows[1].iteration, 2);
        assert_eq!(rows[1].seed, 3);
        assert_eq!(trial_csv(&recs, 2, 1), text);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(parse_trial_csv("").is_err());
        assert!(parse_trial_csv("a,b\n").is_err());
        assert!(parse_trial_csv("seed,iteration,metric\n1,2\n").is_err());
        assert!(parse_trial_csv("seed,iteration,metric\n1,2,x\n").is_err());
        assert!(parse_trial_csv("seed,iteration,metric\n1,2,NaN\n").is_err());
        assert!(parse_trial_csv("seed,iteration,y\n1,2,3\n").is_err());
    }
}
