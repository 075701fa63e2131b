//! Report files.
//!
//! * `report.json`: the full [`BenchmarkReport`], item results included.
//! * `summary.csv`: `category,n,correct,accuracy,macro_accuracy`, one row per
//!   category then an `average` row carrying the micro accuracy, with the
//!   macro accuracy in the last column.
//! * `seeds.csv`: `kind,seed,n,correct,accuracy`, one `run` row per seed then
//!   a `mean` row, for dot-and-bar plots.
//!
//! Empty reports produce header-only CSVs.

use std::path::{Path, PathBuf};

use thiserror::Error;

use super::BenchmarkReport;

pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SEEDS_FILE: &str = "seeds.csv";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: disagrees with {REPORT_FILE}: {message}")]
    Inconsistent { path: PathBuf, message: String },
}

fn fmt_acc(x: f64) -> String {
    format!("{x:.4}")
}

fn summary_rows(report: &BenchmarkReport) -> Vec<[String; 5]> {
    if report.n_items == 0 {
        return Vec::new();
    }
    let mut rows: Vec<[String; 5]> = report
        .per_category
        .iter()
        .map(|(cat, s)| {
            [
                cat.clone(),
                s.n.to_string(),
                s.correct.to_string(),
                fmt_acc(s.accuracy),
                String::new(),
            ]
        })
        .collect();
    rows.push([
        "average".into(),
        report.n_items.to_string(),
        report.correct.to_string(),
        fmt_acc(report.micro_average),
        fmt_acc(report.macro_average),
    ]);
    rows
}

fn seed_rows(report: &BenchmarkReport) -> Vec<[String; 5]> {
    if report.n_items == 0 {
        return Vec::new();
    }
    let mut rows: Vec<[String; 5]> = report
        .per_seed
        .iter()
        .map(|s| {
            [
                "run".into(),
                s.seed.to_string(),
                s.n.to_string(),
                s.correct.to_string(),
                fmt_acc(s.accuracy),
            ]
        })
        .collect();
    rows.push([
        "mean".into(),
        String::new(),
        String::new(),
        String::new(),
        fmt_acc(report.mean_across_seeds),
    ]);
    rows
}

const SUMMARY_HEADER: [&str; 5] = ["category", "n", "correct", "accuracy", "macro_accuracy"];
const SEEDS_HEADER: [&str; 5] = ["kind", "seed", "n", "correct", "accuracy"];

fn write_csv(path: &Path, header: [&str; 5], rows: &[[String; 5]]) -> Result<(), ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>, ReportError> {
    let csv_err = |source| ReportError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(csv_err)?;
    r.records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()).map_err(csv_err))
        .collect()
}

/// Write the three report files into `out_dir`, creating it if needed.
pub fn emit_report(report: &BenchmarkReport, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, ReportError> {
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let json_path = dir.join(REPORT_FILE);
    let json = serde_json::to_string_pretty(report).map_err(|source| ReportError::Json {
        path: json_path.clone(),
        source,
    })?;
    std::fs::write(&json_path, json + "\n").map_err(|source| ReportError::Io {
        path: json_path.clone(),
        source,
    })?;
    let summary_path = dir.join(SUMMARY_FILE);
    write_csv(&summary_path, SUMMARY_HEADER, &summary_rows(report))?;
    let seeds_path = dir.join(SEEDS_FILE);
    write_csv(&seeds_path, SEEDS_HEADER, &seed_rows(report))?;
    Ok(vec![json_path, summary_path, seeds_path])
}

fn check(path: &Path, header: [&str; 5], expected: Vec<[String; 5]>) -> Result<(), ReportError> {
    let got = read_csv(path)?;
    let mut want: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    want.extend(expected.into_iter().map(Vec::from));
    if got != want {
        let at = got
            .iter()
            .zip(&want)
            .position(|(a, b)| a != b)
            .unwrap_or(got.len().min(want.len()));
        return Err(ReportError::Inconsistent {
            path: path.to_path_buf(),
            message: format!("row {at} differs"),
        });
    }
    Ok(())
}

/// Read a report directory back, checking that the CSV files agree with
/// `report.json`.
pub fn read_report(dir: impl AsRef<Path>) -> Result<BenchmarkReport, ReportError> {
    let dir = dir.as_ref();
    let json_path = dir.join(REPORT_FILE);
    let text = std::fs::read_to_string(&json_path).map_err(|source| ReportError::Io {
        path: json_path.clone(),
        source,
    })?;
    let report: BenchmarkReport = serde_json::from_str(&text).map_err(|source| ReportError::Json {
        path: json_path.clone(),
        source,
    })?;
    check(&dir.join(SUMMARY_FILE), SUMMARY_HEADER, summary_rows(&report))?;
    check(&dir.join(SEEDS_FILE), SEEDS_HEADER, seed_rows(&report))?;
    Ok(report)
}
