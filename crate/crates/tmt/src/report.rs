//! Output files: the JSON ranking report and the CSV logs.

use std::fs;
use std::path::Path;

use serde::Serialize;
use tmt_core::eval::RankingReport;
use tmt_core::experiment::EpochRecord;

use crate::error::{AppError, Result};

/// Retrieval report as written to disk.
#[derive(Debug, Clone, Serialize)]
pub struct ReportFile<'a, C: Serialize> {
    pub rank1: f64,
    pub cmc: &'a [f64],
    /// Absent under the single-gallery protocol.
    pub map: Option<f64>,
    pub evaluated_queries: usize,
    pub skipped_queries: usize,
    pub config: &'a C,
}

impl<'a, C: Serialize> ReportFile<'a, C> {
    pub fn new(report: &'a RankingReport, config: &'a C) -> Self {
        Self {
            rank1: report.rank1(),
            cmc: &report.cmc,
            map: report.map,
            evaluated_queries: report.evaluated_queries,
            skipped_queries: report.skipped_queries,
            config,
        }
    }
}

pub fn report_json<C: Serialize>(report: &RankingReport, config: &C) -> Result<String> {
    serde_json::to_string_pretty(&ReportFile::new(report, config))
        .map_err(|e| AppError::Validation(format!("report serialisation: {e}")))
}

pub fn write_report<C: Serialize>(path: &Path, report: &RankingReport, config: &C) -> Result<()> {
    let mut text = report_json(report, config)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> AppError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => AppError::io(path, io),
        other => AppError::format(path, format!("{other:?}")),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per epoch; Rank-1 and mAP are empty on epochs without an
/// evaluation.
pub fn metrics_csv(records: &[EpochRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mem = Path::new("<metrics>");
    w.write_record(["epoch", "lr", "loss", "rank1", "map"]).map_err(|e| csv_err(mem, e))?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.mean_loss.to_string(),
            opt(r.rank1),
            opt(r.map),
        ])
        .map_err(|e| csv_err(mem, e))?;
    }
    w.into_inner().map_err(|e| AppError::Validation(e.to_string()))
}

pub fn write_metrics(path: &Path, records: &[EpochRecord]) -> Result<()> {
    fs::write(path, metrics_csv(records)?).map_err(|e| AppError::io(path, e))
}

/// AP of every evaluated query, in evaluation order.
pub fn write_per_query_ap(path: &Path, report: &RankingReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["query", "ap"]).map_err(|e| csv_err(path, e))?;
    for (i, ap) in report.per_query_ap.iter().enumerate() {
        w.write_record([i.to_string(), ap.to_string()]).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// One bench row: a setting, its seed count and the mean ± std of the
/// held-out metrics over those seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub axis: String,
    pub value: String,
    pub seeds: usize,
    pub map_mean: Option<f64>,
    pub map_std: Option<f64>,
    pub rank1_mean: f64,
    pub rank1_std: f64,
}

pub fn write_bench(out: impl std::io::Write, rows: &[BenchRow]) -> std::result::Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Sample mean and standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_leave_unevaluated_epochs_blank() {
        let recs = [
            EpochRecord {
                epoch: 0,
                lr: 0.5,
                mean_loss: 2.0,
                rank1: None,
                map: None,
            },
            EpochRecord {
                epoch: 1,
                lr: 0.5,
                mean_loss: 1.5,
                rank1: Some(1.0),
                map: Some(0.75),
            },
        ];
        let text = String::from_utf8(metrics_csv(&recs).unwrap()).unwrap();
        assert_eq!(text, "epoch,lr,loss,rank1,map\n0,0.5,2,,\n1,0.5,1.5,1,0.75\n");
    }

    #[test]
    fn mean_std_matches_hand_values() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
