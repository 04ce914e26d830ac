//! Metrics CSV (epoch,split,loss,accuracy,lr_backbone,lr_gcn,wall_seconds)
//! and the confusion-matrix CSV.

use std::fmt::Write as _;
use std::path::Path;

use tvgcn_core::error::Result;
use tvgcn_core::harness::EpochStats;

pub const METRICS_HEADER: &str = "epoch,split,loss,accuracy,lr_backbone,lr_gcn,wall_seconds";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: u32,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr_backbone: f64,
    pub lr_gcn: f64,
    pub wall_seconds: f64,
}

impl From<&EpochStats> for MetricsRow {
    fn from(s: &EpochStats) -> Self {
        MetricsRow {
            epoch: s.epoch,
            split: s.split.clone(),
            loss: s.loss,
            accuracy: s.accuracy,
            lr_backbone: s.lr_backbone,
            lr_gcn: s.lr_gcn,
            wall_seconds: s.wall_seconds,
        }
    }
}

pub fn metrics_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.split, r.loss, r.accuracy, r.lr_backbone, r.lr_gcn, r.wall_seconds
        )
        .expect("string write");
    }
    out
}

pub fn write_metrics(path: &Path, stats: &[EpochStats]) -> Result<()> {
    let rows: Vec<MetricsRow> = stats.iter().map(MetricsRow::from).collect();
    std::fs::write(path, metrics_to_csv(&rows))?;
    Ok(())
}

/// Plain integer grid, rows = true class, columns = predicted class.
pub fn confusion_to_csv(confusion: &[Vec<usize>]) -> String {
    let mut out = String::new();
    for row in confusion {
        let line: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn write_confusion(path: &Path, confusion: &[Vec<usize>]) -> Result<()> {
    std::fs::write(path, confusion_to_csv(confusion))?;
    Ok(())
}
