//! CSV and JSON outputs: evaluation rows, training logs, attention and
//! calibration dumps.

use std::collections::BTreeMap;
use std::path::Path;

use fcnet_core::metrics::{EvalReport, PR_THRESHOLDS};
use fcnet_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::FormatError;

/// `pr50`, `pr60`, ... column labels.
pub fn pr_headers() -> Vec<String> {
    PR_THRESHOLDS
        .iter()
        .map(|t| format!("pr{}", (t * 100.0).round() as u32))
        .collect()
}

pub fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>, FormatError> {
    let f = std::fs::File::create(path).map_err(|e| FormatError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

/// Rows of `split, mean_iou, pr50..pr90`.
pub fn write_eval_csv(path: &Path, rows: &[(&str, &EvalReport)]) -> Result<(), FormatError> {
    let mut w = writer(path)?;
    let mut header = vec!["split".to_string(), "mean_iou".to_string()];
    header.extend(pr_headers());
    w.write_record(&header)?;
    for (split, r) in rows {
        let mut rec = vec![split.to_string(), fmt(r.mean_iou)];
        rec.extend(r.precision.iter().map(|&(_, p)| fmt(p)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| FormatError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalJson {
    pub split: String,
    pub samples: usize,
    pub mean_iou: f64,
    /// `"pr50" -> fraction` and so on.
    pub precision: BTreeMap<String, f64>,
    pub per_sample_iou: Vec<f64>,
}

impl EvalJson {
    pub fn new(split: &str, r: &EvalReport) -> Self {
        Self {
            split: split.into(),
            samples: r.ious.len(),
            mean_iou: r.mean_iou,
            precision: pr_headers()
                .into_iter()
                .zip(r.precision.iter().map(|&(_, p)| p))
                .collect(),
            per_sample_iou: r.ious.clone(),
        }
    }
}

pub fn write_eval_json(path: &Path, reports: &[EvalJson]) -> Result<(), FormatError> {
    let text = serde_json::to_string_pretty(reports)?;
    std::fs::write(path, text + "\n").map_err(|e| FormatError::io(path, e))
}

/// `[rows, cols]` tensor as CSV under a header row.
pub fn write_matrix_csv(path: &Path, header: &[String], m: &Tensor) -> Result<(), FormatError> {
    let cols = match *m.shape() {
        [_, c] => c,
        ref s => return Err(FormatError::Invalid(format!("expected a matrix, got shape {s:?}"))),
    };
    if header.len() != cols {
        return Err(FormatError::Invalid(format!(
            "{} header labels for {cols} columns",
            header.len()
        )));
    }
    let mut w = writer(path)?;
    w.write_record(header)?;
    for row in m.data().chunks(cols) {
        w.write_record(row.iter().map(|&v| format!("{v:.9}")))?;
    }
    w.flush().map_err(|e| FormatError::io(path, e))
}

/// Parse a numeric CSV written by [`write_matrix_csv`]: `(header, rows)`.
pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), FormatError> {
    let f = std::fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
    let mut r = csv::Reader::from_reader(f);
    let header = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.parse::<f64>()
                    .map_err(|_| FormatError::Invalid(format!("not a number: {s:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// One logged epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_iou: f64,
    pub val_precision: Vec<f64>,
    pub lr: f64,
    pub seconds: f64,
}

pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<(), FormatError> {
    let mut w = writer(path)?;
    let mut header: Vec<String> = ["epoch", "train_loss", "val_mean_iou"].map(String::from).to_vec();
    header.extend(pr_headers().into_iter().map(|h| format!("val_{h}")));
    header.extend(["lr", "seconds"].map(String::from));
    w.write_record(&header)?;
    for e in log {
        let mut rec = vec![e.epoch.to_string(), format!("{:.9}", e.train_loss), fmt(e.val_mean_iou)];
        rec.extend(e.val_precision.iter().map(|&p| fmt(p)));
        rec.push(format!("{:e}", e.lr));
        rec.push(format!("{:.1}", e.seconds));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| FormatError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pr_header_labels() {
        assert_eq!(pr_headers(), ["pr50", "pr60", "pr70", "pr80", "pr90"]);
    }

    #[test]
    fn matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let m = Tensor::new(&[2, 3], vec![0.1, 0.2, 0.7, 1.0, 0.0, 0.0]).unwrap();
        let header: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        write_matrix_csv(&p, &header, &m).unwrap();
        let (h, rows) = read_matrix_csv(&p).unwrap();
        assert_eq!(h, header);
        assert_eq!(rows, vec![vec![0.1, 0.2, 0.7], vec![1.0, 0.0, 0.0]]);
        assert!(write_matrix_csv(&p, &header[..2], &m).is_err());
    }
}
