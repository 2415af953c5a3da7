use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fsutil;
use crate::modulation::TaskId;

/// One line of the JSON-lines metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub phase: String,
    pub task: TaskId,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_psnr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub degraded_psnr: Option<f64>,
}

pub fn metrics_to_jsonl(records: &[MetricRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    fsutil::write_atomic(path, metrics_to_jsonl(records).as_bytes())
}

/// Markdown table with one row per method and one PSNR column per task.
pub fn psnr_table(rows: &[(String, BTreeMap<TaskId, f64>)], tasks: &[TaskId]) -> String {
    let mut s = String::from("| Method |");
    for t in tasks {
        let _ = write!(s, " {t} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---:|".repeat(tasks.len()));
    s.push('\n');
    for (name, vals) in rows {
        let _ = write!(s, "| {name} |");
        for t in tasks {
            match vals.get(t) {
                Some(v) => {
                    let _ = write!(s, " {v:.2} |");
                }
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    s
}
