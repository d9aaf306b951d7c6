//! The run report written as `report.json`.
//!
//! Schema: `{config: {...}, metrics: {recall: {"1": r1, ...}, nmi, maw,
//! sdaw, weight_gap}, null_reasons: {...}, trace_file, runtime_sec}`.
//! Metrics that do not apply to a run are explicitly `null`, with the
//! reason recorded under `null_reasons`.

use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Debug, Serialize)]
pub struct Metrics {
    pub recall: BTreeMap<String, f64>,
    pub nmi: Option<f64>,
    pub maw: Option<f64>,
    pub sdaw: Option<f64>,
    pub weight_gap: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub config: serde_json::Value,
    pub metrics: Metrics,
    pub null_reasons: BTreeMap<String, String>,
    pub trace_file: String,
    pub runtime_sec: f64,
}
