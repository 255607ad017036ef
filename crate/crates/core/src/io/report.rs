use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::Model;
use crate::error::{Error, Result};
use crate::memory::{analyze, MemoryReport};
use crate::params::ParamStore;
use crate::train::{apply_policy, FineTunePolicy};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Every JSON report is wrapped with its kind and schema version.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope<R> {
    pub kind: String,
    pub schema_version: u32,
    pub report: R,
}

impl<R> Envelope<R> {
    pub fn new(kind: &str, report: R) -> Self {
        Envelope {
            kind: kind.into(),
            schema_version: REPORT_SCHEMA_VERSION,
            report,
        }
    }
}

pub fn write_report<R: Serialize>(kind: &str, report: &R, path: &Path) -> Result<()> {
    super::write_json(&Envelope::new(kind, report), path)
}

pub fn read_report<R: serde::de::DeserializeOwned>(kind: &str, path: &Path) -> Result<R> {
    let env: Envelope<R> = super::read_json(path)?;
    if env.kind != kind || env.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "expected {kind} v{REPORT_SCHEMA_VERSION}, found {} v{}",
            env.kind, env.schema_version
        )));
    }
    Ok(env.report)
}

const MEMORY_HEADER: [&str; 5] = [
    "layer",
    "saved_activation_bytes",
    "frozen_param_bytes",
    "trainable_param_bytes",
    "optimizer_state_bytes",
];

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Rows of `records` under `header`; the header is written even with no rows.
fn to_csv<S: Serialize>(header: &[&str], records: &[S]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(csv_err)?;
    String::from_utf8(bytes).map_err(csv_err)
}

pub fn memory_csv(report: &MemoryReport) -> Result<String> {
    to_csv(&MEMORY_HEADER, &report.rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: String,
    pub resolution: usize,
    pub batch: usize,
    pub activation_bytes: u64,
    pub param_bytes: u64,
    pub optimizer_state_bytes: u64,
    pub headline_mb: f64,
    pub inference_mac: u64,
    pub training_mac: u64,
}

const SWEEP_HEADER: [&str; 9] = [
    "policy",
    "resolution",
    "batch",
    "activation_bytes",
    "param_bytes",
    "optimizer_state_bytes",
    "headline_mb",
    "inference_mac",
    "training_mac",
];

/// Analytic cost of each policy at each resolution.
pub fn sweep(
    model: &Model,
    store: &ParamStore<f32>,
    policies: &[FineTunePolicy],
    resolutions: &[usize],
    batch: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for policy in policies {
        let mut s = store.clone();
        apply_policy(&mut s, policy)?;
        for &res in resolutions {
            let r = analyze(model, &s, batch, res)?;
            let t = &r.memory.totals;
            rows.push(SweepRow {
                policy: policy.to_string(),
                resolution: res,
                batch,
                activation_bytes: t.saved_activation_bytes,
                param_bytes: t.frozen_param_bytes + t.trainable_param_bytes,
                optimizer_state_bytes: t.optimizer_state_bytes,
                headline_mb: t.headline_mb,
                inference_mac: r.inference_mac,
                training_mac: r.training_mac,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    to_csv(&SWEEP_HEADER, rows)
}

pub fn write_text(text: &str, path: &Path) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
