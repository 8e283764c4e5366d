//! Persisted results: an append-only line-delimited metrics log (one JSON
//! object per evaluation point) and a run record with the full context of a
//! finished run.
//!
//! The metrics log is a pure function of configuration and seed — no
//! timestamps, no environment — so identical runs produce byte-identical
//! logs. Wall time lives only in the run record.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{DfdgError, Result};
use crate::server::EvalPoint;

pub const RECORD_SCHEMA_VERSION: u32 = 1;

/// One trained client as reported to the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client_id: usize,
    pub width_ratio: f64,
    pub data_size: usize,
    pub final_local_accuracy: f64,
    pub final_loss: f64,
}

/// How the data was split for this run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub seed: u64,
    pub repair_offset: u64,
    pub client_sizes: Vec<usize>,
}

/// Everything needed to interpret a finished run: the configuration
/// snapshot, the seed, per-evaluation metrics, and summary numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub mode: String,
    pub seed: u64,
    pub rng_family: String,
    pub config: ExperimentConfig,
    pub partition: PartitionSummary,
    /// Whether aggregation averaged client weights (homogeneous widths) or
    /// kept the shared initialization (heterogeneous widths).
    pub averaged: bool,
    pub clients: Vec<ClientReport>,
    /// Test accuracy of the uniform logit ensemble over the client models.
    /// Distilled students rarely exceed this, so it bounds what the server
    /// phase can recover.
    pub ensemble_accuracy: f64,
    pub eval_points: Vec<EvalPoint>,
    pub best_accuracy: f64,
    pub wall_time_secs: f64,
}

// ---------------------------------------------------------------------------
// metrics log

/// Serialize evaluation points as line-delimited JSON.
pub fn format_metrics(points: &[EvalPoint]) -> String {
    let mut out = String::new();
    for p in points {
        out.push_str(&serde_json::to_string(p).expect("eval point serializes"));
        out.push('\n');
    }
    out
}

/// Parse a line-delimited metrics log, rejecting trailing garbage.
pub fn parse_metrics(text: &str) -> Result<Vec<EvalPoint>> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: EvalPoint = serde_json::from_str(line)
            .map_err(|e| DfdgError::Config(format!("metrics line {}: {e}", i + 1)))?;
        points.push(p);
    }
    Ok(points)
}

pub fn write_metrics(points: &[EvalPoint], path: &Path) -> Result<()> {
    std::fs::write(path, format_metrics(points)).map_err(|e| DfdgError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EvalPoint>> {
    let text = std::fs::read_to_string(path).map_err(|e| DfdgError::io(path, e))?;
    parse_metrics(&text)
}

// ---------------------------------------------------------------------------
// run records

pub fn parse_run_record(bytes: &[u8]) -> Result<RunRecord> {
    let record: RunRecord = serde_json::from_slice(bytes)?;
    if record.schema_version != RECORD_SCHEMA_VERSION {
        return Err(DfdgError::Config(format!(
            "run record schema_version {} unsupported",
            record.schema_version
        )));
    }
    Ok(record)
}

pub fn write_run_record(record: &RunRecord, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(record).expect("run record serializes");
    std::fs::write(path, json).map_err(|e| DfdgError::io(path, e))
}

pub fn read_run_record(path: &Path) -> Result<RunRecord> {
    let bytes = std::fs::read(path).map_err(|e| DfdgError::io(path, e))?;
    parse_run_record(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::defaults_for;
    use crate::data::DatasetName;
    use crate::losses::GenLossParts;

    fn sample_points() -> Vec<EvalPoint> {
        vec![
            EvalPoint { outer_iter: 0, test_accuracy: 0.1, distill_loss: 0.0, gen_parts: vec![] },
            EvalPoint {
                outer_iter: 5,
                test_accuracy: 0.42,
                distill_loss: 0.0313,
                gen_parts: vec![GenLossParts { fid: 1.2, tran: -0.3, div: 0.9, cd: -0.1 }],
            },
        ]
    }

    #[test]
    fn metrics_round_trip_and_stay_byte_stable() {
        let points = sample_points();
        let a = format_metrics(&points);
        let b = format_metrics(&points);
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 2);
        let back = parse_metrics(&a).unwrap();
        assert_eq!(points, back);
    }

    #[test]
    fn metrics_parser_rejects_garbage() {
        assert!(parse_metrics("{\"not\": \"an eval point\"}\n").is_err());
        assert!(parse_metrics("outer_iter,test_accuracy\n0,0.5\n").is_err());
        assert_eq!(parse_metrics("").unwrap(), vec![]);
    }

    #[test]
    fn run_record_round_trips() {
        let record = RunRecord {
            schema_version: RECORD_SCHEMA_VERSION,
            mode: "dfdg".into(),
            seed: 1,
            rng_family: "chacha12".into(),
            config: defaults_for(DatasetName::SynthToy),
            partition: PartitionSummary { seed: 7, repair_offset: 0, client_sizes: vec![120, 80] },
            averaged: true,
            clients: vec![ClientReport {
                client_id: 0,
                width_ratio: 1.0,
                data_size: 120,
                final_local_accuracy: 0.97,
                final_loss: 0.1,
            }],
            ensemble_accuracy: 0.5,
            eval_points: sample_points(),
            best_accuracy: 0.42,
            wall_time_secs: 3.5,
        };
        let json = serde_json::to_vec(&record).unwrap();
        let back = parse_run_record(&json).unwrap();
        assert_eq!(record, back);
        // version gating
        let mut wrong = record;
        wrong.schema_version = 9;
        let json = serde_json::to_vec(&wrong).unwrap();
        assert!(parse_run_record(&json).is_err());
        assert!(parse_run_record(b"[1, 2, 3]").is_err());
    }
}
