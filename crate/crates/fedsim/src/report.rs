//! CSV records and the run manifest.

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Method};
use crate::runner::{RoundRecord, RunOutput};

/// Seventeen significant digits, enough to read back the same `f64`.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn csv_header(k: usize) -> String {
    let mut h =
        String::from("round,method,seed,test_accuracy,gamma,effective_l1,num_failed,agg_time_ns");
    for i in 0..k {
        write!(h, ",w{i}").unwrap();
    }
    h
}

pub fn csv_row(method: Method, seed: u64, r: &RoundRecord) -> String {
    let mut row = format!(
        "{},{},{},{},{},{},{},{}",
        r.round,
        method,
        seed,
        r.test_accuracy.map(fmt_real).unwrap_or_default(),
        fmt_real(r.gamma),
        fmt_real(r.effective_l1),
        r.num_failed,
        r.agg_wall_time_ns
    );
    for w in &r.weights {
        row.push(',');
        row.push_str(&fmt_real(*w));
    }
    row
}

/// Records of one or more runs that share `K`, with one header line.
pub fn records_csv<'a>(
    k: usize,
    runs: impl IntoIterator<Item = (Method, u64, &'a [RoundRecord])>,
) -> String {
    let mut out = csv_header(k);
    out.push('\n');
    for (method, seed, records) in runs {
        for r in records {
            out.push_str(&csv_row(method, seed, r));
            out.push('\n');
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputPaths {
    pub records: PathBuf,
    pub manifest: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub method: Method,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub outputs: OutputPaths,
    pub version: String,
    pub final_accuracy: Option<f64>,
    pub best_accuracy: Option<f64>,
    pub best_round: Option<usize>,
}

impl RunManifest {
    pub fn new(
        config: &ExperimentConfig,
        output: &RunOutput,
        started_unix_ms: u128,
        finished_unix_ms: u128,
        outputs: OutputPaths,
    ) -> Self {
        let best = output.best_accuracy();
        RunManifest {
            config_hash: config.hash(),
            seed: config.seed,
            method: config.method,
            started_unix_ms,
            finished_unix_ms,
            outputs,
            version: version_string(),
            final_accuracy: output.final_accuracy(),
            best_accuracy: best.map(|(_, a)| a),
            best_round: best.map(|(t, _)| t),
        }
    }
}

pub fn version_string() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

pub fn unix_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_millis())
}
