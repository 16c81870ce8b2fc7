//! Run configs, repeated experiments, optimization runs and timing, with
//! their on-disk outputs.

pub mod config;
pub mod experiment;
pub mod optimize;
pub mod timing;

use std::path::Path;

use serde::Serialize;

pub use config::{ablate_feature, EndpointConfig, InstructionSource, LoadedConfig, RunConfig, TokenizerConfig};
pub use experiment::{resolve_instruction, run_experiment, PredictionRow, RunOutcome, RunReport};
pub use optimize::{run_optimization, BestInstruction};
pub use timing::{time_inference, Energy, TimingReport};

use crate::error::{Error, Result};
use crate::ingest::{parse_records, FeatureCatalog, ParsedRecords, PatientRecord, Split};
use crate::llm::cache::write_atomic;
use crate::tasks::TaskSpec;

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const CONFIG_LOCK_FILE: &str = "config.lock.json";
pub const TIMING_FILE: &str = "timing.json";
pub const BEST_FILE: &str = "best.json";

/// Parse the config's data file.
pub fn load_records(loaded: &LoadedConfig, catalog: &FeatureCatalog, task: &TaskSpec) -> Result<ParsedRecords> {
    let parsed = parse_records(&loaded.resolve(&loaded.config.data), catalog, task)?;
    for r in &parsed.rejections {
        log::warn!("line {} rejected: {}", r.line, r.reason);
    }
    Ok(parsed)
}

pub fn in_split(records: &[PatientRecord], split: Split) -> Vec<PatientRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

#[derive(Serialize)]
pub(crate) struct ConfigLock<'a, B: Serialize> {
    pub config_hash: String,
    pub crate_version: &'static str,
    pub config: &'a RunConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub budget: Option<&'a B>,
}

impl<'a, B: Serialize> ConfigLock<'a, B> {
    pub fn new(config: &'a RunConfig, budget: Option<&'a B>) -> Self {
        ConfigLock {
            config_hash: config.config_hash(),
            crate_version: env!("CARGO_PKG_VERSION"),
            config,
            budget,
        }
    }
}
