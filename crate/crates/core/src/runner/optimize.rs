use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::LoadedConfig;
use super::{create_dir, in_split, load_records, write_json, write_jsonl, ConfigLock, BEST_FILE, CONFIG_LOCK_FILE, TRACE_FILE};
use crate::error::{Error, Result};
use crate::ingest::Split;
use crate::llm::LlmClient;
use crate::metrics::MetricId;
use crate::optimizer::{optimize, MetaPrompts, OptimizationBudget, OptimizationResult, Strategy};
use crate::tasks::TaskId;

/// The selected instruction as written to `best.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestInstruction {
    pub task: TaskId,
    pub text: String,
    pub strategy: Strategy,
    pub candidate_hash: String,
    pub metric: MetricId,
    pub value: Option<f64>,
    pub rung: usize,
    pub stopped_early: bool,
    pub calls_charged: usize,
    pub config_hash: String,
}

impl BestInstruction {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

impl OptimizationBudget {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Budget(e.to_string()))
        } else {
            Ok(serde_json::from_str(&text)?)
        }
    }
}

/// Optimize on the config's data file (train split for proposer examples,
/// dev split for evaluation) and write `trace.jsonl`, `best.json` and
/// `config.lock.json` to `out_dir`.
pub fn run_optimization(
    loaded: &LoadedConfig,
    budget: &OptimizationBudget,
    client: &LlmClient,
    out_dir: &Path,
) -> Result<(OptimizationResult, BestInstruction)> {
    let pipeline = loaded.pipeline()?;
    let parsed = load_records(loaded, &pipeline.catalog, &pipeline.task)?;
    let train = in_split(&parsed.records, Split::Train);
    let dev = in_split(&parsed.records, Split::Dev);
    if dev.is_empty() {
        return Err(Error::Precondition("no dev records to evaluate candidates on".into()));
    }
    let result = optimize(
        &pipeline,
        &train,
        &dev,
        budget,
        &loaded.proposer_settings(),
        &MetaPrompts::default(),
        client,
    )?;
    let value = result
        .best
        .scores
        .get(result.decided_at_rung)
        .and_then(|s| s.value);
    let best = BestInstruction {
        task: pipeline.task.id,
        text: result.best.text.clone(),
        strategy: result.best.strategy,
        candidate_hash: result.best.hash(),
        metric: budget.metric,
        value,
        rung: result.decided_at_rung,
        stopped_early: result.stopped_early,
        calls_charged: result.calls_charged,
        config_hash: loaded.config.config_hash(),
    };
    create_dir(out_dir)?;
    write_jsonl(&out_dir.join(TRACE_FILE), &result.trace)?;
    write_json(&out_dir.join(BEST_FILE), &best)?;
    write_json(&out_dir.join(CONFIG_LOCK_FILE), &ConfigLock::new(&loaded.config, Some(budget)))?;
    Ok((result, best))
}
