use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{InstructionSource, LoadedConfig};
use super::optimize::BestInstruction;
use super::{
    create_dir, in_split, load_records, write_json, write_jsonl, ConfigLock, CONFIG_LOCK_FILE,
    PREDICTIONS_FILE, REPORT_FILE, TIMING_FILE,
};
use crate::error::{Error, Result};
use crate::ingest::{PatientRecord, Rejection, Split};
use crate::llm::LlmClient;
use crate::metrics::{evaluate, median_of_runs, MetricsReport, PredictionRecord};
use crate::pipeline::Mode;
use crate::serialize::Violation;
use crate::tasks::TaskId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub rep: usize,
    #[serde(flatten)]
    pub prediction: PredictionRecord,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationSummary {
    pub inputs: usize,
    pub truncated: usize,
    /// Inputs where nothing of the note fit.
    pub budget_exhausted: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionIssue {
    pub rep: usize,
    pub record_id: String,
    pub sentence_count: usize,
    pub violations: Vec<Violation>,
}

/// Output paths, relative to the run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifacts {
    pub predictions: String,
    pub report: String,
    pub config_lock: String,
    pub timing: String,
}

impl Default for Artifacts {
    fn default() -> Self {
        Artifacts {
            predictions: PREDICTIONS_FILE.into(),
            report: REPORT_FILE.into(),
            config_lock: CONFIG_LOCK_FILE.into(),
            timing: TIMING_FILE.into(),
        }
    }
}

/// Everything deterministic about a run. Wall-clock figures go to
/// [`RunTiming`] so this file is reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub task: TaskId,
    pub mode: Mode,
    pub model: String,
    pub split: Split,
    pub instruction_hash: String,
    pub records_in_split: usize,
    pub rejected_lines: Vec<Rejection>,
    pub repetitions: Vec<MetricsReport>,
    pub median: MetricsReport,
    pub truncation: TruncationSummary,
    pub description_issues: Vec<DescriptionIssue>,
    pub artifacts: Artifacts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepTiming {
    pub rep: usize,
    pub n: usize,
    pub wall_seconds: f64,
    pub per_100_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTiming {
    pub repetitions: Vec<RepTiming>,
    pub total_wall_seconds: f64,
    pub network_attempts: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub report: RunReport,
    pub timing: RunTiming,
    pub predictions: Vec<PredictionRow>,
}

pub fn resolve_instruction(loaded: &LoadedConfig) -> Result<String> {
    let task = loaded.config.task_spec();
    match &loaded.config.instruction {
        InstructionSource::Default => Ok(task.description.to_string()),
        InstructionSource::Fixed { text } if text.trim().is_empty() => {
            Err(Error::Config("fixed instruction is empty".into()))
        }
        InstructionSource::Fixed { text } => Ok(text.clone()),
        InstructionSource::Optimized { path } => {
            let best = BestInstruction::load(&loaded.resolve(path))?;
            if best.task != task.id {
                return Err(Error::Config(format!(
                    "optimized instruction is for `{}`, config is for `{}`",
                    best.task, task.id
                )));
            }
            Ok(best.text)
        }
    }
}

/// Indices of the records evaluated in repetition `rep`, ascending.
pub fn repetition_subset(n: usize, sample: Option<usize>, seed: u64, rep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Some(k) = sample.filter(|&k| k < n) {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(rep as u64)));
        idx.truncate(k);
        idx.sort_unstable();
    }
    idx
}

/// Run every repetition, aggregate, and write the run directory.
pub fn run_experiment(loaded: &LoadedConfig, client: &LlmClient, out_dir: &Path) -> Result<RunOutcome> {
    let cfg = &loaded.config;
    let base = loaded.pipeline()?;
    let instruction = resolve_instruction(loaded)?;
    let parsed = load_records(loaded, &base.catalog, &base.task)?;
    let records = in_split(&parsed.records, cfg.split);
    if records.is_empty() {
        return Err(Error::Precondition(format!(
            "no `{:?}` records in {}",
            cfg.split,
            loaded.resolve(&cfg.data).display()
        )));
    }

    let mut reports = Vec::with_capacity(cfg.repetitions);
    let mut rows = Vec::new();
    let mut timings = Vec::new();
    let mut truncation = TruncationSummary::default();
    let mut description_issues = Vec::new();
    let started = Instant::now();
    for rep in 0..cfg.repetitions {
        let mut pipeline = base.clone();
        if pipeline.generation.temperature > 0.0 {
            pipeline.generation.cache_tag = Some(format!("rep{rep}"));
        }
        if pipeline.description_generation.temperature > 0.0 {
            pipeline.description_generation.cache_tag = Some(format!("rep{rep}"));
        }
        let subset: Vec<PatientRecord> = repetition_subset(records.len(), cfg.sample, cfg.seed, rep)
            .into_iter()
            .map(|i| records[i].clone())
            .collect();
        let rep_start = Instant::now();
        let predicted = pipeline.predict_all(&subset, &instruction, client)?;
        let wall = rep_start.elapsed().as_secs_f64();
        timings.push(RepTiming {
            rep,
            n: subset.len(),
            wall_seconds: wall,
            per_100_seconds: wall * 100.0 / subset.len() as f64,
        });

        let mut preds = Vec::with_capacity(predicted.len());
        for p in predicted {
            truncation.inputs += 1;
            truncation.truncated += usize::from(p.truncation.truncated);
            truncation.budget_exhausted += usize::from(p.truncation.budget_exhausted);
            if let Some(d) = p.description.filter(|d| !d.check.is_clean()) {
                description_issues.push(DescriptionIssue {
                    rep,
                    record_id: p.record.record_id.clone(),
                    sentence_count: d.check.sentence_count,
                    violations: d.check.violations,
                });
            }
            rows.push(PredictionRow {
                rep,
                prediction: p.record.clone(),
            });
            preds.push(p.record);
        }
        let report = evaluate(&preds, &pipeline.task, pipeline.averaging)?;
        log::info!("rep {rep}: {}", crate::metrics::render_summary(&report).trim_end());
        reports.push(report);
    }
    let median = median_of_runs(&reports)?;

    let report = RunReport {
        config_hash: cfg.config_hash(),
        task: cfg.task,
        mode: cfg.mode,
        model: cfg.endpoint.model.clone(),
        split: cfg.split,
        instruction_hash: hex::encode(Sha256::digest(instruction.as_bytes()))[..16].to_string(),
        records_in_split: records.len(),
        rejected_lines: parsed.rejections,
        repetitions: reports,
        median,
        truncation,
        description_issues,
        artifacts: Artifacts::default(),
    };
    let timing = RunTiming {
        repetitions: timings,
        total_wall_seconds: started.elapsed().as_secs_f64(),
        network_attempts: client.network_attempts(),
    };

    create_dir(out_dir)?;
    write_jsonl(&out_dir.join(PREDICTIONS_FILE), &rows)?;
    write_json(&out_dir.join(REPORT_FILE), &report)?;
    write_json(&out_dir.join(CONFIG_LOCK_FILE), &ConfigLock::<()>::new(cfg, None))?;
    write_json(&out_dir.join(TIMING_FILE), &timing)?;
    Ok(RunOutcome {
        report,
        timing,
        predictions: rows,
    })
}

impl RunReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
