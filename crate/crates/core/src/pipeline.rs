//! Record → prompt → prediction, for one task and input mode.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_record, AggregationConfig};
use crate::budget::{count_tokens, truncate_to_fit, BudgetPlan, Tokenizer, Truncation, WhitespaceTokenizer};
use crate::error::{Error, Result};
use crate::ingest::{FeatureCatalog, PatientRecord};
use crate::llm::predict::{classify, generate_description, score, GeneratedDescription, GenerationSettings, UNPARSED_SCORE};
use crate::llm::LlmClient;
use crate::metrics::{MacroAveraging, Prediction, PredictionRecord};
use crate::serialize::{assemble_input, render_numeric_block, DescriptionTemplate, ModelInput, TsRepresentation};
use crate::tasks::{InputLayout, TaskSpec};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[default]
    #[serde(rename = "text")]
    Text,
    #[serde(rename = "text+ts-numeric")]
    TextTsNumeric,
    #[serde(rename = "text+ts-description")]
    TextTsDescription,
    #[serde(rename = "ts-only")]
    TsOnly,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Text, Mode::TextTsNumeric, Mode::TextTsDescription, Mode::TsOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Text => "text",
            Mode::TextTsNumeric => "text+ts-numeric",
            Mode::TextTsDescription => "text+ts-description",
            Mode::TsOnly => "ts-only",
        }
    }

    pub fn uses_series(self) -> bool {
        self != Mode::Text
    }

    pub fn uses_note(self) -> bool {
        self != Mode::TsOnly
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode `{s}`")))
    }
}

/// Note text as presented to the model, per task layout.
pub fn note_text(record: &PatientRecord, layout: InputLayout) -> String {
    let b = record.text_b.as_deref().unwrap_or("");
    match layout {
        InputLayout::Note | InputLayout::NoteWithSeries => record.note.clone(),
        InputLayout::PremiseHypothesis => format!("Premise: {}\nHypothesis: {b}", record.note),
        InputLayout::SentencePair => format!("Sentence 1: {}\nSentence 2: {b}", record.note),
    }
}

#[derive(Debug, Clone)]
pub struct BuiltInput {
    pub input: ModelInput,
    pub truncation: Truncation,
    pub description: Option<GeneratedDescription>,
}

/// One prediction plus what happened while building its input.
#[derive(Debug, Clone)]
pub struct Predicted {
    pub record: PredictionRecord,
    pub truncation: Truncation,
    pub description: Option<GeneratedDescription>,
}

#[derive(Clone)]
pub struct Pipeline {
    pub task: TaskSpec,
    pub mode: Mode,
    pub catalog: FeatureCatalog,
    pub aggregation: AggregationConfig,
    pub max_context: usize,
    pub tokenizer: Arc<dyn Tokenizer>,
    pub template: DescriptionTemplate,
    pub generation: GenerationSettings,
    pub description_generation: GenerationSettings,
    pub averaging: MacroAveraging,
}

impl Pipeline {
    /// Defaults: default catalog, 6 buckets over 48 h, 2048-token context,
    /// whitespace tokenizer.
    pub fn new(task: TaskSpec, mode: Mode, model: &str) -> Self {
        let mut description_generation = GenerationSettings::new(model);
        description_generation.max_new_tokens = 256;
        Pipeline {
            task,
            mode,
            catalog: FeatureCatalog::default_catalog(),
            aggregation: AggregationConfig::default(),
            max_context: 2048,
            tokenizer: Arc::new(WhitespaceTokenizer),
            template: DescriptionTemplate::default(),
            generation: GenerationSettings::new(model),
            description_generation,
            averaging: MacroAveraging::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode.uses_series() && !self.task.has_series() {
            return Err(Error::Config(format!(
                "mode `{}` needs time series, which task `{}` does not have",
                self.mode, self.task.id
            )));
        }
        self.aggregation.validate_against(&self.catalog)
    }

    fn series_representation(&self, record: &PatientRecord, client: &LlmClient) -> Result<(TsRepresentation, Option<GeneratedDescription>)> {
        if !self.mode.uses_series() {
            return Ok((TsRepresentation::None, None));
        }
        let agg = aggregate_record(record, &self.catalog, &self.aggregation)?;
        let block = render_numeric_block(&agg.series);
        if self.mode == Mode::TextTsDescription {
            let d = generate_description(client, &block, &self.template, &self.description_generation)?;
            if !d.check.is_clean() {
                log::warn!("record `{}`: description violations {:?}", record.id, d.check.violations);
            }
            Ok((TsRepresentation::Description(d.text.clone()), Some(d)))
        } else {
            Ok((TsRepresentation::Numeric(block), None))
        }
    }

    /// Aggregate, serialize or describe, truncate the note and assemble.
    pub fn build(&self, record: &PatientRecord, instruction: &str, client: &LlmClient) -> Result<BuiltInput> {
        let (ts, description) = self.series_representation(record, client)?;
        let query = self.task.query(self.generation.want_logprobs);
        let note = if self.mode.uses_note() {
            note_text(record, self.task.layout)
        } else {
            String::new()
        };
        let skeleton = assemble_input(instruction, "", ts, query);
        let reserved = count_tokens(&skeleton.render(), self.tokenizer.as_ref())?;
        let plan = BudgetPlan::new(self.max_context, reserved);
        let truncation = truncate_to_fit(&note, &plan, self.tokenizer.as_ref())?;
        if truncation.budget_exhausted && !note.is_empty() {
            log::warn!(
                "record `{}`: instruction, series and query use {reserved} of {} tokens; note dropped",
                record.id,
                self.max_context
            );
        }
        let input = ModelInput {
            note: truncation.text.clone(),
            ..skeleton
        };
        Ok(BuiltInput {
            input,
            truncation,
            description,
        })
    }

    pub fn predict(&self, record: &PatientRecord, instruction: &str, client: &LlmClient) -> Result<Predicted> {
        let inner = || -> Result<Predicted> {
            let gold = self.task.gold(&record.label)?;
            let built = self.build(record, instruction, client)?;
            let (predicted, unparsed, raw, latency_ms) = if self.task.is_scored() {
                let s = score(client, &built.input, &self.generation, self.task.score_tokens())?;
                (Prediction::Score(s.score), s.unparsed, s.raw, s.latency_ms)
            } else {
                let c = classify(client, &built.input, &self.task.schema, &self.generation)?;
                (Prediction::Label(c.label), c.unparsed, c.raw, c.latency_ms)
            };
            Ok(Predicted {
                record: PredictionRecord {
                    record_id: record.id.clone(),
                    gold,
                    predicted,
                    unparsed,
                    raw,
                    latency_ms,
                },
                truncation: built.truncation,
                description: built.description,
            })
        };
        inner().map_err(|e| e.in_record(&record.id))
    }

    /// Prediction used when a record fails: the fallback label or the
    /// neutral score, flagged unparsed.
    pub fn fallback_prediction(&self, record: &PatientRecord) -> Result<PredictionRecord> {
        let predicted = if self.task.is_scored() {
            Prediction::Score(UNPARSED_SCORE)
        } else {
            Prediction::Label(self.task.schema.fallback.clone())
        };
        Ok(PredictionRecord {
            record_id: record.id.clone(),
            gold: self.task.gold(&record.label).map_err(|e| e.in_record(&record.id))?,
            predicted,
            unparsed: true,
            raw: String::new(),
            latency_ms: 0,
        })
    }

    /// Predict every record with up to `client.config().parallelism`
    /// workers. Output order matches input order. Each slot holds that
    /// record's own outcome.
    pub fn predict_each(&self, records: &[PatientRecord], instruction: &str, client: &LlmClient) -> Vec<Result<Predicted>> {
        let workers = client.config().parallelism.max(1).min(records.len());
        let slots: Vec<Mutex<Option<Result<Predicted>>>> = records.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(record) = records.get(i) else { break };
                    let out = self.predict(record, instruction, client);
                    *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(out);
                });
            }
        });
        slots
            .into_iter()
            .map(|m| {
                m.into_inner()
                    .unwrap_or_else(|p| p.into_inner())
                    .expect("every slot is filled")
            })
            .collect()
    }

    /// As [`Pipeline::predict_each`], failing on the first record (in input
    /// order) that errored.
    pub fn predict_all(&self, records: &[PatientRecord], instruction: &str, client: &LlmClient) -> Result<Vec<Predicted>> {
        self.predict_each(records, instruction, client).into_iter().collect()
    }
}
