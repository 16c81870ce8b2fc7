//! The four clinical tasks: label schemas, input layouts and gold parsing.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::RawLabel;
use crate::llm::labels::LabelSchema;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Smoking,
    Mednli,
    Clinsts,
    Mortality,
}

impl TaskId {
    pub const ALL: [TaskId; 4] = [
        TaskId::Smoking,
        TaskId::Mednli,
        TaskId::Clinsts,
        TaskId::Mortality,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Smoking => "smoking",
            TaskId::Mednli => "mednli",
            TaskId::Clinsts => "clinsts",
            TaskId::Mortality => "mortality",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Multiclass,
    ScoredBinary,
}

/// Which record fields feed the assembled prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputLayout {
    Note,
    PremiseHypothesis,
    SentencePair,
    NoteWithSeries,
}

/// Resolved gold value for one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    Class(String),
    Flag(bool),
}

#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub id: TaskId,
    pub kind: TaskKind,
    pub schema: LabelSchema,
    pub layout: InputLayout,
    /// Plain task description, also the `seed` instruction candidate.
    pub description: &'static str,
    positive_token: &'static str,
    negative_token: &'static str,
}

pub const CLINSTS_SIMILAR: &str = "similar";
pub const CLINSTS_DISSIMILAR: &str = "dissimilar";

/// Binarize a 0-5 similarity score: `similar` iff strictly above 3.0.
pub fn binarize_clinsts(similarity: f64) -> Result<&'static str> {
    if !(0.0..=5.0).contains(&similarity) {
        return Err(Error::InvalidGold(format!(
            "similarity {similarity} outside [0, 5]"
        )));
    }
    Ok(if similarity > 3.0 {
        CLINSTS_SIMILAR
    } else {
        CLINSTS_DISSIMILAR
    })
}

impl TaskSpec {
    pub fn get(id: TaskId) -> TaskSpec {
        // Schemas below are static and valid, so construction cannot fail.
        let schema = |labels: &[&str], aliases: &[(&str, &str)], fallback: &str| {
            LabelSchema::new(id.as_str(), labels, aliases, fallback).expect("static schema")
        };
        match id {
            TaskId::Smoking => TaskSpec {
                id,
                kind: TaskKind::Multiclass,
                schema: schema(
                    &["Current smoker", "Past smoker", "Non-smoker", "Smoker", "Unknown"],
                    &[
                        ("current", "Current smoker"),
                        ("active smoker", "Current smoker"),
                        ("past", "Past smoker"),
                        ("former smoker", "Past smoker"),
                        ("ex smoker", "Past smoker"),
                        ("non smoker", "Non-smoker"),
                        ("nonsmoker", "Non-smoker"),
                        ("never smoker", "Non-smoker"),
                        ("smoker unspecified", "Smoker"),
                        ("unspecified", "Smoker"),
                    ],
                    "Unknown",
                ),
                layout: InputLayout::Note,
                description: "Read the discharge summary and classify the patient's smoking status.",
                positive_token: "",
                negative_token: "",
            },
            TaskId::Mednli => TaskSpec {
                id,
                kind: TaskKind::Multiclass,
                schema: schema(
                    &["Entailment", "Contradiction", "Neutral"],
                    &[
                        ("entails", "Entailment"),
                        ("entailed", "Entailment"),
                        ("contradicts", "Contradiction"),
                        ("contradictory", "Contradiction"),
                    ],
                    "Neutral",
                ),
                layout: InputLayout::PremiseHypothesis,
                description: "Decide whether the clinical premise entails, contradicts, or is neutral towards the hypothesis.",
                positive_token: "",
                negative_token: "",
            },
            TaskId::Clinsts => TaskSpec {
                id,
                kind: TaskKind::Multiclass,
                schema: schema(
                    &[CLINSTS_SIMILAR, CLINSTS_DISSIMILAR],
                    &[("not similar", CLINSTS_DISSIMILAR), ("different", CLINSTS_DISSIMILAR)],
                    CLINSTS_DISSIMILAR,
                ),
                layout: InputLayout::SentencePair,
                description: "Decide whether the two clinical sentences are semantically similar or dissimilar.",
                positive_token: "",
                negative_token: "",
            },
            TaskId::Mortality => TaskSpec {
                id,
                kind: TaskKind::ScoredBinary,
                schema: schema(&["survived", "died"], &[("yes", "died"), ("no", "survived")], "survived"),
                layout: InputLayout::NoteWithSeries,
                description: "Estimate the probability that the ICU patient dies during this hospital stay, using the admission note and the first 48 hours of measurements.",
                positive_token: "yes",
                negative_token: "no",
            },
        }
    }

    /// Whether records of this task carry vital-sign series.
    pub fn has_series(&self) -> bool {
        self.layout == InputLayout::NoteWithSeries
    }

    pub fn is_scored(&self) -> bool {
        self.kind == TaskKind::ScoredBinary
    }

    /// First-token alternatives compared when scoring with log probabilities.
    pub fn score_tokens(&self) -> (&'static str, &'static str) {
        (self.positive_token, self.negative_token)
    }

    /// The question appended after the note and time series.
    pub fn query(&self, want_logprobs: bool) -> String {
        match self.kind {
            TaskKind::Multiclass => format!(
                "Answer with exactly one of: {}.",
                self.schema.labels.join(", ")
            ),
            TaskKind::ScoredBinary if want_logprobs => {
                "Will the patient die in hospital? Answer yes or no.".to_string()
            }
            TaskKind::ScoredBinary => "What is the probability that the patient dies in hospital? Answer with a single number between 0 and 1.".to_string(),
        }
    }

    /// Interpret a record's raw label for this task.
    pub fn gold(&self, raw: &RawLabel) -> Result<Gold> {
        match (self.id, raw) {
            (TaskId::Mortality, RawLabel::Number(v)) if *v == 0.0 || *v == 1.0 => {
                Ok(Gold::Flag(*v == 1.0))
            }
            (TaskId::Mortality, RawLabel::Text(t)) => match t.trim() {
                "0" | "false" | "survived" => Ok(Gold::Flag(false)),
                "1" | "true" | "died" => Ok(Gold::Flag(true)),
                other => Err(Error::InvalidGold(format!(
                    "mortality label must be 0 or 1, got `{other}`"
                ))),
            },
            (TaskId::Mortality, RawLabel::Number(v)) => Err(Error::InvalidGold(format!(
                "mortality label must be 0 or 1, got {v}"
            ))),
            (TaskId::Clinsts, RawLabel::Number(v)) => {
                Ok(Gold::Class(binarize_clinsts(*v)?.to_string()))
            }
            (TaskId::Clinsts, RawLabel::Text(t)) => match t.trim().parse::<f64>() {
                Ok(v) => Ok(Gold::Class(binarize_clinsts(v)?.to_string())),
                Err(_) => Ok(Gold::Class(self.schema.canonical(t)?.to_string())),
            },
            (_, RawLabel::Text(t)) => Ok(Gold::Class(self.schema.canonical(t)?.to_string())),
            (_, RawLabel::Number(v)) => Err(Error::InvalidGold(format!(
                "`{}` expects a class name, got {v}",
                self.id
            ))),
        }
    }
}
