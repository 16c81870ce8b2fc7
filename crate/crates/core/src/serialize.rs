//! Text renderings of aggregated series and final prompt assembly.
//!
//! The numeric block has one line per feature:
//!
//! ```text
//! heart rate: 76.09, 78.75, 76.88, 69.75, 69.0, 69.0
//! weight: 90.0
//! ```
//!
//! Values are rounded half-to-even at two decimals, trailing zeros trimmed,
//! keeping at least one decimal digit.

use serde::{Deserialize, Serialize};

use crate::aggregate::AggregatedSeries;
use crate::error::{Error, Result};

/// Placeholder in the description template that receives the numeric block.
pub const INSERT_MARKER: &str = "**[Insert Numeric Time-Series Data Here]**";

const DESCRIPTION_TEMPLATE_V1: &str = include_str!("../assets/description_prompt.v1.txt");

/// Longest description accepted without a length violation.
pub const MAX_DESCRIPTION_SENTENCES: usize = 5;

/// Format one value for the numeric block.
///
/// `{:.2}` rounds the exact binary value, sending exact ties to the even
/// digit, which is the rounding the block uses.
pub fn format_value(value: f64) -> String {
    let mut s = format!("{value:.2}");
    while s.ends_with('0') && !s.ends_with(".0") {
        s.pop();
    }
    if s == "-0.0" {
        s = "0.0".into();
    }
    s
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NumericBlock {
    pub text: String,
    pub line_count: usize,
}

impl NumericBlock {
    pub fn is_empty(&self) -> bool {
        self.line_count == 0
    }
}

pub fn render_numeric_block(series: &[AggregatedSeries]) -> NumericBlock {
    let lines: Vec<String> = series
        .iter()
        .map(|s| {
            let values = match s.static_value {
                Some(v) => format_value(v),
                None => s
                    .bucket_means
                    .iter()
                    .map(|&v| format_value(v))
                    .collect::<Vec<_>>()
                    .join(", "),
            };
            format!("{}: {values}", s.display_name)
        })
        .collect();
    NumericBlock {
        line_count: lines.len(),
        text: lines.join("\n"),
    }
}

/// Inverse of [`render_numeric_block`] up to rounding.
pub fn parse_numeric_block(text: &str) -> Result<Vec<(String, Vec<f64>)>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let (name, values) = line.rsplit_once(": ").ok_or_else(|| {
                Error::Precondition(format!("numeric block line without `: `: {line:?}"))
            })?;
            let values = values
                .split(", ")
                .map(|v| {
                    v.parse::<f64>().map_err(|_| {
                        Error::Precondition(format!("bad value `{v}` in line {line:?}"))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((name.to_string(), values))
        })
        .collect()
}

/// The description-generation prompt with its insertion point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptionTemplate {
    text: String,
}

impl Default for DescriptionTemplate {
    fn default() -> Self {
        Self::new(DESCRIPTION_TEMPLATE_V1).expect("bundled template has a marker")
    }
}

impl DescriptionTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if !text.contains(INSERT_MARKER) {
            return Err(Error::TemplateInvalid {
                marker: INSERT_MARKER,
            });
        }
        Ok(DescriptionTemplate { text })
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DescriptionPrompt {
    pub text: String,
    pub warnings: Vec<String>,
}

pub fn build_description_prompt(block: &NumericBlock, template: &DescriptionTemplate) -> DescriptionPrompt {
    let mut warnings = Vec::new();
    if block.is_empty() {
        log::warn!("building a description prompt for an empty numeric block");
        warnings.push("numeric block is empty".to_string());
    }
    DescriptionPrompt {
        text: template.text.replacen(INSERT_MARKER, &block.text, 1),
        warnings,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    TooManySentences { count: usize, max: usize },
    ContainsDigits { count: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionCheck {
    pub sentence_count: usize,
    pub violations: Vec<Violation>,
}

impl DescriptionCheck {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Sentences end at `.`, `!` or `?` followed by whitespace or the end of the
/// text. Trailing text without a terminator counts as one more sentence.
pub fn count_sentences(text: &str) -> usize {
    let chars: Vec<char> = text.chars().collect();
    let mut count = 0;
    let mut pending = false;
    for (i, &c) in chars.iter().enumerate() {
        let ends = matches!(c, '.' | '!' | '?')
            && chars.get(i + 1).map_or(true, |n| n.is_whitespace());
        if ends {
            if pending {
                count += 1;
            }
            pending = false;
        } else if !c.is_whitespace() && !matches!(c, '.' | '!' | '?') {
            pending = true;
        }
    }
    count + usize::from(pending)
}

/// Advisory checks on a generated description; the text is never altered.
pub fn validate_description(text: &str) -> DescriptionCheck {
    let sentence_count = count_sentences(text);
    let mut violations = Vec::new();
    if sentence_count > MAX_DESCRIPTION_SENTENCES {
        violations.push(Violation::TooManySentences {
            count: sentence_count,
            max: MAX_DESCRIPTION_SENTENCES,
        });
    }
    let digits = text.chars().filter(|c| c.is_numeric()).count();
    if digits > 0 {
        violations.push(Violation::ContainsDigits { count: digits });
    }
    DescriptionCheck {
        sentence_count,
        violations,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "payload", rename_all = "snake_case")]
pub enum TsRepresentation {
    None,
    Numeric(NumericBlock),
    Description(String),
}

impl TsRepresentation {
    pub fn payload(&self) -> &str {
        match self {
            TsRepresentation::None => "",
            TsRepresentation::Numeric(b) => &b.text,
            TsRepresentation::Description(d) => d,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInput {
    pub instruction: String,
    pub note: String,
    pub ts: TsRepresentation,
    pub query: String,
}

impl ModelInput {
    /// Instruction, note, time series and query joined by blank lines.
    /// Empty parts are skipped.
    pub fn render(&self) -> String {
        [
            self.instruction.as_str(),
            self.note.as_str(),
            self.ts.payload(),
            self.query.as_str(),
        ]
        .iter()
        .filter(|p| !p.is_empty())
        .copied()
        .collect::<Vec<_>>()
        .join("\n\n")
    }
}

pub fn assemble_input(
    instruction: impl Into<String>,
    note: impl Into<String>,
    ts: TsRepresentation,
    query: impl Into<String>,
) -> ModelInput {
    ModelInput {
        instruction: instruction.into(),
        note: note.into(),
        ts,
        query: query.into(),
    }
}
