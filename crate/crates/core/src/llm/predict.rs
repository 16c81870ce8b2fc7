use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::client::{InferenceRequest, LlmClient};
use super::labels::{normalize, LabelSchema};
use super::wire::{ChatMessage, TokenLogprob};
use crate::error::Result;
use crate::serialize::{
    build_description_prompt, validate_description, DescriptionCheck, DescriptionTemplate,
    ModelInput, NumericBlock,
};

/// Score assigned when a generation carries no usable probability.
pub const UNPARSED_SCORE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSettings {
    pub model: String,
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub want_logprobs: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_tag: Option<String>,
}

impl GenerationSettings {
    pub fn new(model: impl Into<String>) -> Self {
        GenerationSettings {
            model: model.into(),
            temperature: 0.0,
            max_new_tokens: 16,
            want_logprobs: false,
            cache_tag: None,
        }
    }

    pub fn request(&self, prompt: String) -> InferenceRequest {
        InferenceRequest {
            model: self.model.clone(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
            want_logprobs: self.want_logprobs,
            cache_tag: self.cache_tag.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    pub label: String,
    pub raw: String,
    pub unparsed: bool,
    pub latency_ms: u64,
    pub from_cache: bool,
}

pub fn classify(
    client: &LlmClient,
    input: &ModelInput,
    schema: &LabelSchema,
    settings: &GenerationSettings,
) -> Result<Classification> {
    let resp = client.complete(&settings.request(input.render()))?;
    let m = schema.resolve(&resp.text);
    Ok(Classification {
        label: m.label,
        raw: resp.text,
        unparsed: m.unparsed,
        latency_ms: resp.latency_ms,
        from_cache: resp.from_cache,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub score: f64,
    pub raw: String,
    pub unparsed: bool,
    pub latency_ms: u64,
    pub from_cache: bool,
}

/// Probability of `positive` among the `{positive, negative}` first-token
/// alternatives. `None` if neither appears.
pub fn score_from_logprobs(logprobs: &[TokenLogprob], positive: &str, negative: &str) -> Option<f64> {
    let first = logprobs.first()?;
    let (pos, neg) = (normalize(positive), normalize(negative));
    let mut best_pos = f64::NEG_INFINITY;
    let mut best_neg = f64::NEG_INFINITY;
    let alternatives = first
        .top_logprobs
        .iter()
        .map(|t| (t.token.as_str(), t.logprob))
        .chain(std::iter::once((first.token.as_str(), first.logprob)));
    for (token, lp) in alternatives {
        let t = normalize(token);
        if t == pos {
            best_pos = best_pos.max(lp);
        } else if t == neg {
            best_neg = best_neg.max(lp);
        }
    }
    match (best_pos.is_finite(), best_neg.is_finite()) {
        (false, false) => None,
        (true, false) => Some(1.0),
        (false, true) => Some(0.0),
        (true, true) => Some(1.0 / (1.0 + (best_neg - best_pos).exp())),
    }
}

fn number_pattern() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[-+]?(?:\d+(?:\.\d*)?|\.\d+)").expect("valid regex"))
}

/// First number in the text that lies in `[0, 1]`.
pub fn parse_probability(text: &str) -> Option<f64> {
    number_pattern()
        .find_iter(text)
        .filter_map(|m| m.as_str().parse::<f64>().ok())
        .find(|v| (0.0..=1.0).contains(v))
}

pub fn score(
    client: &LlmClient,
    input: &ModelInput,
    settings: &GenerationSettings,
    tokens: (&str, &str),
) -> Result<Scored> {
    let resp = client.complete(&settings.request(input.render()))?;
    let from_logprobs = resp
        .logprobs
        .as_deref()
        .filter(|_| settings.want_logprobs)
        .and_then(|lp| score_from_logprobs(lp, tokens.0, tokens.1));
    let parsed = from_logprobs.or_else(|| parse_probability(&resp.text));
    Ok(Scored {
        score: parsed.unwrap_or(UNPARSED_SCORE),
        unparsed: parsed.is_none(),
        raw: resp.text,
        latency_ms: resp.latency_ms,
        from_cache: resp.from_cache,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDescription {
    pub text: String,
    pub check: DescriptionCheck,
    pub prompt_warnings: Vec<String>,
}

pub fn generate_description(
    client: &LlmClient,
    block: &NumericBlock,
    template: &DescriptionTemplate,
    settings: &GenerationSettings,
) -> Result<GeneratedDescription> {
    let prompt = build_description_prompt(block, template);
    let resp = client.complete(&settings.request(prompt.text))?;
    let text = resp.text.trim().to_string();
    Ok(GeneratedDescription {
        check: validate_description(&text),
        text,
        prompt_warnings: prompt.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::wire::TopLogprob;

    fn lp(first: &str, alts: &[(&str, f64)]) -> Vec<TokenLogprob> {
        vec![TokenLogprob {
            token: first.into(),
            logprob: alts.iter().find(|(t, _)| *t == first).map_or(-9.0, |a| a.1),
            top_logprobs: alts
                .iter()
                .map(|(t, l)| TopLogprob {
                    token: t.to_string(),
                    logprob: *l,
                })
                .collect(),
        }]
    }

    #[test]
    fn two_way_softmax() {
        let p = score_from_logprobs(&lp("yes", &[("yes", 0.8f64.ln()), ("no", 0.2f64.ln())]), "yes", "no")
            .unwrap();
        assert!((p - 0.8).abs() < 1e-12, "{p}");
    }

    #[test]
    fn token_normalization_and_partial_alternatives() {
        let p = score_from_logprobs(&lp(" Yes", &[(" Yes", -0.1), ("No", -0.1)]), "yes", "no").unwrap();
        assert!((p - 0.5).abs() < 1e-12);
        assert_eq!(score_from_logprobs(&lp("yes", &[("yes", -0.2)]), "yes", "no"), Some(1.0));
        assert_eq!(score_from_logprobs(&lp("maybe", &[("maybe", -0.2)]), "yes", "no"), None);
        assert_eq!(score_from_logprobs(&[], "yes", "no"), None);
    }

    #[test]
    fn probability_parsing() {
        assert_eq!(parse_probability("risk: 0.73"), Some(0.73));
        assert_eq!(parse_probability("high risk"), None);
        assert_eq!(parse_probability("score 7 out of 10, so 0.7"), Some(0.7));
        assert_eq!(parse_probability("1"), Some(1.0));
        assert_eq!(parse_probability(".25"), Some(0.25));
        assert_eq!(parse_probability("-0.3 then 0.4"), Some(0.4));
    }
}
