//! Mapping free-form generations onto a task's canonical labels.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical labels for one task plus the surface forms that map onto them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub task: String,
    pub labels: Vec<String>,
    /// Normalized surface form -> canonical label.
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
    /// Label assigned when nothing in the generation matches.
    pub fallback: String,
}

/// Outcome of matching one generation against a schema.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMatch {
    pub label: String,
    pub unparsed: bool,
}

/// Lowercase, turn every non-alphanumeric character into a space and
/// collapse runs of whitespace.
pub fn normalize(text: &str) -> String {
    let lowered: String = text
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    lowered.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl LabelSchema {
    pub fn new(
        task: impl Into<String>,
        labels: &[&str],
        aliases: &[(&str, &str)],
        fallback: &str,
    ) -> Result<Self> {
        let schema = LabelSchema {
            task: task.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
            aliases: aliases
                .iter()
                .map(|(a, l)| (normalize(a), l.to_string()))
                .collect(),
            fallback: fallback.to_string(),
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::Precondition(format!(
                "label schema `{}` has no labels",
                self.task
            )));
        }
        for (i, label) in self.labels.iter().enumerate() {
            if self.labels[..i].contains(label) {
                return Err(Error::Precondition(format!(
                    "duplicate label `{label}` in schema `{}`",
                    self.task
                )));
            }
        }
        for target in self.aliases.values().chain(std::iter::once(&self.fallback)) {
            if !self.labels.contains(target) {
                return Err(self.unknown(target));
            }
        }
        Ok(())
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Resolve a gold label given in any casing or alias form.
    pub fn canonical(&self, raw: &str) -> Result<&str> {
        if let Some(i) = self.index_of(raw) {
            return Ok(&self.labels[i]);
        }
        let norm = normalize(raw);
        self.exact(&norm).ok_or_else(|| self.unknown(raw))
    }

    fn unknown(&self, label: &str) -> Error {
        Error::UnknownLabel {
            task: self.task.clone(),
            label: label.to_string(),
        }
    }

    fn exact(&self, norm: &str) -> Option<&str> {
        self.labels
            .iter()
            .find(|l| normalize(l) == norm)
            .map(String::as_str)
            .or_else(|| self.aliases.get(norm).map(String::as_str))
    }

    /// Map a raw generation to a label. Exact matches (canonical, then alias)
    /// win; otherwise the earliest whole-word occurrence of any label or alias
    /// inside the generation is taken, longest form first at equal positions.
    /// Total: anything left over maps to the fallback with `unparsed` set.
    pub fn resolve(&self, raw: &str) -> LabelMatch {
        let norm = normalize(raw);
        if let Some(label) = self.exact(&norm) {
            return LabelMatch {
                label: label.to_string(),
                unparsed: false,
            };
        }

        let haystack = format!(" {norm} ");
        let forms = self
            .labels
            .iter()
            .map(|l| (normalize(l), l.as_str()))
            .chain(self.aliases.iter().map(|(a, l)| (a.clone(), l.as_str())));
        let mut best: Option<(usize, usize, &str)> = None;
        for (form, label) in forms {
            if form.is_empty() {
                continue;
            }
            if let Some(pos) = haystack.find(&format!(" {form} ")) {
                let better = match best {
                    None => true,
                    Some((bp, blen, _)) => pos < bp || (pos == bp && form.len() > blen),
                };
                if better {
                    best = Some((pos, form.len(), label));
                }
            }
        }
        match best {
            Some((_, _, label)) => LabelMatch {
                label: label.to_string(),
                unparsed: false,
            },
            None => LabelMatch {
                label: self.fallback.clone(),
                unparsed: true,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mednli() -> LabelSchema {
        LabelSchema::new(
            "mednli",
            &["Entailment", "Contradiction", "Neutral"],
            &[("entails", "Entailment"), ("contradicts", "Contradiction")],
            "Neutral",
        )
        .unwrap()
    }

    fn smoking() -> LabelSchema {
        LabelSchema::new(
            "smoking",
            &["Current smoker", "Past smoker", "Non-smoker", "Smoker", "Unknown"],
            &[("never smoked", "Non-smoker"), ("former smoker", "Past smoker")],
            "Unknown",
        )
        .unwrap()
    }

    #[test]
    fn punctuation_is_stripped() {
        assert_eq!(
            mednli().resolve("Entailment."),
            LabelMatch {
                label: "Entailment".into(),
                unparsed: false
            }
        );
    }

    #[test]
    fn substring_rule_finds_label_in_sentence() {
        // "the answer is contradiction" has no exact match, so the word-bounded
        // search finds "contradiction" at position 15.
        let m = mednli().resolve("the answer is contradiction");
        assert_eq!(m.label, "Contradiction");
        assert!(!m.unparsed);
    }

    #[test]
    fn unmatched_output_falls_back() {
        let m = mednli().resolve("cannot say");
        assert_eq!(m.label, "Neutral");
        assert!(m.unparsed);
    }

    #[test]
    fn earliest_then_longest_match_wins() {
        let s = smoking();
        assert_eq!(s.resolve("Non-smoker").label, "Non-smoker");
        assert_eq!(s.resolve("the patient is a current smoker").label, "Current smoker");
        assert_eq!(s.resolve("former smoker, quit 2001").label, "Past smoker");
        assert_eq!(s.resolve("SMOKER").label, "Smoker");
    }

    #[test]
    fn alias_exact_match() {
        assert_eq!(mednli().resolve("  Entails! ").label, "Entailment");
    }

    #[test]
    fn invalid_alias_target_is_rejected() {
        assert!(LabelSchema::new("t", &["A"], &[("x", "B")], "A").is_err());
        assert!(LabelSchema::new("t", &["A", "A"], &[], "A").is_err());
        assert!(LabelSchema::new("t", &["A"], &[], "Z").is_err());
    }

    #[test]
    fn canonical_accepts_case_variants() {
        let s = mednli();
        assert_eq!(s.canonical("entailment").unwrap(), "Entailment");
        assert!(s.canonical("maybe").is_err());
    }

    proptest! {
        #[test]
        fn resolve_is_total(raw in "\\PC{0,60}") {
            let s = smoking();
            let m = s.resolve(&raw);
            prop_assert!(s.labels.contains(&m.label));
            prop_assert!(!m.unparsed || m.label == s.fallback);
        }
    }
}
