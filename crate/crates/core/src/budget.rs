//! Token counting and note truncation.
//!
//! The instruction, time-series block and query are counted first; the note
//! gets whatever is left of the context window and loses tokens from its end.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Byte span of one token in the tokenized text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub start: usize,
    pub end: usize,
}

/// Deterministic text -> token mapping. Implementations must be usable from
/// many threads at once.
pub trait Tokenizer: Send + Sync {
    fn name(&self) -> &str;
    fn tokenize(&self, text: &str) -> Result<Vec<Token>>;
}

/// Reference tokenizer: one token per whitespace-separated word.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceTokenizer;

impl Tokenizer for WhitespaceTokenizer {
    fn name(&self) -> &str {
        "whitespace"
    }

    fn tokenize(&self, text: &str) -> Result<Vec<Token>> {
        let mut tokens = Vec::new();
        let mut start = None;
        for (i, c) in text.char_indices() {
            match (c.is_whitespace(), start) {
                (true, Some(s)) => {
                    tokens.push(Token { start: s, end: i });
                    start = None;
                }
                (false, None) => start = Some(i),
                _ => {}
            }
        }
        if let Some(s) = start {
            tokens.push(Token {
                start: s,
                end: text.len(),
            });
        }
        Ok(tokens)
    }
}

struct AdapterProcess {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Drop for AdapterProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[derive(Serialize)]
struct AdapterRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct AdapterResponse {
    count: usize,
    offsets: Vec<(usize, usize)>,
}

/// Tokenizer backed by an external process speaking newline-delimited JSON:
/// `{"text": ...}` in, `{"count": n, "offsets": [[start, end], ...]}` out,
/// offsets in bytes.
pub struct SubprocessTokenizer {
    name: String,
    process: Mutex<AdapterProcess>,
}

impl SubprocessTokenizer {
    pub fn spawn(name: impl Into<String>, program: &str, args: &[String]) -> Result<Self> {
        let name = name.into();
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Tokenizer {
                name: name.clone(),
                message: format!("cannot start `{program}`: {e}"),
            })?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(SubprocessTokenizer {
            name,
            process: Mutex::new(AdapterProcess {
                child,
                stdin,
                stdout,
            }),
        })
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Tokenizer {
            name: self.name.clone(),
            message: message.into(),
        }
    }
}

impl Tokenizer for SubprocessTokenizer {
    fn name(&self) -> &str {
        &self.name
    }

    fn tokenize(&self, text: &str) -> Result<Vec<Token>> {
        let mut proc = self.process.lock().unwrap_or_else(|p| p.into_inner());
        let mut line = serde_json::to_string(&AdapterRequest { text })?;
        line.push('\n');
        proc.stdin
            .write_all(line.as_bytes())
            .and_then(|_| proc.stdin.flush())
            .map_err(|e| self.fail(format!("write failed: {e}")))?;
        let mut reply = String::new();
        let n = proc
            .stdout
            .read_line(&mut reply)
            .map_err(|e| self.fail(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(self.fail("adapter closed its output"));
        }
        let resp: AdapterResponse = serde_json::from_str(&reply)
            .map_err(|e| self.fail(format!("bad reply {reply:?}: {e}")))?;
        if resp.count != resp.offsets.len() {
            return Err(self.fail(format!(
                "count {} disagrees with {} offsets",
                resp.count,
                resp.offsets.len()
            )));
        }
        let mut prev_end = 0;
        resp.offsets
            .into_iter()
            .map(|(start, end)| {
                let ok = start <= end
                    && start >= prev_end
                    && end <= text.len()
                    && text.is_char_boundary(start)
                    && text.is_char_boundary(end);
                if !ok {
                    return Err(self.fail(format!("invalid token span {start}..{end}")));
                }
                prev_end = end;
                Ok(Token { start, end })
            })
            .collect()
    }
}

pub fn count_tokens(text: &str, tok: &dyn Tokenizer) -> Result<usize> {
    if text.is_empty() {
        return Ok(0);
    }
    Ok(tok.tokenize(text)?.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub max_context: usize,
    /// Tokens taken by instruction, time series and query.
    pub reserved: usize,
    pub available_for_note: usize,
}

impl BudgetPlan {
    pub fn new(max_context: usize, reserved: usize) -> Self {
        BudgetPlan {
            max_context,
            reserved,
            available_for_note: max_context.saturating_sub(reserved),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Truncation {
    pub text: String,
    pub original_tokens: usize,
    pub kept_tokens: usize,
    pub truncated: bool,
    /// Nothing at all was left for the note.
    pub budget_exhausted: bool,
}

/// Keep the longest token prefix of `note` that fits the plan.
pub fn truncate_to_fit(note: &str, plan: &BudgetPlan, tok: &dyn Tokenizer) -> Result<Truncation> {
    let tokens = if note.is_empty() {
        Vec::new()
    } else {
        tok.tokenize(note)?
    };
    let original = tokens.len();
    let budget_exhausted = plan.available_for_note == 0;
    if budget_exhausted {
        log::warn!(
            "no room left for the note: reserved {} of {} tokens",
            plan.reserved,
            plan.max_context
        );
    }
    if original <= plan.available_for_note {
        return Ok(Truncation {
            text: note.to_string(),
            original_tokens: original,
            kept_tokens: original,
            truncated: false,
            budget_exhausted,
        });
    }
    let kept = plan.available_for_note;
    let text = match kept {
        0 => String::new(),
        k => note[..tokens[k - 1].end].to_string(),
    };
    Ok(Truncation {
        text,
        original_tokens: original,
        kept_tokens: kept,
        truncated: true,
        budget_exhausted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn counting() {
        let tok = WhitespaceTokenizer;
        assert_eq!(count_tokens("", &tok).unwrap(), 0);
        assert_eq!(count_tokens("a b c", &tok).unwrap(), 3);
        assert_eq!(count_tokens(&words(700), &tok).unwrap(), 700);
        assert_eq!(count_tokens("  lead\ttab\n\nnewline  ", &tok).unwrap(), 3);
    }

    #[test]
    fn token_offsets_cover_words() {
        let text = "héllo  wörld";
        let toks = WhitespaceTokenizer.tokenize(text).unwrap();
        let spans: Vec<&str> = toks.iter().map(|t| &text[t.start..t.end]).collect();
        assert_eq!(spans, ["héllo", "wörld"]);
    }

    #[test]
    fn seven_hundred_tokens_into_two_hundred_twelve() {
        let plan = BudgetPlan::new(512, 300);
        assert_eq!(plan.available_for_note, 212);
        let t = truncate_to_fit(&words(700), &plan, &WhitespaceTokenizer).unwrap();
        assert_eq!(t.kept_tokens, 212);
        assert_eq!(t.original_tokens, 700);
        assert!(t.truncated);
        assert_eq!(t.text, words(212));
    }

    #[test]
    fn short_note_untouched() {
        let note = words(100);
        let t = truncate_to_fit(&note, &BudgetPlan::new(512, 300), &WhitespaceTokenizer).unwrap();
        assert_eq!(t.text, note);
        assert!(!t.truncated);
    }

    #[test]
    fn exhausted_budget_gives_empty_note() {
        let t = truncate_to_fit(&words(10), &BudgetPlan::new(512, 512), &WhitespaceTokenizer).unwrap();
        assert_eq!(t.text, "");
        assert!(t.budget_exhausted && t.truncated);
        assert_eq!(BudgetPlan::new(512, 900).available_for_note, 0);
    }

    proptest! {
        #[test]
        fn truncation_contract(
            note in "[a-z ]{0,400}",
            max in 0usize..120,
            reserved in 0usize..150,
        ) {
            let tok = WhitespaceTokenizer;
            let plan = BudgetPlan::new(max, reserved);
            let t = truncate_to_fit(&note, &plan, &tok).unwrap();
            let kept = count_tokens(&t.text, &tok).unwrap();
            prop_assert_eq!(kept, t.kept_tokens);
            prop_assert!(kept <= plan.available_for_note);
            if plan.available_for_note > 0 { prop_assert!(kept + reserved <= max); }

            let orig = tok.tokenize(&note).unwrap();
            let got = tok.tokenize(&t.text).unwrap();
            for (a, b) in got.iter().zip(&orig) {
                prop_assert_eq!(&t.text[a.start..a.end], &note[b.start..b.end]);
            }
            let again = truncate_to_fit(&t.text, &plan, &tok).unwrap();
            prop_assert_eq!(&again.text, &t.text);
            prop_assert!(!again.truncated);
        }

        #[test]
        fn concatenation_at_whitespace(a in "[a-z ]{0,50}", b in "[a-z ]{0,50}") {
            let tok = WhitespaceTokenizer;
            let left = format!("{a} ");
            prop_assert_eq!(
                count_tokens(&format!("{left}{b}"), &tok).unwrap(),
                count_tokens(&left, &tok).unwrap() + count_tokens(&b, &tok).unwrap()
            );
        }
    }
}
