#![allow(dead_code)]

use std::path::PathBuf;
use std::time::Duration;

use clinprompt::ingest::{parse_records, FeatureCatalog, PatientRecord};
use clinprompt::llm::{ChatCompletionRequest, ClientConfig, LlmClient, StubReply, StubServer};
use clinprompt::pipeline::note_text;
use clinprompt::tasks::{Gold, TaskId, TaskSpec};
use sha2::{Digest, Sha256};

pub fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn fixture(name: &str) -> PathBuf {
    repo().join("fixtures").join(name)
}

pub fn records(task: TaskId) -> Vec<PatientRecord> {
    let parsed = parse_records(
        &fixture(&format!("{task}.jsonl")),
        &FeatureCatalog::default_catalog(),
        &TaskSpec::get(task),
    )
    .unwrap();
    assert!(parsed.rejections.is_empty(), "{:?}", parsed.rejections);
    parsed.records
}

pub fn fast_config(stub: &StubServer) -> ClientConfig {
    ClientConfig {
        base_url: stub.base_url(),
        backoff_base: Duration::from_millis(1),
        backoff_max: Duration::from_millis(5),
        timeout: Duration::from_secs(10),
        ..Default::default()
    }
}

pub fn client(stub: &StubServer) -> LlmClient {
    LlmClient::new(fast_config(stub)).unwrap()
}

pub fn digest(text: &str) -> u64 {
    let h = Sha256::digest(text.as_bytes());
    u64::from_be_bytes(h[..8].try_into().unwrap())
}

/// Answers each record's gold label, recognised by its note text.
pub fn gold_responder(task: TaskId) -> impl Fn(&ChatCompletionRequest) -> StubReply + Send + Sync {
    let spec = TaskSpec::get(task);
    let table: Vec<(String, String)> = records(task)
        .iter()
        .map(|r| {
            let answer = match spec.gold(&r.label).unwrap() {
                Gold::Class(c) => c,
                Gold::Flag(true) => "1.0".into(),
                Gold::Flag(false) => "0.0".into(),
            };
            (note_text(r, spec.layout), answer)
        })
        .collect();
    move |req| {
        let prompt = req.prompt_text();
        let hit = table.iter().find(|(note, _)| prompt.contains(note.as_str()));
        StubReply::text(hit.map_or("no idea", |(_, a)| a.as_str()))
    }
}

/// Deterministic but uninformed answers derived from a prompt hash.
pub fn hashed_responder(task: TaskId) -> impl Fn(&ChatCompletionRequest) -> StubReply + Send + Sync {
    let spec = TaskSpec::get(task);
    move |req| {
        let h = digest(&req.prompt_text());
        if spec.is_scored() {
            let p = (h % 1000) as f64 / 1000.0;
            let reply = StubReply::text(if p > 0.5 { "yes" } else { "no" });
            if req.logprobs {
                reply.with_logprobs(vec![("yes".into(), p.max(1e-6).ln()), ("no".into(), (1.0 - p).max(1e-6).ln())])
            } else {
                StubReply::text(format!("Estimated risk: {p}"))
            }
        } else {
            let labels = &spec.schema.labels;
            StubReply::text(format!("{}.", labels[(h % labels.len() as u64) as usize]))
        }
    }
}
