//! Instruction search: propose candidate instructions with the model, then
//! keep the best by successive halving over nested dev subsets.

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::PatientRecord;
use crate::llm::predict::GenerationSettings;
use crate::llm::LlmClient;
use crate::metrics::{evaluate, MetricId};
use crate::pipeline::{note_text, Mode, Pipeline};
use crate::tasks::{Gold, TaskSpec};

const META_PERSONA_V1: &str = include_str!("../assets/meta_persona.v1.txt");
const META_CONCISE_V1: &str = include_str!("../assets/meta_concise.v1.txt");
const META_PLAIN_V1: &str = include_str!("../assets/meta_plain.v1.txt");

/// Words of each example input shown in a meta-prompt.
const EXAMPLE_WORDS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Persona,
    Concise,
    Plain,
    Seed,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Persona => "persona",
            Strategy::Concise => "concise",
            Strategy::Plain => "plain",
            Strategy::Seed => "seed",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateStatus {
    Pending,
    Pruned,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetScore {
    pub subset: String,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionCandidate {
    pub text: String,
    pub strategy: Strategy,
    pub scores: Vec<SubsetScore>,
    pub status: CandidateStatus,
}

impl InstructionCandidate {
    pub fn new(text: impl Into<String>, strategy: Strategy) -> Self {
        InstructionCandidate {
            text: text.into(),
            strategy,
            scores: Vec::new(),
            status: CandidateStatus::Pending,
        }
    }

    /// First 16 hex digits of the SHA-256 of the text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))[..16].to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaPrompts {
    pub persona: String,
    pub concise: String,
    pub plain: String,
}

impl Default for MetaPrompts {
    fn default() -> Self {
        MetaPrompts {
            persona: META_PERSONA_V1.to_string(),
            concise: META_CONCISE_V1.to_string(),
            plain: META_PLAIN_V1.to_string(),
        }
    }
}

impl MetaPrompts {
    pub fn render(&self, strategy: Strategy, task_description: &str, examples: &str, variant: usize) -> Option<String> {
        let template = match strategy {
            Strategy::Persona => &self.persona,
            Strategy::Concise => &self.concise,
            Strategy::Plain => &self.plain,
            Strategy::Seed => return None,
        };
        Some(
            template
                .replace("{task_description}", task_description)
                .replace("{examples}", examples)
                .replace("{variant}", &variant.to_string()),
        )
    }
}

/// An `(input, answer)` pair shown to the proposer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub input: String,
    pub answer: String,
}

pub fn format_examples(examples: &[Example]) -> String {
    examples
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}. Input: {}\n   Answer: {}", i + 1, e.input, e.answer))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Up to `n` train records, seeded, shortened to a few dozen words.
pub fn sample_examples(task: &TaskSpec, train: &[PatientRecord], n: usize, seed: u64) -> Result<Vec<Example>> {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.into_iter()
        .take(n)
        .map(|i| {
            let r = &train[i];
            let text = note_text(r, task.layout);
            let words: Vec<&str> = text.split_whitespace().collect();
            let mut input = words[..words.len().min(EXAMPLE_WORDS)].join(" ");
            if words.len() > EXAMPLE_WORDS {
                input.push_str(" ...");
            }
            let answer = match task.gold(&r.label).map_err(|e| e.in_record(&r.id))? {
                Gold::Class(c) => c,
                Gold::Flag(true) => "died".into(),
                Gold::Flag(false) => "survived".into(),
            };
            Ok(Example { input, answer })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    /// The seed candidate first, then generated ones in proposal order.
    pub candidates: Vec<InstructionCandidate>,
    pub calls: usize,
    pub warnings: Vec<String>,
}

/// Ask the model for `n` instructions, cycling through `strategies`.
pub fn propose_instructions(
    task: &TaskSpec,
    examples: &[Example],
    n: usize,
    strategies: &[Strategy],
    meta: &MetaPrompts,
    settings: &GenerationSettings,
    client: &LlmClient,
) -> Result<Proposal> {
    let strategies: Vec<Strategy> = strategies.iter().copied().filter(|s| *s != Strategy::Seed).collect();
    if n == 0 || strategies.is_empty() {
        return Err(Error::Budget(
            "proposal needs n >= 1 and at least one non-seed strategy".into(),
        ));
    }
    let formatted = format_examples(examples);
    let seed = InstructionCandidate::new(task.description, Strategy::Seed);
    let mut seen: HashSet<String> = HashSet::from([seed.text.clone()]);
    let mut candidates = vec![seed];
    for attempt in 0..n {
        let strategy = strategies[attempt % strategies.len()];
        let variant = attempt / strategies.len() + 1;
        let prompt = meta
            .render(strategy, task.description, &formatted, variant)
            .expect("non-seed strategy has a template");
        let text = client.complete(&settings.request(prompt))?.text.trim().to_string();
        if !text.is_empty() && seen.insert(text.clone()) {
            candidates.push(InstructionCandidate::new(text, strategy));
        }
    }
    let mut warnings = Vec::new();
    let generated = candidates.len() - 1;
    if generated < n {
        let w = format!("only {generated} of {n} proposed instructions were distinct");
        log::warn!("{w}");
        warnings.push(w);
    }
    Ok(Proposal {
        candidates,
        calls: n,
        warnings,
    })
}

fn default_strategies() -> Vec<Strategy> {
    vec![Strategy::Persona, Strategy::Concise, Strategy::Plain]
}

fn default_n_examples() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizationBudget {
    /// Instructions requested from the proposer, not counting the seed.
    pub n_candidates: usize,
    /// Cap on endpoint calls: proposals plus every prediction.
    pub eval_calls_max: usize,
    pub rung_sizes: Vec<usize>,
    pub metric: MetricId,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_examples")]
    pub n_examples: usize,
}

impl OptimizationBudget {
    pub fn validate(&self, task: &TaskSpec, dev_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Budget(m));
        if self.n_candidates == 0 {
            return bad("n_candidates must be at least 1".into());
        }
        if self.rung_sizes.is_empty() || self.rung_sizes[0] == 0 {
            return bad("rung_sizes must be nonempty and positive".into());
        }
        if self.rung_sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("rung_sizes {:?} are not strictly increasing", self.rung_sizes));
        }
        let last = *self.rung_sizes.last().expect("nonempty");
        if last > dev_len {
            return bad(format!("last rung ({last}) exceeds the dev set ({dev_len} records)"));
        }
        if !self.metric.applies_to(task.kind) {
            return bad(format!("metric `{}` does not apply to task `{}`", self.metric, task.id));
        }
        if !self.strategies.iter().any(|s| *s != Strategy::Seed) {
            return bad("at least one non-seed strategy is required".into());
        }
        Ok(())
    }
}

/// Nested dev subsets: rung `r` is the first `rung_sizes[r]` indices of one
/// seeded shuffle.
pub fn make_rungs(dev_len: usize, rung_sizes: &[usize], seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..dev_len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    rung_sizes
        .iter()
        .map(|&k| order[..k.min(dev_len)].to_vec())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub candidate_hash: String,
    pub strategy: Strategy,
    pub rung: usize,
    pub subset_size: usize,
    pub metric: MetricId,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    /// Index into the candidate list.
    pub selected: usize,
    /// Deepest rung every remaining candidate finished; selection is made there.
    pub decided_at_rung: usize,
    pub stopped_early: bool,
    pub calls_charged: usize,
    pub trace: Vec<TraceEntry>,
}

/// Best first: higher value, defined before undefined, then smaller text.
fn rank(cands: &[InstructionCandidate], mut idx: Vec<usize>, values: &[Option<f64>]) -> Vec<usize> {
    idx.sort_by(|&a, &b| {
        let by_value = match (values[a], values[b]) {
            (Some(x), Some(y)) => y.total_cmp(&x),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => std::cmp::Ordering::Equal,
        };
        by_value.then_with(|| cands[a].text.cmp(&cands[b].text))
    });
    idx
}

/// Successive halving. `evaluate(candidate, rung)` scores one candidate on
/// one rung's subset and costs `rung_sizes[rung] * calls_per_record`
/// against `cap`, charged before the call.
pub fn successive_halving<F>(
    candidates: &mut [InstructionCandidate],
    rung_sizes: &[usize],
    metric: MetricId,
    cap: usize,
    calls_per_record: usize,
    mut evaluate: F,
) -> Result<SearchOutcome>
where
    F: FnMut(&InstructionCandidate, usize) -> Result<Option<f64>>,
{
    if candidates.is_empty() {
        return Err(Error::Budget("no candidates to evaluate".into()));
    }
    let mut alive: Vec<usize> = (0..candidates.len()).collect();
    let mut trace = Vec::new();
    let mut charged = 0usize;
    let mut decided: Option<(usize, Vec<usize>, Vec<Option<f64>>)> = None;
    let mut stopped_early = false;

    'rungs: for (rung, &size) in rung_sizes.iter().enumerate() {
        let cost = size * calls_per_record;
        let mut values: Vec<Option<f64>> = vec![None; candidates.len()];
        for &c in &alive {
            if charged + cost > cap {
                if rung == 0 {
                    return Err(Error::Budget(format!(
                        "call cap {cap} exhausted before the first rung finished"
                    )));
                }
                stopped_early = true;
                break 'rungs;
            }
            charged += cost;
            let value = evaluate(&candidates[c], rung)?;
            values[c] = value;
            candidates[c].scores.push(SubsetScore {
                subset: format!("rung{rung}"),
                value,
            });
            trace.push(TraceEntry {
                candidate_hash: candidates[c].hash(),
                strategy: candidates[c].strategy,
                rung,
                subset_size: size,
                metric,
                value,
            });
        }
        let ranked = rank(candidates, alive.clone(), &values);
        decided = Some((rung, ranked.clone(), values));
        if rung + 1 < rung_sizes.len() {
            let keep = ranked.len().div_ceil(2);
            for &c in &ranked[keep..] {
                candidates[c].status = CandidateStatus::Pruned;
            }
            alive = ranked[..keep].to_vec();
        }
    }

    let (rung, ranked, _) = decided.expect("rung 0 finished");
    if !stopped_early {
        for &c in &ranked {
            candidates[c].status = CandidateStatus::Complete;
        }
    }
    Ok(SearchOutcome {
        selected: ranked[0],
        decided_at_rung: rung,
        stopped_early,
        calls_charged: charged,
        trace,
    })
}

/// Score one instruction on a subset. Records whose prediction fails get
/// the fallback prediction; if every record fails the first error is
/// returned.
pub fn evaluate_candidate(
    pipeline: &Pipeline,
    candidate: &InstructionCandidate,
    subset: &[PatientRecord],
    metric: MetricId,
    client: &LlmClient,
) -> Result<Option<f64>> {
    if subset.is_empty() {
        return Err(Error::Precondition("evaluation subset is empty".into()));
    }
    let outcomes = pipeline.predict_each(subset, &candidate.text, client);
    if outcomes.iter().all(|o| o.is_err()) {
        return Err(outcomes.into_iter().find_map(|o| o.err()).expect("nonempty"));
    }
    let mut preds = Vec::with_capacity(subset.len());
    for (record, outcome) in subset.iter().zip(outcomes) {
        match outcome {
            Ok(p) => preds.push(p.record),
            Err(e) => {
                log::warn!("{e}; using the fallback prediction");
                preds.push(pipeline.fallback_prediction(record)?);
            }
        }
    }
    let report = evaluate(&preds, &pipeline.task, pipeline.averaging)?;
    Ok(report.get(metric))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub best: InstructionCandidate,
    pub candidates: Vec<InstructionCandidate>,
    pub trace: Vec<TraceEntry>,
    pub decided_at_rung: usize,
    pub stopped_early: bool,
    /// Proposal calls plus evaluation calls, as charged against the cap.
    pub calls_charged: usize,
    pub warnings: Vec<String>,
}

/// Propose, then search. Cache hits are charged like network calls, so the
/// charge bounds real endpoint traffic from above.
pub fn optimize(
    pipeline: &Pipeline,
    train: &[PatientRecord],
    dev: &[PatientRecord],
    budget: &OptimizationBudget,
    proposer: &GenerationSettings,
    meta: &MetaPrompts,
    client: &LlmClient,
) -> Result<OptimizationResult> {
    budget.validate(&pipeline.task, dev.len())?;
    if budget.n_candidates > budget.eval_calls_max {
        return Err(Error::Budget(format!(
            "{} proposals alone exceed the call cap {}",
            budget.n_candidates, budget.eval_calls_max
        )));
    }
    let examples = sample_examples(&pipeline.task, train, budget.n_examples, budget.seed.wrapping_add(1))?;
    let proposal = propose_instructions(
        &pipeline.task,
        &examples,
        budget.n_candidates,
        &budget.strategies,
        meta,
        proposer,
        client,
    )?;
    let mut candidates = proposal.candidates;
    let rungs = make_rungs(dev.len(), &budget.rung_sizes, budget.seed);
    let per_record = if pipeline.mode == Mode::TextTsDescription { 2 } else { 1 };
    let outcome = successive_halving(
        &mut candidates,
        &budget.rung_sizes,
        budget.metric,
        budget.eval_calls_max - proposal.calls,
        per_record,
        |cand, rung| {
            let subset: Vec<PatientRecord> = rungs[rung].iter().map(|&i| dev[i].clone()).collect();
            evaluate_candidate(pipeline, cand, &subset, budget.metric, client)
        },
    )?;
    let mut warnings = proposal.warnings;
    if outcome.stopped_early {
        let w = format!(
            "call cap reached; selected among rung {} evaluations",
            outcome.decided_at_rung
        );
        log::warn!("{w}");
        warnings.push(w);
    }
    Ok(OptimizationResult {
        best: candidates[outcome.selected].clone(),
        candidates,
        trace: outcome.trace,
        decided_at_rung: outcome.decided_at_rung,
        stopped_early: outcome.stopped_early,
        calls_charged: proposal.calls + outcome.calls_charged,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{RawLabel, Split, FORMAT_VERSION};
    use crate::llm::{ClientConfig, StubReply, StubServer};
    use crate::tasks::TaskId;

    fn client(stub: &StubServer) -> LlmClient {
        LlmClient::new(ClientConfig {
            base_url: stub.base_url(),
            ..Default::default()
        })
        .unwrap()
    }

    fn nli(id: &str, label: &str) -> PatientRecord {
        PatientRecord {
            format_version: FORMAT_VERSION,
            id: id.into(),
            note: format!("premise {id}"),
            text_b: Some("hypothesis".into()),
            events: vec![],
            statics: Default::default(),
            label: RawLabel::Text(label.into()),
            split: Split::Dev,
        }
    }

    fn cands(texts: &[&str]) -> Vec<InstructionCandidate> {
        texts.iter().map(|t| InstructionCandidate::new(*t, Strategy::Plain)).collect()
    }

    #[test]
    fn proposals_are_deduplicated_and_seeded() {
        let stub = StubServer::builder()
            .script([StubReply::text("A"), StubReply::text("B"), StubReply::text("C")])
            .start()
            .unwrap();
        let task = TaskSpec::get(TaskId::Mednli);
        let p = propose_instructions(
            &task,
            &[],
            3,
            &[Strategy::Persona, Strategy::Concise],
            &MetaPrompts::default(),
            &GenerationSettings::new("m"),
            &client(&stub),
        )
        .unwrap();
        let texts: Vec<&str> = p.candidates.iter().map(|c| c.text.as_str()).collect();
        assert_eq!(texts, [task.description, "A", "B", "C"]);
        let strategies: Vec<Strategy> = p.candidates.iter().map(|c| c.strategy).collect();
        assert_eq!(strategies, [Strategy::Seed, Strategy::Persona, Strategy::Concise, Strategy::Persona]);
        assert!(p.warnings.is_empty());
    }

    #[test]
    fn identical_proposals_leave_a_shortfall() {
        let stub = StubServer::fixed("Same instruction.");
        let p = propose_instructions(
            &TaskSpec::get(TaskId::Mednli),
            &[],
            3,
            &[Strategy::Plain],
            &MetaPrompts::default(),
            &GenerationSettings::new("m"),
            &client(&stub),
        )
        .unwrap();
        assert_eq!(p.candidates.len(), 2);
        assert_eq!(p.warnings.len(), 1);
    }

    #[test]
    fn persona_template_carries_the_exemplar() {
        let text = MetaPrompts::default()
            .render(Strategy::Persona, "desc", "ex", 1)
            .unwrap();
        assert!(text.contains("You are a physician working in an ICU"));
        assert!(!text.contains('{'));
        assert!(MetaPrompts::default().render(Strategy::Seed, "d", "e", 1).is_none());
    }

    #[test]
    fn rungs_are_nested_and_seeded() {
        let r = make_rungs(20, &[4, 8, 16], 9);
        assert_eq!(r[1][..4], r[0][..]);
        assert_eq!(r[2][..8], r[1][..]);
        assert_eq!(r, make_rungs(20, &[4, 8, 16], 9));
        assert_ne!(r, make_rungs(20, &[4, 8, 16], 10));
    }

    #[test]
    fn halving_keeps_the_ceiling_half_and_breaks_ties_by_text() {
        let mut c = cands(&["d", "c", "b", "a", "e"]);
        let table = |t: &str, rung: usize| -> Option<f64> {
            match (t, rung) {
                ("e", 0) => Some(0.1),
                ("e", _) => Some(1.0),
                (_, 0) => Some(0.5),
                ("c", 1) | ("b", 1) => Some(0.9),
                _ => Some(0.2),
            }
        };
        let out = successive_halving(&mut c, &[1, 2], MetricId::MicroF1, 100, 1, |cand, r| Ok(table(&cand.text, r))).unwrap();
        // rung 0: four-way tie at 0.5 keeps a, b, c by text; d and e pruned
        assert_eq!(c[4].status, CandidateStatus::Pruned);
        assert_eq!(c[0].status, CandidateStatus::Pruned);
        assert_eq!(c[out.selected].text, "b");
        assert_eq!(out.trace.len(), 5 + 3);
        assert_eq!(out.calls_charged, 5 + 3 * 2);
    }

    #[test]
    fn single_candidate_is_returned_after_the_final_rung() {
        let mut c = cands(&["only"]);
        let out = successive_halving(&mut c, &[2, 4], MetricId::MicroF1, 100, 1, |_, r| Ok(Some(r as f64))).unwrap();
        assert_eq!(out.selected, 0);
        assert_eq!(out.decided_at_rung, 1);
        assert_eq!(c[0].status, CandidateStatus::Complete);
        assert_eq!(c[0].scores.len(), 2);
    }

    #[test]
    fn cap_limits_and_errors() {
        let mut c = cands(&["a", "b", "c", "d"]);
        assert!(matches!(
            successive_halving(&mut c, &[3], MetricId::MicroF1, 11, 1, |_, _| Ok(Some(0.0))),
            Err(Error::Budget(_))
        ));
        let mut c = cands(&["a", "b", "c", "d"]);
        let out = successive_halving(&mut c, &[3, 6], MetricId::MicroF1, 12 + 6, 1, |cand, _| {
            Ok(Some(if cand.text == "c" { 1.0 } else { 0.0 }))
        })
        .unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.decided_at_rung, 0);
        assert_eq!(c[out.selected].text, "c");
        assert!(out.calls_charged <= 18);
        assert!(matches!(
            successive_halving(&mut [], &[1], MetricId::MicroF1, 10, 1, |_, _| Ok(None)),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn undefined_values_rank_last() {
        let mut c = cands(&["a", "b"]);
        let out = successive_halving(&mut c, &[1], MetricId::Auroc, 10, 1, |cand, _| {
            Ok(if cand.text == "a" { None } else { Some(0.0) })
        })
        .unwrap();
        assert_eq!(c[out.selected].text, "b");
        assert_eq!(out.trace[0].value, None);
    }

    #[test]
    fn evaluation_by_gold_and_by_constant_answer() {
        let dev = vec![nli("1", "Entailment"), nli("2", "Contradiction"), nli("3", "Neutral")];
        let stub = StubServer::fixed("Neutral");
        let c = client(&stub);
        let p = Pipeline::new(TaskSpec::get(TaskId::Mednli), Mode::Text, "m");
        let v = evaluate_candidate(&p, &InstructionCandidate::new("x", Strategy::Plain), &dev, MetricId::MicroF1, &c).unwrap();
        assert!((v.unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(matches!(
            evaluate_candidate(&p, &InstructionCandidate::new("x", Strategy::Plain), &[], MetricId::MicroF1, &c),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn budget_validation() {
        let task = TaskSpec::get(TaskId::Mortality);
        let mut b = OptimizationBudget {
            n_candidates: 2,
            eval_calls_max: 100,
            rung_sizes: vec![2, 4],
            metric: MetricId::Auprc,
            strategies: default_strategies(),
            seed: 0,
            n_examples: 2,
        };
        b.validate(&task, 4).unwrap();
        assert!(b.validate(&task, 3).is_err());
        b.metric = MetricId::MicroF1;
        assert!(b.validate(&task, 4).is_err());
        b.metric = MetricId::Auprc;
        b.rung_sizes = vec![4, 4];
        assert!(b.validate(&task, 4).is_err());
    }

    #[test]
    fn candidate_hash_is_stable() {
        let c = InstructionCandidate::new("abc", Strategy::Seed);
        assert_eq!(c.hash(), "ba7816bf8f01cfea");
    }
}
