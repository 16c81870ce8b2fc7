//! Confusion matrix, macro/micro F1, AUROC, average precision and
//! median-of-runs aggregation.
//!
//! All values are fractions in `[0, 1]`. A metric that cannot be computed
//! (single-class labels, no positives, no predictions) is `None` with a note
//! in [`MetricsReport::undefined`], never NaN.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::labels::LabelSchema;
use crate::tasks::{Gold, TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Prediction {
    Label(String),
    Score(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub record_id: String,
    pub gold: Gold,
    pub predicted: Prediction,
    pub unparsed: bool,
    /// Raw generation the prediction was parsed from.
    pub raw: String,
    /// Wall time of the call; kept out of persisted files.
    #[serde(skip)]
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// `counts[gold][predicted]`
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(labels: &[String]) -> Self {
        ConfusionMatrix {
            labels: labels.to_vec(),
            counts: vec![vec![0; labels.len()]; labels.len()],
        }
    }

    pub fn n(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn get(&self, gold: &str, predicted: &str) -> u64 {
        let idx = |l: &str| self.labels.iter().position(|x| x == l);
        match (idx(gold), idx(predicted)) {
            (Some(g), Some(p)) => self.counts[g][p],
            _ => 0,
        }
    }

    fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }
}

pub fn confusion_matrix(preds: &[PredictionRecord], schema: &LabelSchema) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::zeros(&schema.labels);
    let index = |label: &str| {
        schema.index_of(label).ok_or_else(|| Error::UnknownLabel {
            task: schema.task.clone(),
            label: label.to_string(),
        })
    };
    for p in preds {
        let gold = match &p.gold {
            Gold::Class(c) => c,
            Gold::Flag(_) => {
                return Err(Error::Precondition(format!(
                    "record `{}` has a binary gold flag, not a class",
                    p.record_id
                )))
            }
        };
        let predicted = match &p.predicted {
            Prediction::Label(l) => l,
            Prediction::Score(_) => {
                return Err(Error::Precondition(format!(
                    "record `{}` has a score, not a label",
                    p.record_id
                )))
            }
        };
        cm.counts[index(gold)?][index(predicted)?] += 1;
    }
    Ok(cm)
}

/// Which classes enter the macro average.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MacroAveraging {
    /// Classes with at least one gold example.
    #[default]
    PresentInGold,
    AllLabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub macro_f1: f64,
    pub micro_f1: f64,
    pub per_class: Vec<f64>,
}

pub fn f1_scores(cm: &ConfusionMatrix, averaging: MacroAveraging) -> Result<F1Scores> {
    let n = cm.n();
    if n == 0 {
        return Err(Error::MetricUndefined("F1 over zero predictions".into()));
    }
    let k = cm.labels.len();
    let per_class: Vec<f64> = (0..k)
        .map(|i| {
            let tp = cm.counts[i][i] as f64;
            let predicted = cm.col_sum(i) as f64;
            let actual = cm.row_sum(i) as f64;
            if predicted == 0.0 || actual == 0.0 || tp == 0.0 {
                return 0.0;
            }
            let (p, r) = (tp / predicted, tp / actual);
            2.0 * p * r / (p + r)
        })
        .collect();
    let included: Vec<f64> = (0..k)
        .filter(|&i| averaging == MacroAveraging::AllLabels || cm.row_sum(i) > 0)
        .map(|i| per_class[i])
        .collect();
    let macro_f1 = included.iter().sum::<f64>() / included.len() as f64;
    // Single-label: pooled fp and fn both equal n - trace.
    let trace: u64 = (0..k).map(|i| cm.counts[i][i]).sum();
    Ok(F1Scores {
        macro_f1,
        micro_f1: trace as f64 / n as f64,
        per_class,
    })
}

fn check_scores(scores: &[(f64, bool)]) -> Result<(usize, usize)> {
    if let Some((s, _)) = scores.iter().find(|(s, _)| !s.is_finite()) {
        return Err(Error::Precondition(format!("non-finite score {s}")));
    }
    let pos = scores.iter().filter(|(_, y)| *y).count();
    Ok((pos, scores.len() - pos))
}

/// Area under the ROC curve via the rank-sum statistic, ties sharing the
/// average rank.
pub fn roc_auc(scores: &[(f64, bool)]) -> Result<f64> {
    let (pos, neg) = check_scores(scores)?;
    if pos == 0 || neg == 0 {
        return Err(Error::MetricUndefined(format!(
            "AUROC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg_rank = (i + j + 2) as f64 / 2.0;
        let group_pos = sorted[i..=j].iter().filter(|(_, y)| *y).count();
        rank_sum_pos += avg_rank * group_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision: `Σ (R_i − R_{i−1})·P_i` over distinct score
/// thresholds, highest first.
pub fn pr_auc(scores: &[(f64, bool)]) -> Result<f64> {
    let (pos, _) = check_scores(scores)?;
    if pos == 0 {
        return Err(Error::MetricUndefined("AUPRC needs at least one positive".into()));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == threshold {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub n: usize,
    pub confusion: Option<ConfusionMatrix>,
    pub macro_f1: Option<f64>,
    pub micro_f1: Option<f64>,
    pub auroc: Option<f64>,
    pub auprc: Option<f64>,
    pub unparsed_rate: f64,
    /// Why a metric that applies to this task is missing.
    pub undefined: Vec<String>,
}

impl MetricsReport {
    pub fn get(&self, metric: MetricId) -> Option<f64> {
        match metric {
            MetricId::MicroF1 => self.micro_f1,
            MetricId::MacroF1 => self.macro_f1,
            MetricId::Auroc => self.auroc,
            MetricId::Auprc => self.auprc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricId {
    MicroF1,
    MacroF1,
    Auroc,
    Auprc,
}

impl MetricId {
    pub fn as_str(self) -> &'static str {
        match self {
            MetricId::MicroF1 => "micro_f1",
            MetricId::MacroF1 => "macro_f1",
            MetricId::Auroc => "auroc",
            MetricId::Auprc => "auprc",
        }
    }

    pub fn applies_to(self, kind: TaskKind) -> bool {
        matches!(
            (self, kind),
            (MetricId::MicroF1 | MetricId::MacroF1, TaskKind::Multiclass)
                | (MetricId::Auroc | MetricId::Auprc, TaskKind::ScoredBinary)
        )
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [MetricId::MicroF1, MetricId::MacroF1, MetricId::Auroc, MetricId::Auprc]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}`")))
    }
}

/// Score pairs for a scored-binary task.
pub fn score_pairs(preds: &[PredictionRecord]) -> Result<Vec<(f64, bool)>> {
    preds
        .iter()
        .map(|p| match (&p.predicted, &p.gold) {
            (Prediction::Score(s), Gold::Flag(y)) => Ok((*s, *y)),
            _ => Err(Error::Precondition(format!(
                "record `{}` lacks a score/flag pair",
                p.record_id
            ))),
        })
        .collect()
}

/// Every metric that applies to the task, computed over one run.
pub fn evaluate(preds: &[PredictionRecord], task: &TaskSpec, averaging: MacroAveraging) -> Result<MetricsReport> {
    let n = preds.len();
    let unparsed = preds.iter().filter(|p| p.unparsed).count();
    let mut report = MetricsReport {
        task: task.id.to_string(),
        n,
        confusion: None,
        macro_f1: None,
        micro_f1: None,
        auroc: None,
        auprc: None,
        unparsed_rate: if n == 0 { 0.0 } else { unparsed as f64 / n as f64 },
        undefined: Vec::new(),
    };
    let note = |r: Result<f64>, slot: &mut Option<f64>, undefined: &mut Vec<String>| -> Result<()> {
        match r {
            Ok(v) => *slot = Some(v),
            Err(Error::MetricUndefined(msg)) => undefined.push(msg),
            Err(e) => return Err(e),
        }
        Ok(())
    };
    match task.kind {
        TaskKind::Multiclass => {
            let cm = confusion_matrix(preds, &task.schema)?;
            match f1_scores(&cm, averaging) {
                Ok(f1) => {
                    report.macro_f1 = Some(f1.macro_f1);
                    report.micro_f1 = Some(f1.micro_f1);
                }
                Err(Error::MetricUndefined(msg)) => report.undefined.push(msg),
                Err(e) => return Err(e),
            }
            report.confusion = Some(cm);
        }
        TaskKind::ScoredBinary => {
            let pairs = score_pairs(preds)?;
            note(roc_auc(&pairs), &mut report.auroc, &mut report.undefined)?;
            note(pr_auc(&pairs), &mut report.auprc, &mut report.undefined)?;
        }
    }
    Ok(report)
}

/// Middle element for odd counts, mean of the two middle elements for even.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    })
}

/// Per-metric median over repeated runs. The confusion matrix is taken from
/// the run whose micro-F1 is closest to the median micro-F1 (first on ties).
pub fn median_of_runs(reports: &[MetricsReport]) -> Result<MetricsReport> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Precondition("median of zero runs".into()))?;
    if let Some(other) = reports.iter().find(|r| r.task != first.task) {
        return Err(Error::Precondition(format!(
            "cannot aggregate `{}` with `{}`",
            first.task, other.task
        )));
    }
    let med = |f: fn(&MetricsReport) -> Option<f64>| {
        let values: Vec<f64> = reports.iter().filter_map(f).collect();
        median(&values)
    };
    let micro = med(|r| r.micro_f1);
    let carrier = match micro {
        Some(m) => reports
            .iter()
            .filter(|r| r.micro_f1.is_some())
            .min_by(|a, b| {
                let da = (a.micro_f1.unwrap() - m).abs();
                let db = (b.micro_f1.unwrap() - m).abs();
                da.partial_cmp(&db).unwrap_or(Ordering::Equal)
            })
            .unwrap_or(first),
        None => first,
    };
    let mut undefined: Vec<String> = reports.iter().flat_map(|r| r.undefined.clone()).collect();
    undefined.sort();
    undefined.dedup();
    Ok(MetricsReport {
        task: first.task.clone(),
        n: carrier.n,
        confusion: carrier.confusion.clone(),
        macro_f1: med(|r| r.macro_f1),
        micro_f1: micro,
        auroc: med(|r| r.auroc),
        auprc: med(|r| r.auprc),
        unparsed_rate: med(|r| Some(r.unparsed_rate)).unwrap_or(0.0),
        undefined,
    })
}

/// Table-style summary: F1 as fractions, AUROC/AUPRC as percentages.
pub fn render_summary(report: &MetricsReport) -> String {
    let frac = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}"));
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", x * 100.0));
    let mut out = format!("task: {}  n: {}\n", report.task, report.n);
    if report.confusion.is_some() || report.micro_f1.is_some() || report.macro_f1.is_some() {
        out += &format!("Macro F1: {}  Micro F1: {}\n", frac(report.macro_f1), frac(report.micro_f1));
    }
    if report.auroc.is_some() || report.auprc.is_some() || report.confusion.is_none() {
        out += &format!("AUROC: {}  AUPRC: {}\n", pct(report.auroc), pct(report.auprc));
    }
    out += &format!("unparsed: {:.2}%\n", report.unparsed_rate * 100.0);
    for u in &report.undefined {
        out += &format!("undefined: {u}\n");
    }
    out
}
