//! Feature catalog, patient records and their JSONL reader.
//!
//! Records arrive one JSON object per line:
//!
//! ```json
//! {"format_version": 1, "id": "a1", "note": "...", "events": [{"feature": "heart_rate",
//!  "t_min": 30, "value": 76.0, "unit": "bpm"}], "statics": {"weight": 90.0},
//!  "label": "0", "split": "test"}
//! ```
//!
//! Pair tasks (premise/hypothesis, sentence pairs) carry the second text in
//! an optional `text_b` field. Lines that fail validation end up in a
//! [`Rejection`] list instead of aborting the whole file.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::tasks::{InputLayout, TaskSpec};

/// Version written to and accepted from record and catalog files.
pub const FORMAT_VERSION: u64 = 1;

const DEFAULT_CATALOG: &str = include_str!("../assets/default_catalog.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Series,
    Static,
}

/// `canonical = scale * value + offset`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub scale: f64,
    pub offset: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine {
        scale: 1.0,
        offset: 0.0,
    };

    pub fn apply(&self, value: f64) -> f64 {
        self.scale * value + self.offset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub id: String,
    pub display_name: String,
    pub kind: FeatureKind,
    pub canonical_unit: String,
    pub plausible_range: [f64; 2],
    pub conversions: BTreeMap<String, Affine>,
}

impl FeatureSpec {
    pub fn min(&self) -> f64 {
        self.plausible_range[0]
    }

    pub fn max(&self) -> f64 {
        self.plausible_range[1]
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Catalog(format!("feature `{}`: {msg}", self.id)));
        if self.id.is_empty() {
            return Err(Error::Catalog("feature with empty id".into()));
        }
        if self.display_name.trim().is_empty() {
            return bad("empty display_name".into());
        }
        if !(self.min() < self.max()) {
            return bad(format!(
                "plausible_range {:?} is not increasing",
                self.plausible_range
            ));
        }
        match self.conversions.get(&self.canonical_unit) {
            Some(a) if *a == Affine::IDENTITY => {}
            _ => {
                return bad(format!(
                    "conversions lack the identity for canonical unit `{}`",
                    self.canonical_unit
                ))
            }
        }
        for (unit, a) in &self.conversions {
            if !a.scale.is_finite() || !a.offset.is_finite() || a.scale == 0.0 {
                return bad(format!("degenerate conversion from `{unit}`"));
            }
        }
        Ok(())
    }
}

/// Ordered feature list; the order is the rendering order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureCatalog {
    format_version: u64,
    features: Vec<FeatureSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CatalogFile {
    format_version: u64,
    features: Vec<FeatureSpec>,
}

impl FeatureCatalog {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for f in &features {
            f.validate()?;
            if !seen.insert(f.id.as_str()) {
                return Err(Error::Catalog(format!("duplicate feature id `{}`", f.id)));
            }
        }
        Ok(FeatureCatalog {
            format_version: FORMAT_VERSION,
            features,
        })
    }

    /// The 13 MIMIC-style features: 11 series followed by weight and height.
    pub fn default_catalog() -> Self {
        Self::from_json(DEFAULT_CATALOG).expect("bundled catalog is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CatalogFile = serde_json::from_str(text)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: file.format_version,
                supported: FORMAT_VERSION,
            });
        }
        Self::new(file.features)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }

    pub fn get(&self, id: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    pub fn iter(&self) -> impl Iterator<Item = &FeatureSpec> {
        self.features.iter()
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

fn finite_or_text<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum NumOrText {
        Num(f64),
        Text(String),
    }
    match NumOrText::deserialize(d)? {
        NumOrText::Num(v) => Ok(v),
        // "NaN", "inf" and friends parse here and are rejected later as non-finite.
        NumOrText::Text(t) => t
            .trim()
            .parse::<f64>()
            .map_err(|_| serde::de::Error::custom(format!("value `{t}` is not a number"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeriesEvent {
    #[serde(rename = "feature")]
    pub feature_id: String,
    #[serde(rename = "t_min")]
    pub offset_minutes: i64,
    #[serde(deserialize_with = "finite_or_text")]
    pub value: f64,
    pub unit: String,
}

/// Gold label as written in the file; its meaning depends on the task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawLabel {
    Number(f64),
    Text(String),
}

impl fmt::Display for RawLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RawLabel::Number(v) => write!(f, "{v}"),
            RawLabel::Text(t) => f.write_str(t),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientRecord {
    #[serde(default = "default_version")]
    pub format_version: u64,
    pub id: String,
    #[serde(default)]
    pub note: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_b: Option<String>,
    #[serde(default)]
    pub events: Vec<TimeSeriesEvent>,
    #[serde(default)]
    pub statics: BTreeMap<String, f64>,
    pub label: RawLabel,
    #[serde(default)]
    pub split: Split,
}

fn default_version() -> u64 {
    FORMAT_VERSION
}

impl PatientRecord {
    /// Check the record against the catalog and task; the error text becomes
    /// the rejection reason.
    pub fn validate(&self, catalog: &FeatureCatalog, task: &TaskSpec) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::FormatVersion {
                found: self.format_version,
                supported: FORMAT_VERSION,
            });
        }
        if self.id.trim().is_empty() {
            return Err(Error::Precondition("record id is empty".into()));
        }
        for ev in &self.events {
            let spec = catalog
                .get(&ev.feature_id)
                .ok_or_else(|| Error::UnknownFeature(ev.feature_id.clone()))?;
            if !ev.value.is_finite() {
                return Err(Error::Precondition(format!(
                    "non-finite value for `{}` at t_min {}",
                    ev.feature_id, ev.offset_minutes
                )));
            }
            if ev.offset_minutes < 0 {
                return Err(Error::Precondition(format!(
                    "negative offset {} for `{}`",
                    ev.offset_minutes, ev.feature_id
                )));
            }
            if !spec.conversions.contains_key(&ev.unit) {
                return Err(Error::UnknownUnit {
                    feature: ev.feature_id.clone(),
                    unit: ev.unit.clone(),
                });
            }
        }
        for (id, v) in &self.statics {
            let spec = catalog
                .get(id)
                .ok_or_else(|| Error::UnknownFeature(id.clone()))?;
            if spec.kind != FeatureKind::Static {
                return Err(Error::Precondition(format!(
                    "statics entry `{id}` is a series feature"
                )));
            }
            if !v.is_finite() {
                return Err(Error::Precondition(format!("non-finite static `{id}`")));
            }
        }
        if matches!(task.layout, InputLayout::PremiseHypothesis | InputLayout::SentencePair)
            && self.text_b.as_deref().map_or(true, |t| t.trim().is_empty())
        {
            return Err(Error::Precondition(format!(
                "`{}` records need a nonempty `text_b`",
                task.id
            )));
        }
        task.gold(&self.label)?;
        Ok(())
    }
}

/// A line that could not be turned into a record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    /// 1-based line number.
    pub line: usize,
    pub record_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ParsedRecords {
    pub records: Vec<PatientRecord>,
    pub rejections: Vec<Rejection>,
}

impl ParsedRecords {
    pub fn line_count(&self) -> usize {
        self.records.len() + self.rejections.len()
    }
}

pub fn parse_records_str(text: &str, catalog: &FeatureCatalog, task: &TaskSpec) -> ParsedRecords {
    let mut out = ParsedRecords::default();
    for (i, line) in text.lines().enumerate() {
        let reject = |record_id: Option<String>, reason: String| Rejection {
            line: i + 1,
            record_id,
            reason,
        };
        if line.trim().is_empty() {
            out.rejections.push(reject(None, "empty line".into()));
            continue;
        }
        match serde_json::from_str::<PatientRecord>(line) {
            Err(e) => out.rejections.push(reject(None, format!("malformed record: {e}"))),
            Ok(rec) => match rec.validate(catalog, task) {
                Ok(()) => out.records.push(rec),
                Err(e) => out.rejections.push(reject(Some(rec.id.clone()), e.to_string())),
            },
        }
    }
    out
}

/// Read a JSONL record file. Only an unreadable file is an error; bad lines
/// are reported in [`ParsedRecords::rejections`].
pub fn parse_records(path: &Path, catalog: &FeatureCatalog, task: &TaskSpec) -> Result<ParsedRecords> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed = parse_records_str(&text, catalog, task);
    for r in &parsed.rejections {
        log::warn!("{}:{}: rejected: {}", path.display(), r.line, r.reason);
    }
    Ok(parsed)
}

pub fn convert_units(event: &TimeSeriesEvent, spec: &FeatureSpec) -> Result<TimeSeriesEvent> {
    let conv = spec
        .conversions
        .get(&event.unit)
        .ok_or_else(|| Error::UnknownUnit {
            feature: spec.id.clone(),
            unit: event.unit.clone(),
        })?;
    if event.unit == spec.canonical_unit {
        return Ok(event.clone());
    }
    Ok(TimeSeriesEvent {
        value: conv.apply(event.value),
        unit: spec.canonical_unit.clone(),
        ..event.clone()
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutlierPolicy {
    #[default]
    Clamp,
    Drop,
}

/// Apply the outlier policy to a canonical value. `None` means removed.
pub fn clamp_value(value: f64, spec: &FeatureSpec, policy: OutlierPolicy) -> Option<f64> {
    if (spec.min()..=spec.max()).contains(&value) {
        return Some(value);
    }
    match policy {
        OutlierPolicy::Clamp => Some(value.clamp(spec.min(), spec.max())),
        OutlierPolicy::Drop => None,
    }
}

/// `None` is the removal marker under [`OutlierPolicy::Drop`].
pub fn clamp_outliers(
    event: &TimeSeriesEvent,
    spec: &FeatureSpec,
    policy: OutlierPolicy,
) -> Option<TimeSeriesEvent> {
    clamp_value(event.value, spec, policy).map(|value| TimeSeriesEvent {
        value,
        ..event.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::TaskId;
    use proptest::prelude::*;

    fn hr() -> FeatureSpec {
        FeatureCatalog::default_catalog()
            .get("heart_rate")
            .unwrap()
            .clone()
    }

    fn ev(feature: &str, t: i64, value: f64, unit: &str) -> TimeSeriesEvent {
        TimeSeriesEvent {
            feature_id: feature.into(),
            offset_minutes: t,
            value,
            unit: unit.into(),
        }
    }

    #[test]
    fn default_catalog_has_thirteen_features_in_order() {
        let cat = FeatureCatalog::default_catalog();
        let names: Vec<_> = cat.iter().map(|f| f.display_name.as_str()).collect();
        assert_eq!(
            names,
            [
                "heart rate",
                "respiratory rate",
                "systolic blood pressure",
                "diastolic blood pressure",
                "mean blood pressure",
                "oxygen saturation",
                "temperature",
                "glucose",
                "Glasgow coma scale total",
                "ph",
                "fraction inspired oxygen",
                "weight",
                "height",
            ]
        );
        let statics: Vec<_> = cat
            .iter()
            .filter(|f| f.kind == FeatureKind::Static)
            .map(|f| f.id.as_str())
            .collect();
        assert_eq!(statics, ["weight", "height"]);
    }

    #[test]
    fn catalog_round_trips_through_json() {
        let cat = FeatureCatalog::default_catalog();
        assert_eq!(FeatureCatalog::from_json(&cat.to_json()).unwrap(), cat);
    }

    #[test]
    fn catalog_invariants_enforced() {
        let mut f = hr();
        f.plausible_range = [10.0, 10.0];
        assert!(FeatureCatalog::new(vec![f]).is_err());

        let mut f = hr();
        f.conversions.remove("bpm");
        assert!(FeatureCatalog::new(vec![f]).is_err());

        assert!(FeatureCatalog::new(vec![hr(), hr()]).is_err());

        let wrong_version = DEFAULT_CATALOG.replacen("\"format_version\": 1", "\"format_version\": 7", 1);
        assert!(matches!(
            FeatureCatalog::from_json(&wrong_version),
            Err(Error::FormatVersion { found: 7, .. })
        ));
    }

    #[test]
    fn fahrenheit_to_celsius() {
        let cat = FeatureCatalog::default_catalog();
        let t = cat.get("temperature").unwrap();
        let out = convert_units(&ev("temperature", 0, 98.6, "F"), t).unwrap();
        // 98.6 * 5/9 - 160/9 = 333/9 = 37
        assert!((out.value - 37.0).abs() < 1e-9, "{}", out.value);
        assert_eq!(out.unit, "C");
    }

    #[test]
    fn canonical_unit_is_identity() {
        let out = convert_units(&ev("heart_rate", 5, 76.0, "bpm"), &hr()).unwrap();
        assert_eq!(out.value, 76.0);
        assert_eq!(out.unit, "bpm");
    }

    #[test]
    fn unknown_unit_names_feature_and_unit() {
        let cat = FeatureCatalog::default_catalog();
        let err = convert_units(&ev("glucose", 0, 1.0, "furlongs"), cat.get("glucose").unwrap())
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("glucose") && msg.contains("furlongs"), "{msg}");
    }

    #[test]
    fn clamp_and_drop() {
        let spec = hr();
        let mut spec300 = spec.clone();
        spec300.plausible_range = [0.0, 300.0];
        let inside = ev("heart_rate", 0, 76.0, "bpm");
        let high = ev("heart_rate", 0, 4000.0, "bpm");
        assert_eq!(clamp_outliers(&inside, &spec300, OutlierPolicy::Clamp).unwrap().value, 76.0);
        assert_eq!(clamp_outliers(&high, &spec300, OutlierPolicy::Clamp).unwrap().value, 300.0);
        assert!(clamp_outliers(&high, &spec300, OutlierPolicy::Drop).is_none());
        assert_eq!(clamp_outliers(&inside, &spec300, OutlierPolicy::Drop).unwrap(), inside);
    }

    fn mortality() -> TaskSpec {
        TaskSpec::get(TaskId::Mortality)
    }

    #[test]
    fn single_well_formed_line() {
        let line = r#"{"id":"p1","note":"pt admitted","events":[{"feature":"heart_rate","t_min":30,"value":76.0,"unit":"bpm"}],"statics":{},"label":"0","split":"test"}"#;
        let parsed = parse_records_str(line, &FeatureCatalog::default_catalog(), &mortality());
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.records[0].events.len(), 1);
        assert!(parsed.rejections.is_empty());
    }

    #[test]
    fn empty_input() {
        let parsed = parse_records_str("", &FeatureCatalog::default_catalog(), &mortality());
        assert!(parsed.records.is_empty() && parsed.rejections.is_empty());
    }

    #[test]
    fn nan_value_is_rejected_with_line_number() {
        let text = concat!(
            r#"{"id":"ok","note":"n","events":[],"label":"1"}"#,
            "\n",
            r#"{"id":"bad","note":"n","events":[{"feature":"heart_rate","t_min":3,"value":"NaN","unit":"bpm"}],"label":"0"}"#,
        );
        let parsed = parse_records_str(text, &FeatureCatalog::default_catalog(), &mortality());
        assert_eq!(parsed.records.len(), 1);
        assert_eq!(parsed.rejections.len(), 1);
        assert_eq!(parsed.rejections[0].line, 2);
        assert_eq!(parsed.rejections[0].record_id.as_deref(), Some("bad"));
        assert!(parsed.rejections[0].reason.contains("non-finite"));
    }

    #[test]
    fn assorted_rejections() {
        let cat = FeatureCatalog::default_catalog();
        let lines = [
            r#"{"id":"a","events":[{"feature":"lactate","t_min":0,"value":1.0,"unit":"mmol/L"}],"label":"0"}"#,
            r#"{"id":"b","statics":{"heart_rate":80.0},"label":"0"}"#,
            r#"{"id":"c","events":[{"feature":"heart_rate","t_min":-5,"value":70.0,"unit":"bpm"}],"label":"0"}"#,
            r#"{"id":"d","label":"maybe"}"#,
            r#"{"id":"","label":"0"}"#,
            r#"{"format_version":2,"id":"e","label":"0"}"#,
            "not json",
            "",
            r#"{"id":"f","events":[{"feature":"heart_rate","t_min":1,"value":70.0,"unit":"kph"}],"label":"1"}"#,
        ];
        let parsed = parse_records_str(&lines.join("\n"), &cat, &mortality());
        assert!(parsed.records.is_empty());
        assert_eq!(parsed.rejections.len(), lines.len());
        let line_numbers: Vec<_> = parsed.rejections.iter().map(|r| r.line).collect();
        assert_eq!(line_numbers, (1..=lines.len()).collect::<Vec<_>>());
    }

    #[test]
    fn unreadable_file_is_an_error() {
        let err = parse_records(
            Path::new("/nonexistent/records.jsonl"),
            &FeatureCatalog::default_catalog(),
            &mortality(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    proptest! {
        #[test]
        fn clamp_lands_in_range_and_is_idempotent(v in -1e6f64..1e6) {
            let spec = hr();
            let once = clamp_value(v, &spec, OutlierPolicy::Clamp).unwrap();
            prop_assert!(once >= spec.min() && once <= spec.max());
            prop_assert_eq!(clamp_value(once, &spec, OutlierPolicy::Clamp), Some(once));
        }

        #[test]
        fn conversion_is_idempotent_once_canonical(v in -500f64..500.0) {
            let cat = FeatureCatalog::default_catalog();
            let spec = cat.get("temperature").unwrap();
            let once = convert_units(&ev("temperature", 0, v, "F"), spec).unwrap();
            let twice = convert_units(&once, spec).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn every_line_is_a_record_or_a_rejection(
            kinds in proptest::collection::vec(0u8..4, 0..30)
        ) {
            let cat = FeatureCatalog::default_catalog();
            let lines: Vec<String> = kinds.iter().enumerate().map(|(i, k)| match k {
                0 => format!(r#"{{"id":"r{i}","events":[{{"feature":"ph","t_min":{i},"value":7.4,"unit":"pH"}}],"label":"1"}}"#),
                1 => format!(r#"{{"id":"r{i}","events":[{{"feature":"nope","t_min":0,"value":1,"unit":"x"}}],"label":"0"}}"#),
                2 => "{broken".to_string(),
                _ => format!(r#"{{"id":"r{i}","label":"0"}}"#),
            }).collect();
            let parsed = parse_records_str(&lines.join("\n"), &cat, &mortality());
            prop_assert_eq!(parsed.line_count(), lines.len());
            for r in &parsed.records {
                for e in &r.events {
                    prop_assert!(cat.contains(&e.feature_id));
                }
            }
        }
    }
}
