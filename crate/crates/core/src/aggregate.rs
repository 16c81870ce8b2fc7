//! Reduce each feature's events over the observation window to a fixed
//! number of mean buckets.
//!
//! Bucket `i` of `B` covers offsets `[i·W/B, (i+1)·W/B)` minutes with
//! `W = window_hours·60`. Events at or after `W` are dropped and counted.
//! Empty buckets are forward-filled from the last observed bucket; leading
//! empty buckets take the first observed value.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{
    clamp_value, convert_units, FeatureCatalog, FeatureKind, FeatureSpec, OutlierPolicy,
    PatientRecord, TimeSeriesEvent,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputation {
    /// Fill empty buckets from the nearest earlier observed bucket.
    #[default]
    ForwardFill,
    /// Drop any feature that has an empty bucket.
    OmitFeature,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub window_hours: u32,
    pub bucket_count: u32,
    pub excluded_features: BTreeSet<String>,
    pub imputation: Imputation,
    pub outlier_policy: OutlierPolicy,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            window_hours: 48,
            bucket_count: 6,
            excluded_features: BTreeSet::new(),
            imputation: Imputation::ForwardFill,
            outlier_policy: OutlierPolicy::Clamp,
        }
    }
}

impl AggregationConfig {
    /// One bucket per hour of a 48 hour window.
    pub fn hourly() -> Self {
        AggregationConfig {
            bucket_count: 48,
            ..Default::default()
        }
    }

    pub fn window_minutes(&self) -> u64 {
        u64::from(self.window_hours) * 60
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_hours < 1 {
            return Err(Error::AggregationConfig("window_hours must be at least 1".into()));
        }
        if self.bucket_count < 1 {
            return Err(Error::AggregationConfig("bucket_count must be at least 1".into()));
        }
        if u64::from(self.bucket_count) > self.window_minutes() {
            return Err(Error::AggregationConfig(format!(
                "{} buckets are finer than one minute over {} hours",
                self.bucket_count, self.window_hours
            )));
        }
        Ok(())
    }

    pub fn validate_against(&self, catalog: &FeatureCatalog) -> Result<()> {
        self.validate()?;
        match self.excluded_features.iter().find(|id| !catalog.contains(id)) {
            Some(id) => Err(Error::UnknownFeature(id.clone())),
            None => Ok(()),
        }
    }

    /// Index of the bucket holding `offset_minutes`, `None` outside the window.
    pub fn bucket_of(&self, offset_minutes: i64) -> Option<usize> {
        let w = self.window_minutes();
        let t = u64::try_from(offset_minutes).ok()?;
        (t < w).then(|| (t * u64::from(self.bucket_count) / w) as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedSeries {
    pub feature_id: String,
    pub display_name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bucket_means: Vec<f64>,
    /// `true` where the bucket mean came from at least one event.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub observed: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_value: Option<f64>,
}

impl AggregatedSeries {
    pub fn is_static(&self) -> bool {
        self.static_value.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bucketed {
    /// `None` when the feature is omitted by the missing-data policy.
    pub series: Option<AggregatedSeries>,
    pub dropped_outside_window: usize,
}

/// Mean of the values with a fixed summation order, so the result does not
/// depend on input order. Clamped to the sample range to absorb rounding.
fn stable_mean(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let sum: f64 = values.iter().sum();
    let mean = sum / values.len() as f64;
    mean.clamp(values[0], values[values.len() - 1])
}

/// Bucket one feature's canonical events.
pub fn bucketize(spec: &FeatureSpec, events: &[TimeSeriesEvent], cfg: &AggregationConfig) -> Bucketed {
    let b = cfg.bucket_count as usize;
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); b];
    let mut dropped = 0;
    for ev in events {
        match cfg.bucket_of(ev.offset_minutes) {
            Some(i) => buckets[i].push(ev.value),
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::debug!("{}: {dropped} event(s) outside the window", spec.id);
    }

    let observed: Vec<bool> = buckets.iter().map(|v| !v.is_empty()).collect();
    let omitted = |dropped| Bucketed {
        series: None,
        dropped_outside_window: dropped,
    };
    let Some(first) = observed.iter().position(|&o| o) else {
        return omitted(dropped);
    };
    if cfg.imputation == Imputation::OmitFeature && observed.contains(&false) {
        return omitted(dropped);
    }

    let mut means = Vec::with_capacity(b);
    let mut carry = stable_mean(&mut buckets[first]);
    for values in buckets.iter_mut() {
        if !values.is_empty() {
            carry = stable_mean(values);
        }
        means.push(carry);
    }

    Bucketed {
        series: Some(AggregatedSeries {
            feature_id: spec.id.clone(),
            display_name: spec.display_name.clone(),
            bucket_means: means,
            observed,
            static_value: None,
        }),
        dropped_outside_window: dropped,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AggregatedRecord {
    /// Catalog order, excluded and omitted features absent.
    pub series: Vec<AggregatedSeries>,
    pub dropped_outside_window: usize,
    pub removed_outliers: usize,
}

/// Canonicalize, clean and bucket every catalog feature of one record.
pub fn aggregate_record(
    record: &PatientRecord,
    catalog: &FeatureCatalog,
    cfg: &AggregationConfig,
) -> Result<AggregatedRecord> {
    cfg.validate()?;
    let mut out = AggregatedRecord::default();

    for spec in catalog.iter() {
        if cfg.excluded_features.contains(&spec.id) {
            continue;
        }
        let mut events = Vec::new();
        for ev in record.events.iter().filter(|e| e.feature_id == spec.id) {
            let canonical = convert_units(ev, spec).map_err(|e| e.in_record(&record.id))?;
            match clamp_value(canonical.value, spec, cfg.outlier_policy) {
                Some(value) => events.push(TimeSeriesEvent { value, ..canonical }),
                None => out.removed_outliers += 1,
            }
        }

        match spec.kind {
            FeatureKind::Series => {
                let bucketed = bucketize(spec, &events, cfg);
                out.dropped_outside_window += bucketed.dropped_outside_window;
                out.series.extend(bucketed.series);
            }
            FeatureKind::Static => {
                let value = match record.statics.get(&spec.id) {
                    Some(&v) => {
                        let kept = clamp_value(v, spec, cfg.outlier_policy);
                        if kept.is_none() {
                            out.removed_outliers += 1;
                        }
                        kept
                    }
                    // A static measured as events: average what falls in the window.
                    None => {
                        let mut inside: Vec<f64> = events
                            .iter()
                            .filter(|e| cfg.bucket_of(e.offset_minutes).is_some())
                            .map(|e| e.value)
                            .collect();
                        (!inside.is_empty()).then(|| stable_mean(&mut inside))
                    }
                };
                if let Some(v) = value {
                    out.series.push(AggregatedSeries {
                        feature_id: spec.id.clone(),
                        display_name: spec.display_name.clone(),
                        bucket_means: Vec::new(),
                        observed: Vec::new(),
                        static_value: Some(v),
                    });
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::RawLabel;
    use proptest::prelude::*;

    fn spec() -> FeatureSpec {
        FeatureCatalog::default_catalog().get("heart_rate").unwrap().clone()
    }

    fn ev(t: i64, value: f64) -> TimeSeriesEvent {
        TimeSeriesEvent {
            feature_id: "heart_rate".into(),
            offset_minutes: t,
            value,
            unit: "bpm".into(),
        }
    }

    #[test]
    fn first_bucket_mean_then_forward_fill() {
        let out = bucketize(&spec(), &[ev(10, 70.0), ev(20, 80.0)], &AggregationConfig::default());
        let s = out.series.unwrap();
        assert_eq!(s.bucket_means, vec![75.0; 6]);
        assert_eq!(s.observed, [true, false, false, false, false, false]);
    }

    #[test]
    fn constant_series() {
        let events: Vec<_> = (0..6).map(|i| ev(i * 480 + 1, 7.4)).collect();
        let s = bucketize(&spec(), &events, &AggregationConfig::default()).series.unwrap();
        assert_eq!(s.bucket_means, vec![7.4; 6]);
        assert!(s.observed.iter().all(|&o| o));
    }

    #[test]
    fn leading_gap_back_fills() {
        // bucket width 480 min: 1000 -> bucket 2, 2000 -> bucket 4
        let s = bucketize(&spec(), &[ev(1000, 60.0), ev(2000, 90.0)], &AggregationConfig::default())
            .series
            .unwrap();
        assert_eq!(s.bucket_means, [60.0, 60.0, 60.0, 60.0, 90.0, 90.0]);
        assert_eq!(s.observed, [false, false, true, false, true, false]);
    }

    #[test]
    fn zero_events_omit_the_feature() {
        for imputation in [Imputation::ForwardFill, Imputation::OmitFeature] {
            let cfg = AggregationConfig {
                imputation,
                ..Default::default()
            };
            assert!(bucketize(&spec(), &[], &cfg).series.is_none());
        }
    }

    #[test]
    fn omit_feature_policy_rejects_gaps() {
        let cfg = AggregationConfig {
            imputation: Imputation::OmitFeature,
            ..Default::default()
        };
        assert!(bucketize(&spec(), &[ev(0, 70.0)], &cfg).series.is_none());
    }

    #[test]
    fn window_edge_is_dropped() {
        let cfg = AggregationConfig::default();
        let out = bucketize(&spec(), &[ev(2879, 70.0), ev(2880, 80.0), ev(5000, 90.0)], &cfg);
        assert_eq!(out.dropped_outside_window, 2);
        assert_eq!(out.series.unwrap().observed[5], true);
    }

    #[test]
    fn hourly_buckets_are_hours() {
        let cfg = AggregationConfig::hourly();
        for hour in 0..48i64 {
            assert_eq!(cfg.bucket_of(hour * 60), Some(hour as usize));
            assert_eq!(cfg.bucket_of(hour * 60 + 59), Some(hour as usize));
        }
        assert_eq!(cfg.bucket_of(48 * 60), None);
    }

    #[test]
    fn config_validation() {
        assert!(AggregationConfig { bucket_count: 0, ..Default::default() }.validate().is_err());
        assert!(AggregationConfig { window_hours: 0, ..Default::default() }.validate().is_err());
        assert!(AggregationConfig { window_hours: 1, bucket_count: 61, ..Default::default() }
            .validate()
            .is_err());
        assert!(AggregationConfig { window_hours: 1, bucket_count: 60, ..Default::default() }
            .validate()
            .is_ok());
        let cat = FeatureCatalog::default_catalog();
        let mut cfg = AggregationConfig::default();
        cfg.excluded_features.insert("lactate".into());
        assert!(matches!(cfg.validate_against(&cat), Err(Error::UnknownFeature(_))));
    }

    fn bare_record() -> PatientRecord {
        PatientRecord {
            format_version: 1,
            id: "r".into(),
            note: String::new(),
            text_b: None,
            events: vec![],
            statics: Default::default(),
            label: RawLabel::Text("0".into()),
            split: Default::default(),
        }
    }

    #[test]
    fn empty_record_aggregates_to_nothing() {
        let cfg = AggregationConfig {
            imputation: Imputation::OmitFeature,
            ..Default::default()
        };
        let out = aggregate_record(&bare_record(), &FeatureCatalog::default_catalog(), &cfg).unwrap();
        assert!(out.series.is_empty());
    }

    #[test]
    fn record_conversion_clamping_and_statics() {
        let mut rec = bare_record();
        rec.events = vec![
            TimeSeriesEvent { feature_id: "temperature".into(), offset_minutes: 0, value: 98.6, unit: "F".into() },
            TimeSeriesEvent { feature_id: "heart_rate".into(), offset_minutes: 0, value: 4000.0, unit: "bpm".into() },
            TimeSeriesEvent { feature_id: "height".into(), offset_minutes: 10, value: 67.0, unit: "in".into() },
        ];
        rec.statics.insert("weight".into(), 90.0);
        let cat = FeatureCatalog::default_catalog();

        let out = aggregate_record(&rec, &cat, &AggregationConfig::default()).unwrap();
        let ids: Vec<_> = out.series.iter().map(|s| s.feature_id.as_str()).collect();
        assert_eq!(ids, ["heart_rate", "temperature", "weight", "height"]);
        assert_eq!(out.series[0].bucket_means[0], 350.0);
        assert!((out.series[1].bucket_means[0] - 37.0).abs() < 1e-9);
        assert_eq!(out.series[2].static_value, Some(90.0));
        assert!((out.series[3].static_value.unwrap() - 170.18).abs() < 1e-9);

        let drop = AggregationConfig { outlier_policy: OutlierPolicy::Drop, ..Default::default() };
        let out = aggregate_record(&rec, &cat, &drop).unwrap();
        assert_eq!(out.removed_outliers, 1);
        assert_eq!(out.series[0].feature_id, "temperature");
    }

    fn events_strategy() -> impl Strategy<Value = Vec<TimeSeriesEvent>> {
        proptest::collection::vec((0i64..2880, 0.0f64..300.0), 1..80)
            .prop_map(|v| v.into_iter().map(|(t, x)| ev(t, x)).collect())
    }

    proptest! {
        #[test]
        fn observed_means_stay_in_bucket_range(events in events_strategy(), b in 1u32..=48) {
            let cfg = AggregationConfig { bucket_count: b, ..Default::default() };
            let s = bucketize(&spec(), &events, &cfg).series.unwrap();
            prop_assert_eq!(s.bucket_means.len(), b as usize);
            for i in 0..b as usize {
                let inside: Vec<f64> = events.iter()
                    .filter(|e| cfg.bucket_of(e.offset_minutes) == Some(i))
                    .map(|e| e.value).collect();
                if s.observed[i] {
                    let lo = inside.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = inside.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(s.bucket_means[i] >= lo && s.bucket_means[i] <= hi);
                } else if let Some(prev) = (0..i).rev().find(|&j| s.observed[j]) {
                    prop_assert_eq!(s.bucket_means[i], s.bucket_means[prev]);
                }
            }
        }

        #[test]
        fn input_order_does_not_matter(events in events_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = events.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let cfg = AggregationConfig::default();
            prop_assert_eq!(bucketize(&spec(), &events, &cfg), bucketize(&spec(), &shuffled, &cfg));
        }
    }
}
