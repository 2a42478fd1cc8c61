//! Evaporation model training and the ET = E + T split.

use std::io::Write;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{fit_rows, usable_rows, HarnessError, NamedSpec, Period, PreparedSite};
use crate::ingest::{FluxDataset, IngestError, TARGET};
use crate::metrics::{best_fit_slope, check_slope_constraint, r2};
use crate::models::TrainedModel;
use crate::periods::PeriodMasks;
use crate::preprocess::FeatureSet;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("site `{0}` has no usable night training records")]
    EmptyNight(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error("{0} partition records but {1} mask entries")]
    LengthMismatch(usize, usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Fit the evaporation model on night training records; at night ET is E.
pub fn train_e_model(
    site: &PreparedSite,
    features: &FeatureSet,
    spec: &NamedSpec,
) -> Result<TrainedModel, PartitionError> {
    let ds = &site.dataset;
    for f in features.features() {
        ds.feature_index(f)?;
    }
    let rows = usable_rows(ds, features.features(), &site.masks.night_train)?;
    if rows.is_empty() {
        return Err(PartitionError::EmptyNight(ds.site_id().to_string()));
    }
    Ok(fit_rows(ds, features.features(), &rows, &spec.spec, &spec.name)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionRecord {
    pub timestamp: DateTime<Utc>,
    pub et_measured: Option<f64>,
    pub e_predicted: Option<f64>,
    pub t_derived: Option<f64>,
    pub negative_t: bool,
    pub imputed_target: bool,
    /// No partition: the target is missing.
    pub missing_target: bool,
    /// No prediction: a model input is missing.
    pub missing_features: bool,
    /// `e_predicted + t_derived` rounds away from `wq`. Only possible when
    /// both parts dwarf `wq`, leaving no float pair on its grid.
    #[serde(default)]
    pub inexact_sum: bool,
}

/// Split `wq` into `(e, t)` with `e + t == wq` exactly in floating point.
///
/// `t = wq - e` is computed first and `e` is re-derived from it; in the rare
/// case the sum still rounds away from `wq`, `e` is nudged by ulps. Exact
/// whenever `0 <= e <= 2 wq` (or the mirrored negative range); far outside
/// it the sum may miss `wq` by a few ulps of `e`.
pub fn exact_split(wq: f64, e: f64) -> (f64, f64) {
    let t = wq - e;
    let e2 = wq - t;
    if e2 + t == wq {
        return (e2, t);
    }
    let (mut up, mut down) = (e2, e2);
    for _ in 0..16 {
        up = up.next_up();
        if up + t == wq {
            return (up, t);
        }
        down = down.next_down();
        if down + t == wq {
            return (down, t);
        }
    }
    (e2, t)
}

impl PartitionRecord {
    pub fn new(timestamp: DateTime<Utc>, wq: Option<f64>, e: Option<f64>, imputed_target: bool) -> Self {
        let (e_predicted, t_derived) = match (wq, e) {
            (Some(w), Some(e)) => {
                let (e, t) = exact_split(w, e);
                (Some(e), Some(t))
            }
            (None, e) => (e, None),
            (Some(_), None) => (None, None),
        };
        Self {
            timestamp,
            et_measured: wq,
            e_predicted,
            t_derived,
            negative_t: t_derived.is_some_and(|t| t < 0.0),
            imputed_target,
            missing_target: wq.is_none(),
            missing_features: e.is_none(),
            inexact_sum: matches!((e_predicted, t_derived, wq), (Some(e), Some(t), Some(w)) if e + t != w),
        }
    }
}

/// Predict E for every record and derive T = ET − E. Output order and
/// length follow the dataset.
pub fn partition_et(ds: &FluxDataset, model: &TrainedModel) -> Result<Vec<PartitionRecord>, PartitionError> {
    let target = ds.feature_index(TARGET)?;
    let idx: Vec<usize> = model
        .feature_names
        .iter()
        .map(|f| ds.feature_index(f))
        .collect::<Result<_, _>>()?;
    let imputed = ds.imputed_flags(TARGET);
    Ok(ds
        .records()
        .par_iter()
        .zip(imputed.par_iter())
        .map(|(r, &imp)| {
            let row: Option<Vec<f64>> = idx
                .iter()
                .map(|&j| r.values[j].filter(|v| v.is_finite()))
                .collect();
            let e = row.map(|row| model.predict_row(&row));
            PartitionRecord::new(r.timestamp, r.values[target], e, imp)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodValidation {
    pub period: Period,
    pub n: usize,
    pub slope: f64,
    pub intercept: f64,
    pub slope_violation: bool,
    pub negative_t_fraction: f64,
    pub r2: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionValidation {
    pub periods: Vec<PeriodValidation>,
    pub warnings: Vec<String>,
}

impl PartitionValidation {
    pub fn get(&self, p: Period) -> Option<&PeriodValidation> {
        self.periods.iter().find(|v| v.period == p)
    }
}

/// Slope of E against measured ET, negative-T share and R² per period.
pub fn validate_partition(
    results: &[PartitionRecord],
    masks: &PeriodMasks,
) -> Result<PartitionValidation, PartitionError> {
    if results.len() != masks.len() {
        return Err(PartitionError::LengthMismatch(results.len(), masks.len()));
    }
    let mut out = PartitionValidation::default();
    let warn = |out: &mut PartitionValidation, msg: String| {
        log::warn!("{msg}");
        out.warnings.push(msg);
    };
    if results.iter().all(|r| r.et_measured.is_none()) {
        warn(&mut out, "every record lacks measured ET; nothing to validate".into());
        return Ok(out);
    }
    for (period, mask) in [
        (Period::NightHoldout, &masks.night_holdout),
        (Period::Winter, &masks.winter),
        (Period::Flood, &masks.flood),
    ] {
        let pairs: Vec<(f64, f64, bool)> = results
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .filter_map(|(r, _)| Some((r.et_measured?, r.e_predicted?, r.negative_t)))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let wq: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let e: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        match best_fit_slope(&wq, &e) {
            Ok((slope, intercept)) => out.periods.push(PeriodValidation {
                period,
                n: pairs.len(),
                slope,
                intercept,
                slope_violation: check_slope_constraint(slope),
                negative_t_fraction: pairs.iter().filter(|p| p.2).count() as f64 / pairs.len() as f64,
                r2: r2(&wq, &e).ok(),
            }),
            Err(err) => warn(&mut out, format!("{period}: slope unavailable: {err}")),
        }
    }
    Ok(out)
}

/// Partition CSV with period and violation flags per record.
pub fn write_partition_csv<W: Write>(
    results: &[PartitionRecord],
    masks: &PeriodMasks,
    out: W,
) -> Result<(), PartitionError> {
    if results.len() != masks.len() {
        return Err(PartitionError::LengthMismatch(results.len(), masks.len()));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "timestamp",
        "wq",
        "e_predicted",
        "t_derived",
        "night",
        "night_holdout",
        "winter",
        "flood",
        "negative_t",
        "imputed_target",
        "missing_target",
        "missing_features",
        "inexact_sum",
    ])?;
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let flag = |b: bool| if b { "1" } else { "0" }.to_string();
    for (i, r) in results.iter().enumerate() {
        w.write_record([
            r.timestamp.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            num(r.et_measured),
            num(r.e_predicted),
            num(r.t_derived),
            flag(masks.night[i]),
            flag(masks.night_holdout[i]),
            flag(masks.winter[i]),
            flag(masks.flood[i]),
            flag(r.negative_t),
            flag(r.imputed_target),
            flag(r.missing_target),
            flag(r.missing_features),
            flag(r.inexact_sum),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::utc;
    use proptest::prelude::*;

    fn rec(wq: f64, e: f64) -> PartitionRecord {
        PartitionRecord::new(utc(2020, 1, 1, 0, 0), Some(wq), Some(e), false)
    }

    #[test]
    fn positive_t() {
        let r = rec(2.0, 1.5);
        assert_eq!(r.t_derived, Some(0.5));
        assert!(!r.negative_t);
    }

    #[test]
    fn negative_t_flagged_not_clamped() {
        let r = rec(2.0, 2.5);
        assert_eq!(r.t_derived, Some(-0.5));
        assert!(r.negative_t);
    }

    #[test]
    fn missing_target_has_no_partition() {
        let r = PartitionRecord::new(utc(2020, 1, 1, 0, 0), None, Some(1.0), false);
        assert!(r.missing_target && r.t_derived.is_none());
    }

    proptest! {
        #[test]
        fn split_is_additive(wq in -1e3f64..1e3, frac in 0.0f64..=2.0) {
            let e = wq * frac;
            let (e2, t) = exact_split(wq, e);
            prop_assert_eq!(e2 + t, wq);
        }

        #[test]
        fn split_close_and_flagged(wq in -1e3f64..1e3, e in -1e4f64..1e4) {
            let (e2, _) = exact_split(wq, e);
            prop_assert!((e2 - e).abs() <= 64.0 * f64::EPSILON * (e.abs() + wq.abs()));
            let r = PartitionRecord::new(utc(2020, 1, 1, 0, 0), Some(wq), Some(e), false);
            prop_assert_eq!(r.inexact_sum, r.e_predicted.unwrap() + r.t_derived.unwrap() != wq);
        }
    }

    fn masks(n: usize) -> PeriodMasks {
        let all = vec![true; n];
        PeriodMasks::from_parts(all.clone(), all.clone(), vec![false; n], all).unwrap()
    }

    #[test]
    fn identity_partition_validates() {
        let rs: Vec<_> = (0..10).map(|i| rec(i as f64, i as f64)).collect();
        let v = validate_partition(&rs, &masks(10)).unwrap();
        let night = v.get(Period::NightHoldout).unwrap();
        assert_eq!(night.slope, 1.0);
        assert!(!night.slope_violation);
        assert_eq!(night.negative_t_fraction, 0.0);
        assert!(v.get(Period::Flood).is_none());
    }

    #[test]
    fn doubled_prediction_violates() {
        let rs: Vec<_> = (0..10).map(|i| rec(i as f64, 2.0 * i as f64)).collect();
        let v = validate_partition(&rs, &masks(10)).unwrap();
        assert_eq!(v.get(Period::Winter).unwrap().slope, 2.0);
        assert!(v.get(Period::Winter).unwrap().slope_violation);
    }

    #[test]
    fn all_missing_target_warns() {
        let rs: Vec<_> = (0..4)
            .map(|_| PartitionRecord::new(utc(2020, 1, 1, 0, 0), None, Some(1.0), false))
            .collect();
        let v = validate_partition(&rs, &masks(4)).unwrap();
        assert!(v.periods.is_empty());
        assert_eq!(v.warnings.len(), 1);
    }
}
