//! Recursive feature elimination by gain importance, the relative-drop
//! stopping rule, cross-site merging and importance classes.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{
    cross_validate, fit_rows, usable_rows, FoldPlan, HarnessError, NamedSpec, PeriodMetrics,
    PreparedSite,
};
use crate::models::{gain_importance, ModelError};
use crate::preprocess::{FeatureSet, PrepError, SelectedFeatures, F_RFE};

pub const DEFAULT_TOLERANCE: f64 = 0.01;
pub const HIGH_THRESHOLD: f64 = 0.2;
/// 0.05 less its ±10% band.
pub const SIGNIFICANT_THRESHOLD: f64 = 0.045;

/// Guard so a drop of exactly the tolerance never triggers.
const DROP_EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum RfeError {
    #[error("feature elimination needs a tree-based model, not `{0}`")]
    NotTreeModel(&'static str),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Prep(#[from] PrepError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("trace is empty")]
    EmptyTrace,
    #[error("tolerance {0} must lie in (0, 1)")]
    BadTolerance(f64),
    #[error("stopping rule is undefined on a negative baseline (initial night-holdout R² = {0})")]
    NegativeBaseline(f64),
    #[error("merging needs at least two site sets, got {0}")]
    TooFewSets(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfeIteration {
    pub feature_set: Vec<String>,
    /// Absent on the final single-feature iteration.
    pub removed_feature: Option<String>,
    pub normalized_importance: BTreeMap<String, f64>,
    pub cv_metrics: PeriodMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RfeTrace {
    pub site_id: String,
    pub model: String,
    pub iterations: Vec<RfeIteration>,
    pub optimal_set: FeatureSet,
}

impl RfeTrace {
    pub fn night_r2(&self) -> Vec<f64> {
        self.iterations
            .iter()
            .map(|it| it.cv_metrics.night_holdout.r2)
            .collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

/// Least important feature; ties go to the lexicographically smallest name.
fn least_important(importance: &BTreeMap<String, f64>) -> Option<String> {
    // BTreeMap iterates in name order, so strict `<` keeps the first name.
    let mut best: Option<(&String, f64)> = None;
    for (f, &v) in importance {
        if best.is_none_or(|(_, b)| v < b) {
            best = Some((f, v));
        }
    }
    best.map(|(f, _)| f.clone())
}

/// Eliminate features one at a time down to a single feature.
///
/// Each iteration cross-validates the current set on `plan` and ranks the
/// features by the gain of one model fit on all night training records.
pub fn rfe_site(
    site: &PreparedSite,
    start_set: &FeatureSet,
    spec: &NamedSpec,
    plan: &FoldPlan,
    tolerance: f64,
) -> Result<RfeTrace, RfeError> {
    if !spec.spec.is_tree_based() {
        return Err(RfeError::NotTreeModel(spec.spec.kind()));
    }
    let ds = &site.dataset;
    let mut current = start_set.clone();
    let mut iterations = Vec::with_capacity(start_set.len());
    loop {
        let cell = cross_validate(site, &current, spec, plan)?;
        let rows = usable_rows(ds, current.features(), &site.masks.night_train).map_err(|source| {
            HarnessError::Ingest {
                site: ds.site_id().to_string(),
                source,
            }
        })?;
        let model = fit_rows(ds, current.features(), &rows, &spec.spec, &spec.name)?;
        let importance = gain_importance(&model, true)?;
        let removed = (current.len() > 1)
            .then(|| least_important(&importance))
            .flatten();
        log::debug!(
            "{} rfe |F| = {} R² = {:.4} removing {:?}",
            ds.site_id(),
            current.len(),
            cell.metrics.night_holdout.r2,
            removed
        );
        iterations.push(RfeIteration {
            feature_set: current.features().to_vec(),
            removed_feature: removed.clone(),
            normalized_importance: importance,
            cv_metrics: cell.metrics,
        });
        match removed {
            Some(f) => current = current.without(&f)?,
            None => break,
        }
    }
    let mut trace = RfeTrace {
        site_id: ds.site_id().to_string(),
        model: spec.name.clone(),
        iterations,
        optimal_set: start_set.clone(),
    };
    trace.optimal_set = select_optimal(&trace, tolerance)?;
    Ok(trace)
}

/// Per-site traces, computed in parallel. `plans[i]` belongs to `sites[i]`.
pub fn rfe_sites(
    sites: &[PreparedSite],
    plans: &[FoldPlan],
    start_set: &FeatureSet,
    spec: &NamedSpec,
    tolerance: f64,
) -> Result<Vec<RfeTrace>, RfeError> {
    sites
        .par_iter()
        .zip(plans)
        .map(|(s, p)| rfe_site(s, start_set, spec, p, tolerance))
        .collect()
}

/// The set preceding the first night-holdout R² drop larger than
/// `tolerance` (relative to the previous iteration); the smallest set when
/// no such drop occurs.
pub fn select_optimal(trace: &RfeTrace, tolerance: f64) -> Result<FeatureSet, RfeError> {
    if !(tolerance > 0.0 && tolerance < 1.0) {
        return Err(RfeError::BadTolerance(tolerance));
    }
    let r2 = trace.night_r2();
    let first = *r2.first().ok_or(RfeError::EmptyTrace)?;
    if first < 0.0 {
        return Err(RfeError::NegativeBaseline(first));
    }
    let mut pick = r2.len() - 1;
    for i in 1..r2.len() {
        let drop = (r2[i - 1] - r2[i]) / r2[i - 1].abs();
        if drop > tolerance + DROP_EPS {
            pick = i - 1;
            break;
        }
    }
    let name = format!("RFE_{}", trace.site_id);
    Ok(FeatureSet::new(name, trace.iterations[pick].feature_set.clone())?)
}

/// Features present in at least two sites' optimal sets, most shared first
/// and then by name.
pub fn merge_sites(sets: &[FeatureSet]) -> Result<SelectedFeatures, RfeError> {
    if sets.len() < 2 {
        return Err(RfeError::TooFewSets(sets.len()));
    }
    let mut count: BTreeMap<&str, usize> = BTreeMap::new();
    for s in sets {
        for f in s.features() {
            *count.entry(f.as_str()).or_default() += 1;
        }
    }
    let mut kept: Vec<(&str, usize)> = count.into_iter().filter(|&(_, c)| c >= 2).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let features: Vec<String> = kept.into_iter().map(|(f, _)| f.to_string()).collect();
    let warning = features.is_empty().then(|| {
        let msg = format!("no feature is shared by two or more sites; {F_RFE} is empty");
        log::warn!("{msg}");
        msg
    });
    Ok(SelectedFeatures { features, warning })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Importance {
    High,
    Significant,
    Minor,
}

impl Importance {
    pub fn of(value: f64) -> Self {
        if value >= HIGH_THRESHOLD {
            Importance::High
        } else if value >= SIGNIFICANT_THRESHOLD {
            Importance::Significant
        } else {
            Importance::Minor
        }
    }
}

/// Classify normalized importances. A total away from one is only logged,
/// since published tables are rounded.
pub fn classify_importance(normalized: &BTreeMap<String, f64>) -> BTreeMap<String, Importance> {
    let total: f64 = normalized.values().sum();
    if (total - 1.0).abs() > 1e-6 {
        log::warn!("importances sum to {total}, not 1");
    }
    normalized
        .iter()
        .map(|(f, &v)| (f.clone(), Importance::of(v)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::PeriodMetrics;
    use crate::metrics::MetricReport;

    fn set(name: &str, fs: &[&str]) -> FeatureSet {
        FeatureSet::new(name, fs.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    fn metrics(r2: f64) -> PeriodMetrics {
        PeriodMetrics {
            night_holdout: MetricReport {
                r2,
                adj_r2: Some(r2),
                rmse: 0.0,
                slope: 1.0,
                intercept: 0.0,
                n_samples: 100,
                n_features: 1,
                slope_violation: false,
            },
            winter: None,
            flood: None,
        }
    }

    /// Trace over features f1..fn with the given R² per iteration.
    fn trace(r2: &[f64]) -> RfeTrace {
        let n = r2.len();
        let iterations = r2
            .iter()
            .enumerate()
            .map(|(i, &r)| RfeIteration {
                feature_set: (1..=n - i).map(|j| format!("f{j}")).collect(),
                removed_feature: (i + 1 < n).then(|| format!("f{}", n - i)),
                normalized_importance: BTreeMap::new(),
                cv_metrics: metrics(r),
            })
            .collect();
        RfeTrace {
            site_id: "S".into(),
            model: "gbdt".into(),
            iterations,
            optimal_set: set("x", &["f1"]),
        }
    }

    #[test]
    fn hand_walked_trace() {
        let t = trace(&[0.900, 0.899, 0.895, 0.800, 0.600]);
        assert_eq!(select_optimal(&t, 0.01).unwrap().len(), 3);
    }

    #[test]
    fn constant_trace_keeps_smallest() {
        let t = trace(&[0.8; 5]);
        assert_eq!(select_optimal(&t, 0.01).unwrap().len(), 1);
    }

    #[test]
    fn exact_tolerance_drop_does_not_trigger() {
        let t = trace(&[0.9, 0.891]);
        assert_eq!(select_optimal(&t, 0.01).unwrap().len(), 1);
        let t = trace(&[0.5, 0.495]);
        assert_eq!(select_optimal(&t, 0.01).unwrap().len(), 1);
    }

    #[test]
    fn negative_baseline_rejected() {
        assert_eq!(select_optimal(&trace(&[-0.1, 0.5]), 0.01), Err(RfeError::NegativeBaseline(-0.1)));
        assert!(select_optimal(&trace(&[0.5]), 0.0).is_err());
    }

    #[test]
    fn merge_fixture() {
        let sets = [set("a", &["A", "B", "C"]), set("b", &["A", "C", "D"]), set("c", &["D", "E"]), set("d", &["B"])];
        let m = merge_sites(&sets).unwrap();
        assert_eq!(m.features, vec!["A", "B", "C", "D"]);
        assert!(m.warning.is_none());
    }

    #[test]
    fn merge_identical_sets() {
        let s = set("a", &["x", "y"]);
        assert_eq!(merge_sites(&[s.clone(), s.clone(), s]).unwrap().features, vec!["x", "y"]);
    }

    #[test]
    fn merge_disjoint_sets_warns() {
        let m = merge_sites(&[set("a", &["x"]), set("b", &["y"])]).unwrap();
        assert!(m.features.is_empty());
        assert!(m.warning.is_some());
        assert!(merge_sites(&[set("a", &["x"])]).is_err());
    }

    #[test]
    fn classification_thresholds() {
        let m: BTreeMap<String, f64> = [("H", 0.440), ("RH", 0.047), ("WD", 0.010), ("edge", 0.2), ("low", 0.045)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        let c = classify_importance(&m);
        assert_eq!(c["H"], Importance::High);
        assert_eq!(c["RH"], Importance::Significant);
        assert_eq!(c["WD"], Importance::Minor);
        assert_eq!(c["edge"], Importance::High);
        assert_eq!(c["low"], Importance::Significant);
    }

    #[test]
    fn least_important_ties_by_name() {
        let m: BTreeMap<String, f64> = [("b", 0.0), ("a", 0.0), ("c", 1.0)]
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect();
        assert_eq!(least_important(&m).as_deref(), Some("a"));
    }
}
