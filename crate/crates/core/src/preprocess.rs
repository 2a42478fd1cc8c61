//! Feature engineering ahead of model building: completeness filtering,
//! depth-profile consolidation, gap filling, correlation screening and the
//! construction of the expert (`F_E`) and screened (`F_25`) feature sets.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use chrono::{Datelike, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{completeness, FluxDataset, IngestError, TARGET};
use crate::periods::solar_zenith;

#[derive(Debug, Error, PartialEq)]
pub enum PrepError {
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("feature `{0}` has no present values to impute from")]
    AllMissing(String),
    #[error("feature `{0}` still has missing values")]
    HasMissing(String),
    #[error("target `{0}` has zero variance")]
    ConstantTarget(String),
    #[error("feature set `{0}` is empty")]
    EmptyFeatureSet(String),
    #[error("feature set `{set}` lists `{feature}` twice")]
    DuplicateFeature { set: String, feature: String },
    #[error("feature set `{0}` contains the target `{TARGET}`")]
    ContainsTarget(String),
    #[error("site `{site}` lacks expert feature `{feature}`")]
    MissingExpertFeature { site: String, feature: String },
    #[error("depth group `{0}` is empty")]
    EmptyGroup(String),
    #[error("need coordinates to derive zenith for site `{0}`")]
    MissingCoordinates(String),
    #[error("feature set file: {0}")]
    Format(String),
}

/// Name of the expert feature set.
pub const F_E: &str = "F_E";
/// Name of the expert set extended with cross-site screened features.
pub const F_25: &str = "F_25";
/// Name of the cross-site merged RFE set.
pub const F_RFE: &str = "F_RFE";

/// The eleven expert features: seven domain drivers, Reichstein ecosystem
/// respiration, and three calendar features.
pub const DEFAULT_EXPERT_FEATURES: [&str; 11] = [
    "VPD",
    "GCC",
    "u*",
    "TA",
    "RNET",
    "WT",
    "H",
    "ER_Reichstein",
    "year",
    "month",
    "DOY",
];

/// A named, ordered, duplicate-free list of predictor names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawFeatureSet")]
pub struct FeatureSet {
    name: String,
    features: Vec<String>,
}

#[derive(Deserialize)]
struct RawFeatureSet {
    name: String,
    features: Vec<String>,
}

impl TryFrom<RawFeatureSet> for FeatureSet {
    type Error = PrepError;
    fn try_from(raw: RawFeatureSet) -> Result<Self, PrepError> {
        FeatureSet::new(raw.name, raw.features)
    }
}

impl FeatureSet {
    pub fn new(name: impl Into<String>, features: Vec<String>) -> Result<Self, PrepError> {
        let name = name.into();
        if features.is_empty() {
            return Err(PrepError::EmptyFeatureSet(name));
        }
        let mut seen = HashSet::new();
        for f in &features {
            if f == TARGET {
                return Err(PrepError::ContainsTarget(name));
            }
            if !seen.insert(f.as_str()) {
                return Err(PrepError::DuplicateFeature {
                    set: name,
                    feature: f.clone(),
                });
            }
        }
        Ok(Self { name, features })
    }

    pub fn expert_default() -> Self {
        Self::new(F_E, DEFAULT_EXPERT_FEATURES.iter().map(|s| s.to_string()).collect())
            .expect("valid default")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn contains(&self, feature: &str) -> bool {
        self.features.iter().any(|f| f == feature)
    }

    /// Same set minus one feature. Fails if that would leave it empty.
    pub fn without(&self, feature: &str) -> Result<Self, PrepError> {
        Self::new(
            self.name.clone(),
            self.features.iter().filter(|f| *f != feature).cloned().collect(),
        )
    }

    pub fn renamed(&self, name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            features: self.features.clone(),
        }
    }
}

/// Write feature-set definitions as a JSON array of `{name, features}`.
pub fn write_feature_sets<W: Write>(sets: &[FeatureSet], out: W) -> Result<(), PrepError> {
    serde_json::to_writer_pretty(out, sets).map_err(|e| PrepError::Format(e.to_string()))
}

pub fn read_feature_sets<R: Read>(input: R) -> Result<Vec<FeatureSet>, PrepError> {
    serde_json::from_reader(input).map_err(|e| PrepError::Format(e.to_string()))
}

/// Features whose completeness is at least `threshold`.
pub fn filter_by_completeness(ds: &FluxDataset, threshold: f64) -> Vec<String> {
    ds.schema()
        .iter()
        .filter(|f| completeness(ds, f).map(|c| c >= threshold).unwrap_or(false))
        .cloned()
        .collect()
}

/// Replace a group of depth-resolved sensors with their per-record mean.
pub fn consolidate_depth_profiles(
    ds: FluxDataset,
    group: &[String],
    out_name: &str,
) -> Result<FluxDataset, PrepError> {
    if group.is_empty() {
        return Err(PrepError::EmptyGroup(out_name.to_string()));
    }
    let idx = group
        .iter()
        .map(|g| ds.feature_index(g))
        .collect::<Result<Vec<_>, _>>()?;
    let values: Vec<Option<f64>> = ds
        .records()
        .iter()
        .map(|r| {
            let present: Vec<f64> = idx.iter().filter_map(|&j| r.values[j]).collect();
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
        })
        .collect();
    let removed: Vec<String> = group.iter().filter(|g| *g != out_name).cloned().collect();
    Ok(ds.without(&removed)?.with_column(out_name, values, None)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImputeStrategy {
    #[default]
    Mean,
    Linear,
}

/// Fill missing values of one feature. Present values are never altered.
///
/// `Linear` interpolates interior gaps against time and holds the nearest
/// present value across leading and trailing gaps.
pub fn impute(
    ds: FluxDataset,
    feature: &str,
    strategy: ImputeStrategy,
) -> Result<FluxDataset, PrepError> {
    let col = ds.column(feature)?;
    let present: Vec<(usize, f64)> = col
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|x| (i, x)))
        .collect();
    if present.is_empty() {
        return Err(PrepError::AllMissing(feature.to_string()));
    }
    let mut flags = ds.imputed_flags(feature);
    let filled: Vec<Option<f64>> = match strategy {
        ImputeStrategy::Mean => {
            let mean = present.iter().map(|(_, x)| x).sum::<f64>() / present.len() as f64;
            col.iter().map(|v| Some(v.unwrap_or(mean))).collect()
        }
        ImputeStrategy::Linear => {
            let t: Vec<f64> = ds
                .records()
                .iter()
                .map(|r| r.timestamp.timestamp() as f64)
                .collect();
            let mut out = col.clone();
            let (first_i, first_x) = present[0];
            let (last_i, last_x) = present[present.len() - 1];
            for v in out.iter_mut().take(first_i) {
                *v = Some(first_x);
            }
            for v in out.iter_mut().skip(last_i + 1) {
                *v = Some(last_x);
            }
            for w in present.windows(2) {
                let (i0, x0) = w[0];
                let (i1, x1) = w[1];
                for (k, slot) in out.iter_mut().enumerate().take(i1).skip(i0 + 1) {
                    let frac = (t[k] - t[i0]) / (t[i1] - t[i0]);
                    *slot = Some(x0 + frac * (x1 - x0));
                }
            }
            out
        }
    };
    for (flag, v) in flags.iter_mut().zip(&col) {
        *flag |= v.is_none();
    }
    Ok(ds.with_column(feature, filled, Some(flags))?)
}

/// Append calendar features `year`, `month`, `DOY`, `time` (local hour of day)
/// and `ze` (solar zenith, degrees). Existing columns of those names are kept.
pub fn derive_time_features(ds: FluxDataset) -> Result<FluxDataset, PrepError> {
    let meta = ds.meta().clone();
    let locals: Vec<_> = ds.records().iter().map(|r| meta.local(r.timestamp)).collect();
    let mut ds = ds;
    type Calendar = fn(&chrono::NaiveDateTime) -> f64;
    let calendar: [(&str, Calendar); 4] = [
        ("year", |t| t.year() as f64),
        ("month", |t| t.month() as f64),
        ("DOY", |t| t.ordinal() as f64),
        ("time", |t| t.hour() as f64 + t.minute() as f64 / 60.0),
    ];
    for (name, f) in calendar.iter() {
        if !ds.has_feature(name) {
            let col = locals.iter().map(|t| Some(f(t))).collect();
            ds = ds.with_column(name, col, None)?;
        }
    }
    if !ds.has_feature("ze") {
        let (lat, lon) = match (meta.latitude, meta.longitude) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(PrepError::MissingCoordinates(ds.site_id().to_string())),
        };
        let col = ds
            .records()
            .iter()
            .map(|r| Some(solar_zenith(r.timestamp, lat, lon)))
            .collect();
        ds = ds.with_column("ze", col, None)?;
    }
    Ok(ds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub feature: String,
    /// Signed Pearson correlation with the target.
    pub r: f64,
}

/// Candidates ordered by descending |r|; ties by feature name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRanking {
    pub site_id: String,
    pub entries: Vec<CorrelationEntry>,
}

impl CorrelationRanking {
    pub fn features(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.feature.as_str())
    }

    /// Ranking with some features removed, order otherwise preserved.
    pub fn excluding(&self, drop: &[String]) -> Self {
        Self {
            site_id: self.site_id.clone(),
            entries: self
                .entries
                .iter()
                .filter(|e| !drop.contains(&e.feature))
                .cloned()
                .collect(),
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Two-pass Pearson correlation. Returns `None` if either side has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

fn dense(ds: &FluxDataset, name: &str) -> Result<Vec<f64>, PrepError> {
    ds.column(name)?
        .into_iter()
        .map(|v| v.ok_or_else(|| PrepError::HasMissing(name.to_string())))
        .collect()
}

/// Rank every non-target feature by absolute correlation with `target`.
pub fn correlation_rank(ds: &FluxDataset, target: &str) -> Result<CorrelationRanking, PrepError> {
    let y = dense(ds, target)?;
    if pearson(&y, &y).is_none() {
        return Err(PrepError::ConstantTarget(target.to_string()));
    }
    let mut entries = Vec::new();
    for f in ds.schema().iter().filter(|f| *f != target) {
        let x = dense(ds, f)?;
        entries.push(CorrelationEntry {
            feature: f.clone(),
            r: pearson(&x, &y).unwrap_or(0.0),
        });
    }
    entries.sort_by(|a, b| {
        b.r.abs()
            .total_cmp(&a.r.abs())
            .then_with(|| a.feature.cmp(&b.feature))
    });
    Ok(CorrelationRanking {
        site_id: ds.site_id().to_string(),
        entries,
    })
}

/// Features selected by a cross-site rule, with a warning when the rule
/// produced fewer than requested (or none).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedFeatures {
    pub features: Vec<String>,
    pub warning: Option<String>,
}

/// Features in the top `top_n` of every site, ordered by mean rank
/// (ties by name), truncated to `target_count`.
pub fn cross_site_common_features(
    rankings: &[CorrelationRanking],
    top_n: usize,
    target_count: usize,
) -> SelectedFeatures {
    let tops: Vec<Vec<&str>> = rankings
        .iter()
        .map(|r| r.features().take(top_n).collect())
        .collect();
    let mut common: Vec<(f64, &str)> = Vec::new();
    if let Some(first) = tops.first() {
        for f in first {
            let ranks: Option<Vec<usize>> = tops
                .iter()
                .map(|t| t.iter().position(|g| g == f))
                .collect();
            if let Some(ranks) = ranks {
                let mean_rank = ranks.iter().sum::<usize>() as f64 / ranks.len() as f64;
                common.push((mean_rank, f));
            }
        }
    }
    common.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let mut features: Vec<String> = common.iter().map(|(_, f)| f.to_string()).collect();
    let warning = if features.len() < target_count {
        let w = format!(
            "only {} features common to the top {} of all {} sites (wanted {})",
            features.len(),
            top_n,
            rankings.len(),
            target_count
        );
        log::warn!("{w}");
        Some(w)
    } else {
        features.truncate(target_count);
        None
    };
    SelectedFeatures { features, warning }
}

/// `expert ∪ screened`, expert order first, duplicates dropped.
pub fn union_feature_sets(
    name: &str,
    expert: &FeatureSet,
    screened: &[String],
) -> Result<FeatureSet, PrepError> {
    let mut out: Vec<String> = expert.features().to_vec();
    for f in screened {
        if !out.contains(f) && f != TARGET {
            out.push(f.clone());
        }
    }
    FeatureSet::new(name, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSetConfig {
    pub expert: Vec<String>,
    pub top_n: usize,
    pub target_count: usize,
}

impl Default for FeatureSetConfig {
    fn default() -> Self {
        Self {
            expert: DEFAULT_EXPERT_FEATURES.iter().map(|s| s.to_string()).collect(),
            top_n: 50,
            target_count: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltFeatureSets {
    pub expert: FeatureSet,
    pub screened: FeatureSet,
    pub rankings: Vec<CorrelationRanking>,
    pub common: SelectedFeatures,
}

/// Build `F_E` and `F_25` over prepared (fully imputed) site datasets.
///
/// Screening ranks only candidates outside `F_E`, so the screened additions
/// are new features. Only features present at every site are candidates.
pub fn build_feature_sets(
    sites: &[FluxDataset],
    config: &FeatureSetConfig,
) -> Result<BuiltFeatureSets, PrepError> {
    let expert = FeatureSet::new(F_E, config.expert.clone())?;
    for ds in sites {
        for f in expert.features() {
            if !ds.has_feature(f) {
                return Err(PrepError::MissingExpertFeature {
                    site: ds.site_id().to_string(),
                    feature: f.clone(),
                });
            }
        }
    }
    let rankings = sites
        .iter()
        .map(|ds| Ok(correlation_rank(ds, TARGET)?.excluding(expert.features())))
        .collect::<Result<Vec<_>, PrepError>>()?;
    let common = if rankings.len() >= 2 {
        cross_site_common_features(&rankings, config.top_n, config.target_count)
    } else {
        // Single site: its own top list stands in for the intersection.
        let mut f: Vec<String> = rankings
            .first()
            .map(|r| r.features().take(config.top_n.min(config.target_count)).map(String::from).collect())
            .unwrap_or_default();
        f.truncate(config.target_count);
        SelectedFeatures {
            features: f,
            warning: Some("single site: no cross-site intersection applied".into()),
        }
    };
    let screened = union_feature_sets(F_25, &expert, &common.features)?;
    Ok(BuiltFeatureSets {
        expert,
        screened,
        rankings,
        common,
    })
}

/// Total number of imputed values per feature.
pub fn imputation_counts(ds: &FluxDataset) -> BTreeMap<String, usize> {
    ds.schema()
        .iter()
        .map(|f| (f.clone(), ds.imputed_flags(f).iter().filter(|&&b| b).count()))
        .collect()
}
