//! Cross-validation and the model-comparison grid.
//!
//! Folds are drawn from night training records only. Every fold model is
//! scored on the night holdout and on the whole winter and flood sets, and
//! a cell reports the fold mean of each metric.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::{FluxDataset, IngestError, TARGET};
use crate::metrics::{MetricError, MetricReport};
use crate::models::{self, ModelError, ModelSpec, TrainedModel};
use crate::periods::PeriodMasks;
use crate::preprocess::FeatureSet;
use crate::seed::derive_seed;

pub const DEFAULT_FOLDS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum HarnessError {
    #[error("fold count k = {k} must satisfy 2 <= k <= n = {n}")]
    BadFoldCount { k: usize, n: usize },
    #[error("fold plan covers {plan} records but {usable} night training records are usable")]
    PlanMismatch { plan: usize, usable: usize },
    #[error("site `{site}`: {source}")]
    Ingest {
        site: String,
        #[source]
        source: IngestError,
    },
    #[error("site `{site}`, model `{model}`: {source}")]
    Model {
        site: String,
        model: String,
        #[source]
        source: ModelError,
    },
    #[error("site `{site}`, model `{model}`, {period}: {source}")]
    Metric {
        site: String,
        model: String,
        period: Period,
        #[source]
        source: MetricError,
    },
    #[error("masks cover {masks} records but dataset has {records}")]
    MaskLength { masks: usize, records: usize },
    #[error("duplicate model label `{0}`")]
    DuplicateLabel(String),
    #[error("report has no cells to rank")]
    EmptyReport,
    #[error("unknown period `{0}` (expected night, winter or flood)")]
    UnknownPeriod(String),
    #[error("unknown metric `{0}` (expected adj_r2, r2 or rmse)")]
    UnknownMetric(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Period {
    NightHoldout,
    Winter,
    Flood,
}

impl Period {
    pub const ALL: [Period; 3] = [Period::NightHoldout, Period::Winter, Period::Flood];

    pub fn as_str(&self) -> &'static str {
        match self {
            Period::NightHoldout => "night",
            Period::Winter => "winter",
            Period::Flood => "flood",
        }
    }
}

impl fmt::Display for Period {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Period {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s.to_ascii_lowercase().as_str() {
            "night" | "night_holdout" | "holdout" => Ok(Period::NightHoldout),
            "winter" => Ok(Period::Winter),
            "flood" => Ok(Period::Flood),
            _ => Err(HarnessError::UnknownPeriod(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    AdjR2,
    R2,
    Rmse,
}

impl Metric {
    pub fn of(&self, m: &MetricReport) -> Option<f64> {
        match self {
            Metric::AdjR2 => m.adj_r2,
            Metric::R2 => Some(m.r2),
            Metric::Rmse => Some(m.rmse),
        }
    }

    fn higher_is_better(&self) -> bool {
        !matches!(self, Metric::Rmse)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::AdjR2 => "adj_r2",
            Metric::R2 => "r2",
            Metric::Rmse => "rmse",
        })
    }
}

impl FromStr for Metric {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, HarnessError> {
        match s.to_ascii_lowercase().as_str() {
            "adj_r2" | "adjr2" => Ok(Metric::AdjR2),
            "r2" => Ok(Metric::R2),
            "rmse" => Ok(Metric::Rmse),
            _ => Err(HarnessError::UnknownMetric(s.to_string())),
        }
    }
}

/// Fold index per record; fold sizes differ by at most one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n: usize,
    pub k: usize,
    pub seed: u64,
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }

    /// Positions held out by `fold`, ascending.
    pub fn test_positions(&self, fold: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn train_positions(&self, fold: usize) -> Vec<usize> {
        (0..self.n).filter(|&i| self.assignment[i] != fold).collect()
    }
}

pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<FoldPlan, HarnessError> {
    if k < 2 || k > n {
        return Err(HarnessError::BadFoldCount { k, n });
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut assignment = vec![0; n];
    let mut pos = 0;
    for fold in 0..k {
        let size = base + usize::from(fold < extra);
        for &i in &perm[pos..pos + size] {
            assignment[i] = fold;
        }
        pos += size;
    }
    Ok(FoldPlan {
        n,
        k,
        seed,
        assignment,
    })
}

/// A dataset together with its period masks.
#[derive(Debug, Clone)]
pub struct PreparedSite {
    pub dataset: FluxDataset,
    pub masks: PeriodMasks,
}

/// A model spec with a report label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSpec {
    pub name: String,
    #[serde(flatten)]
    pub spec: ModelSpec,
}

impl NamedSpec {
    pub fn new(name: impl Into<String>, spec: ModelSpec) -> Self {
        Self {
            name: name.into(),
            spec,
        }
    }
}

/// Record indices in `mask` whose target and every feature are present.
pub fn usable_rows(
    ds: &FluxDataset,
    features: &[String],
    mask: &[bool],
) -> Result<Vec<usize>, IngestError> {
    let target = ds.feature_index(TARGET)?;
    let idx: Vec<usize> = features
        .iter()
        .map(|f| ds.feature_index(f))
        .collect::<Result<_, _>>()?;
    Ok(ds
        .records()
        .iter()
        .enumerate()
        .filter(|(i, r)| {
            mask[*i]
                && r.values[target].is_some_and(f64::is_finite)
                && idx.iter().all(|&j| r.values[j].is_some_and(f64::is_finite))
        })
        .map(|(i, _)| i)
        .collect())
}

/// Design matrix and target for the given (usable) record indices.
pub fn design(
    ds: &FluxDataset,
    features: &[String],
    rows: &[usize],
) -> Result<(DMatrix<f64>, Vec<f64>), IngestError> {
    let target = ds.feature_index(TARGET)?;
    let idx: Vec<usize> = features
        .iter()
        .map(|f| ds.feature_index(f))
        .collect::<Result<_, _>>()?;
    let recs = ds.records();
    let x = DMatrix::from_fn(rows.len(), idx.len(), |r, c| {
        recs[rows[r]].values[idx[c]].unwrap_or(f64::NAN)
    });
    let y = rows
        .iter()
        .map(|&r| recs[r].values[target].unwrap_or(f64::NAN))
        .collect();
    Ok((x, y))
}

/// Fold plan over the usable night training records of a site.
pub fn site_fold_plan(
    site: &PreparedSite,
    features: &FeatureSet,
    k: usize,
    seed: u64,
) -> Result<FoldPlan, HarnessError> {
    let rows = usable_rows(&site.dataset, features.features(), &site.masks.night_train)
        .map_err(|source| ingest_err(&site.dataset, source))?;
    kfold_split(rows.len(), k, seed)
}

fn ingest_err(ds: &FluxDataset, source: IngestError) -> HarnessError {
    HarnessError::Ingest {
        site: ds.site_id().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodMetrics {
    pub night_holdout: MetricReport,
    /// Absent when the site has no usable records in the period.
    pub winter: Option<MetricReport>,
    pub flood: Option<MetricReport>,
}

impl PeriodMetrics {
    pub fn get(&self, p: Period) -> Option<&MetricReport> {
        match p {
            Period::NightHoldout => Some(&self.night_holdout),
            Period::Winter => self.winter.as_ref(),
            Period::Flood => self.flood.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub site_id: String,
    pub model: String,
    pub spec: ModelSpec,
    pub feature_set: String,
    pub n_features: usize,
    pub metrics: PeriodMetrics,
    pub wall_time_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Discarded {
    pub model: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cells: Vec<ExperimentCell>,
    pub discarded: Vec<Discarded>,
}

impl ExperimentReport {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    /// Zero every wall time, for byte-reproducible output.
    pub fn without_timing(mut self) -> Self {
        for c in &mut self.cells {
            c.wall_time_seconds = 0.0;
        }
        self
    }
}

/// Fit `spec` on the given usable rows.
pub fn fit_rows(
    ds: &FluxDataset,
    features: &[String],
    rows: &[usize],
    spec: &ModelSpec,
    label: &str,
) -> Result<TrainedModel, HarnessError> {
    let (x, y) = design(ds, features, rows).map_err(|e| ingest_err(ds, e))?;
    models::fit(spec, features, &x, &y).map_err(|source| HarnessError::Model {
        site: ds.site_id().to_string(),
        model: label.to_string(),
        source,
    })
}

struct EvalSet {
    period: Period,
    x: DMatrix<f64>,
    y: Vec<f64>,
}

/// K-fold CV of one (site, spec, feature set) cell.
pub fn cross_validate(
    site: &PreparedSite,
    features: &FeatureSet,
    spec: &NamedSpec,
    plan: &FoldPlan,
) -> Result<ExperimentCell, HarnessError> {
    let started = Instant::now();
    let ds = &site.dataset;
    let masks = &site.masks;
    if masks.len() != ds.len() {
        return Err(HarnessError::MaskLength {
            masks: masks.len(),
            records: ds.len(),
        });
    }
    let names = features.features();
    let usable = |m: &[bool]| usable_rows(ds, names, m).map_err(|e| ingest_err(ds, e));
    let train = usable(&masks.night_train)?;
    if train.len() != plan.n {
        return Err(HarnessError::PlanMismatch {
            plan: plan.n,
            usable: train.len(),
        });
    }
    let mut evals = Vec::new();
    for (period, mask) in [
        (Period::NightHoldout, &masks.night_holdout),
        (Period::Winter, &masks.winter),
        (Period::Flood, &masks.flood),
    ] {
        let rows = usable(mask)?;
        if rows.is_empty() && period != Period::NightHoldout {
            continue;
        }
        let (x, y) = design(ds, names, &rows).map_err(|e| ingest_err(ds, e))?;
        evals.push(EvalSet { period, x, y });
    }
    let mut per_fold: Vec<Vec<MetricReport>> = vec![Vec::new(); evals.len()];
    for fold in 0..plan.k {
        let rows: Vec<usize> = plan.train_positions(fold).iter().map(|&p| train[p]).collect();
        let model = fit_rows(ds, names, &rows, &spec.spec, &spec.name)?;
        for (e, out) in evals.iter().zip(per_fold.iter_mut()) {
            let pred = model.predict(&e.x).map_err(|source| HarnessError::Model {
                site: ds.site_id().to_string(),
                model: spec.name.clone(),
                source,
            })?;
            match MetricReport::compute(&e.y, &pred, names.len()) {
                Ok(m) => out.push(m),
                Err(source) if e.period == Period::NightHoldout => {
                    return Err(HarnessError::Metric {
                        site: ds.site_id().to_string(),
                        model: spec.name.clone(),
                        period: e.period,
                        source,
                    })
                }
                Err(err) => log::warn!("{}: {} metrics unavailable: {err}", ds.site_id(), e.period),
            }
        }
    }
    let mut night = None;
    let mut winter = None;
    let mut flood = None;
    for (e, reports) in evals.iter().zip(&per_fold) {
        let mean = MetricReport::mean_of(reports);
        match e.period {
            Period::NightHoldout => night = mean,
            Period::Winter => winter = mean,
            Period::Flood => flood = mean,
        }
    }
    Ok(ExperimentCell {
        site_id: ds.site_id().to_string(),
        model: spec.name.clone(),
        spec: spec.spec,
        feature_set: features.name().to_string(),
        n_features: names.len(),
        metrics: PeriodMetrics {
            night_holdout: night.expect("holdout metrics computed for every fold"),
            winter,
            flood,
        },
        wall_time_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Settings shared by every cell of a comparison grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvSettings {
    pub k: usize,
    pub seed: u64,
}

impl Default for CvSettings {
    fn default() -> Self {
        Self {
            k: DEFAULT_FOLDS,
            seed: 0,
        }
    }
}

/// Seed of the fold plan for one (site, feature set); all specs share it.
pub fn plan_seed(root: u64, site: &str, feature_set: &str) -> u64 {
    derive_seed(root, &["cv", site, feature_set])
}

/// Evaluate every (site, feature set, spec) cell and apply the discard rule:
/// a spec with negative night-holdout R² anywhere is dropped entirely.
pub fn compare_models(
    sites: &[PreparedSite],
    specs: &[NamedSpec],
    feature_sets: &[FeatureSet],
    cv: CvSettings,
) -> Result<ExperimentReport, HarnessError> {
    let mut seen = std::collections::HashSet::new();
    for s in specs {
        if !seen.insert(s.name.as_str()) {
            return Err(HarnessError::DuplicateLabel(s.name.clone()));
        }
    }
    let mut plans = Vec::new();
    for site in sites {
        for fs in feature_sets {
            let seed = plan_seed(cv.seed, site.dataset.site_id(), fs.name());
            plans.push(site_fold_plan(site, fs, cv.k, seed)?);
        }
    }
    let grid: Vec<(usize, usize, usize)> = (0..sites.len())
        .flat_map(|s| (0..feature_sets.len()).flat_map(move |f| (0..specs.len()).map(move |m| (s, f, m))))
        .collect();
    let cells: Vec<ExperimentCell> = grid
        .par_iter()
        .map(|&(s, f, m)| {
            let plan = &plans[s * feature_sets.len() + f];
            cross_validate(&sites[s], &feature_sets[f], &specs[m], plan)
        })
        .collect::<Result<_, _>>()?;
    let mut discarded: Vec<Discarded> = Vec::new();
    for c in &cells {
        let r2 = c.metrics.night_holdout.r2;
        if r2 < 0.0 && !discarded.iter().any(|d| d.model == c.model) {
            discarded.push(Discarded {
                model: c.model.clone(),
                reason: format!(
                    "negative night-holdout R² ({r2:.4}) at site {} with {}",
                    c.site_id, c.feature_set
                ),
            });
        }
    }
    for d in &discarded {
        log::info!("discarding {}: {}", d.model, d.reason);
    }
    let cells = cells
        .into_iter()
        .filter(|c| !discarded.iter().any(|d| d.model == c.model))
        .collect();
    Ok(ExperimentReport { cells, discarded })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCell {
    pub site_id: String,
    pub model: String,
    pub spec: ModelSpec,
    pub feature_set: String,
    pub value: f64,
    pub wall_time_seconds: f64,
}

/// Order cells best-first on one period metric; equal values go to the
/// faster cell, then by site, model and feature-set name. Cells lacking the
/// metric are left out.
pub fn rank_models(
    report: &ExperimentReport,
    period: Period,
    metric: Metric,
) -> Result<Vec<RankedCell>, HarnessError> {
    if report.cells.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    let mut out: Vec<RankedCell> = report
        .cells
        .iter()
        .filter_map(|c| {
            let value = metric.of(c.metrics.get(period)?)?;
            Some(RankedCell {
                site_id: c.site_id.clone(),
                model: c.model.clone(),
                spec: c.spec,
                feature_set: c.feature_set.clone(),
                value,
                wall_time_seconds: c.wall_time_seconds,
            })
        })
        .collect();
    let desc = metric.higher_is_better();
    out.sort_by(|a, b| {
        let by_value = if desc {
            b.value.total_cmp(&a.value)
        } else {
            a.value.total_cmp(&b.value)
        };
        by_value
            .then(a.wall_time_seconds.total_cmp(&b.wall_time_seconds))
            .then_with(|| a.site_id.cmp(&b.site_id))
            .then_with(|| a.model.cmp(&b.model))
            .then_with(|| a.feature_set.cmp(&b.feature_set))
    });
    Ok(out)
}
