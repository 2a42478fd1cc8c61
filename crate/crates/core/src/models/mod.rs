//! Regression engine: OLS, ridge, KNN, CART regression trees and
//! squared-error gradient boosting with per-feature gain accounting.
//!
//! Every fit is deterministic. Inputs are an `n × q` design matrix whose
//! columns follow the order of `feature_names`, and an `n`-vector target.

mod gbdt;
mod knn;
mod linear;
mod tree;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gbdt::fit_gbdt;
pub use knn::fit_knn;
pub use linear::{fit_linear, fit_ridge};
pub use tree::{fit_tree, Node, RegressionTree};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("design has {rows} rows but target has {targets}")]
    ShapeMismatch { rows: usize, targets: usize },
    #[error("expected {expected} feature columns, got {got}")]
    FeatureCount { expected: usize, got: usize },
    #[error("need more samples: have {n}, require {need}")]
    TooFewSamples { n: usize, need: usize },
    #[error("k = {k} exceeds training size {n}")]
    KTooLarge { k: usize, n: usize },
    #[error("non-finite value in training data")]
    NonFinite,
    #[error("invalid hyperparameter: {0}")]
    InvalidParam(String),
    #[error("gain importance is only defined for tree models, not `{0}`")]
    NotTreeModel(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RidgeParams {
    pub lambda: f64,
    /// Standardize features before penalizing; coefficients are always
    /// reported on the original scale.
    pub standardize: bool,
}

impl Default for RidgeParams {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            standardize: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnParams {
    pub k: usize,
}

impl Default for KnnParams {
    fn default() -> Self {
        Self { k: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeParams {
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            max_depth: None,
            min_samples_leaf: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtParams {
    pub n_trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub histogram_bins: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            learning_rate: 0.1,
            max_depth: 6,
            min_samples_leaf: 20,
            histogram_bins: 255,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Linear,
    Ridge(RidgeParams),
    Knn(KnnParams),
    Tree(TreeParams),
    Gbdt(GbdtParams),
}

impl ModelSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelSpec::Linear => "linear",
            ModelSpec::Ridge(_) => "ridge",
            ModelSpec::Knn(_) => "knn",
            ModelSpec::Tree(_) => "tree",
            ModelSpec::Gbdt(_) => "gbdt",
        }
    }

    pub fn is_tree_based(&self) -> bool {
        matches!(self, ModelSpec::Tree(_) | ModelSpec::Gbdt(_))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidParam(m.to_string()));
        match *self {
            ModelSpec::Linear => Ok(()),
            ModelSpec::Ridge(p) if !(p.lambda >= 0.0 && p.lambda.is_finite()) => {
                bad("ridge lambda must be finite and >= 0")
            }
            ModelSpec::Knn(p) if p.k == 0 => bad("knn k must be >= 1"),
            ModelSpec::Tree(p) if p.min_samples_leaf == 0 => bad("min_samples_leaf must be >= 1"),
            ModelSpec::Tree(TreeParams {
                max_depth: Some(0), ..
            }) => bad("tree max_depth must be >= 1"),
            ModelSpec::Gbdt(p) => {
                if p.min_samples_leaf == 0 {
                    bad("min_samples_leaf must be >= 1")
                } else if p.max_depth == 0 {
                    bad("gbdt max_depth must be >= 1")
                } else if !(0.0..=1.0).contains(&p.learning_rate) {
                    bad("learning_rate must be in [0, 1]")
                } else if p.histogram_bins < 2 {
                    bad("histogram_bins must be >= 2")
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

/// Fitted, family-specific parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum FittedParams {
    Linear {
        intercept: f64,
        coefficients: Vec<f64>,
    },
    Knn {
        k: usize,
        mean: Vec<f64>,
        /// Zero entries mark constant features, which contribute no distance.
        scale: Vec<f64>,
        /// Standardized training rows, row-major.
        train_x: Vec<Vec<f64>>,
        train_y: Vec<f64>,
    },
    Tree {
        tree: RegressionTree,
    },
    Gbdt {
        base: f64,
        learning_rate: f64,
        trees: Vec<RegressionTree>,
        /// Training RMSE after 0, 1, ..., n_trees boosting rounds.
        train_rmse: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: ModelSpec,
    pub feature_names: Vec<String>,
    pub params: FittedParams,
    /// Total split gain (SSE reduction) per feature; empty for non-tree models.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub gain_by_feature: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl TrainedModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Vec<f64>, ModelError> {
        if x.ncols() != self.feature_names.len() {
            return Err(ModelError::FeatureCount {
                expected: self.feature_names.len(),
                got: x.ncols(),
            });
        }
        let mut row = vec![0.0; x.ncols()];
        Ok((0..x.nrows())
            .map(|i| {
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = x[(i, j)];
                }
                self.predict_row(&row)
            })
            .collect())
    }

    /// Prediction for one record; `row` follows `feature_names` order.
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match &self.params {
            FittedParams::Linear {
                intercept,
                coefficients,
            } => coefficients
                .iter()
                .zip(row)
                .fold(*intercept, |acc, (w, x)| acc + w * x),
            FittedParams::Knn {
                k,
                mean,
                scale,
                train_x,
                train_y,
            } => knn::predict(*k, mean, scale, train_x, train_y, row),
            FittedParams::Tree { tree } => tree.predict_row(row),
            FittedParams::Gbdt {
                base,
                learning_rate,
                trees,
                ..
            } => trees
                .iter()
                .fold(*base, |acc, t| acc + learning_rate * t.predict_row(row)),
        }
    }

    /// Per-iteration training RMSE for boosted models.
    pub fn training_curve(&self) -> Option<&[f64]> {
        match &self.params {
            FittedParams::Gbdt { train_rmse, .. } => Some(train_rmse),
            _ => None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

pub(crate) fn check_inputs(x: &DMatrix<f64>, y: &[f64]) -> Result<(), ModelError> {
    if x.nrows() != y.len() {
        return Err(ModelError::ShapeMismatch {
            rows: x.nrows(),
            targets: y.len(),
        });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite);
    }
    Ok(())
}

/// Fit any model family from its spec.
pub fn fit(
    spec: &ModelSpec,
    feature_names: &[String],
    x: &DMatrix<f64>,
    y: &[f64],
) -> Result<TrainedModel, ModelError> {
    spec.validate()?;
    if x.ncols() != feature_names.len() {
        return Err(ModelError::FeatureCount {
            expected: feature_names.len(),
            got: x.ncols(),
        });
    }
    match spec {
        ModelSpec::Linear => fit_linear(feature_names, x, y),
        ModelSpec::Ridge(p) => fit_ridge(feature_names, x, y, p),
        ModelSpec::Knn(p) => fit_knn(feature_names, x, y, p.k),
        ModelSpec::Tree(p) => fit_tree(feature_names, x, y, p),
        ModelSpec::Gbdt(p) => fit_gbdt(feature_names, x, y, p),
    }
}

/// Accumulated split gain per feature, optionally normalized to sum to one.
///
/// A model without any split returns zeros in both modes.
pub fn gain_importance(
    model: &TrainedModel,
    normalize: bool,
) -> Result<BTreeMap<String, f64>, ModelError> {
    if !model.spec.is_tree_based() {
        return Err(ModelError::NotTreeModel(model.spec.kind()));
    }
    let total: f64 = model.gain_by_feature.values().sum();
    let mut out: BTreeMap<String, f64> = model
        .feature_names
        .iter()
        .map(|f| (f.clone(), model.gain_by_feature.get(f).copied().unwrap_or(0.0)))
        .collect();
    if normalize && total > 0.0 {
        for v in out.values_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Features that never split are left out.
pub(crate) fn gains_map(names: &[String], gains: &[f64]) -> BTreeMap<String, f64> {
    names
        .iter()
        .cloned()
        .zip(gains.iter().copied())
        .filter(|(_, g)| *g > 0.0)
        .collect()
}
