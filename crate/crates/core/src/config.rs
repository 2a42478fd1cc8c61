//! Run configuration, read from a TOML document.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::harness::{Metric, NamedSpec, Period, DEFAULT_FOLDS};
use crate::ingest::{SchemaConfig, SiteMeta};
use crate::models::{GbdtParams, KnnParams, ModelSpec, RidgeParams, TreeParams};
use crate::preprocess::{FeatureSetConfig, ImputeStrategy};
use crate::rfe::DEFAULT_TOLERANCE;
use crate::synth::{SyntheticSpec, WATER_TEMP_GROUP, WATER_TEMP_MEAN};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteConfig {
    pub id: String,
    /// Relative paths resolve against the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<PathBuf>,
    /// Generate the site instead of reading it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub utc_offset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flood_start: Option<NaiveDate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub greenup_date: Option<NaiveDate>,
    /// Output name → depth-resolved input columns averaged into it.
    #[serde(default)]
    pub depth_groups: BTreeMap<String, Vec<String>>,
    #[serde(default)]
    pub schema: SchemaConfig,
}

impl SiteConfig {
    /// Site metadata; explicit fields override the synthetic spec's.
    pub fn meta(&self) -> SiteMeta {
        let base = self.synthetic.as_ref().map(|s| s.meta()).unwrap_or_default();
        SiteMeta {
            latitude: self.lat.or(base.latitude),
            longitude: self.lon.or(base.longitude),
            utc_offset: self.utc_offset.unwrap_or(base.utc_offset),
            flood_start: self.flood_start.or(base.flood_start),
            greenup_date: self.greenup_date.or(base.greenup_date),
        }
    }

    /// Synthetic spec carrying this site's id and metadata overrides.
    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        let mut s = self.synthetic.clone()?;
        s.site_id = self.id.clone();
        let m = self.meta();
        s.latitude = m.latitude.unwrap_or(s.latitude);
        s.longitude = m.longitude.unwrap_or(s.longitude);
        s.utc_offset = m.utc_offset;
        s.flood_start = m.flood_start;
        s.greenup_date = m.greenup_date;
        Some(s)
    }

    /// Depth groups, defaulting to the water temperature pair for synthetic sites.
    pub fn depth_groups(&self) -> BTreeMap<String, Vec<String>> {
        if self.depth_groups.is_empty() && self.synthetic.is_some() {
            return BTreeMap::from([(
                WATER_TEMP_MEAN.to_string(),
                WATER_TEMP_GROUP.iter().map(|s| s.to_string()).collect(),
            )]);
        }
        self.depth_groups.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeaturesConfig {
    /// Features below this fraction of present values are dropped.
    pub completeness_threshold: f64,
    pub impute: ImputeStrategy,
    /// Also gap-fill the target; off by default so models only see
    /// measured ET.
    pub impute_target: bool,
    #[serde(flatten)]
    pub sets: FeatureSetConfig,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        Self {
            completeness_threshold: 0.8,
            impute: ImputeStrategy::Mean,
            impute_target: false,
            sets: FeatureSetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub k: usize,
    pub seed: u64,
    pub holdout_fraction: f64,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_FOLDS,
            seed: 0,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RfeConfig {
    pub tolerance: f64,
    pub spec: NamedSpec,
    /// Feature set elimination starts from.
    pub start_set: String,
}

impl Default for RfeConfig {
    fn default() -> Self {
        Self {
            tolerance: DEFAULT_TOLERANCE,
            spec: NamedSpec::new("gbdt", ModelSpec::Gbdt(GbdtParams::default())),
            start_set: crate::preprocess::F_25.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Write measured wall times. Disable for byte-reproducible reports.
    pub include_wall_time: bool,
    /// Period and metric that choose the partitioning model.
    pub rank_period: Period,
    pub rank_metric: Metric,
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            include_wall_time: true,
            rank_period: Period::NightHoldout,
            rank_metric: Metric::AdjR2,
        }
    }
}

pub fn default_models() -> Vec<NamedSpec> {
    vec![
        NamedSpec::new("linear", ModelSpec::Linear),
        NamedSpec::new("ridge", ModelSpec::Ridge(RidgeParams::default())),
        NamedSpec::new("knn", ModelSpec::Knn(KnnParams::default())),
        NamedSpec::new("tree", ModelSpec::Tree(TreeParams::default())),
        NamedSpec::new("gbdt", ModelSpec::Gbdt(GbdtParams::default())),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub sites: Vec<SiteConfig>,
    #[serde(default)]
    pub features: FeaturesConfig,
    #[serde(default = "default_models")]
    pub models: Vec<NamedSpec>,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default)]
    pub rfe: RfeConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load and validate; relative paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<(Self, String), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for s in &mut cfg.sites {
            if let Some(p) = &s.csv_path {
                if p.is_relative() {
                    s.csv_path = Some(base.join(p));
                }
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok((cfg, text))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.sites.is_empty() {
            return invalid("at least one site is required");
        }
        let mut ids = HashSet::new();
        for s in &self.sites {
            if s.id.is_empty() || s.id.contains(['/', '\\']) {
                return invalid(format!("site id `{}` must be non-empty and path-safe", s.id));
            }
            if !ids.insert(s.id.as_str()) {
                return invalid(format!("duplicate site id `{}`", s.id));
            }
            match (&s.csv_path, &s.synthetic) {
                (Some(_), Some(_)) | (None, None) => {
                    return invalid(format!("site `{}` needs exactly one of csv_path or synthetic", s.id))
                }
                (Some(_), None) if s.lat.is_none() || s.lon.is_none() => {
                    return invalid(format!("site `{}` needs lat and lon", s.id))
                }
                _ => {}
            }
            let m = s.meta();
            if m.latitude.is_some_and(|v| !(-90.0..=90.0).contains(&v))
                || m.longitude.is_some_and(|v| !(-180.0..=180.0).contains(&v))
            {
                return invalid(format!("site `{}` coordinates out of range", s.id));
            }
            if let (Some(a), Some(b)) = (m.flood_start, m.greenup_date) {
                if a > b {
                    return invalid(format!("site `{}`: flood_start is after greenup_date", s.id));
                }
            }
            for (name, g) in &s.depth_groups {
                if g.is_empty() {
                    return invalid(format!("site `{}`: depth group `{name}` is empty", s.id));
                }
            }
        }
        if self.cv.k < 2 {
            return invalid(format!("cv.k must be >= 2, got {}", self.cv.k));
        }
        if !(self.cv.holdout_fraction > 0.0 && self.cv.holdout_fraction < 1.0) {
            return invalid("cv.holdout_fraction must lie in (0, 1)");
        }
        if !(self.rfe.tolerance > 0.0 && self.rfe.tolerance < 1.0) {
            return invalid("rfe.tolerance must lie in (0, 1)");
        }
        if !self.rfe.spec.spec.is_tree_based() {
            return invalid(format!("rfe.spec must be tree-based, got `{}`", self.rfe.spec.spec.kind()));
        }
        if !(0.0..=1.0).contains(&self.features.completeness_threshold) {
            return invalid("features.completeness_threshold must lie in [0, 1]");
        }
        if self.models.is_empty() {
            return invalid("at least one model is required");
        }
        let mut names = HashSet::new();
        for m in std::iter::once(&self.rfe.spec).chain(&self.models) {
            m.spec
                .validate()
                .map_err(|e| ConfigError::Invalid(format!("model `{}`: {e}", m.name)))?;
        }
        for m in &self.models {
            if !names.insert(m.name.as_str()) {
                return invalid(format!("duplicate model name `{}`", m.name));
            }
        }
        Ok(())
    }
}
