//! End-to-end run: ingest, prepare, mask, build feature sets, compare models,
//! eliminate features, compare again on the merged set and partition.
//!
//! Every artifact is written by this single thread after the parallel work
//! of its stage has finished, and its SHA-256 goes into `manifest.json`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig, SiteConfig};
use crate::harness::{compare_models, rank_models, site_fold_plan, CvSettings, ExperimentReport, NamedSpec, PreparedSite, plan_seed};
use crate::ingest::{parse_csv, resample_half_hourly, FluxDataset, TARGET};
use crate::partition::{partition_et, train_e_model, validate_partition, write_partition_csv, PartitionValidation};
use crate::periods::PeriodMasks;
use crate::preprocess::{
    build_feature_sets, consolidate_depth_profiles, derive_time_features, filter_by_completeness,
    impute, write_feature_sets, FeatureSet, F_E, F_25, F_RFE,
};
use crate::report::{report_to_json, write_comparison_plot, write_report_csv, write_rfe_plot};
use crate::rfe::{merge_sites, rfe_sites, RfeTrace};
use crate::seed::derive_seed;
use crate::synth::generate_synthetic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Prep,
    Periods,
    Features,
    Compare,
    Rfe,
    Final,
    Partition,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Prep,
        Stage::Periods,
        Stage::Features,
        Stage::Compare,
        Stage::Rfe,
        Stage::Final,
        Stage::Partition,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Prep => "prep",
            Stage::Periods => "periods",
            Stage::Features => "features",
            Stage::Compare => "compare",
            Stage::Rfe => "rfe",
            Stage::Final => "final",
            Stage::Partition => "partition",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Stage::ALL.iter().map(|s| s.as_str()).collect();
                format!("unknown stage `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("[{stage}] {message}")]
    Stage { stage: Stage, message: String },
}

impl PipelineError {
    /// 1 for invalid input configuration, 2 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 1,
            PipelineError::Stage { .. } => 2,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

fn fail(stage: Stage, message: impl fmt::Display) -> PipelineError {
    PipelineError::Stage {
        stage,
        message: message.to_string(),
    }
}

fn at<E: fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Replaces `cv.seed`.
    pub seed: Option<u64>,
    /// Replaces `output_dir`.
    pub out_dir: Option<PathBuf>,
    /// Stop once this stage has finished.
    pub stop_after: Option<Stage>,
    /// Worker threads; `None` uses the ambient pool.
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub stages_completed: Vec<Stage>,
    /// Artifact file name → SHA-256.
    pub artifacts: BTreeMap<String, String>,
    pub report: Option<ExperimentReport>,
    pub traces: Vec<RfeTrace>,
    pub f_rfe: Option<FeatureSet>,
    pub validations: BTreeMap<String, PartitionValidation>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    status: &'static str,
    seed: u64,
    config_sha256: String,
    config: &'a RunConfig,
    inputs: &'a BTreeMap<String, String>,
    stages_completed: &'a [Stage],
    #[serde(skip_serializing_if = "Option::is_none")]
    failed_stage: Option<Stage>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    artifacts: &'a BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Writer {
    dir: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl Writer {
    fn put(&mut self, stage: Stage, name: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| PipelineError::Stage {
            stage,
            message: format!("cannot write {}: {e}", path.display()),
        })?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// Run inside a dedicated pool when `opts.jobs` is set.
pub fn run_pipeline(cfg: &RunConfig, config_text: &str, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    match opts.jobs {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| ConfigError::Invalid(format!("cannot start {n} workers: {e}")))?;
            pool.install(|| run_in_pool(cfg, config_text, opts))
        }
        None => run_in_pool(cfg, config_text, opts),
    }
}

fn run_in_pool(cfg: &RunConfig, config_text: &str, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    let mut cfg = cfg.clone();
    if let Some(seed) = opts.seed {
        cfg.cv.seed = seed;
    }
    if let Some(dir) = &opts.out_dir {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.output_dir).map_err(|e| {
        ConfigError::Invalid(format!("cannot create output dir {}: {e}", cfg.output_dir.display()))
    })?;
    let mut run = Run {
        cfg: &cfg,
        stop_after: opts.stop_after,
        out: Writer {
            dir: cfg.output_dir.clone(),
            artifacts: BTreeMap::new(),
        },
        inputs: BTreeMap::new(),
        summary: RunSummary {
            out_dir: cfg.output_dir.clone(),
            stages_completed: vec![],
            artifacts: BTreeMap::new(),
            report: None,
            traces: vec![],
            f_rfe: None,
            validations: BTreeMap::new(),
        },
    };
    let result = run.execute();
    let (status, failed_stage, error) = match &result {
        Ok(()) => ("complete", None, None),
        Err(e) => ("incomplete", e.stage(), Some(e.to_string())),
    };
    if status == "complete" && run.stop_after.is_some_and(|s| s != Stage::Partition) {
        log::info!("stopped after stage {}", run.stop_after.unwrap());
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        status,
        seed: cfg.cv.seed,
        config_sha256: sha256_hex(config_text.as_bytes()),
        config: &cfg,
        inputs: &run.inputs,
        stages_completed: &run.summary.stages_completed,
        failed_stage,
        error,
        artifacts: &run.out.artifacts,
    };
    let bytes = json_bytes(&manifest);
    let path = cfg.output_dir.join("manifest.json");
    let written = std::fs::write(&path, &bytes);
    result?;
    written.map_err(|e| PipelineError::Stage {
        stage: Stage::Partition,
        message: format!("cannot write {}: {e}", path.display()),
    })?;
    let mut summary = run.summary;
    summary.artifacts = run.out.artifacts;
    Ok(summary)
}

struct Run<'a> {
    cfg: &'a RunConfig,
    stop_after: Option<Stage>,
    out: Writer,
    inputs: BTreeMap<String, String>,
    summary: RunSummary,
}

impl Run<'_> {
    /// Record completion; true when the run should stop here.
    fn done(&mut self, stage: Stage) -> bool {
        self.summary.stages_completed.push(stage);
        self.stop_after == Some(stage)
    }

    fn execute(&mut self) -> Result<(), PipelineError> {
        let cfg = self.cfg;
        let root = cfg.cv.seed;

        let mut datasets = Vec::with_capacity(cfg.sites.len());
        for s in &cfg.sites {
            let ds = self.ingest_site(s)?;
            log::info!("{}: {} half-hourly records", s.id, ds.len());
            datasets.push(ds);
        }
        if self.done(Stage::Ingest) {
            for ds in &datasets {
                self.put_dataset(Stage::Ingest, &format!("ingest_{}.csv", ds.site_id()), ds)?;
            }
            return Ok(());
        }

        let datasets = datasets
            .into_iter()
            .zip(&cfg.sites)
            .map(|(ds, s)| prepare_site(ds, s, cfg))
            .collect::<Result<Vec<_>, _>>()?;
        if self.done(Stage::Prep) {
            for ds in &datasets {
                self.put_dataset(Stage::Prep, &format!("prepared_{}.csv", ds.site_id()), ds)?;
            }
            return Ok(());
        }

        let sites = datasets
            .into_iter()
            .map(|ds| {
                let seed = derive_seed(root, &["holdout", ds.site_id()]);
                let masks = PeriodMasks::compute(&ds, cfg.cv.holdout_fraction, seed)
                    .map_err(|e| at(Stage::Periods)(format!("{}: {e}", ds.site_id())))?;
                Ok(PreparedSite { dataset: ds, masks })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        for s in &sites {
            let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
            log::info!(
                "{}: night {} (train {}, holdout {}), winter {}, flood {}",
                s.dataset.site_id(),
                count(&s.masks.night),
                count(&s.masks.night_train),
                count(&s.masks.night_holdout),
                count(&s.masks.winter),
                count(&s.masks.flood)
            );
        }
        if self.done(Stage::Periods) {
            return Ok(());
        }

        let ds_only: Vec<FluxDataset> = sites.iter().map(|s| s.dataset.clone()).collect();
        let built = build_feature_sets(&ds_only, &cfg.features.sets).map_err(at(Stage::Features))?;
        if let Some(w) = &built.common.warning {
            log::warn!("{w}");
        }
        let (f_e, f_25) = (built.expert, built.screened);
        log::info!("{F_E}: {} features, {F_25}: {} features", f_e.len(), f_25.len());
        if self.done(Stage::Features) {
            self.put_feature_sets(Stage::Features, &[f_e, f_25])?;
            return Ok(());
        }

        let cv = CvSettings { k: cfg.cv.k, seed: root };
        let mut report = compare_models(&sites, &cfg.models, &[f_e.clone(), f_25.clone()], cv)
            .map_err(at(Stage::Compare))?;
        if !cfg.report.include_wall_time {
            report = report.without_timing();
        }
        if self.done(Stage::Compare) {
            self.put_report(Stage::Compare, &report)?;
            self.put_feature_sets(Stage::Compare, &[f_e, f_25])?;
            self.summary.report = Some(report);
            return Ok(());
        }

        let start = match cfg.rfe.start_set.as_str() {
            F_E => f_e.clone(),
            F_25 => f_25.clone(),
            other => return Err(at(Stage::Rfe)(format!("unknown rfe.start_set `{other}`"))),
        };
        let plans = sites
            .iter()
            .map(|s| site_fold_plan(s, &start, cfg.cv.k, plan_seed(root, s.dataset.site_id(), start.name())))
            .collect::<Result<Vec<_>, _>>()
            .map_err(at(Stage::Rfe))?;
        let traces = rfe_sites(&sites, &plans, &start, &cfg.rfe.spec, cfg.rfe.tolerance).map_err(at(Stage::Rfe))?;
        for t in &traces {
            log::info!("{}: optimal set has {} features", t.site_id, t.optimal_set.len());
            self.out.put(Stage::Rfe, &format!("rfe_{}.json", t.site_id), format!("{}\n", t.to_json()).as_bytes())?;
            let mut buf = Vec::new();
            write_rfe_plot(t, &mut buf).map_err(at(Stage::Rfe))?;
            self.out.put(Stage::Rfe, &format!("plotdata_rfe_{}.csv", t.site_id), &buf)?;
        }
        let optimal: Vec<FeatureSet> = traces.iter().map(|t| t.optimal_set.clone()).collect();
        let merged = if optimal.len() >= 2 {
            merge_sites(&optimal).map_err(at(Stage::Rfe))?.features
        } else {
            optimal[0].features().to_vec()
        };
        let f_rfe = FeatureSet::new(F_RFE, merged)
            .map_err(|_| at(Stage::Rfe)("no feature is optimal at two or more sites"))?;
        log::info!("{F_RFE}: {:?}", f_rfe.features());
        self.put_feature_sets(Stage::Rfe, &[f_e.clone(), f_25.clone(), f_rfe.clone()])?;
        self.summary.traces = traces;
        self.summary.f_rfe = Some(f_rfe.clone());
        if self.done(Stage::Rfe) {
            self.put_report(Stage::Rfe, &report)?;
            self.summary.report = Some(report);
            return Ok(());
        }

        let survivors: Vec<NamedSpec> = cfg
            .models
            .iter()
            .filter(|m| !report.discarded.iter().any(|d| d.model == m.name))
            .cloned()
            .collect();
        if survivors.is_empty() {
            return Err(at(Stage::Final)("every model was discarded"));
        }
        let mut final_report = compare_models(&sites, &survivors, std::slice::from_ref(&f_rfe), cv)
            .map_err(at(Stage::Final))?;
        if !cfg.report.include_wall_time {
            final_report = final_report.without_timing();
        }
        let mut full = report.clone();
        full.cells.extend(final_report.cells.iter().cloned());
        for d in &final_report.discarded {
            full.discarded.push(d.clone());
            full.cells.retain(|c| c.model != d.model);
        }
        self.put_report(Stage::Final, &full)?;
        self.summary.report = Some(full);
        if self.done(Stage::Final) {
            return Ok(());
        }

        for site in &sites {
            let id = site.dataset.site_id();
            let p = Stage::Partition;
            let ranked = rank_models(&final_report, cfg.report.rank_period, cfg.report.rank_metric)
                .map_err(at(p))?;
            let best = ranked
                .iter()
                .find(|c| c.site_id == id)
                .ok_or_else(|| fail(p, format!("{id}: no ranked model for partitioning")))?;
            let spec = NamedSpec::new(best.model.clone(), best.spec);
            log::info!("{id}: partitioning with {} ({} = {})", spec.name, cfg.report.rank_metric, best.value);
            let model = train_e_model(site, &f_rfe, &spec).map_err(|e| fail(p, format!("{id}: {e}")))?;
            let records = partition_et(&site.dataset, &model).map_err(|e| fail(p, format!("{id}: {e}")))?;
            let mut buf = Vec::new();
            write_partition_csv(&records, &site.masks, &mut buf).map_err(at(p))?;
            self.out.put(Stage::Partition, &format!("partition_{id}.csv"), &buf)?;
            let validation = validate_partition(&records, &site.masks).map_err(at(p))?;
            #[derive(Serialize)]
            struct Validation<'a> {
                site: &'a str,
                model: &'a str,
                feature_set: &'a FeatureSet,
                validation: &'a PartitionValidation,
            }
            let v = Validation {
                site: id,
                model: &spec.name,
                feature_set: &f_rfe,
                validation: &validation,
            };
            self.out.put(Stage::Partition, &format!("validation_{id}.json"), &json_bytes(&v))?;
            self.out.put(Stage::Partition, &format!("model_{id}.json"), format!("{}\n", model.to_json()).as_bytes())?;
            self.summary.validations.insert(id.to_string(), validation);
        }
        self.done(Stage::Partition);
        Ok(())
    }

    fn ingest_site(&mut self, s: &SiteConfig) -> Result<FluxDataset, PipelineError> {
        let err = at(Stage::Ingest);
        if let Some(spec) = s.synthetic_spec() {
            return Ok(generate_synthetic(&spec).map_err(|e| err(format!("{}: {e}", s.id)))?.dataset);
        }
        let path = s.csv_path.as_ref().expect("validated: csv or synthetic");
        let bytes = std::fs::read(path).map_err(|e| err(format!("{}: cannot read {}: {e}", s.id, path.display())))?;
        self.inputs.insert(s.id.clone(), sha256_hex(&bytes));
        let ds = parse_csv(bytes.as_slice(), &s.id, &s.schema, s.meta())
            .map_err(|e| err(format!("{}: {e}", s.id)))?;
        Ok(resample_half_hourly(&ds))
    }

    fn put_dataset(&mut self, stage: Stage, name: &str, ds: &FluxDataset) -> Result<(), PipelineError> {
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).map_err(at(stage))?;
        self.out.put(stage, name, &buf)
    }

    fn put_feature_sets(&mut self, stage: Stage, sets: &[FeatureSet]) -> Result<(), PipelineError> {
        let mut buf = Vec::new();
        write_feature_sets(sets, &mut buf).map_err(at(stage))?;
        buf.push(b'\n');
        self.out.put(stage, "feature_sets.json", &buf)
    }

    fn put_report(&mut self, stage: Stage, report: &ExperimentReport) -> Result<(), PipelineError> {
        let mut csv = Vec::new();
        write_report_csv(report, &mut csv).map_err(at(stage))?;
        self.out.put(stage, "report.csv", &csv)?;
        self.out.put(stage, "report.json", report_to_json(report).as_bytes())?;
        if !report.is_empty() {
            let mut plot = Vec::new();
            write_comparison_plot(report, &mut plot).map_err(at(stage))?;
            self.out.put(stage, "plotdata_comparison.csv", &plot)?;
        }
        Ok(())
    }
}

/// Depth means, calendar features, completeness filter and gap filling.
pub fn prepare_site(ds: FluxDataset, s: &SiteConfig, cfg: &RunConfig) -> Result<FluxDataset, PipelineError> {
    let err = |e: String| at(Stage::Prep)(format!("{}: {e}", s.id));
    let mut ds = ds;
    for (out, group) in s.depth_groups() {
        let present: Vec<String> = group.iter().filter(|g| ds.has_feature(g)).cloned().collect();
        if present.is_empty() {
            log::warn!("{}: no column of depth group `{out}` present", s.id);
            continue;
        }
        ds = consolidate_depth_profiles(ds, &present, &out).map_err(|e| err(e.to_string()))?;
    }
    ds = derive_time_features(ds).map_err(|e| err(e.to_string()))?;
    let keep = filter_by_completeness(&ds, cfg.features.completeness_threshold);
    let dropped: Vec<String> = ds
        .schema()
        .iter()
        .filter(|f| f.as_str() != TARGET && !keep.contains(f))
        .cloned()
        .collect();
    if !dropped.is_empty() {
        log::info!("{}: dropping incomplete features {:?}", s.id, dropped);
    }
    ds = ds.without(&dropped).map_err(|e| err(e.to_string()))?;
    let features: Vec<String> = ds.schema().to_vec();
    for f in features {
        if f == TARGET && !cfg.features.impute_target {
            continue;
        }
        if ds.column(&f).map_err(|e| err(e.to_string()))?.iter().all(Option::is_none) {
            ds = ds.without(&[f]).map_err(|e| err(e.to_string()))?;
            continue;
        }
        ds = impute(ds, &f, cfg.features.impute).map_err(|e| err(e.to_string()))?;
    }
    Ok(ds)
}

/// Load a config file and run it.
pub fn run_config_file(path: &Path, opts: &RunOptions) -> Result<RunSummary, PipelineError> {
    let (cfg, text) = RunConfig::load(path)?;
    run_pipeline(&cfg, &text, opts)
}

/// Open a file for reading with a path-tagged error.
pub fn open(path: &Path) -> Result<File, PipelineError> {
    File::open(path).map_err(|e| {
        PipelineError::Config(ConfigError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}
