//! Report, trace and plot-data writers.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::harness::{ExperimentReport, Period};
use crate::metrics::MetricReport;
use crate::rfe::RfeTrace;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("nothing to write: {0} is empty")]
    Empty(&'static str),
    #[error("unknown report format `{0}` (expected csv or json)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl FromStr for Format {
    type Err = ReportError;
    fn from_str(s: &str) -> Result<Self, ReportError> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(ReportError::UnknownFormat(s.to_string())),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, ReportError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })
}

fn num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

const PER_PERIOD: [&str; 4] = ["adj_r2", "r2", "rmse", "slope"];

pub fn report_header() -> Vec<String> {
    let mut h: Vec<String> = ["site", "model", "kind", "feature_set", "n_features"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for p in Period::ALL {
        for m in PER_PERIOD {
            h.push(format!("{m}_{p}"));
        }
    }
    h.push("time_seconds".into());
    h
}

fn period_cells(m: Option<&MetricReport>) -> [String; 4] {
    [
        num(m.and_then(|m| m.adj_r2)),
        num(m.map(|m| m.r2)),
        num(m.map(|m| m.rmse)),
        num(m.map(|m| m.slope)),
    ]
}

/// One row per cell; absent periods leave empty fields.
pub fn write_report_csv<W: Write>(report: &ExperimentReport, out: W) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(report_header())?;
    for c in &report.cells {
        let mut row = vec![
            c.site_id.clone(),
            c.model.clone(),
            c.spec.kind().to_string(),
            c.feature_set.clone(),
            c.n_features.to_string(),
        ];
        for p in Period::ALL {
            row.extend(period_cells(c.metrics.get(p)));
        }
        row.push(c.wall_time_seconds.to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| ReportError::Io {
        path: "<report>".into(),
        source,
    })?;
    Ok(())
}

pub fn report_to_json(report: &ExperimentReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

pub fn report_from_json<R: Read>(input: R) -> Result<ExperimentReport, ReportError> {
    Ok(serde_json::from_reader(input)?)
}

pub fn emit_report(report: &ExperimentReport, format: Format, path: &Path) -> Result<(), ReportError> {
    if report.is_empty() {
        return Err(ReportError::Empty("report"));
    }
    let mut f = create(path)?;
    let io = |source| ReportError::Io {
        path: path.display().to_string(),
        source,
    };
    match format {
        Format::Csv => write_report_csv(report, &mut f)?,
        Format::Json => f.write_all(report_to_json(report).as_bytes()).map_err(io)?,
    }
    f.flush().map_err(io)
}

pub fn write_trace_json(trace: &RfeTrace, path: &Path) -> Result<(), ReportError> {
    let mut f = create(path)?;
    let mut s = trace.to_json();
    s.push('\n');
    f.write_all(s.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|source| ReportError::Io {
            path: path.display().to_string(),
            source,
        })
}

/// Scatter data: winter adj-R² (x) against flood adj-R² (y), sized by
/// night adj-R², one row per cell. Sites without flood data keep an empty y.
pub fn write_comparison_plot<W: Write>(report: &ExperimentReport, out: W) -> Result<(), ReportError> {
    if report.is_empty() {
        return Err(ReportError::Empty("report"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "size", "series"])?;
    for c in &report.cells {
        let adj = |p| c.metrics.get(p).and_then(|m| m.adj_r2);
        w.write_record([
            num(adj(Period::Winter)),
            num(adj(Period::Flood)),
            num(adj(Period::NightHoldout)),
            format!("{}/{}/{}", c.site_id, c.model, c.feature_set),
        ])?;
    }
    w.flush().map_err(|source| ReportError::Io {
        path: "<plot>".into(),
        source,
    })?;
    Ok(())
}

/// RFE curves: feature count (x) against adj-R² (y) per period series.
/// Periods without metrics in any iteration are omitted.
pub fn write_rfe_plot<W: Write>(trace: &RfeTrace, out: W) -> Result<(), ReportError> {
    if trace.iterations.is_empty() {
        return Err(ReportError::Empty("trace"));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "series"])?;
    for p in Period::ALL {
        if trace.iterations.iter().all(|it| it.cv_metrics.get(p).is_none()) {
            continue;
        }
        for it in &trace.iterations {
            let m = it.cv_metrics.get(p);
            let y = m.and_then(|m| m.adj_r2).or(m.map(|m| m.r2));
            w.write_record([it.feature_set.len().to_string(), num(y), p.to_string()])?;
        }
    }
    w.flush().map_err(|source| ReportError::Io {
        path: "<plot>".into(),
        source,
    })?;
    Ok(())
}

/// Write `bytes` to `path`, mapping the error to a path-tagged one.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    std::fs::write(path, bytes).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{ExperimentCell, PeriodMetrics};
    use crate::models::{GbdtParams, ModelSpec};
    use crate::rfe::RfeIteration;
    use crate::preprocess::FeatureSet;

    fn m(adj: f64) -> MetricReport {
        MetricReport {
            r2: adj + 0.01,
            adj_r2: Some(adj),
            rmse: 0.19,
            slope: 0.9,
            intercept: 0.0,
            n_samples: 100,
            n_features: 11,
            slope_violation: false,
        }
    }

    fn ee_cell(flood: bool) -> ExperimentCell {
        ExperimentCell {
            site_id: "EE".into(),
            model: "lgbm".into(),
            spec: ModelSpec::Gbdt(GbdtParams::default()),
            feature_set: "F_E".into(),
            n_features: 11,
            metrics: PeriodMetrics {
                night_holdout: m(0.94),
                winter: Some(m(0.03)),
                flood: flood.then(|| m(0.67)),
            },
            wall_time_seconds: 2.22,
        }
    }

    fn report(cells: Vec<ExperimentCell>) -> ExperimentReport {
        ExperimentReport {
            cells,
            discarded: vec![],
        }
    }

    fn csv_rows(r: &ExperimentReport) -> Vec<csv::StringRecord> {
        let mut buf = Vec::new();
        write_report_csv(r, &mut buf).unwrap();
        csv::Reader::from_reader(buf.as_slice()).records().map(|r| r.unwrap()).collect()
    }

    #[test]
    fn row_shape() {
        let rows = csv_rows(&report(vec![ee_cell(true)]));
        let h = report_header();
        let col = |name: &str| h.iter().position(|c| c == name).unwrap();
        let r = &rows[0];
        assert_eq!(&r[col("model")], "lgbm");
        assert_eq!(&r[col("feature_set")], "F_E");
        assert_eq!(&r[col("adj_r2_night")], "0.94");
        assert_eq!(&r[col("adj_r2_winter")], "0.03");
        assert_eq!(&r[col("adj_r2_flood")], "0.67");
        assert_eq!(&r[col("time_seconds")], "2.22");
    }

    #[test]
    fn absent_flood_is_empty_and_null() {
        let r = report(vec![ee_cell(false)]);
        let rows = csv_rows(&r);
        let h = report_header();
        assert_eq!(&rows[0][h.iter().position(|c| c == "r2_flood").unwrap()], "");
        assert!(report_to_json(&r).contains("\"flood\": null"));
    }

    #[test]
    fn json_round_trip() {
        let r = report(vec![ee_cell(true), ee_cell(false)]);
        assert_eq!(report_from_json(report_to_json(&r).as_bytes()).unwrap(), r);
    }

    #[test]
    fn scatter_rows_per_cell() {
        let r = report(vec![ee_cell(true), ee_cell(false), ee_cell(true), ee_cell(true)]);
        let mut buf = Vec::new();
        write_comparison_plot(&r, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 5);
    }

    fn trace(flood: bool) -> RfeTrace {
        let iterations = (0..5)
            .map(|i| RfeIteration {
                feature_set: (0..5 - i).map(|j| format!("f{j}")).collect(),
                removed_feature: (i < 4).then(|| format!("f{}", 4 - i)),
                normalized_importance: Default::default(),
                cv_metrics: PeriodMetrics {
                    night_holdout: m(0.9),
                    winter: Some(m(0.5)),
                    flood: flood.then(|| m(0.6)),
                },
            })
            .collect();
        RfeTrace {
            site_id: "S".into(),
            model: "gbdt".into(),
            iterations,
            optimal_set: FeatureSet::new("RFE_S", vec!["f0".into()]).unwrap(),
        }
    }

    fn series_counts(t: &RfeTrace) -> std::collections::BTreeMap<String, usize> {
        let mut buf = Vec::new();
        write_rfe_plot(t, &mut buf).unwrap();
        let mut counts = std::collections::BTreeMap::new();
        for r in csv::Reader::from_reader(buf.as_slice()).records() {
            *counts.entry(r.unwrap()[2].to_string()).or_insert(0) += 1;
        }
        counts
    }

    #[test]
    fn rfe_curve_rows_per_period() {
        let c = series_counts(&trace(true));
        assert_eq!(c.len(), 3);
        assert!(c.values().all(|&n| n == 5));
    }

    #[test]
    fn rfe_curve_omits_missing_flood() {
        let c = series_counts(&trace(false));
        assert!(!c.contains_key("flood"));
        assert_eq!(c["night"], 5);
    }

    #[test]
    fn empty_report_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&ExperimentReport::default(), Format::Csv, &dir.path().join("r.csv")).is_err());
        assert!("xml".parse::<Format>().is_err());
    }

    #[test]
    fn unwritable_path_rejected() {
        let r = report(vec![ee_cell(true)]);
        assert!(emit_report(&r, Format::Json, Path::new("/nonexistent/dir/r.json")).is_err());
    }
}
