//! Site CSV ingestion and half-hourly resampling.
//!
//! A [`FluxDataset`] is an immutable, time-ordered table of named real-valued
//! features. Missing measurements are explicit (`None`), never sentinel
//! numbers. Timestamps are UTC; local-time inputs are shifted by the site's
//! UTC offset at parse time.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use chrono::{DateTime, FixedOffset, NaiveDate, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Name of the target column (total measured ET, "water flux").
pub const TARGET: &str = "wq";

/// Length of one resampled interval.
pub const HALF_HOUR_SECS: i64 = 1800;

/// Cell values that parse as missing, besides the empty string.
const MISSING_TOKENS: [&str; 4] = ["NA", "NaN", "nan", "-9999"];

#[derive(Debug, Error, PartialEq)]
pub enum IngestError {
    #[error("missing timestamp column `{0}`")]
    MissingTimestampColumn(String),
    #[error("duplicate timestamp {0}")]
    DuplicateTimestamp(DateTime<Utc>),
    #[error("timestamps not strictly increasing at {0}")]
    NotIncreasing(DateTime<Utc>),
    #[error("bad timestamp `{value}` on row {row}")]
    BadTimestamp { row: usize, value: String },
    #[error("non-numeric value `{value}` at row {row}, column `{column}`")]
    NonNumeric {
        row: usize,
        column: String,
        value: String,
    },
    #[error("duplicate column `{0}`")]
    DuplicateColumn(String),
    #[error("target column `{TARGET}` absent from schema")]
    MissingTarget,
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("record {row} has {got} values, schema has {expected}")]
    RaggedRecord {
        row: usize,
        got: usize,
        expected: usize,
    },
    #[error("csv: {0}")]
    Csv(String),
}

impl From<csv::Error> for IngestError {
    fn from(e: csv::Error) -> Self {
        IngestError::Csv(e.to_string())
    }
}

/// How the timestamp column is encoded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimestampFormat {
    /// RFC 3339 with offset, or naive `YYYY-MM-DD[T ]HH:MM[:SS]` in site local time.
    #[default]
    Iso,
    /// Seconds since the Unix epoch (always UTC).
    Epoch,
    /// AmeriFlux style `YYYYMMDDHHMM` in site local time.
    Compact,
}

/// Column mapping used by [`parse_csv`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaConfig {
    pub timestamp_column: String,
    pub timestamp_format: TimestampFormat,
    /// Source header → feature name. Unlisted columns keep their header.
    pub rename: BTreeMap<String, String>,
    /// Source headers to skip entirely.
    pub drop: Vec<String>,
}

impl Default for SchemaConfig {
    fn default() -> Self {
        Self {
            timestamp_column: "timestamp".into(),
            timestamp_format: TimestampFormat::Iso,
            rename: BTreeMap::new(),
            drop: Vec::new(),
        }
    }
}

/// Site metadata consumed by solar geometry and period masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SiteMeta {
    pub latitude: Option<f64>,
    pub longitude: Option<f64>,
    /// Hours east of UTC of the site's local clock.
    #[serde(default)]
    pub utc_offset: f64,
    pub flood_start: Option<NaiveDate>,
    pub greenup_date: Option<NaiveDate>,
}

impl SiteMeta {
    pub fn offset(&self) -> FixedOffset {
        let secs = (self.utc_offset * 3600.0).round() as i32;
        FixedOffset::east_opt(secs).unwrap_or_else(|| FixedOffset::east_opt(0).unwrap())
    }

    /// Local wall-clock time of a UTC instant.
    pub fn local(&self, ts: DateTime<Utc>) -> NaiveDateTime {
        ts.with_timezone(&self.offset()).naive_local()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxRecord {
    pub timestamp: DateTime<Utc>,
    /// One entry per schema feature, in schema order.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxDataset {
    site_id: String,
    schema: Vec<String>,
    records: Vec<FluxRecord>,
    meta: SiteMeta,
    /// Per-feature flags marking values filled in by imputation.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    imputed: BTreeMap<String, Vec<bool>>,
}

impl FluxDataset {
    /// Build a dataset, checking the schema and timestamp invariants.
    pub fn new(
        site_id: impl Into<String>,
        schema: Vec<String>,
        records: Vec<FluxRecord>,
        meta: SiteMeta,
    ) -> Result<Self, IngestError> {
        let mut seen = std::collections::HashSet::new();
        for name in &schema {
            if !seen.insert(name.as_str()) {
                return Err(IngestError::DuplicateColumn(name.clone()));
            }
        }
        if !schema.iter().any(|s| s == TARGET) {
            return Err(IngestError::MissingTarget);
        }
        for (row, pair) in records.iter().enumerate() {
            if pair.values.len() != schema.len() {
                return Err(IngestError::RaggedRecord {
                    row,
                    got: pair.values.len(),
                    expected: schema.len(),
                });
            }
        }
        for w in records.windows(2) {
            if w[1].timestamp == w[0].timestamp {
                return Err(IngestError::DuplicateTimestamp(w[1].timestamp));
            }
            if w[1].timestamp < w[0].timestamp {
                return Err(IngestError::NotIncreasing(w[1].timestamp));
            }
        }
        Ok(Self {
            site_id: site_id.into(),
            schema,
            records,
            meta,
            imputed: BTreeMap::new(),
        })
    }

    pub fn site_id(&self) -> &str {
        &self.site_id
    }

    pub fn schema(&self) -> &[String] {
        &self.schema
    }

    pub fn records(&self) -> &[FluxRecord] {
        &self.records
    }

    pub fn meta(&self) -> &SiteMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn with_meta(mut self, meta: SiteMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn feature_index(&self, name: &str) -> Result<usize, IngestError> {
        self.schema
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| IngestError::UnknownFeature(name.to_string()))
    }

    pub fn has_feature(&self, name: &str) -> bool {
        self.schema.iter().any(|s| s == name)
    }

    pub fn column(&self, name: &str) -> Result<Vec<Option<f64>>, IngestError> {
        let j = self.feature_index(name)?;
        Ok(self.records.iter().map(|r| r.values[j]).collect())
    }

    pub fn timestamps(&self) -> Vec<DateTime<Utc>> {
        self.records.iter().map(|r| r.timestamp).collect()
    }

    /// Imputation flags for `name`, all false when the feature was never imputed.
    pub fn imputed_flags(&self, name: &str) -> Vec<bool> {
        self.imputed
            .get(name)
            .cloned()
            .unwrap_or_else(|| vec![false; self.records.len()])
    }

    /// Replace (or append) a column. Imputation flags for `name` are reset
    /// unless `imputed` is supplied.
    pub fn with_column(
        mut self,
        name: &str,
        values: Vec<Option<f64>>,
        imputed: Option<Vec<bool>>,
    ) -> Result<Self, IngestError> {
        if values.len() != self.records.len() {
            return Err(IngestError::RaggedRecord {
                row: 0,
                got: values.len(),
                expected: self.records.len(),
            });
        }
        let j = match self.feature_index(name) {
            Ok(j) => j,
            Err(_) => {
                self.schema.push(name.to_string());
                for r in &mut self.records {
                    r.values.push(None);
                }
                self.schema.len() - 1
            }
        };
        for (r, v) in self.records.iter_mut().zip(values) {
            r.values[j] = v;
        }
        match imputed {
            Some(flags) if flags.iter().any(|&f| f) => {
                self.imputed.insert(name.to_string(), flags);
            }
            _ => {
                self.imputed.remove(name);
            }
        }
        Ok(self)
    }

    /// Drop the named features. The target cannot be dropped.
    pub fn without(mut self, names: &[String]) -> Result<Self, IngestError> {
        for n in names {
            self.feature_index(n)?;
            if n == TARGET {
                return Err(IngestError::MissingTarget);
            }
        }
        let keep: Vec<bool> = self.schema.iter().map(|s| !names.contains(s)).collect();
        self.schema = filter_by(&self.schema, &keep);
        for r in &mut self.records {
            r.values = filter_by(&r.values, &keep);
        }
        for n in names {
            self.imputed.remove(n);
        }
        Ok(self)
    }

    /// Keep the target plus the named features, in the given order.
    pub fn select(&self, names: &[String]) -> Result<Self, IngestError> {
        let mut order: Vec<String> = vec![TARGET.to_string()];
        order.extend(names.iter().filter(|n| *n != TARGET).cloned());
        let idx = order
            .iter()
            .map(|n| self.feature_index(n))
            .collect::<Result<Vec<_>, _>>()?;
        let records = self
            .records
            .iter()
            .map(|r| FluxRecord {
                timestamp: r.timestamp,
                values: idx.iter().map(|&j| r.values[j]).collect(),
            })
            .collect();
        let imputed = self
            .imputed
            .iter()
            .filter(|(k, _)| order.contains(k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Ok(Self {
            site_id: self.site_id.clone(),
            schema: order,
            records,
            meta: self.meta.clone(),
            imputed,
        })
    }

    /// Serialize in the input dialect: ISO-8601 UTC timestamps, missing as empty cells.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), IngestError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["timestamp".to_string()];
        header.extend(self.schema.iter().cloned());
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.timestamp.format("%Y-%m-%dT%H:%M:%SZ").to_string()];
            row.extend(r.values.iter().map(|v| match v {
                Some(x) => format!("{x}"),
                None => String::new(),
            }));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| IngestError::Csv(e.to_string()))?;
        Ok(())
    }
}

fn filter_by<T: Clone>(items: &[T], keep: &[bool]) -> Vec<T> {
    items
        .iter()
        .zip(keep)
        .filter(|(_, &k)| k)
        .map(|(x, _)| x.clone())
        .collect()
}

fn parse_cell(raw: &str) -> Option<Result<f64, ()>> {
    let s = raw.trim();
    if s.is_empty() || MISSING_TOKENS.contains(&s) {
        return None;
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_nan() => None,
        Ok(-9999.0) => None,
        Ok(v) => Some(Ok(v)),
        Err(_) => Some(Err(())),
    }
}

fn parse_timestamp(
    raw: &str,
    format: TimestampFormat,
    offset: FixedOffset,
) -> Option<DateTime<Utc>> {
    let s = raw.trim();
    let local = |naive: NaiveDateTime| {
        offset
            .from_local_datetime(&naive)
            .single()
            .map(|dt| dt.with_timezone(&Utc))
    };
    match format {
        TimestampFormat::Epoch => {
            let secs: f64 = s.parse().ok()?;
            DateTime::from_timestamp(secs.floor() as i64, 0)
        }
        TimestampFormat::Compact => {
            let naive = NaiveDateTime::parse_from_str(s, "%Y%m%d%H%M").ok()?;
            local(naive)
        }
        TimestampFormat::Iso => {
            if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
                return Some(dt.with_timezone(&Utc));
            }
            const NAIVE: [&str; 4] = [
                "%Y-%m-%dT%H:%M:%S",
                "%Y-%m-%d %H:%M:%S",
                "%Y-%m-%dT%H:%M",
                "%Y-%m-%d %H:%M",
            ];
            NAIVE
                .iter()
                .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
                .and_then(local)
        }
    }
}

/// Parse a site CSV. Local-time stamps are shifted to UTC with `meta.utc_offset`.
pub fn parse_csv<R: Read>(
    source: R,
    site_id: &str,
    schema_config: &SchemaConfig,
    meta: SiteMeta,
) -> Result<FluxDataset, IngestError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let ts_col = headers
        .iter()
        .position(|h| h == schema_config.timestamp_column)
        .ok_or_else(|| IngestError::MissingTimestampColumn(schema_config.timestamp_column.clone()))?;

    let mut columns: Vec<(usize, String)> = Vec::new();
    for (i, h) in headers.iter().enumerate() {
        if i == ts_col || schema_config.drop.iter().any(|d| d == h) {
            continue;
        }
        let name = schema_config
            .rename
            .get(h)
            .cloned()
            .unwrap_or_else(|| h.to_string());
        columns.push((i, name));
    }
    let schema: Vec<String> = columns.iter().map(|(_, n)| n.clone()).collect();
    let offset = meta.offset();

    let mut records = Vec::new();
    let mut seen: HashMap<DateTime<Utc>, usize> = HashMap::new();
    for (k, row) in reader.records().enumerate() {
        let row = row?;
        // 1-based data row numbering, header excluded.
        let row_no = k + 1;
        let raw_ts = row.get(ts_col).unwrap_or("");
        let timestamp = parse_timestamp(raw_ts, schema_config.timestamp_format, offset)
            .ok_or_else(|| IngestError::BadTimestamp {
                row: row_no,
                value: raw_ts.to_string(),
            })?;
        if seen.insert(timestamp, row_no).is_some() {
            return Err(IngestError::DuplicateTimestamp(timestamp));
        }
        let mut values = Vec::with_capacity(columns.len());
        for (i, name) in &columns {
            let raw = row.get(*i).unwrap_or("");
            match parse_cell(raw) {
                None => values.push(None),
                Some(Ok(v)) => values.push(Some(v)),
                Some(Err(())) => {
                    return Err(IngestError::NonNumeric {
                        row: row_no,
                        column: name.clone(),
                        value: raw.to_string(),
                    })
                }
            }
        }
        records.push(FluxRecord { timestamp, values });
    }
    // Unsorted input is accepted; duplicates were rejected above.
    records.sort_by_key(|r| r.timestamp);
    FluxDataset::new(site_id, schema, records, meta)
}

fn bin_start(ts: DateTime<Utc>) -> i64 {
    ts.timestamp().div_euclid(HALF_HOUR_SECS) * HALF_HOUR_SECS
}

/// Average records into left-closed, right-open half-hour bins aligned to :00/:30.
///
/// Empty bins between the first and last record are emitted as all-missing
/// records so spacing stays uniform.
pub fn resample_half_hourly(ds: &FluxDataset) -> FluxDataset {
    let q = ds.schema.len();
    if ds.records.is_empty() {
        return ds.clone();
    }
    let first = bin_start(ds.records[0].timestamp);
    let last = bin_start(ds.records[ds.records.len() - 1].timestamp);
    let n_bins = ((last - first) / HALF_HOUR_SECS + 1) as usize;

    let mut sums = vec![vec![0.0f64; q]; n_bins];
    let mut counts = vec![vec![0usize; q]; n_bins];
    let mut imputed_any: BTreeMap<String, Vec<bool>> = BTreeMap::new();
    for (row, r) in ds.records.iter().enumerate() {
        let b = ((bin_start(r.timestamp) - first) / HALF_HOUR_SECS) as usize;
        for (j, v) in r.values.iter().enumerate() {
            if let Some(x) = v {
                sums[b][j] += x;
                counts[b][j] += 1;
            }
        }
        for (name, flags) in &ds.imputed {
            if flags[row] {
                imputed_any
                    .entry(name.clone())
                    .or_insert_with(|| vec![false; n_bins])[b] = true;
            }
        }
    }
    let records = (0..n_bins)
        .map(|b| FluxRecord {
            timestamp: DateTime::from_timestamp(first + b as i64 * HALF_HOUR_SECS, 0)
                .expect("timestamp in range"),
            values: (0..q)
                .map(|j| (counts[b][j] > 0).then(|| sums[b][j] / counts[b][j] as f64))
                .collect(),
        })
        .collect();
    FluxDataset {
        site_id: ds.site_id.clone(),
        schema: ds.schema.clone(),
        records,
        meta: ds.meta.clone(),
        imputed: imputed_any,
    }
}

/// Fraction of records with a present value for `feature`.
pub fn completeness(ds: &FluxDataset, feature: &str) -> Result<f64, IngestError> {
    let j = ds.feature_index(feature)?;
    if ds.records.is_empty() {
        return Ok(0.0);
    }
    let present = ds.records.iter().filter(|r| r.values[j].is_some()).count();
    Ok(present as f64 / ds.records.len() as f64)
}

/// Convenience for tests and the synthetic generator: UTC instant from parts.
pub fn utc(y: i32, m: u32, d: u32, h: u32, min: u32) -> DateTime<Utc> {
    Utc.with_ymd_and_hms(y, m, d, h, min, 0)
        .single()
        .expect("valid date")
}

#[cfg(test)]
pub(crate) fn half_hours(n: i64) -> chrono::Duration {
    chrono::Duration::seconds(n * HALF_HOUR_SECS)
}
