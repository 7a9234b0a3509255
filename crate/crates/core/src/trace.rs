//! Cluster-level demand traces built from per-task usage events.
//!
//! Events report an average usage rate over `[start_time, end_time)`. Each
//! event contributes to a window in proportion to the fraction of the window
//! it covers, and the cluster demand of a window is the sum of those weighted
//! contributions.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default aggregation window: five minutes.
pub const DEFAULT_WINDOW_SECONDS: u64 = 300;

/// One usage record: average rate per resource over a half-open interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub start_time: f64,
    pub end_time: f64,
    pub usage: BTreeMap<String, f64>,
}

impl UsageEvent {
    pub fn new(start_time: f64, end_time: f64, usage: impl IntoIterator<Item = (String, f64)>) -> Self {
        Self {
            start_time,
            end_time,
            usage: usage.into_iter().collect(),
        }
    }

    fn is_valid(&self) -> bool {
        self.start_time.is_finite()
            && self.end_time.is_finite()
            && self.end_time > self.start_time
            && self.usage.values().all(|v| v.is_finite() && *v >= 0.0)
    }
}

/// Uniformly spaced demand series for one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSeries {
    pub cluster_id: String,
    pub resources: Vec<String>,
    pub window_seconds: u64,
    pub timestamps: Vec<i64>,
    /// Row-major: `values[t][r]`.
    pub values: Vec<Vec<f64>>,
}

impl TraceSeries {
    /// Builds a series and checks every structural invariant.
    pub fn new(
        cluster_id: impl Into<String>,
        resources: Vec<String>,
        window_seconds: u64,
        timestamps: Vec<i64>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let series = Self {
            cluster_id: cluster_id.into(),
            resources,
            window_seconds,
            timestamps,
            values,
        };
        series.check()?;
        Ok(series)
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn num_resources(&self) -> usize {
        self.resources.len()
    }

    pub fn resource_index(&self, name: &str) -> Option<usize> {
        self.resources.iter().position(|r| r == name)
    }

    pub fn column(&self, r: usize) -> Vec<f64> {
        self.values.iter().map(|row| row[r]).collect()
    }

    /// Copy restricted to the given resource columns, in the given order.
    pub fn select(&self, columns: &[usize]) -> Result<TraceSeries> {
        if let Some(&bad) = columns.iter().find(|&&c| c >= self.num_resources()) {
            return Err(Error::InvalidParameter(format!(
                "resource column {bad} out of range for {} resources",
                self.num_resources()
            )));
        }
        Ok(TraceSeries {
            cluster_id: self.cluster_id.clone(),
            resources: columns.iter().map(|&c| self.resources[c].clone()).collect(),
            window_seconds: self.window_seconds,
            timestamps: self.timestamps.clone(),
            values: self
                .values
                .iter()
                .map(|row| columns.iter().map(|&c| row[c]).collect())
                .collect(),
        })
    }

    fn check(&self) -> Result<()> {
        if self.resources.is_empty() || self.resources.len() > 2 {
            return Err(Error::InvalidParameter(format!(
                "a trace carries one or two resources, got {}",
                self.resources.len()
            )));
        }
        if self.window_seconds == 0 {
            return Err(Error::InvalidParameter("window_seconds must be positive".into()));
        }
        if self.values.len() != self.timestamps.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} value rows for {} timestamps",
                self.values.len(),
                self.timestamps.len()
            )));
        }
        let report = validate_trace(self);
        if !report.is_clean() {
            return Err(Error::InvalidParameter(format!("invalid trace: {report:?}")));
        }
        Ok(())
    }
}

/// Which windows were filled in and how many records were discarded.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub cluster_id: String,
    pub interpolated_indices: Vec<usize>,
    pub rejected_records: usize,
}

#[derive(Debug, Clone)]
pub struct Aggregation {
    pub series: TraceSeries,
    pub gaps: GapReport,
}

/// Aggregates usage events into `window_seconds` buckets over `[t0, t1)`.
///
/// Windows that no event overlaps are filled by linear interpolation between
/// the nearest populated neighbours (nearest value at the edges) and listed
/// in the gap report. Events with non-finite or negative usage, or an empty
/// interval, are rejected and counted.
pub fn aggregate_events(
    cluster_id: &str,
    resources: &[String],
    events: &[UsageEvent],
    window_seconds: u64,
    t0: i64,
    t1: i64,
) -> Result<Aggregation> {
    if window_seconds == 0 {
        return Err(Error::InvalidParameter("window_seconds must be positive".into()));
    }
    if t1 <= t0 {
        return Err(Error::InvalidParameter(format!("t1 ({t1}) must exceed t0 ({t0})")));
    }
    let span = (t1 - t0) as u64;
    if span % window_seconds != 0 {
        return Err(Error::InvalidParameter(format!(
            "span {span}s is not a multiple of the {window_seconds}s window"
        )));
    }
    if resources.is_empty() || resources.len() > 2 {
        return Err(Error::InvalidParameter(format!(
            "one or two resources required, got {}",
            resources.len()
        )));
    }
    if events.is_empty() {
        return Err(Error::NoData("event list is empty".into()));
    }

    let n_windows = (span / window_seconds) as usize;
    let w = window_seconds as f64;
    let origin = t0 as f64;
    let end = t1 as f64;
    let mut sums = vec![vec![0.0; resources.len()]; n_windows];
    let mut touched = vec![false; n_windows];
    let mut rejected = 0usize;

    for event in events {
        if !event.is_valid() {
            rejected += 1;
            continue;
        }
        let start = event.start_time.max(origin);
        let stop = event.end_time.min(end);
        if stop <= start {
            continue;
        }
        let first = ((start - origin) / w).floor() as usize;
        let last = (((stop - origin) / w).ceil() as usize).min(n_windows);
        let rates: Vec<f64> = resources
            .iter()
            .map(|r| event.usage.get(r).copied().unwrap_or(0.0))
            .collect();
        for idx in first..last {
            let lo = origin + idx as f64 * w;
            let overlap = (stop.min(lo + w) - start.max(lo)).max(0.0);
            if overlap <= 0.0 {
                continue;
            }
            let weight = overlap / w;
            touched[idx] = true;
            for (acc, rate) in sums[idx].iter_mut().zip(&rates) {
                *acc += rate * weight;
            }
        }
    }

    let populated: Vec<usize> = (0..n_windows).filter(|&i| touched[i]).collect();
    if populated.is_empty() {
        return Err(Error::NoData(format!(
            "no valid event overlaps [{t0}, {t1}) ({rejected} rejected)"
        )));
    }
    let interpolated = fill_gaps(&mut sums, &touched);

    let timestamps = (0..n_windows)
        .map(|i| t0 + (i as u64 * window_seconds) as i64)
        .collect();
    let series = TraceSeries::new(cluster_id, resources.to_vec(), window_seconds, timestamps, sums)?;
    Ok(Aggregation {
        series,
        gaps: GapReport {
            cluster_id: cluster_id.to_string(),
            interpolated_indices: interpolated,
            rejected_records: rejected,
        },
    })
}

/// Linear interpolation over untouched rows; returns the filled indices.
fn fill_gaps(rows: &mut [Vec<f64>], touched: &[bool]) -> Vec<usize> {
    let known: Vec<usize> = (0..rows.len()).filter(|&i| touched[i]).collect();
    let mut filled = Vec::new();
    for i in 0..rows.len() {
        if touched[i] {
            continue;
        }
        filled.push(i);
        let next = known.partition_point(|&k| k < i);
        let value: Vec<f64> = match (next.checked_sub(1).map(|p| known[p]), known.get(next)) {
            (Some(a), Some(&b)) => {
                let frac = (i - a) as f64 / (b - a) as f64;
                rows[a]
                    .iter()
                    .zip(&rows[b])
                    .map(|(x, y)| x + frac * (y - x))
                    .collect()
            }
            (Some(a), None) => rows[a].clone(),
            (None, Some(&b)) => rows[b].clone(),
            (None, None) => unreachable!("at least one populated window"),
        };
        rows[i] = value;
    }
    filled
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Indices `i` where `timestamps[i] - timestamps[i-1] != window_seconds`.
    pub spacing_violations: Vec<usize>,
    pub nan_count: usize,
    pub negative_count: usize,
    /// `(row, resource)` of every non-finite or negative value.
    pub range_violations: Vec<(usize, usize)>,
    pub row_shape_violations: Vec<usize>,
    pub duration_days: f64,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.spacing_violations.is_empty()
            && self.range_violations.is_empty()
            && self.row_shape_violations.is_empty()
    }
}

pub fn validate_trace(series: &TraceSeries) -> ValidationReport {
    let mut report = ValidationReport::default();
    let step = series.window_seconds as i64;
    for i in 1..series.timestamps.len() {
        if series.timestamps[i] - series.timestamps[i - 1] != step {
            report.spacing_violations.push(i);
        }
    }
    for (t, row) in series.values.iter().enumerate() {
        if row.len() != series.resources.len() {
            report.row_shape_violations.push(t);
        }
        for (r, v) in row.iter().enumerate() {
            if v.is_nan() {
                report.nan_count += 1;
                report.range_violations.push((t, r));
            } else if !v.is_finite() || *v < 0.0 {
                if *v < 0.0 {
                    report.negative_count += 1;
                }
                report.range_violations.push((t, r));
            }
        }
    }
    report.duration_days = match (series.timestamps.first(), series.timestamps.last()) {
        (Some(a), Some(b)) => (b - a + step) as f64 / 86_400.0,
        _ => 0.0,
    };
    report
}

/// Maps provider-specific event rows onto [`UsageEvent`].
pub trait EventAdapter {
    /// Canonical resource names produced by this adapter, in output order.
    fn resources(&self) -> Vec<String>;

    /// Converts one record; `Ok(None)` means the row is malformed and should
    /// be counted as rejected.
    fn convert(&self, headers: &csv::StringRecord, record: &csv::StringRecord) -> Result<Option<UsageEvent>>;
}

/// Column-name mapping adapter; covers the canonical event format as well as
/// the public Google and Alibaba schemas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub start_column: String,
    pub end_column: String,
    /// Divide raw timestamps by this to obtain seconds.
    pub time_divisor: f64,
    /// `(source column, canonical resource name)`.
    pub resources: Vec<(String, String)>,
}

impl ColumnMapping {
    /// `start_time,end_time,<resource>...` with epoch seconds.
    pub fn canonical(resources: &[String]) -> Self {
        Self {
            start_column: "start_time".into(),
            end_column: "end_time".into(),
            time_divisor: 1.0,
            resources: resources.iter().map(|r| (r.clone(), r.clone())).collect(),
        }
    }

    /// Flattened `instance_usage` rows of the 2019 Google cluster trace.
    pub fn google_2019() -> Self {
        Self {
            start_column: "start_time".into(),
            end_column: "end_time".into(),
            time_divisor: 1e6,
            resources: vec![
                ("average_usage.cpus".into(), "cpu".into()),
                ("average_usage.memory".into(), "memory".into()),
            ],
        }
    }

    /// `task_usage` table of the 2011 Google cluster trace.
    pub fn google_2011() -> Self {
        Self {
            start_column: "start_time".into(),
            end_column: "end_time".into(),
            time_divisor: 1e6,
            resources: vec![
                ("cpu_rate".into(), "cpu".into()),
                ("canonical_memory_usage".into(), "memory".into()),
            ],
        }
    }

    /// `batch_instance` table of the Alibaba 2018 trace.
    pub fn alibaba_2018() -> Self {
        Self {
            start_column: "start_time".into(),
            end_column: "end_time".into(),
            time_divisor: 1.0,
            resources: vec![("cpu_avg".into(), "cpu".into()), ("mem_avg".into(), "memory".into())],
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "google2019" | "gc19" => Some(Self::google_2019()),
            "google2011" | "gc11" => Some(Self::google_2011()),
            "alibaba2018" | "ali18" => Some(Self::alibaba_2018()),
            _ => None,
        }
    }
}

impl EventAdapter for ColumnMapping {
    fn resources(&self) -> Vec<String> {
        self.resources.iter().map(|(_, name)| name.clone()).collect()
    }

    fn convert(&self, headers: &csv::StringRecord, record: &csv::StringRecord) -> Result<Option<UsageEvent>> {
        let column = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| Error::InvalidParameter(format!("missing column `{name}`")))
        };
        let parse = |idx: usize| record.get(idx).and_then(|s| s.trim().parse::<f64>().ok());
        let (Some(start), Some(end)) = (parse(column(&self.start_column)?), parse(column(&self.end_column)?)) else {
            return Ok(None);
        };
        let mut usage = BTreeMap::new();
        for (source, name) in &self.resources {
            match parse(column(source)?) {
                Some(v) => {
                    usage.insert(name.clone(), v);
                }
                None => return Ok(None),
            }
        }
        Ok(Some(UsageEvent {
            start_time: start / self.time_divisor,
            end_time: end / self.time_divisor,
            usage,
        }))
    }
}

/// Events read from a file plus the count of unparseable rows.
#[derive(Debug, Clone)]
pub struct EventTable {
    pub resources: Vec<String>,
    pub events: Vec<UsageEvent>,
    pub unparseable: usize,
}

/// Reads canonical `start_time,end_time,<resource>...` event CSV.
pub fn read_events_csv(path: &Path) -> Result<EventTable> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    let resources: Vec<String> = headers
        .iter()
        .filter(|h| *h != "start_time" && *h != "end_time")
        .map(str::to_string)
        .collect();
    read_events_from(reader, headers, &ColumnMapping::canonical(&resources))
}

/// Reads a provider CSV through an adapter.
pub fn read_events_with(path: &Path, adapter: &dyn EventAdapter) -> Result<EventTable> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    read_events_from(reader, headers, adapter)
}

fn read_events_from(
    mut reader: csv::Reader<File>,
    headers: csv::StringRecord,
    adapter: &dyn EventAdapter,
) -> Result<EventTable> {
    let mut events = Vec::new();
    let mut unparseable = 0;
    for record in reader.records() {
        let record = record?;
        match adapter.convert(&headers, &record)? {
            Some(e) => events.push(e),
            None => unparseable += 1,
        }
    }
    Ok(EventTable {
        resources: adapter.resources(),
        events,
        unparseable,
    })
}

pub fn write_trace_csv(series: &TraceSeries, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "timestamp")?;
    for r in &series.resources {
        write!(out, ",{r}")?;
    }
    writeln!(out)?;
    for (ts, row) in series.timestamps.iter().zip(&series.values) {
        write!(out, "{ts}")?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a trace CSV without enforcing invariants; pair with
/// [`validate_trace`] to inspect a suspect file.
pub fn read_trace_csv_unchecked(path: &Path, cluster_id: &str) -> Result<TraceSeries> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.get(0) != Some("timestamp") || headers.len() < 2 {
        return Err(Error::artifact(path, "expected header `timestamp,<resource>...`"));
    }
    let resources: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record?;
        let bad = || Error::artifact(path, format!("unparseable row {}", line + 2));
        let ts: i64 = record.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let row = record
            .iter()
            .skip(1)
            .map(|s| s.parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        timestamps.push(ts);
        values.push(row);
    }
    let window_seconds = match timestamps.as_slice() {
        [a, b, ..] if b > a => (b - a) as u64,
        _ => DEFAULT_WINDOW_SECONDS,
    };
    Ok(TraceSeries {
        cluster_id: cluster_id.to_string(),
        resources,
        window_seconds,
        timestamps,
        values,
    })
}

pub fn read_trace_csv(path: &Path, cluster_id: &str) -> Result<TraceSeries> {
    let series = read_trace_csv_unchecked(path, cluster_id)?;
    series.check().map_err(|e| Error::artifact(path, e.to_string()))?;
    Ok(series)
}

pub fn write_gap_report(report: &GapReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}
