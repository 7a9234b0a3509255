//! Per-run metric files and the summary tables aggregated from them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stats::TestResult;
use super::{CalibrationCurve, CurvePoint, PointMetrics, QosReport};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceMetrics {
    pub resource: String,
    pub point: PointMetrics,
    pub qos: Vec<QosReport>,
    pub tpr_sr: Vec<CurvePoint>,
    /// Absent for point models.
    #[serde(default)]
    pub calibration: Option<CalibrationCurve>,
    /// `(level, loss)` pairs.
    #[serde(default)]
    pub pinball: Vec<(f64, f64)>,
    #[serde(default)]
    pub breusch_pagan: Option<TestResult>,
    /// Point models: `(level, threshold)` calibrated on validation data.
    #[serde(default)]
    pub thresholds: Vec<(f64, f64)>,
}

/// All metrics of one (scenario, model, cluster, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub scenario: String,
    pub model: String,
    pub mode: String,
    pub cluster: String,
    pub seed: u64,
    pub config_hash: String,
    pub resources: Vec<ResourceMetrics>,
}

pub fn write_metric_record(path: &Path, record: &MetricRecord) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(record)?)?;
    Ok(())
}

/// Reads every file that exists; missing or unreadable ones are returned
/// alongside instead of failing the whole read.
pub fn read_metric_records(paths: &[PathBuf]) -> (Vec<MetricRecord>, Vec<(PathBuf, String)>) {
    let mut records = Vec::new();
    let mut missing = Vec::new();
    for p in paths {
        match fs::read_to_string(p)
            .map_err(Error::from)
            .and_then(|s| serde_json::from_str::<MetricRecord>(&s).map_err(Error::from))
        {
            Ok(r) => records.push(r),
            Err(e) => missing.push((p.clone(), e.to_string())),
        }
    }
    (records, missing)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub model: String,
    pub mode: String,
    pub resource: String,
    pub confidence: Option<f64>,
    /// Number of (cluster, seed) runs averaged.
    pub runs: usize,
    pub clusters: usize,
    pub values: BTreeMap<String, f64>,
    pub best: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryTables {
    /// `mse`, `mae`.
    pub point: Vec<SummaryRow>,
    /// `sr`, `op`, `up`, `tpr` per confidence level.
    pub qos: Vec<SummaryRow>,
    /// `curve_mse`, `curve_mae`.
    pub calibration: Vec<SummaryRow>,
}

type GroupKey = (String, String, String, String);

struct Acc {
    clusters: BTreeSet<String>,
    runs: usize,
    sums: BTreeMap<String, f64>,
}

impl Acc {
    fn new() -> Self {
        Acc {
            clusters: BTreeSet::new(),
            runs: 0,
            sums: BTreeMap::new(),
        }
    }

    fn add(&mut self, cluster: &str, values: &[(&str, f64)]) {
        self.clusters.insert(cluster.to_string());
        self.runs += 1;
        for (k, v) in values {
            *self.sums.entry(k.to_string()).or_default() += v;
        }
    }

    fn row(&self, key: &GroupKey, confidence: Option<f64>) -> SummaryRow {
        SummaryRow {
            scenario: key.0.clone(),
            model: key.1.clone(),
            mode: key.2.clone(),
            resource: key.3.clone(),
            confidence,
            runs: self.runs,
            clusters: self.clusters.len(),
            values: self.sums.iter().map(|(k, v)| (k.clone(), v / self.runs as f64)).collect(),
            best: false,
        }
    }
}

/// Averages metrics over clusters and seeds per (scenario, model, mode,
/// resource) and flags the best model of every (scenario, mode, resource)
/// comparison: lowest MSE, lowest curve MAE, and lowest TPR among rows whose
/// SR reaches the confidence level.
///
/// Runs of one group produced by different configurations are rejected
/// unless `allow_mixed_configs` is set.
pub fn aggregate_report(records: &[MetricRecord], allow_mixed_configs: bool) -> Result<SummaryTables> {
    if records.is_empty() {
        return Err(Error::NoData("no metric records to aggregate".into()));
    }
    let mut hashes: BTreeMap<(String, String, String), BTreeSet<String>> = BTreeMap::new();
    for r in records {
        hashes
            .entry((r.scenario.clone(), r.model.clone(), r.mode.clone()))
            .or_default()
            .insert(r.config_hash.clone());
    }
    if !allow_mixed_configs {
        if let Some((k, set)) = hashes.iter().find(|(_, s)| s.len() > 1) {
            return Err(Error::InvalidParameter(format!(
                "runs of {}/{}/{} come from {} different configurations; rerun them or allow mixing",
                k.0,
                k.1,
                k.2,
                set.len()
            )));
        }
    }

    let mut point: BTreeMap<GroupKey, Acc> = BTreeMap::new();
    let mut qos: BTreeMap<(GroupKey, u64), (f64, Acc)> = BTreeMap::new();
    let mut cal: BTreeMap<GroupKey, Acc> = BTreeMap::new();
    for r in records {
        for m in &r.resources {
            let key = (r.scenario.clone(), r.model.clone(), r.mode.clone(), m.resource.clone());
            point
                .entry(key.clone())
                .or_insert_with(Acc::new)
                .add(&r.cluster, &[("mse", m.point.mse), ("mae", m.point.mae)]);
            for q in &m.qos {
                qos.entry((key.clone(), q.confidence.to_bits()))
                    .or_insert_with(|| (q.confidence, Acc::new()))
                    .1
                    .add(&r.cluster, &[("sr", q.sr), ("op", q.op), ("up", q.up), ("tpr", q.tpr)]);
            }
            if let Some(c) = &m.calibration {
                cal.entry(key)
                    .or_insert_with(Acc::new)
                    .add(&r.cluster, &[("curve_mse", c.curve_mse), ("curve_mae", c.curve_mae)]);
            }
        }
    }

    let mut tables = SummaryTables {
        point: point.iter().map(|(k, a)| a.row(k, None)).collect(),
        qos: qos.iter().map(|((k, _), (c, a))| a.row(k, Some(*c))).collect(),
        calibration: cal.iter().map(|(k, a)| a.row(k, None)).collect(),
    };
    flag_best(&mut tables.point, |r| Some(r.values["mse"]));
    flag_best(&mut tables.calibration, |r| Some(r.values["curve_mae"]));
    flag_best(&mut tables.qos, |r| {
        (r.values["sr"] >= r.confidence.unwrap_or(0.0)).then(|| r.values["tpr"])
    });
    Ok(tables)
}

fn flag_best(rows: &mut [SummaryRow], score: impl Fn(&SummaryRow) -> Option<f64>) {
    let mut best: BTreeMap<(String, String, String, Option<u64>), (f64, usize)> = BTreeMap::new();
    for (i, r) in rows.iter().enumerate() {
        if let Some(s) = score(r).filter(|s| s.is_finite()) {
            let k = (
                r.scenario.clone(),
                r.mode.clone(),
                r.resource.clone(),
                r.confidence.map(f64::to_bits),
            );
            let e = best.entry(k).or_insert((s, i));
            if s < e.0 {
                *e = (s, i);
            }
        }
    }
    for (_, i) in best.values() {
        rows[*i].best = true;
    }
}

fn write_rows(path: &Path, rows: &[SummaryRow], metrics: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["scenario", "model", "mode", "resource", "confidence", "runs", "clusters"];
    header.extend_from_slice(metrics);
    header.push("best");
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.scenario.clone(),
            r.model.clone(),
            r.mode.clone(),
            r.resource.clone(),
            r.confidence.map(|c| c.to_string()).unwrap_or_default(),
            r.runs.to_string(),
            r.clusters.to_string(),
        ];
        rec.extend(metrics.iter().map(|m| r.values.get(*m).map(|v| v.to_string()).unwrap_or_default()));
        rec.push(r.best.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn text_table(out: &mut String, title: &str, rows: &[SummaryRow], metrics: &[&str]) {
    let _ = writeln!(out, "{title}");
    let _ = write!(out, "{:<16} {:<8} {:<10} {:<8} {:>6}", "scenario", "model", "mode", "resource", "conf");
    for m in metrics {
        let _ = write!(out, " {m:>12}");
    }
    let _ = writeln!(out);
    for r in rows {
        let conf = r.confidence.map(|c| format!("{c}")).unwrap_or_else(|| "-".into());
        let _ = write!(
            out,
            "{:<16} {:<8} {:<10} {:<8} {:>6}",
            r.scenario, r.model, r.mode, r.resource, conf
        );
        for m in metrics {
            let _ = write!(out, " {:>12.6}", r.values.get(*m).copied().unwrap_or(f64::NAN));
        }
        let _ = writeln!(out, "{}", if r.best { "  *" } else { "" });
    }
    let _ = writeln!(out);
}

/// Writes `point_summary.csv`, `qos_summary.csv`, `calibration_summary.csv`
/// and a formatted `summary.txt`; returns the written paths.
pub fn write_summary(dir: &Path, tables: &SummaryTables) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let point = dir.join("point_summary.csv");
    let qos = dir.join("qos_summary.csv");
    let cal = dir.join("calibration_summary.csv");
    let txt = dir.join("summary.txt");
    write_rows(&point, &tables.point, &["mse", "mae"])?;
    write_rows(&qos, &tables.qos, &["sr", "op", "up", "tpr"])?;
    write_rows(&cal, &tables.calibration, &["curve_mse", "curve_mae"])?;
    let mut s = String::new();
    text_table(&mut s, "Point accuracy (mean over clusters and seeds)", &tables.point, &["mse", "mae"]);
    text_table(&mut s, "Allocation statistics", &tables.qos, &["sr", "op", "up", "tpr"]);
    text_table(&mut s, "Calibration curve error", &tables.calibration, &["curve_mse", "curve_mae"]);
    fs::write(&txt, s)?;
    Ok(vec![point, qos, cal, txt])
}
