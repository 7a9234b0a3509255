//! `evaluate`: per-run metrics and pairwise Diebold-Mariano tests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use serde::Serialize;

use cloudcast::dataset::{SplitBundle, WindowSample};
use cloudcast::evaluation::{
    breusch_pagan, calibration_curve_with, default_levels, diebold_mariano, pinball_report, point_metrics,
    qos_metrics, tpr_sr_curve, write_metric_record, CurvePoint, DmLoss, MetricRecord, ResourceMetrics,
};
use cloudcast::models::{read_predictions, upper_bound_with, ForecastDistribution, IntervalSide, PredictionTable};
use cloudcast::scenarios::{calibrate_point_threshold, ScenarioSpec};
use cloudcast::trace::read_trace_csv;

use crate::experiments::load_bundles;
use crate::layout::{find_dirs_with, hash_of, mark_done, read_marker, Context, DONE};

pub const METRICS_FILE: &str = "metrics.json";
const METRICS_DONE: &str = ".metrics.done";

/// Evaluation settings that can be overridden on the command line.
#[derive(Debug, Clone, Serialize)]
pub struct EvalSettings {
    pub confidence: Vec<f64>,
    pub side: IntervalSide,
}

/// A completed run directory and what it was trained for.
struct Run {
    dir: PathBuf,
    spec: ScenarioSpec,
    seed: u64,
}

fn completed_runs(ctx: &Context) -> Result<Vec<Run>> {
    let root = ctx.run_root().join("runs");
    let mut out = Vec::new();
    for dir in find_dirs_with(&root, DONE)? {
        let text = fs::read_to_string(dir.join("spec.json"))
            .with_context(|| format!("{} is marked complete but has no spec.json", dir.display()))?;
        let spec: ScenarioSpec = serde_json::from_str(&text)?;
        let seed = spec.seeds[0];
        out.push(Run { dir, spec, seed });
    }
    Ok(out)
}

fn actuals(samples: &[WindowSample], table: &PredictionTable, r: usize) -> Result<Vec<f64>> {
    let by_index: BTreeMap<usize, &WindowSample> = samples.iter().map(|s| (s.target_index, s)).collect();
    table
        .target_indices
        .iter()
        .map(|i| {
            by_index
                .get(i)
                .map(|s| s.target()[r])
                .with_context(|| format!("prediction for target {i} has no matching window"))
        })
        .collect()
}

/// Raw values of another resource at the target indices, used as the
/// heteroscedasticity regressor.
fn companion_regressor(ctx: &Context, cluster: &str, resource: &str, indices: &[usize]) -> Option<Vec<f64>> {
    let series = read_trace_csv(&ctx.trace_path(cluster), cluster).ok()?;
    let other = series.resources.iter().position(|r| r != resource)?;
    let column = series.column(other);
    indices.iter().map(|&i| column.get(i).copied()).collect()
}

fn point_bounds(
    val_mean: &[f64],
    val_actual: &[f64],
    test: &ForecastDistribution,
    level: f64,
) -> Result<(f64, Vec<f64>)> {
    let theta = calibrate_point_threshold(val_mean, val_actual, level)?;
    let ub = upper_bound_with(&test.clone().with_threshold(theta), level / 100.0, IntervalSide::OneSided)?;
    Ok((theta, ub))
}

fn resource_metrics(
    ctx: &Context,
    settings: &EvalSettings,
    bundle: &SplitBundle,
    val: &PredictionTable,
    test: &PredictionTable,
    r: usize,
) -> Result<ResourceMetrics> {
    let resource = test.resources[r].clone();
    let dist = test.dist.select(r);
    let actual = actuals(&bundle.test, test, r)?;
    let point = point_metrics(&dist.mean, &actual)?;
    let probabilistic = dist.std.is_some();

    let mut qos = Vec::new();
    let mut thresholds = Vec::new();
    let mut tpr_sr = Vec::new();
    let (calibration, pinball) = if probabilistic {
        for &c in &settings.confidence {
            qos.push(qos_metrics(&upper_bound_with(&dist, c / 100.0, settings.side)?, &actual, c)?);
        }
        tpr_sr = tpr_sr_curve(&dist, &actual, &default_levels(), settings.side)?;
        (
            Some(calibration_curve_with(&dist, &actual, &default_levels(), settings.side)?),
            pinball_report(&dist, &actual, &settings.confidence)?,
        )
    } else {
        let val_mean = val.dist.select(r).mean;
        let val_actual = actuals(&bundle.val, val, r)?;
        for &c in &settings.confidence {
            let (theta, ub) = point_bounds(&val_mean, &val_actual, &dist, c)?;
            thresholds.push((c, theta));
            qos.push(qos_metrics(&ub, &actual, c)?);
        }
        for level in default_levels() {
            let (_, ub) = point_bounds(&val_mean, &val_actual, &dist, level)?;
            let q = qos_metrics(&ub, &actual, level)?;
            tpr_sr.push(CurvePoint {
                level,
                tpr: q.tpr,
                sr: q.sr,
            });
        }
        (None, Vec::new())
    };

    let residuals: Vec<f64> = actual.iter().zip(&dist.mean).map(|(a, m)| a - m).collect();
    let regressor = companion_regressor(ctx, &test.cluster_id, &resource, &test.target_indices)
        .unwrap_or_else(|| dist.mean.clone());
    let bp = match breusch_pagan(&residuals, &[regressor]) {
        Ok(t) => Some(t),
        Err(e) => {
            log::warn!("{}: Breusch-Pagan skipped: {e}", test.cluster_id);
            None
        }
    };
    Ok(ResourceMetrics {
        resource,
        point,
        qos,
        tpr_sr,
        calibration,
        pinball,
        breusch_pagan: bp,
        thresholds,
    })
}

fn evaluate_run(ctx: &Context, settings: &EvalSettings, run: &Run, bundle: &SplitBundle) -> Result<MetricRecord> {
    let val = read_predictions(&run.dir.join("val_predictions.csv"))?;
    let test = read_predictions(&run.dir.join("test_predictions.csv"))?;
    let resources = (0..test.resources.len())
        .map(|r| resource_metrics(ctx, settings, bundle, &val, &test, r))
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricRecord {
        scenario: run.spec.scenario.label().to_string(),
        model: run.spec.model_kind.label().to_string(),
        mode: run.spec.prediction_mode.label(),
        cluster: run.spec.target_cluster.clone(),
        seed: run.seed,
        config_hash: read_marker(&run.dir.join("config_hash")).unwrap_or_default(),
        resources,
    })
}

/// Writes `metrics.json` into every completed run and the pairwise DM table.
pub fn evaluate(ctx: &Context, settings: &EvalSettings) -> Result<()> {
    let runs = completed_runs(ctx)?;
    if runs.is_empty() {
        bail!(
            "no completed runs below {}; run `cloudcast scenario` (or `cloudcast train`) first",
            ctx.run_root().join("runs").display()
        );
    }
    let mut bundles: BTreeMap<String, BTreeMap<String, SplitBundle>> = BTreeMap::new();
    let mut evaluated = 0;
    let mut fresh = 0;
    for run in &runs {
        let mode = run.spec.prediction_mode.label();
        if !bundles.contains_key(&mode) {
            bundles.insert(mode.clone(), load_bundles(ctx, &mode)?);
        }
        let bundle = bundles[&mode]
            .get(&run.spec.target_cluster)
            .with_context(|| format!("bundle {mode}/{} is missing; run `cloudcast split` first", run.spec.target_cluster))?;
        let hash = hash_of(&(read_marker(&run.dir.join(DONE)), settings));
        if read_marker(&run.dir.join(METRICS_DONE)).as_deref() == Some(hash.as_str()) && !ctx.force {
            evaluated += 1;
            continue;
        }
        let record = evaluate_run(ctx, settings, run, bundle).with_context(|| format!("evaluating {}", run.dir.display()))?;
        write_metric_record(&run.dir.join(METRICS_FILE), &record)?;
        mark_done(&run.dir.join(METRICS_DONE), &hash)?;
        evaluated += 1;
        fresh += 1;
    }
    dm_tests(ctx, &runs, &bundles)?;
    println!("evaluate: {evaluated} runs ({fresh} recomputed)");
    Ok(())
}

#[derive(Debug, Serialize)]
struct DmRow {
    scenario: String,
    target: String,
    mode: String,
    seed: u64,
    resource: String,
    model_a: String,
    model_b: String,
    statistic: f64,
    p_value: f64,
}

fn forecast_errors(dir: &Path, bundle: &SplitBundle, r: usize) -> Result<(String, Vec<usize>, Vec<f64>)> {
    let test = read_predictions(&dir.join("test_predictions.csv"))?;
    let actual = actuals(&bundle.test, &test, r)?;
    let errors = actual.iter().zip(test.dist.mean_of(r)).map(|(a, m)| a - m).collect();
    Ok((test.resources[r].clone(), test.target_indices, errors))
}

fn dm_tests(
    ctx: &Context,
    runs: &[Run],
    bundles: &BTreeMap<String, BTreeMap<String, SplitBundle>>,
) -> Result<()> {
    let path = ctx.evaluation_dir().join("dm_tests.csv");
    let marker = ctx.evaluation_dir().join(DONE);
    let inputs: Vec<(String, Option<String>)> = runs
        .iter()
        .map(|r| (r.dir.display().to_string(), read_marker(&r.dir.join(DONE))))
        .collect();
    let hash = hash_of(&inputs);
    if !ctx.force && path.exists() && read_marker(&marker).as_deref() == Some(hash.as_str()) {
        return Ok(());
    }
    let mut groups: BTreeMap<(String, String, String, u64), Vec<&Run>> = BTreeMap::new();
    for run in runs {
        groups
            .entry((
                run.spec.scenario.label().to_string(),
                run.spec.target_cluster.clone(),
                run.spec.prediction_mode.label(),
                run.seed,
            ))
            .or_default()
            .push(run);
    }
    let mut rows = Vec::new();
    for ((scenario, target, mode, seed), members) in &groups {
        let bundle = &bundles[mode][target];
        let h = bundle.options.horizon_steps;
        for (i, a) in members.iter().enumerate() {
            for b in &members[i + 1..] {
                for r in 0..bundle.width() {
                    let (resource, ia, ea) = forecast_errors(&a.dir, bundle, r)?;
                    let (_, ib, eb) = forecast_errors(&b.dir, bundle, r)?;
                    if ia != ib {
                        log::warn!("{scenario}/{target}: runs predict different windows; DM skipped");
                        continue;
                    }
                    let (statistic, p_value) = match diebold_mariano(&ea, &eb, DmLoss::Squared, h) {
                        Ok(t) => (t.statistic, t.p_value),
                        Err(e) => {
                            log::warn!("{scenario}/{target}/{resource}: DM undefined: {e}");
                            (f64::NAN, f64::NAN)
                        }
                    };
                    rows.push(DmRow {
                        scenario: scenario.clone(),
                        target: target.clone(),
                        mode: mode.clone(),
                        seed: *seed,
                        resource,
                        model_a: a.spec.model_kind.label().to_string(),
                        model_b: b.spec.model_kind.label().to_string(),
                        statistic,
                        p_value,
                    });
                }
            }
        }
    }
    fs::create_dir_all(ctx.evaluation_dir())?;
    let mut w = csv::Writer::from_path(&path)?;
    for row in &rows {
        w.serialize(row)?;
    }
    if rows.is_empty() {
        w.write_record(["scenario", "target", "mode", "seed", "resource", "model_a", "model_b", "statistic", "p_value"])?;
    }
    w.flush()?;
    mark_done(&marker, &hash)?;
    Ok(())
}
