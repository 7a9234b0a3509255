//! `report`: summary tables, plots and copies of the runtime and DM tables.

use std::collections::BTreeMap;
use std::fs;

use anyhow::{bail, Result};

use cloudcast::evaluation::{
    aggregate_report, calibration_svg, read_metric_records, tpr_sr_svg, write_summary, MetricRecord, PlotSeries,
};
use cloudcast::models::sha256_hex;

use crate::evaluate::METRICS_FILE;
use crate::layout::{already_done, find_dirs_with, hash_of, mark_done, Context, DONE};

/// Mean `(x, y)` per position over equally long point lists.
fn mean_points(lists: &[Vec<(f64, f64)>]) -> Vec<(f64, f64)> {
    let n = lists.iter().map(Vec::len).min().unwrap_or(0);
    (0..n)
        .map(|i| {
            let k = lists.len() as f64;
            let x = lists.iter().map(|l| l[i].0).sum::<f64>() / k;
            let y = lists.iter().map(|l| l[i].1).sum::<f64>() / k;
            (x, y)
        })
        .collect()
}

type PlotKey = (String, String, String);

fn plots(records: &[MetricRecord]) -> BTreeMap<PlotKey, (Vec<PlotSeries>, Vec<PlotSeries>)> {
    let mut tpr: BTreeMap<PlotKey, BTreeMap<String, Vec<Vec<(f64, f64)>>>> = BTreeMap::new();
    let mut cal: BTreeMap<PlotKey, BTreeMap<String, Vec<Vec<(f64, f64)>>>> = BTreeMap::new();
    for rec in records {
        for rm in &rec.resources {
            let key = (rec.scenario.clone(), rec.mode.clone(), rm.resource.clone());
            tpr.entry(key.clone())
                .or_default()
                .entry(rec.model.clone())
                .or_default()
                .push(rm.tpr_sr.iter().map(|p| (p.sr, p.tpr)).collect());
            if let Some(c) = &rm.calibration {
                cal.entry(key)
                    .or_default()
                    .entry(rec.model.clone())
                    .or_default()
                    .push(c.levels.iter().copied().zip(c.achieved_sr.iter().copied()).collect());
            }
        }
    }
    let series = |m: Option<&BTreeMap<String, Vec<Vec<(f64, f64)>>>>| -> Vec<PlotSeries> {
        m.map(|m| {
            m.iter()
                .map(|(label, lists)| PlotSeries {
                    label: label.clone(),
                    points: mean_points(lists),
                })
                .collect()
        })
        .unwrap_or_default()
    };
    tpr.keys()
        .map(|k| (k.clone(), (series(tpr.get(k)), series(cal.get(k)))))
        .collect()
}

pub fn report(ctx: &Context, allow_mixed: bool) -> Result<()> {
    let runs_root = ctx.run_root().join("runs");
    let runs = find_dirs_with(&runs_root, DONE)?;
    if runs.is_empty() {
        bail!(
            "no completed runs below {}; run `cloudcast scenario` and `cloudcast evaluate` first",
            runs_root.display()
        );
    }
    let paths: Vec<_> = runs.iter().map(|d| d.join(METRICS_FILE)).collect();
    let (records, missing) = read_metric_records(&paths);
    if !missing.is_empty() {
        let list: Vec<String> = missing.iter().map(|(p, e)| format!("  {} ({e})", p.display())).collect();
        bail!(
            "{} metric files are missing or unreadable; run `cloudcast evaluate` first:\n{}",
            missing.len(),
            list.join("\n")
        );
    }
    let dir = ctx.report_dir();
    let mut inputs: Vec<String> = paths
        .iter()
        .map(|p| Ok(sha256_hex(&fs::read(p)?)))
        .collect::<Result<_>>()?;
    for extra in [ctx.bench_dir().join("runtime.csv"), ctx.evaluation_dir().join("dm_tests.csv")] {
        inputs.push(fs::read(&extra).map(|b| sha256_hex(&b)).unwrap_or_default());
    }
    let hash = hash_of(&(inputs, allow_mixed));
    if already_done(&dir.join(DONE), &hash, ctx.force)? {
        println!("report: {} is up to date", dir.display());
        return Ok(());
    }

    let tables = aggregate_report(&records, allow_mixed)?;
    fs::create_dir_all(&dir)?;
    let mut written = write_summary(&dir, &tables)?;
    let plot_dir = dir.join("plots");
    fs::create_dir_all(&plot_dir)?;
    for ((scenario, mode, resource), (tpr, cal)) in plots(&records) {
        let stem = if mode == resource {
            format!("{scenario}_{mode}")
        } else {
            format!("{scenario}_{mode}_{resource}")
        };
        let p = plot_dir.join(format!("{stem}_tpr_sr.svg"));
        fs::write(&p, tpr_sr_svg(&format!("{scenario} {mode} {resource}: TPR vs SR"), &tpr))?;
        written.push(p);
        if !cal.is_empty() {
            let p = plot_dir.join(format!("{stem}_calibration.svg"));
            fs::write(&p, calibration_svg(&format!("{scenario} {mode} {resource}: calibration"), &cal))?;
            written.push(p);
        }
    }
    for (src, name) in [
        (ctx.bench_dir().join("runtime.csv"), "runtime.csv"),
        (ctx.evaluation_dir().join("dm_tests.csv"), "dm_tests.csv"),
    ] {
        if src.exists() {
            fs::copy(&src, dir.join(name))?;
            written.push(dir.join(name));
        } else {
            log::info!("{} not found; skipping {name}", src.display());
        }
    }
    mark_done(&dir.join(DONE), &hash)?;
    println!("report: {} files -> {}", written.len(), dir.display());
    Ok(())
}
