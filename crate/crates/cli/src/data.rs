//! `preprocess`, `synth` and `split`.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context as _, Result};
use serde::Serialize;

use cloudcast::dataset::{save_bundle, split};
use cloudcast::synth::generate_trace;
use cloudcast::trace::{
    aggregate_events, read_events_csv, read_events_with, read_trace_csv, validate_trace, write_gap_report,
    write_trace_csv, ColumnMapping, DEFAULT_WINDOW_SECONDS,
};

use crate::layout::{already_done, hash_of, mark_done, Context, DONE};

fn marker_for(trace: &Path) -> std::path::PathBuf {
    trace.with_extension("done")
}

pub struct PreprocessArgs<'a> {
    pub events: &'a Path,
    pub cluster: &'a str,
    pub adapter: Option<&'a str>,
    pub window_seconds: u64,
    pub start: Option<i64>,
    pub end: Option<i64>,
}

/// Aggregates an event CSV into a per-window trace.
pub fn preprocess(ctx: &Context, args: &PreprocessArgs) -> Result<()> {
    let out = ctx.trace_path(args.cluster);
    let input_hash = cloudcast::models::sha256_hex(
        &fs::read(args.events).with_context(|| format!("reading events {}", args.events.display()))?,
    );
    #[derive(Serialize)]
    struct Key<'a> {
        input: &'a str,
        adapter: Option<&'a str>,
        window: u64,
        start: Option<i64>,
        end: Option<i64>,
    }
    let hash = hash_of(&Key {
        input: &input_hash,
        adapter: args.adapter,
        window: args.window_seconds,
        start: args.start,
        end: args.end,
    });
    if already_done(&marker_for(&out), &hash, ctx.force)? {
        println!("preprocess: {} is up to date", out.display());
        return Ok(());
    }
    let table = match args.adapter {
        None | Some("canonical") => read_events_csv(args.events)?,
        Some(name) => {
            let mapping = ColumnMapping::preset(name)
                .with_context(|| format!("unknown adapter `{name}` (google2019, google2011, alibaba2018, canonical)"))?;
            read_events_with(args.events, &mapping)?
        }
    };
    if table.events.is_empty() {
        bail!("{} contains no usable events", args.events.display());
    }
    let w = args.window_seconds.max(1) as i64;
    let t0 = args.start.unwrap_or_else(|| {
        let first = table.events.iter().map(|e| e.start_time).fold(f64::INFINITY, f64::min);
        (first / w as f64).floor() as i64 * w
    });
    let t1 = args.end.unwrap_or_else(|| {
        let last = table.events.iter().map(|e| e.end_time).fold(f64::NEG_INFINITY, f64::max);
        (last / w as f64).ceil() as i64 * w
    });
    let mut agg = aggregate_events(args.cluster, &table.resources, &table.events, args.window_seconds, t0, t1)?;
    agg.gaps.rejected_records += table.unparseable;
    fs::create_dir_all(ctx.traces_dir())?;
    write_trace_csv(&agg.series, &out)?;
    write_gap_report(&agg.gaps, &out.with_extension("gaps.json"))?;
    mark_done(&marker_for(&out), &hash)?;
    println!(
        "preprocess: {} windows -> {} ({} interpolated, {} rejected records)",
        agg.series.len(),
        out.display(),
        agg.gaps.interpolated_indices.len(),
        agg.gaps.rejected_records
    );
    Ok(())
}

/// Writes one trace per configured synthetic spec.
pub fn synth(ctx: &Context) -> Result<()> {
    if ctx.config.synth.is_empty() {
        bail!("the config lists no synthetic traces under `synth`");
    }
    fs::create_dir_all(ctx.traces_dir())?;
    for spec in &ctx.config.synth {
        let out = ctx.trace_path(&spec.cluster_id);
        let hash = hash_of(spec);
        if already_done(&marker_for(&out), &hash, ctx.force)? {
            println!("synth: {} is up to date", out.display());
            continue;
        }
        let series = generate_trace(spec)?;
        write_trace_csv(&series, &out)?;
        mark_done(&marker_for(&out), &hash)?;
        println!("synth: {} points -> {}", series.len(), out.display());
    }
    Ok(())
}

/// Scales and windows every trace for every configured mode.
pub fn split_all(ctx: &Context) -> Result<()> {
    let clusters = ctx.trace_clusters()?;
    if clusters.is_empty() {
        bail!(
            "no traces in {}; run `cloudcast synth` or `cloudcast preprocess` first",
            ctx.traces_dir().display()
        );
    }
    for selector in ctx.config.selectors() {
        let mode = selector.label();
        for cluster in &clusters {
            let dir = ctx.bundle_dir(&mode, cluster);
            let trace_path = ctx.trace_path(cluster);
            let trace_hash = fs::read_to_string(marker_for(&trace_path)).unwrap_or_default();
            let hash = hash_of(&(&ctx.config.split, &mode, trace_hash.trim()));
            if already_done(&dir.join(DONE), &hash, ctx.force)? {
                println!("split: {} is up to date", dir.display());
                continue;
            }
            let series = read_trace_csv(&trace_path, cluster)?;
            let report = validate_trace(&series);
            if !report.is_clean() {
                log::warn!("{cluster}: trace validation issues: {report:?}");
            }
            if selector.width() == 2 && series.num_resources() != 2 {
                log::warn!("{cluster}: skipping bivariate split, trace has {} resources", series.num_resources());
                continue;
            }
            let bundle = split(&series, &selector, ctx.config.split)
                .with_context(|| format!("splitting {cluster} for {mode}"))?;
            bundle
                .check_leak_free()
                .map_err(|e| anyhow::anyhow!("{cluster}/{mode}: {e}"))?;
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            save_bundle(&bundle, &dir)?;
            mark_done(&dir.join(DONE), &hash)?;
            println!(
                "split: {cluster}/{mode}: {} train, {} val, {} test windows",
                bundle.train.len(),
                bundle.val.len(),
                bundle.test.len()
            );
        }
    }
    Ok(())
}

pub fn default_window() -> u64 {
    DEFAULT_WINDOW_SECONDS
}
