//! `bench`: runtime measurements on one cluster.

use std::fs;

use anyhow::{Context as _, Result};

use cloudcast::bench::{append_raw_log, run_benchmark, write_report_csv, BenchLock, BenchOptions};
use cloudcast::dataset::ResourceSelector;
use cloudcast::models::{build_model, train, TrainOptions};

use crate::experiments::load_bundles;
use crate::layout::{already_done, hash_of, mark_done, read_marker, Context, DONE};

pub fn bench(ctx: &Context) -> Result<()> {
    let section = &ctx.config.bench;
    let mode = section
        .mode
        .clone()
        .or_else(|| ctx.config.modes.first().cloned())
        .context("no prediction mode configured")?;
    let selector = ResourceSelector::parse(&mode);
    let bundles = load_bundles(ctx, &mode)?;
    let cluster = match &section.cluster {
        Some(c) => c.clone(),
        None => bundles.keys().next().cloned().context("no bundles")?,
    };
    let bundle = bundles
        .get(&cluster)
        .with_context(|| format!("bench cluster `{cluster}` has no `{mode}` bundle; run `cloudcast split` first"))?;
    let kinds = ctx.config.model_kinds();
    let configs = kinds
        .iter()
        .map(|k| ctx.config.model_config(*k, &selector))
        .collect::<Result<Vec<_>>>()?;

    let dir = ctx.bench_dir();
    let hash = hash_of(&(section, &configs, read_marker(&ctx.bundle_dir(&mode, &cluster).join(DONE))));
    if already_done(&dir.join(DONE), &hash, ctx.force)? {
        println!("bench: {} is up to date", dir.display());
        return Ok(());
    }
    let _lock = BenchLock::acquire(&dir.join("bench.lock"))
        .context("another benchmark is running (remove bench.lock if it is stale)")?;
    let train_opts = TrainOptions {
        max_epochs: section.max_epochs,
        patience: ctx.config.train.patience,
        ..TrainOptions::default()
    };
    let options = BenchOptions {
        fractions: section.fractions.clone(),
        step_counts: section.step_counts.clone(),
        repetitions: section.repetitions,
        inference_runs: section.inference_runs,
        warmup: section.warmup,
        train: train_opts,
        finetune_epochs: section.finetune_epochs,
        finetune_lr_factor: ctx.config.fine_tune.lr_factor,
    };
    let raw = dir.join("raw.jsonl");
    if raw.exists() {
        fs::remove_file(&raw)?;
    }
    let mut reports = Vec::new();
    for (kind, config) in kinds.iter().zip(&configs) {
        let label = format!("{}-{mode}", kind.label());
        log::info!("bench: {label} on {cluster}");
        let model = train(&build_model(config, bundle.options.input_len)?, &bundle.train, &bundle.val, &train_opts)?;
        let report = run_benchmark(&label, config, &model, bundle, &options)?;
        append_raw_log(&raw, &report)?;
        reports.push(report);
    }
    write_report_csv(&dir.join("runtime.csv"), &reports)?;
    fs::write(dir.join("runtime.json"), serde_json::to_string_pretty(&reports)?)?;
    mark_done(&dir.join(DONE), &hash)?;
    println!("bench: {} models -> {}", reports.len(), dir.join("runtime.csv").display());
    Ok(())
}
