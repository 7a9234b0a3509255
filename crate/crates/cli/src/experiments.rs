//! `train`, `scenario` and `search`.

use std::collections::BTreeMap;
use std::fs;

use anyhow::{bail, Context as _, Result};
use serde::Serialize;

use cloudcast::dataset::{load_bundle, merge_shuffle, ResourceSelector, SplitBundle};
use cloudcast::models::{ModelConfig, ModelKind, TrainOptions};
use cloudcast::par;
use cloudcast::scenarios::{
    run_dir, run_scenario, search_hyperparams, PretrainCache, Scenario, ScenarioSpec,
};

use crate::layout::{already_done, hash_of, mark_done, read_marker, Context, DONE};

/// Command-line narrowing of the configured job grid.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub scenarios: Option<Vec<Scenario>>,
    pub targets: Option<Vec<String>>,
    pub models: Option<Vec<ModelKind>>,
    pub modes: Option<Vec<String>>,
    pub seeds: Option<Vec<u64>>,
}

impl Selection {
    fn scenarios(&self, ctx: &Context) -> Vec<Scenario> {
        self.scenarios.clone().unwrap_or_else(|| ctx.config.scenario_list())
    }

    fn models(&self, ctx: &Context) -> Vec<ModelKind> {
        self.models.clone().unwrap_or_else(|| ctx.config.model_kinds())
    }

    fn selectors(&self, ctx: &Context) -> Vec<ResourceSelector> {
        match &self.modes {
            Some(m) => m.iter().map(|s| ResourceSelector::parse(s)).collect(),
            None => ctx.config.selectors(),
        }
    }

    fn seeds(&self, ctx: &Context) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| ctx.config.seeds.clone())
    }

    fn targets(&self, ctx: &Context, universe: &[String]) -> Vec<String> {
        self.targets
            .clone()
            .or_else(|| ctx.config.targets.clone())
            .unwrap_or_else(|| universe.to_vec())
    }
}

/// Loads every completed bundle of `mode`.
pub fn load_bundles(ctx: &Context, mode: &str) -> Result<BTreeMap<String, SplitBundle>> {
    let clusters = ctx.bundle_clusters(mode)?;
    if clusters.is_empty() {
        bail!(
            "no `{mode}` bundles in {}; run `cloudcast split` first",
            ctx.bundles_dir(mode).display()
        );
    }
    clusters
        .into_iter()
        .map(|c| {
            let b = load_bundle(&ctx.bundle_dir(mode, &c)).with_context(|| format!("loading bundle {mode}/{c}"))?;
            Ok((c, b))
        })
        .collect()
}

fn train_options(ctx: &Context) -> TrainOptions {
    TrainOptions {
        max_epochs: ctx.config.train.max_epochs,
        patience: ctx.config.train.patience,
        ..TrainOptions::default()
    }
}

#[derive(Serialize)]
struct JobKey<'a> {
    spec: &'a ScenarioSpec,
    config: &'a ModelConfig,
    train: TrainOptions,
    bundles: Vec<Option<String>>,
}

/// Outcome counts of a batch of jobs.
#[derive(Debug, Default, Clone, Copy)]
pub struct JobTally {
    pub trained: usize,
    pub skipped: usize,
    pub not_applicable: usize,
}

/// One (model, mode, seed) group: every scenario and target, sharing
/// pretrained models between targets with the same training clusters.
struct Group {
    kind: ModelKind,
    selector: ResourceSelector,
    seed: u64,
}

fn run_group(
    ctx: &Context,
    group: &Group,
    scenarios: &[Scenario],
    targets: &[String],
    bundles: &BTreeMap<String, SplitBundle>,
) -> Result<JobTally> {
    let mode = group.selector.label();
    let config = ctx.config.model_config(group.kind, &group.selector)?;
    let opts = train_options(ctx);
    let universe: Vec<String> = bundles.keys().cloned().collect();
    let root = ctx.run_root();
    let mut cache = PretrainCache::new();
    let mut tally = JobTally::default();
    for &scenario in scenarios {
        for target in targets {
            let spec = ScenarioSpec {
                scenario,
                target_cluster: target.clone(),
                cluster_universe: universe.clone(),
                model_kind: group.kind,
                prediction_mode: group.selector.clone(),
                seeds: vec![group.seed],
                fine_tune_opts: scenario.is_fine_tuned().then_some(ctx.config.fine_tune),
                gc19_group: ctx.config.gc19_group.clone(),
            };
            if let Err(e) = spec.validate() {
                log::info!("skipping {} -> {target}: {e}", scenario.label());
                tally.not_applicable += 1;
                continue;
            }
            let bundle_hashes = spec
                .training_clusters()
                .iter()
                .chain([target])
                .map(|c| read_marker(&ctx.bundle_dir(&mode, c).join(DONE)))
                .collect();
            let hash = hash_of(&JobKey {
                spec: &spec,
                config: &config,
                train: opts,
                bundles: bundle_hashes,
            });
            let dir = run_dir(&root, scenario, target, &spec.model_label(), group.seed);
            if already_done(&dir.join(DONE), &hash, ctx.force)? {
                tally.skipped += 1;
                continue;
            }
            if dir.exists() {
                fs::remove_dir_all(&dir)?;
            }
            run_scenario(&spec, bundles, &config, &opts, Some(&root), &mut cache)
                .with_context(|| format!("{} -> {target} ({}, seed {})", scenario.label(), spec.model_label(), group.seed))?;
            fs::write(dir.join("config_hash"), format!("{}\n", config.content_hash()))?;
            mark_done(&dir.join(DONE), &hash)?;
            println!("trained {}", dir.display());
            tally.trained += 1;
        }
    }
    Ok(tally)
}

/// Runs the selected scenario grid, one parallel worker per
/// (model, mode, seed) group.
pub fn scenarios(ctx: &Context, sel: &Selection) -> Result<JobTally> {
    let scenarios = sel.scenarios(ctx);
    let mut total = JobTally::default();
    for selector in sel.selectors(ctx) {
        let mode = selector.label();
        let bundles = load_bundles(ctx, &mode)?;
        let universe: Vec<String> = bundles.keys().cloned().collect();
        let targets = sel.targets(ctx, &universe);
        if let Some(t) = targets.iter().find(|t| !bundles.contains_key(*t)) {
            bail!("target `{t}` has no `{mode}` bundle; run `cloudcast split` first");
        }
        let groups: Vec<Group> = sel
            .models(ctx)
            .into_iter()
            .flat_map(|kind| {
                let selector = selector.clone();
                sel.seeds(ctx).into_iter().map(move |seed| Group {
                    kind,
                    selector: selector.clone(),
                    seed,
                })
            })
            .collect();
        let results = par::with_threads(ctx.jobs, || {
            par::map(&groups, |g| run_group(ctx, g, &scenarios, &targets, &bundles))
        });
        for r in results {
            let t = r?;
            total.trained += t.trained;
            total.skipped += t.skipped;
            total.not_applicable += t.not_applicable;
        }
    }
    println!(
        "scenario: {} trained, {} up to date, {} not applicable",
        total.trained, total.skipped, total.not_applicable
    );
    Ok(total)
}

/// Single-cluster training: the RANDOM scenario for each selected target.
pub fn train(ctx: &Context, sel: &Selection) -> Result<JobTally> {
    let sel = Selection {
        scenarios: Some(vec![Scenario::Random]),
        ..sel.clone()
    };
    scenarios(ctx, &sel)
}

/// Random hyperparameter search on the merged training stream of all
/// clusters of each mode; writes the trial log and the best config.
pub fn search(ctx: &Context, sel: &Selection) -> Result<()> {
    let space = ctx
        .config
        .search
        .clone()
        .context("the config has no `search` section describing the hyperparameter space")?;
    for selector in sel.selectors(ctx) {
        let mode = selector.label();
        let bundles = load_bundles(ctx, &mode)?;
        let refs: Vec<&SplitBundle> = bundles.values().collect();
        let input_len = refs[0].options.input_len;
        for kind in sel.models(ctx) {
            let base = ctx.config.model_config(kind, &selector)?;
            let dir = ctx.search_dir().join(format!("{}-{mode}", kind.label()));
            let hash = hash_of(&(&space, &base, bundles.keys().collect::<Vec<_>>()));
            if already_done(&dir.join(DONE), &hash, ctx.force)? {
                println!("search: {} is up to date", dir.display());
                continue;
            }
            let stream = merge_shuffle(&refs, space.seed)?;
            let outcome = search_hyperparams(&space, &base, &stream.train, &stream.val(), input_len, Some(&dir.join("trials.csv")))?;
            fs::write(dir.join("best_config.json"), serde_json::to_string_pretty(&outcome.best)?)?;
            mark_done(&dir.join(DONE), &hash)?;
            println!("search: {} trials -> {}", outcome.trials.len(), dir.display());
        }
    }
    Ok(())
}
