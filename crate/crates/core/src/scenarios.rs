//! Training scenarios across clusters (pooled, leave-one-out, same-provider,
//! single-cluster), fine-tuning, point-model thresholds and hyperparameter
//! search.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{merge_shuffle, ResourceSelector, SplitBundle, WindowSample};
use crate::error::{Error, Result};
use crate::models::{
    build_model, continue_training, predict_samples, save_checkpoint, train, write_predictions, ConvKernel,
    ForecastDistribution, ModelConfig, ModelKind, TrainOptions, TrainedModel,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Scenario {
    /// Pretrain on every cluster of the universe.
    All,
    AllFt,
    /// Pretrain on every cluster except the target.
    AllButOne,
    AllButOneFt,
    /// Pretrain on the Google 2019 group only.
    Gc19,
    Gc19Ft,
    /// Train from scratch on the target cluster alone.
    Random,
    Gc19ButOne,
    Gc19ButOneFt,
}

impl Scenario {
    /// Scenarios included in default runs and reports.
    pub const DEFAULT: [Scenario; 7] = [
        Scenario::All,
        Scenario::AllFt,
        Scenario::AllButOne,
        Scenario::AllButOneFt,
        Scenario::Gc19,
        Scenario::Gc19Ft,
        Scenario::Random,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::All => "ALL",
            Scenario::AllFt => "ALL_FT",
            Scenario::AllButOne => "ALL_BUT_ONE",
            Scenario::AllButOneFt => "ALL_BUT_ONE_FT",
            Scenario::Gc19 => "GC19",
            Scenario::Gc19Ft => "GC19_FT",
            Scenario::Random => "RANDOM",
            Scenario::Gc19ButOne => "GC19_BUT_ONE",
            Scenario::Gc19ButOneFt => "GC19_BUT_ONE_FT",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        let up = s.trim().to_ascii_uppercase().replace('-', "_");
        Self::DEFAULT
            .into_iter()
            .chain([Scenario::Gc19ButOne, Scenario::Gc19ButOneFt])
            .find(|sc| sc.label() == up)
    }

    pub fn is_fine_tuned(self) -> bool {
        matches!(
            self,
            Scenario::AllFt | Scenario::AllButOneFt | Scenario::Gc19Ft | Scenario::Gc19ButOneFt
        )
    }

    pub fn needs_gc19_target(self) -> bool {
        matches!(
            self,
            Scenario::Gc19 | Scenario::Gc19Ft | Scenario::Gc19ButOne | Scenario::Gc19ButOneFt
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTuneOptions {
    pub epochs: usize,
    /// Fine-tuning learning rate as a multiple of the pretraining one.
    pub lr_factor: f64,
    pub patience: usize,
}

impl Default for FineTuneOptions {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr_factor: 0.1,
            patience: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scenario: Scenario,
    pub target_cluster: String,
    pub cluster_universe: Vec<String>,
    pub model_kind: ModelKind,
    pub prediction_mode: ResourceSelector,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub fine_tune_opts: Option<FineTuneOptions>,
    /// Clusters of the Google 2019 group; when absent, ids starting with
    /// `gc19` form the group.
    #[serde(default)]
    pub gc19_group: Option<Vec<String>>,
}

impl ScenarioSpec {
    pub fn gc19_members(&self) -> Vec<String> {
        match &self.gc19_group {
            Some(g) => g.clone(),
            None => self
                .cluster_universe
                .iter()
                .filter(|c| c.to_ascii_lowercase().starts_with("gc19"))
                .cloned()
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidScenario(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !self.cluster_universe.contains(&self.target_cluster) {
            return bad(format!("target `{}` is not in the cluster universe", self.target_cluster));
        }
        if self.scenario.is_fine_tuned() && self.fine_tune_opts.is_none() {
            return bad(format!("{} requires fine-tuning options", self.scenario.label()));
        }
        if self.scenario.needs_gc19_target() && !self.gc19_members().contains(&self.target_cluster) {
            return bad(format!(
                "{} needs a target from the GC19 group, `{}` is not in it",
                self.scenario.label(),
                self.target_cluster
            ));
        }
        if self.training_clusters().is_empty() {
            return bad(format!("{} leaves no cluster to train on", self.scenario.label()));
        }
        Ok(())
    }

    /// Clusters whose training windows form the (pre)training stream.
    pub fn training_clusters(&self) -> Vec<String> {
        let target = &self.target_cluster;
        match self.scenario {
            Scenario::All | Scenario::AllFt => self.cluster_universe.clone(),
            Scenario::AllButOne | Scenario::AllButOneFt => {
                self.cluster_universe.iter().filter(|c| *c != target).cloned().collect()
            }
            Scenario::Gc19 | Scenario::Gc19Ft => self.gc19_members(),
            Scenario::Gc19ButOne | Scenario::Gc19ButOneFt => {
                self.gc19_members().into_iter().filter(|c| c != target).collect()
            }
            Scenario::Random => vec![target.clone()],
        }
    }

    /// Model directory segment: model kind and prediction mode.
    pub fn model_label(&self) -> String {
        format!("{}-{}", self.model_kind.label(), self.prediction_mode.label())
    }
}

/// `runs/<scenario>/<target>/<model>/<seed>/` below `root`.
pub fn run_dir(root: &Path, scenario: Scenario, target: &str, model_label: &str, seed: u64) -> PathBuf {
    root.join("runs")
        .join(scenario.label())
        .join(target)
        .join(model_label)
        .join(seed.to_string())
}

/// One trained seed of a scenario.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub seed: u64,
    pub model: TrainedModel,
    pub val_predictions: ForecastDistribution,
    pub test_predictions: ForecastDistribution,
    pub dir: Option<PathBuf>,
}

/// Pretrained models keyed by (training clusters, seed), reusable across
/// targets whose training set is the same.
pub type PretrainCache = BTreeMap<(Vec<String>, u64), TrainedModel>;

/// Trains one model per seed according to `spec` and predicts the target's
/// validation and test windows.
///
/// With `out_root`, every seed writes its checkpoint (and, for fine-tuned
/// scenarios, the untouched pretrained checkpoint under `pretrained/`) and
/// `val_predictions.csv` / `test_predictions.csv` into its [`run_dir`].
pub fn run_scenario(
    spec: &ScenarioSpec,
    bundles: &BTreeMap<String, SplitBundle>,
    config: &ModelConfig,
    options: &TrainOptions,
    out_root: Option<&Path>,
    cache: &mut PretrainCache,
) -> Result<Vec<ScenarioRun>> {
    spec.validate()?;
    if config.kind != spec.model_kind || config.output_resources != spec.prediction_mode.width() {
        return Err(Error::InvalidScenario(format!(
            "model config ({}, R={}) does not match the scenario ({}, {})",
            config.kind.label(),
            config.output_resources,
            spec.model_kind.label(),
            spec.prediction_mode.label()
        )));
    }
    let clusters = spec.training_clusters();
    let get = |c: &str| bundles.get(c).ok_or_else(|| Error::MissingBundle(c.to_string()));
    let sources: Vec<&SplitBundle> = clusters.iter().map(|c| get(c)).collect::<Result<_>>()?;
    let target = get(&spec.target_cluster)?;
    for b in sources.iter().chain([&target]) {
        if b.selector != spec.prediction_mode {
            return Err(Error::InvalidScenario(format!(
                "bundle `{}` was split for `{}`, scenario wants `{}`",
                b.cluster_id,
                b.selector.label(),
                spec.prediction_mode.label()
            )));
        }
    }
    let input_len = target.options.input_len;
    let untrained = build_model(config, input_len)?;

    let mut runs = Vec::with_capacity(spec.seeds.len());
    for &seed in &spec.seeds {
        let key = (clusters.clone(), seed);
        let pretrained = match cache.get(&key) {
            Some(m) => m.clone(),
            None => {
                let stream = merge_shuffle(&sources, seed)?;
                log::info!(
                    "{} -> {}: training {} on {} windows from {} clusters (seed {seed})",
                    spec.scenario.label(),
                    spec.target_cluster,
                    spec.model_label(),
                    stream.train.len(),
                    clusters.len()
                );
                let opts = TrainOptions { seed, ..*options };
                let mut m = train(&untrained, &stream.train, &stream.val(), &opts)?
                    .with_scalers(sources.iter().map(|b| (b.cluster_id.clone(), b.scaler.clone())));
                m.resources = target.resources.clone();
                cache.insert(key, m.clone());
                m
            }
        };
        let model = match (spec.scenario.is_fine_tuned(), &spec.fine_tune_opts) {
            (true, Some(ft)) => fine_tune(&pretrained, target, ft, seed)?,
            _ => pretrained.clone(),
        };
        let val_predictions = predict_samples(&model, &target.val)?;
        let test_predictions = predict_samples(&model, &target.test)?;
        let dir = match out_root {
            Some(root) => {
                let dir = run_dir(root, spec.scenario, &spec.target_cluster, &spec.model_label(), seed);
                fs::create_dir_all(&dir)?;
                save_checkpoint(&model, &dir.join("checkpoint"))?;
                if spec.scenario.is_fine_tuned() {
                    save_checkpoint(&pretrained, &dir.join("pretrained"))?;
                }
                write_partition(&dir.join("val_predictions.csv"), target, &target.val, &val_predictions)?;
                write_partition(&dir.join("test_predictions.csv"), target, &target.test, &test_predictions)?;
                fs::write(
                    dir.join("spec.json"),
                    serde_json::to_string_pretty(&ScenarioSpec {
                        seeds: vec![seed],
                        ..spec.clone()
                    })?,
                )?;
                Some(dir)
            }
            None => None,
        };
        runs.push(ScenarioRun {
            seed,
            model,
            val_predictions,
            test_predictions,
            dir,
        });
    }
    Ok(runs)
}

fn write_partition(
    path: &Path,
    bundle: &SplitBundle,
    samples: &[WindowSample],
    dist: &ForecastDistribution,
) -> Result<()> {
    let idx: Vec<usize> = samples.iter().map(|s| s.target_index).collect();
    write_predictions(path, &bundle.cluster_id, &idx, &bundle.resources, dist)
}

/// Continues training `model` on the target bundle's training windows with
/// early stopping on its validation windows. Test windows are never used.
/// The input model is left unchanged.
pub fn fine_tune(model: &TrainedModel, bundle: &SplitBundle, opts: &FineTuneOptions, seed: u64) -> Result<TrainedModel> {
    if bundle.width() != model.config.output_resources || bundle.options.input_len != model.input_len {
        return Err(Error::ShapeMismatch(format!(
            "bundle `{}` is {}x{}, model expects {}x{}",
            bundle.cluster_id,
            bundle.options.input_len,
            bundle.width(),
            model.input_len,
            model.config.output_resources
        )));
    }
    if opts.epochs == 0 {
        return Ok(model.clone());
    }
    if !(opts.lr_factor > 0.0) {
        return Err(Error::InvalidParameter(format!("lr_factor must be > 0, got {}", opts.lr_factor)));
    }
    let train_opts = TrainOptions {
        max_epochs: opts.epochs,
        patience: opts.patience,
        seed,
        learning_rate: Some(model.config.learning_rate * opts.lr_factor),
    };
    Ok(continue_training(model, &bundle.train, &bundle.val, &train_opts)?
        .with_scalers([(bundle.cluster_id.clone(), bundle.scaler.clone())]))
}

/// Grid resolution of [`calibrate_point_threshold`].
pub const THRESHOLD_STEP: f64 = 0.001;

/// Smallest threshold `theta` on the grid `0, 0.001, ..., 1` such that
/// bounds `mean * (1 + theta)` reach at least `target_sr` percent success.
/// Returns 1.0 with a warning when no grid value does.
pub fn calibrate_point_threshold(predictions: &[f64], actuals: &[f64], target_sr: f64) -> Result<f64> {
    if predictions.len() != actuals.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions vs {} actuals",
            predictions.len(),
            actuals.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::NoData("no validation predictions for threshold calibration".into()));
    }
    let n = actuals.len() as f64;
    let steps = (1.0 / THRESHOLD_STEP).round() as usize;
    for i in 0..=steps {
        let theta = i as f64 / steps as f64;
        let hits = predictions
            .iter()
            .zip(actuals)
            .filter(|(p, a)| **a <= **p * (1.0 + theta))
            .count();
        if 100.0 * hits as f64 / n >= target_sr {
            return Ok(theta);
        }
    }
    log::warn!("no threshold up to 100% reaches SR {target_sr}%; using 1.0");
    Ok(1.0)
}

/// Candidate values for random hyperparameter search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParamSpace {
    pub dense_layers: Vec<usize>,
    pub neurons: Vec<usize>,
    pub lstm_units: Vec<usize>,
    pub batch_size: Vec<usize>,
    pub activation: Vec<String>,
    pub learning_rate: Vec<f64>,
    pub adam_beta1: Vec<f64>,
    pub adam_beta2: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub conv_filters: Vec<usize>,
    pub budget: usize,
    /// Reduced epoch limit for each trial.
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for HyperParamSpace {
    fn default() -> Self {
        Self {
            dense_layers: vec![1, 2, 3],
            neurons: vec![16, 32, 64],
            lstm_units: vec![16, 32, 64],
            batch_size: vec![64, 128, 256],
            activation: vec!["relu".into(), "tanh".into()],
            learning_rate: vec![1e-3, 3e-3],
            adam_beta1: vec![0.9],
            adam_beta2: vec![0.999],
            weight_decay: vec![0.0, 1e-5],
            conv_filters: vec![8, 16, 32],
            budget: 10,
            max_epochs: 30,
            patience: 5,
            seed: 0,
        }
    }
}

impl HyperParamSpace {
    pub fn validate(&self) -> Result<()> {
        let empty = self.dense_layers.is_empty()
            || self.neurons.is_empty()
            || self.lstm_units.is_empty()
            || self.batch_size.is_empty()
            || self.activation.is_empty()
            || self.learning_rate.is_empty()
            || self.adam_beta1.is_empty()
            || self.adam_beta2.is_empty()
            || self.weight_decay.is_empty()
            || self.conv_filters.is_empty();
        if empty {
            return Err(Error::InvalidParameter("every hyperparameter grid must be nonempty".into()));
        }
        if self.budget == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidParameter("budget and max_epochs must be >= 1".into()));
        }
        Ok(())
    }

    fn sample(&self, base: &ModelConfig, rng: &mut ChaCha8Rng) -> ModelConfig {
        let pick = |v: &[usize], rng: &mut ChaCha8Rng| *v.choose(rng).expect("nonempty grid");
        let pickf = |v: &[f64], rng: &mut ChaCha8Rng| *v.choose(rng).expect("nonempty grid");
        let layers = pick(&self.dense_layers, rng);
        let neurons = pick(&self.neurons, rng);
        let width = base.conv_kernels.first().map_or(3, |k| k.width);
        let stride = base.conv_kernels.first().map_or(1, |k| k.stride);
        ModelConfig {
            conv_blocks: 1,
            conv_kernels: vec![ConvKernel {
                filters: pick(&self.conv_filters, rng),
                width,
                stride,
            }],
            lstm_units: pick(&self.lstm_units, rng),
            dense_stack: vec![neurons; layers],
            batch_size: pick(&self.batch_size, rng),
            activation: self.activation.choose(rng).expect("nonempty grid").clone(),
            learning_rate: pickf(&self.learning_rate, rng),
            adam_beta1: pickf(&self.adam_beta1, rng),
            adam_beta2: pickf(&self.adam_beta2, rng),
            weight_decay: pickf(&self.weight_decay, rng),
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub trial: usize,
    pub config: ModelConfig,
    /// Best validation loss; infinite when training diverged.
    pub val_loss: f64,
    pub epochs_ran: usize,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub best: ModelConfig,
    pub trials: Vec<Trial>,
}

/// Random search over `space`; kind and output width come from `base`.
/// Diverging trials are logged with an infinite loss. When `trial_log` is
/// given, writes `trial,params_json,val_loss,epochs_ran` rows.
pub fn search_hyperparams(
    space: &HyperParamSpace,
    base: &ModelConfig,
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    input_len: usize,
    trial_log: Option<&Path>,
) -> Result<SearchOutcome> {
    space.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(space.seed);
    let configs: Vec<ModelConfig> = (0..space.budget).map(|_| space.sample(base, &mut rng)).collect();
    let mut trials = Vec::with_capacity(configs.len());
    for (i, config) in configs.into_iter().enumerate() {
        let opts = TrainOptions {
            max_epochs: space.max_epochs,
            patience: space.patience,
            seed: space.seed.wrapping_add(i as u64),
            learning_rate: None,
        };
        let (val_loss, epochs_ran) = match build_model(&config, input_len)
            .and_then(|m| train(&m, train_set, val_set, &opts))
        {
            Ok(m) => (m.best_val_loss(), m.history.len()),
            Err(Error::Divergence { epoch, loss }) => {
                log::warn!("trial {i} diverged at epoch {epoch} (loss {loss})");
                (f64::INFINITY, epoch)
            }
            Err(e) => return Err(e),
        };
        trials.push(Trial {
            trial: i,
            config,
            val_loss,
            epochs_ran,
        });
    }
    if let Some(path) = trial_log {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["trial", "params_json", "val_loss", "epochs_ran"])?;
        for t in &trials {
            w.write_record([
                t.trial.to_string(),
                serde_json::to_string(&t.config)?,
                t.val_loss.to_string(),
                t.epochs_ran.to_string(),
            ])?;
        }
        w.flush()?;
    }
    let best = trials
        .iter()
        .filter(|t| t.val_loss.is_finite())
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
        .ok_or_else(|| Error::Divergence {
            epoch: 0,
            loss: f64::INFINITY,
        })?;
    Ok(SearchOutcome {
        best: best.config.clone(),
        trials,
    })
}

/// Writes a scenario spec as pretty JSON.
pub fn write_spec(path: &Path, spec: &ScenarioSpec) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(spec)?.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split, SplitOptions};
    use crate::models::load_checkpoint;
    use crate::synth::{generate_trace, SynthSpec};
    use proptest::prelude::*;

    fn universe() -> Vec<String> {
        ["gc19a", "gc19b", "gc11", "ali18"].iter().map(|s| s.to_string()).collect()
    }

    fn spec(scenario: Scenario, target: &str) -> ScenarioSpec {
        ScenarioSpec {
            scenario,
            target_cluster: target.into(),
            cluster_universe: universe(),
            model_kind: ModelKind::Distributional,
            prediction_mode: ResourceSelector::Univariate("cpu".into()),
            seeds: vec![0],
            fine_tune_opts: scenario.is_fine_tuned().then(FineTuneOptions::default),
            gc19_group: None,
        }
    }

    fn bundles(len: usize) -> BTreeMap<String, SplitBundle> {
        universe()
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                let s = generate_trace(&SynthSpec {
                    cluster_id: c.clone(),
                    length: len,
                    seed: i as u64,
                    ..SynthSpec::default()
                })
                .unwrap();
                let b = split(
                    &s,
                    &ResourceSelector::Univariate("cpu".into()),
                    SplitOptions {
                        input_len: 16,
                        ..SplitOptions::default()
                    },
                )
                .unwrap();
                (c, b)
            })
            .collect()
    }

    fn tiny() -> ModelConfig {
        ModelConfig {
            conv_kernels: vec![ConvKernel {
                filters: 2,
                width: 4,
                stride: 4,
            }],
            lstm_units: 4,
            dense_stack: vec![4],
            batch_size: 32,
            ..ModelConfig::new(ModelKind::Distributional, 1)
        }
    }

    #[test]
    fn training_sets_per_scenario() {
        assert_eq!(spec(Scenario::All, "gc11").training_clusters().len(), 4);
        let abo = spec(Scenario::AllButOne, "gc11").training_clusters();
        assert_eq!(abo.len(), 3);
        assert!(!abo.contains(&"gc11".to_string()));
        assert_eq!(spec(Scenario::Random, "ali18").training_clusters(), vec!["ali18".to_string()]);
        assert_eq!(spec(Scenario::Gc19, "gc19a").training_clusters(), vec!["gc19a", "gc19b"]);
        assert_eq!(spec(Scenario::Gc19ButOne, "gc19a").training_clusters(), vec!["gc19b"]);
    }

    #[test]
    fn invalid_specs() {
        assert!(matches!(spec(Scenario::Gc19, "gc11").validate(), Err(Error::InvalidScenario(_))));
        let mut s = spec(Scenario::AllFt, "gc11");
        s.fine_tune_opts = None;
        assert!(s.validate().is_err());
        assert!(spec(Scenario::All, "nowhere").validate().is_err());
        let mut s = spec(Scenario::Gc19, "gc11");
        s.gc19_group = Some(vec!["gc11".into()]);
        assert!(s.validate().is_ok());
    }

    #[test]
    fn scenario_labels_roundtrip() {
        for s in Scenario::DEFAULT.into_iter().chain([Scenario::Gc19ButOne, Scenario::Gc19ButOneFt]) {
            assert_eq!(Scenario::parse(s.label()), Some(s));
        }
        assert_eq!(Scenario::parse("all-but-one-ft"), Some(Scenario::AllButOneFt));
    }

    #[test]
    fn missing_bundle_is_reported() {
        let mut b = bundles(400);
        b.remove("gc19b");
        let r = run_scenario(
            &spec(Scenario::All, "gc11"),
            &b,
            &tiny(),
            &TrainOptions::default(),
            None,
            &mut PretrainCache::new(),
        );
        assert!(matches!(r, Err(Error::MissingBundle(c)) if c == "gc19b"));
    }

    #[test]
    fn fine_tuned_scenario_writes_artifacts_and_keeps_pretrained() {
        let b = bundles(500);
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(Scenario::AllButOneFt, "gc11");
        s.fine_tune_opts = Some(FineTuneOptions {
            epochs: 2,
            ..FineTuneOptions::default()
        });
        let opts = TrainOptions {
            max_epochs: 2,
            ..TrainOptions::default()
        };
        let runs = run_scenario(&s, &b, &tiny(), &opts, Some(dir.path()), &mut PretrainCache::new()).unwrap();
        let run_dir = runs[0].dir.clone().unwrap();
        assert!(run_dir.ends_with("runs/ALL_BUT_ONE_FT/gc11/lstmd-cpu/0"));
        for f in ["checkpoint/weights.bin", "pretrained/weights.bin", "val_predictions.csv", "test_predictions.csv"] {
            assert!(run_dir.join(f).exists(), "{f}");
        }
        let pre = load_checkpoint(&run_dir.join("pretrained")).unwrap();
        let ft = load_checkpoint(&run_dir.join("checkpoint")).unwrap();
        assert_ne!(pre.weights_hash(), ft.weights_hash());
        assert!(ft.history.len() > pre.history.len());
        assert!(ft.scalers.contains_key("gc11") && !pre.scalers.contains_key("gc11"));
        assert_eq!(runs[0].test_predictions.len(), b["gc11"].test.len());
    }

    #[test]
    fn fine_tune_edge_cases() {
        let b = bundles(400);
        let m = build_model(&tiny(), 16).unwrap();
        let opts = TrainOptions {
            max_epochs: 3,
            ..TrainOptions::default()
        };
        let t = train(&m, &b["gc11"].train, &b["gc11"].val, &opts).unwrap();
        let zero = FineTuneOptions {
            epochs: 0,
            ..FineTuneOptions::default()
        };
        assert_eq!(fine_tune(&t, &b["gc11"], &zero, 0).unwrap().weights_hash(), t.weights_hash());
        let one = FineTuneOptions {
            epochs: 1,
            ..FineTuneOptions::default()
        };
        assert_ne!(fine_tune(&t, &b["gc11"], &one, 0).unwrap().weights_hash(), t.weights_hash());
        let tiny_lr = FineTuneOptions {
            epochs: 3,
            lr_factor: 1e-4,
            patience: 3,
        };
        let ft = fine_tune(&t, &b["gc11"], &tiny_lr, 0).unwrap();
        assert!((ft.best_val_loss() - t.best_val_loss()).abs() <= 0.05 * t.best_val_loss().abs());

        let bivariate = split(
            &generate_trace(&SynthSpec {
                length: 400,
                ..SynthSpec::default()
            })
            .unwrap(),
            &ResourceSelector::Bivariate,
            SplitOptions {
                input_len: 16,
                ..SplitOptions::default()
            },
        )
        .unwrap();
        assert!(matches!(fine_tune(&t, &bivariate, &one, 0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn threshold_examples() {
        let p = [0.2, 0.4, 0.6, 0.8];
        assert_eq!(calibrate_point_threshold(&p, &p, 99.0).unwrap(), 0.0);
        let a: Vec<f64> = p.iter().map(|x| x * 1.05).collect();
        for sr in [50.0, 90.0, 100.0] {
            assert_eq!(calibrate_point_threshold(&p, &a, sr).unwrap(), 0.05);
        }
        assert_eq!(calibrate_point_threshold(&p, &[9.0; 4], 0.0).unwrap(), 0.0);
        assert_eq!(calibrate_point_threshold(&p, &[9.0; 4], 100.0).unwrap(), 1.0);
        assert!(calibrate_point_threshold(&[], &[], 95.0).is_err());
    }

    #[test]
    fn search_picks_the_best_finite_trial() {
        let b = bundles(400);
        let base = tiny();
        let mut space = HyperParamSpace {
            dense_layers: vec![1],
            neurons: vec![4],
            lstm_units: vec![4],
            batch_size: vec![32],
            conv_filters: vec![2],
            learning_rate: vec![1e-2, 1e300],
            activation: vec!["linear".into()],
            weight_decay: vec![0.0],
            budget: 6,
            max_epochs: 2,
            patience: 1,
            ..HyperParamSpace::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("trials.csv");
        let out = search_hyperparams(&space, &base, &b["gc11"].train, &b["gc11"].val, 16, Some(&log)).unwrap();
        assert_eq!(out.trials.len(), 6);
        assert_eq!(out.best.learning_rate, 1e-2);
        let text = fs::read_to_string(&log).unwrap();
        assert!(text.starts_with("trial,params_json,val_loss,epochs_ran"));
        assert_eq!(text.lines().count(), 7);

        let again = search_hyperparams(&space, &base, &b["gc11"].train, &b["gc11"].val, 16, None).unwrap();
        assert_eq!(again.best, out.best);
        space.budget = 1;
        let one = search_hyperparams(&space, &base, &b["gc11"].train, &b["gc11"].val, 16, None);
        match one {
            Ok(o) => assert_eq!(o.best, o.trials[0].config),
            Err(e) => assert!(matches!(e, Error::Divergence { .. })),
        }
    }

    proptest! {
        #[test]
        fn threshold_is_monotone_in_target(
            pairs in prop::collection::vec((0.01f64..1.0, 0.0f64..1.5), 1..40),
            a in 0.0f64..100.0,
            b in 0.0f64..100.0,
        ) {
            let (p, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(calibrate_point_threshold(&p, &y, lo).unwrap() <= calibrate_point_threshold(&p, &y, hi).unwrap());
        }
    }
}
