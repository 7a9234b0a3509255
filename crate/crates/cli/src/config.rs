//! Run configuration: one JSON file, every field optional.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use cloudcast::dataset::{ResourceSelector, SplitOptions};
use cloudcast::models::{IntervalSide, ModelConfig, ModelKind};
use cloudcast::scenarios::{FineTuneOptions, HyperParamSpace, Scenario};
use cloudcast::synth::SynthSpec;

/// Layout version of the run directory.
pub const LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Traces and split bundles, relative to the work directory.
    pub data_dir: PathBuf,
    /// Scenario runs, evaluation, benchmarks and reports.
    pub run_root: PathBuf,
    /// Traces generated by `synth`.
    pub synth: Vec<SynthSpec>,
    pub split: SplitOptions,
    /// `cpu`, `memory`, ... or `bivariate`.
    pub modes: Vec<String>,
    /// `lstm`, `lstmd`, `hbnn`.
    pub models: Vec<String>,
    pub model: ModelSection,
    pub train: TrainSection,
    pub scenarios: Vec<String>,
    /// Target clusters; all clusters with a bundle when absent.
    pub targets: Option<Vec<String>>,
    pub fine_tune: FineTuneOptions,
    pub gc19_group: Option<Vec<String>>,
    pub seeds: Vec<u64>,
    /// Percent.
    pub confidence: Vec<f64>,
    pub interval: IntervalSide,
    pub bench: BenchSection,
    pub search: Option<HyperParamSpace>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = ["gc19a", "gc19b", "gc11", "ali18"]
            .iter()
            .enumerate()
            .map(|(i, id)| SynthSpec {
                cluster_id: id.to_string(),
                seed: i as u64,
                ..SynthSpec::default()
            })
            .collect();
        Self {
            version: LAYOUT_VERSION,
            data_dir: "data".into(),
            run_root: "experiments".into(),
            synth,
            split: SplitOptions::default(),
            modes: vec!["cpu".into()],
            models: vec!["lstm".into(), "lstmd".into(), "hbnn".into()],
            model: ModelSection::default(),
            train: TrainSection::default(),
            scenarios: Scenario::DEFAULT.iter().map(|s| s.label().to_string()).collect(),
            targets: None,
            fine_tune: FineTuneOptions::default(),
            gc19_group: None,
            seeds: (0..10).collect(),
            confidence: vec![95.0, 97.0, 99.0],
            interval: IntervalSide::OneSided,
            bench: BenchSection::default(),
            search: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// `default` or `tiny`.
    pub preset: String,
    /// Fields merged over the preset, e.g. `{"lstm_units": 32}`.
    pub overrides: Option<Value>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "default".into(),
            overrides: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            patience: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Cluster to benchmark on; the first available when absent.
    pub cluster: Option<String>,
    pub mode: Option<String>,
    pub fractions: Vec<f64>,
    pub step_counts: Vec<usize>,
    pub repetitions: usize,
    pub inference_runs: usize,
    pub warmup: usize,
    /// Epoch limit of each timed training run.
    pub max_epochs: usize,
    pub finetune_epochs: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            cluster: None,
            mode: None,
            fractions: vec![0.2, 0.4, 0.6, 0.8],
            step_counts: vec![6, 12, 18, 24],
            repetitions: 10,
            inference_runs: 100,
            warmup: 5,
            max_epochs: 500,
            finetune_epochs: 50,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != LAYOUT_VERSION {
            bail!("config version {} is not supported (expected {LAYOUT_VERSION})", self.version);
        }
        for m in &self.models {
            if ModelKind::parse(m).is_none() {
                bail!("unknown model `{m}` (expected lstm, lstmd or hbnn)");
            }
        }
        for s in &self.scenarios {
            if Scenario::parse(s).is_none() {
                bail!("unknown scenario `{s}`");
            }
        }
        if self.seeds.is_empty() {
            bail!("seed list is empty");
        }
        if let Some(c) = self.confidence.iter().find(|c| !(**c > 0.0 && **c < 100.0)) {
            bail!("confidence levels are percentages in (0, 100), got {c}");
        }
        if self.model.preset != "default" && self.model.preset != "tiny" {
            bail!("model preset must be `default` or `tiny`, got `{}`", self.model.preset);
        }
        Ok(())
    }

    pub fn model_kinds(&self) -> Vec<ModelKind> {
        self.models.iter().filter_map(|m| ModelKind::parse(m)).collect()
    }

    pub fn scenario_list(&self) -> Vec<Scenario> {
        self.scenarios.iter().filter_map(|s| Scenario::parse(s)).collect()
    }

    pub fn selectors(&self) -> Vec<ResourceSelector> {
        self.modes.iter().map(|m| ResourceSelector::parse(m)).collect()
    }

    /// Preset for `kind` and `selector` with the overrides applied.
    pub fn model_config(&self, kind: ModelKind, selector: &ResourceSelector) -> Result<ModelConfig> {
        let width = selector.width();
        let preset = match self.model.preset.as_str() {
            "tiny" => ModelConfig::tiny(kind, width),
            _ => ModelConfig::new(kind, width),
        };
        let config = match &self.model.overrides {
            None => preset,
            Some(overrides) => {
                let mut base = serde_json::to_value(&preset)?;
                let (Value::Object(b), Value::Object(o)) = (&mut base, overrides) else {
                    bail!("model overrides must be a JSON object");
                };
                for (k, v) in o {
                    if k == "kind" || k == "output_resources" {
                        bail!("`{k}` is derived from the model list and mode; remove it from the overrides");
                    }
                    b.insert(k.clone(), v.clone());
                }
                serde_json::from_value(base).context("applying model overrides")?
            }
        };
        config.validate()?;
        Ok(config)
    }

    pub fn data_dir(&self, workdir: &Path) -> PathBuf {
        workdir.join(&self.data_dir)
    }

    pub fn run_root(&self, workdir: &Path) -> PathBuf {
        workdir.join(&self.run_root)
    }
}

/// Parses `95,97,99`.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>().map_err(|_| anyhow::anyhow!("cannot parse `{p}` in `{s}`")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.seeds.len(), 10);
        assert_eq!(c.scenario_list().len(), 7);
    }

    #[test]
    fn partial_config_and_overrides() {
        let c: RunConfig = serde_json::from_str(
            r#"{"models": ["hbnn"], "model": {"preset": "tiny", "overrides": {"lstm_units": 5}}}"#,
        )
        .unwrap();
        let m = c
            .model_config(ModelKind::BayesianLastLayer, &ResourceSelector::Bivariate)
            .unwrap();
        assert_eq!(m.lstm_units, 5);
        assert_eq!(m.output_resources, 2);
        let bad: RunConfig = serde_json::from_str(r#"{"model": {"overrides": {"kind": "POINT"}}}"#).unwrap();
        assert!(bad.model_config(ModelKind::Point, &ResourceSelector::Bivariate).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"typo_field": 1}"#).is_err());
    }

    #[test]
    fn lists() {
        assert_eq!(parse_list::<f64>("95, 97,99").unwrap(), vec![95.0, 97.0, 99.0]);
        assert!(parse_list::<u64>("1,x").is_err());
    }
}
