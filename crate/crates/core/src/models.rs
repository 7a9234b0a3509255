//! Point (LSTM), distributional (LSTMD) and Bayesian-last-layer (HBNN)
//! forecasters sharing a conv -> LSTM -> dense backbone.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{MinMaxScaler, WindowSample};
use crate::error::{Error, Result};
use crate::evaluation::stats::normal_quantile;
use crate::nn::{clip_global_norm, sigmoid, softplus, Activation, Adam, LayerSpec, Network};
use crate::par;

pub use crate::nn::gaussian_kl_to_standard as kl_to_standard_normal;

/// Lower bound added to every predicted standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ModelKind {
    Point,
    Distributional,
    BayesianLastLayer,
}

impl ModelKind {
    /// Short name used in run paths and reports.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Point => "lstm",
            ModelKind::Distributional => "lstmd",
            ModelKind::BayesianLastLayer => "hbnn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lstm" | "point" => Some(ModelKind::Point),
            "lstmd" | "distributional" => Some(ModelKind::Distributional),
            "hbnn" | "bayesian" | "bayesian_last_layer" => Some(ModelKind::BayesianLastLayer),
            _ => None,
        }
    }

    pub fn is_probabilistic(self) -> bool {
        self != ModelKind::Point
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvKernel {
    pub filters: usize,
    pub width: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub conv_blocks: usize,
    pub conv_kernels: Vec<ConvKernel>,
    pub lstm_units: usize,
    pub dense_stack: Vec<usize>,
    pub output_resources: usize,
    pub activation: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub weight_decay: f64,
    /// Multiplier on the KL term, which enters the loss as
    /// `kl_weight * KL / num_training_samples`.
    pub kl_weight: f64,
    pub epistemic_samples: usize,
    #[serde(default = "default_posterior_std")]
    pub posterior_std_init: f64,
    #[serde(default)]
    pub grad_clip_norm: Option<f64>,
}

fn default_posterior_std() -> f64 {
    0.01
}

impl ModelConfig {
    /// Desk-scale defaults: one conv block (32 filters, width 3), 64 LSTM
    /// units, dense stack `[64]` for univariate and `[64, 64, 64]` for
    /// bivariate prediction.
    pub fn new(kind: ModelKind, output_resources: usize) -> Self {
        Self {
            kind,
            conv_blocks: 1,
            conv_kernels: vec![ConvKernel {
                filters: 32,
                width: 3,
                stride: 1,
            }],
            lstm_units: 64,
            dense_stack: if output_resources == 2 { vec![64; 3] } else { vec![64] },
            output_resources,
            activation: "relu".into(),
            learning_rate: 1e-3,
            batch_size: 256,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            weight_decay: 0.0,
            kl_weight: 1.0,
            epistemic_samples: 100,
            posterior_std_init: default_posterior_std(),
            grad_clip_norm: Some(5.0),
        }
    }

    /// Small network for tests and smoke runs: strided convolution to
    /// shorten the sequence, 16 LSTM units.
    pub fn tiny(kind: ModelKind, output_resources: usize) -> Self {
        Self {
            conv_kernels: vec![ConvKernel {
                filters: 8,
                width: 4,
                stride: 4,
            }],
            lstm_units: 16,
            dense_stack: vec![16],
            batch_size: 64,
            learning_rate: 3e-3,
            epistemic_samples: 50,
            ..Self::new(kind, output_resources)
        }
    }

    pub fn activation(&self) -> Result<Activation> {
        Activation::parse(&self.activation)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown activation `{}`", self.activation)))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.conv_blocks != self.conv_kernels.len() {
            return bad(format!(
                "conv_blocks = {} but {} kernels given",
                self.conv_blocks,
                self.conv_kernels.len()
            ));
        }
        if !(1..=3).contains(&self.conv_blocks) {
            return bad(format!("conv_blocks must be 1..=3, got {}", self.conv_blocks));
        }
        if !(1..=2).contains(&self.output_resources) {
            return bad(format!("output_resources must be 1 or 2, got {}", self.output_resources));
        }
        if self.lstm_units == 0 || self.batch_size == 0 || self.dense_stack.iter().any(|&d| d == 0) {
            return bad("all layer sizes and the batch size must be >= 1".into());
        }
        if self.kind == ModelKind::BayesianLastLayer && self.dense_stack.is_empty() {
            return bad("the Bayesian model needs a dense layer to make variational".into());
        }
        if self.kind == ModelKind::BayesianLastLayer && self.epistemic_samples == 0 {
            return bad("epistemic_samples must be >= 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.weight_decay < 0.0 || self.kl_weight < 0.0 || !(self.posterior_std_init > 0.0) {
            return bad("weight_decay and kl_weight must be >= 0, posterior_std_init > 0".into());
        }
        self.activation()?;
        Ok(())
    }

    /// Network layers for this configuration.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        self.validate()?;
        let act = self.activation()?;
        let mut specs: Vec<LayerSpec> = self
            .conv_kernels
            .iter()
            .map(|k| LayerSpec::Conv1d {
                filters: k.filters,
                width: k.width,
                stride: k.stride,
                activation: act,
            })
            .collect();
        specs.push(LayerSpec::Lstm { units: self.lstm_units });
        let last = self.dense_stack.len().saturating_sub(1);
        for (i, &units) in self.dense_stack.iter().enumerate() {
            specs.push(if i == last && self.kind == ModelKind::BayesianLastLayer {
                LayerSpec::VariationalDense { units, activation: act }
            } else {
                LayerSpec::Dense { units, activation: act }
            });
        }
        specs.push(LayerSpec::Dense {
            units: self.head_width(),
            activation: Activation::Linear,
        });
        Ok(specs)
    }

    /// Raw outputs of the final layer: `R` for point models, `2R` otherwise.
    pub fn head_width(&self) -> usize {
        match self.kind {
            ModelKind::Point => self.output_resources,
            _ => 2 * self.output_resources,
        }
    }

    pub fn content_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// A network ready to be trained.
#[derive(Debug, Clone)]
pub struct UntrainedModel {
    pub config: ModelConfig,
    pub input_len: usize,
    network: Network,
}

impl UntrainedModel {
    pub fn network(&self) -> &Network {
        &self.network
    }

    /// Fresh parameters for `seed`.
    pub fn initial_params(&self, seed: u64) -> Vec<f64> {
        self.network
            .init(&mut ChaCha8Rng::seed_from_u64(seed), self.config.posterior_std_init)
    }
}

pub fn build_model(config: &ModelConfig, input_len: usize) -> Result<UntrainedModel> {
    let network = Network::new(input_len, config.output_resources, &config.layer_specs()?)?;
    Ok(UntrainedModel {
        config: config.clone(),
        input_len,
        network,
    })
}

/// Positive standard deviation from an unconstrained output.
#[inline]
pub fn std_link(raw: f64) -> f64 {
    softplus(raw) + STD_FLOOR
}

/// Sum over resources of independent Gaussian negative log-likelihoods.
pub fn gaussian_nll(target: &[f64], mean: &[f64], std: &[f64]) -> Result<f64> {
    if target.len() != mean.len() || mean.len() != std.len() {
        return Err(Error::ShapeMismatch(format!(
            "target {}, mean {}, std {}",
            target.len(),
            mean.len(),
            std.len()
        )));
    }
    if let Some(s) = std.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Domain(format!("standard deviation must be > 0, got {s}")));
    }
    Ok(target
        .iter()
        .zip(mean)
        .zip(std)
        .map(|((t, m), s)| s.ln() + HALF_LN_2PI + (t - m).powi(2) / (2.0 * s * s))
        .sum())
}

/// NLL of one resource as a function of `(mean, raw_std)` and its gradient
/// `(loss, d/dmean, d/draw_std)`.
#[inline]
pub fn gaussian_nll_with_grad(target: f64, mean: f64, raw_std: f64) -> (f64, f64, f64) {
    let s = std_link(raw_std);
    let r = target - mean;
    let loss = s.ln() + HALF_LN_2PI + r * r / (2.0 * s * s);
    let d_mean = -r / (s * s);
    let d_std = 1.0 / s - r * r / (s * s * s);
    (loss, d_mean, d_std * sigmoid(raw_std))
}

/// `kl_weight`-free KL regularizer of a factorized Gaussian posterior against
/// the standard normal prior.
pub fn kl_regularizer(means: &[f64], stds: &[f64]) -> Result<f64> {
    if let Some(s) = stds.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Domain(format!("posterior std must be > 0, got {s}")));
    }
    Ok(kl_to_standard_normal(means, stds))
}

/// Data loss of one sample and its gradient w.r.t. the raw network output.
fn sample_loss(kind: ModelKind, raw: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let r = target.len();
    match kind {
        ModelKind::Point => {
            let mut grad = vec![0.0; r];
            let mut loss = 0.0;
            for k in 0..r {
                let e = raw[k] - target[k];
                loss += e * e / r as f64;
                grad[k] = 2.0 * e / r as f64;
            }
            (loss, grad)
        }
        _ => {
            let mut grad = vec![0.0; 2 * r];
            let mut loss = 0.0;
            for k in 0..r {
                let (l, dm, ds) = gaussian_nll_with_grad(target[k], raw[k], raw[r + k]);
                loss += l;
                grad[k] = dm;
                grad[r + k] = ds;
            }
            (loss, grad)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Learning-rate override (fine-tuning).
    pub learning_rate: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            max_epochs: 500,
            patience: 20,
            seed: 0,
            learning_rate: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub input_len: usize,
    network: Network,
    params: Vec<f64>,
    pub resources: Vec<String>,
    /// Scaler of every cluster the model has been fitted on.
    pub scalers: BTreeMap<String, MinMaxScaler>,
    pub history: Vec<EpochRecord>,
    pub stop_epoch: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl TrainedModel {
    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn weights_hash(&self) -> String {
        sha256_hex(&weights_bytes(&self.params))
    }

    /// Hash over configuration and weights.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&self.config).expect("config serializes").as_bytes());
        h.update(weights_bytes(&self.params));
        hex(&h.finalize())
    }

    pub fn best_val_loss(&self) -> f64 {
        self.history.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min)
    }

    pub fn final_val_loss(&self) -> f64 {
        self.history.last().map_or(f64::NAN, |e| e.val_loss)
    }

    /// Posterior `(means, stds)` of the variational layer, if any.
    pub fn posterior(&self) -> Option<(&[f64], Vec<f64>)> {
        self.network.posterior(&self.params)
    }

    pub fn with_scalers(mut self, scalers: impl IntoIterator<Item = (String, MinMaxScaler)>) -> Self {
        self.scalers.extend(scalers);
        self
    }

    fn check_ready(&self) -> Result<()> {
        if self.history.is_empty() || self.params.len() != self.network.num_params() {
            return Err(Error::Untrained);
        }
        Ok(())
    }
}

/// Trains from a seeded initialization with Adam and early stopping on the
/// validation loss; the best-validation weights are restored.
pub fn train(
    model: &UntrainedModel,
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    options: &TrainOptions,
) -> Result<TrainedModel> {
    check_data(&model.config, model.input_len, train_set, val_set)?;
    let params = model.initial_params(options.seed);
    let outcome = fit(&model.network, &model.config, params, train_set, val_set, options, 0)?;
    Ok(TrainedModel {
        config: model.config.clone(),
        input_len: model.input_len,
        network: model.network.clone(),
        params: outcome.params,
        resources: Vec::new(),
        scalers: BTreeMap::new(),
        history: outcome.history,
        stop_epoch: outcome.stop_epoch,
        max_epochs: options.max_epochs,
        seed: options.seed,
    })
}

/// Continues optimization of a trained model; history is appended and the
/// input model is left untouched.
pub fn continue_training(
    model: &TrainedModel,
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    options: &TrainOptions,
) -> Result<TrainedModel> {
    model.check_ready()?;
    let mut next = model.clone();
    if options.max_epochs == 0 {
        return Ok(next);
    }
    check_data(&model.config, model.input_len, train_set, val_set)?;
    let offset = model.history.last().map_or(0, |e| e.epoch);
    let outcome = fit(
        &model.network,
        &model.config,
        model.params.clone(),
        train_set,
        val_set,
        options,
        offset,
    )?;
    next.params = outcome.params;
    next.history.extend(outcome.history);
    next.stop_epoch = offset + outcome.stop_epoch;
    next.max_epochs = model.max_epochs + options.max_epochs;
    Ok(next)
}

fn check_data(config: &ModelConfig, input_len: usize, train_set: &[WindowSample], val_set: &[WindowSample]) -> Result<()> {
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::NoData(format!(
            "{} training and {} validation samples",
            train_set.len(),
            val_set.len()
        )));
    }
    for s in train_set.iter().chain(val_set) {
        if s.resources() != config.output_resources || s.input_len() != input_len {
            return Err(Error::ShapeMismatch(format!(
                "sample from `{}` is {}x{}, model expects {}x{}",
                s.cluster_id,
                s.input_len(),
                s.resources(),
                input_len,
                config.output_resources
            )));
        }
    }
    Ok(())
}

struct FitOutcome {
    params: Vec<f64>,
    history: Vec<EpochRecord>,
    stop_epoch: usize,
}

fn fit(
    net: &Network,
    config: &ModelConfig,
    mut params: Vec<f64>,
    train_set: &[WindowSample],
    val_set: &[WindowSample],
    options: &TrainOptions,
    epoch_offset: usize,
) -> Result<FitOutcome> {
    let lr = options.learning_rate.unwrap_or(config.learning_rate);
    let mut adam = Adam::new(net.num_params(), lr, config.adam_beta1, config.adam_beta2, config.weight_decay);
    // Shuffling and weight noise use separate streams so a Bayesian model with
    // a collapsed posterior sees exactly the batches its deterministic twin sees.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(options.seed);
    shuffle_rng.set_stream(1);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(options.seed);
    noise_rng.set_stream(2);
    let kl_scale = config.kl_weight / train_set.len() as f64;

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::new();
    let mut best = (f64::INFINITY, params.clone());
    let mut waited = 0;
    let mut stop_epoch = 0;

    for epoch in 1..=options.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut objective = 0.0;
        let mut batches = 0usize;
        for batch_idx in order.chunks(config.batch_size) {
            let batch: Vec<&WindowSample> = batch_idx.iter().map(|&i| &train_set[i]).collect();
            let noise = net.is_variational().then(|| net.sample_noise(&mut noise_rng));
            let twin = net.realize(&params, noise.as_deref());
            let (loss_sum, twin_grad) = batch_gradient(net, config.kind, &twin, &batch);
            let n = batch.len() as f64;
            let mut grad = net.fold_gradient(&params, noise.as_deref(), &twin_grad);
            grad.iter_mut().for_each(|g| *g /= n);
            let mut loss = loss_sum / n;
            if let Some((means, stds)) = net.posterior(&params) {
                loss += kl_scale * kl_to_standard_normal(means, &stds);
                net.add_kl_gradient(&params, kl_scale, &mut grad);
            }
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch_offset + epoch,
                    loss,
                });
            }
            if let Some(max_norm) = config.grad_clip_norm {
                clip_global_norm(&mut grad, max_norm);
            }
            adam.update(&mut params, &grad);
            objective += loss;
            batches += 1;
        }
        let val_loss = mean_loss(net, config.kind, &net.realize(&params, None), val_set);
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch: epoch_offset + epoch,
                loss: val_loss,
            });
        }
        history.push(EpochRecord {
            epoch: epoch_offset + epoch,
            train_loss: objective / batches as f64,
            val_loss,
        });
        log::debug!("epoch {epoch}: train {:.6} val {val_loss:.6}", objective / batches as f64);
        stop_epoch = epoch;
        if val_loss < best.0 {
            best = (val_loss, params.clone());
            waited = 0;
        } else {
            waited += 1;
            if waited > options.patience {
                break;
            }
        }
    }
    Ok(FitOutcome {
        params: best.1,
        history,
        stop_epoch,
    })
}

/// Summed data loss and summed gradient over a batch, reduced in a fixed
/// chunk order.
pub(crate) fn batch_gradient(net: &Network, kind: ModelKind, twin: &[f64], batch: &[&WindowSample]) -> (f64, Vec<f64>) {
    let len = twin.len();
    let parts = par::map_chunks(batch, par::REDUCE_CHUNK, |chunk| {
        let mut grad = vec![0.0; len + 1];
        for s in chunk {
            let cache = net.forward(twin, s.input());
            let (loss, d_out) = sample_loss(kind, cache.output(), s.target());
            net.backward(twin, &cache, &d_out, &mut grad[..len]);
            grad[len] += loss;
        }
        grad
    });
    let mut total = par::sum_vectors(parts, len + 1);
    let loss = total.pop().unwrap_or(0.0);
    (loss, total)
}

fn mean_loss(net: &Network, kind: ModelKind, twin: &[f64], samples: &[WindowSample]) -> f64 {
    let parts = par::map_chunks(samples, par::REDUCE_CHUNK * 4, |chunk| {
        chunk
            .iter()
            .map(|s| sample_loss(kind, net.forward(twin, s.input()).output(), s.target()).0)
            .sum::<f64>()
    });
    parts.iter().sum::<f64>() / samples.len() as f64
}

/// Predicted per-resource Gaussians (or point means) for a set of inputs, in
/// scaled space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastDistribution {
    pub resources: usize,
    /// `mean[i * R + r]`.
    pub mean: Vec<f64>,
    /// Absent for point models.
    pub std: Option<Vec<f64>>,
    /// Relative margin for point-model upper bounds: `mean * (1 + threshold)`.
    pub threshold: Option<f64>,
}

impl ForecastDistribution {
    pub fn len(&self) -> usize {
        self.mean.len() / self.resources.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    /// Column `r` of the means.
    pub fn mean_of(&self, r: usize) -> Vec<f64> {
        self.mean.iter().skip(r).step_by(self.resources).copied().collect()
    }

    pub fn std_of(&self, r: usize) -> Option<Vec<f64>> {
        self.std
            .as_ref()
            .map(|s| s.iter().skip(r).step_by(self.resources).copied().collect())
    }

    /// Single-resource view.
    pub fn select(&self, r: usize) -> ForecastDistribution {
        ForecastDistribution {
            resources: 1,
            mean: self.mean_of(r),
            std: self.std_of(r),
            threshold: self.threshold,
        }
    }

    pub fn with_threshold(mut self, threshold: f64) -> Self {
        self.threshold = Some(threshold);
        self
    }
}

/// Per-row Gaussian components from individual posterior weight draws.
#[derive(Debug, Clone)]
pub struct MixturePrediction {
    pub resources: usize,
    pub samples: usize,
    /// `means[(i * S + s) * R + r]`.
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl MixturePrediction {
    pub fn rows(&self) -> usize {
        self.means.len() / (self.samples * self.resources)
    }

    /// Component means and variances of row `i`, resource `r`.
    pub fn components(&self, i: usize, r: usize) -> (Vec<f64>, Vec<f64>) {
        let idx = |s: usize| (i * self.samples + s) * self.resources + r;
        (
            (0..self.samples).map(|s| self.means[idx(s)]).collect(),
            (0..self.samples).map(|s| self.variances[idx(s)]).collect(),
        )
    }
}

/// Collapses an equally weighted Gaussian mixture into one Gaussian:
/// mean of means, and mean of variances plus variance of means.
pub fn moment_match(mixture: &MixturePrediction) -> ForecastDistribution {
    let (n, s_count, r_count) = (mixture.rows(), mixture.samples, mixture.resources);
    let mut mean = vec![0.0; n * r_count];
    let mut std = vec![0.0; n * r_count];
    for i in 0..n {
        for r in 0..r_count {
            let (means, vars) = mixture.components(i, r);
            let m = means.iter().sum::<f64>() / s_count as f64;
            let aleatoric = vars.iter().sum::<f64>() / s_count as f64;
            let epistemic = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / s_count as f64;
            mean[i * r_count + r] = m;
            std[i * r_count + r] = (aleatoric + epistemic).sqrt();
        }
    }
    ForecastDistribution {
        resources: r_count,
        mean,
        std: Some(std),
        threshold: None,
    }
}

fn check_inputs(model: &TrainedModel, inputs: &[&[f64]]) -> Result<()> {
    model.check_ready()?;
    let want = model.input_len * model.config.output_resources;
    if let Some(bad) = inputs.iter().find(|x| x.len() != want) {
        return Err(Error::ShapeMismatch(format!(
            "input of length {}, model expects {}x{}",
            bad.len(),
            model.input_len,
            model.config.output_resources
        )));
    }
    Ok(())
}

/// Draws `samples` weight realizations of the variational layer and returns
/// every component Gaussian.
pub fn predict_mixture(model: &TrainedModel, inputs: &[&[f64]], samples: usize) -> Result<MixturePrediction> {
    check_inputs(model, inputs)?;
    let net = &model.network;
    if !net.is_variational() {
        return Err(Error::InvalidParameter("model has no variational layer".into()));
    }
    let samples = samples.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(model.seed);
    rng.set_stream(3);
    let twins: Vec<Vec<f64>> = (0..samples)
        .map(|_| {
            let noise = net.sample_noise(&mut rng);
            net.realize(&model.params, Some(&noise))
        })
        .collect();
    let r = model.config.output_resources;
    let rows = par::map(inputs, |x| {
        let mut means = Vec::with_capacity(samples * r);
        let mut vars = Vec::with_capacity(samples * r);
        for twin in &twins {
            let cache = net.forward(twin, x);
            let out = cache.output();
            for k in 0..r {
                means.push(out[k]);
                vars.push(std_link(out[r + k]).powi(2));
            }
        }
        (means, vars)
    });
    let (means, variances): (Vec<Vec<f64>>, Vec<Vec<f64>>) = rows.into_iter().unzip();
    Ok(MixturePrediction {
        resources: r,
        samples,
        means: means.concat(),
        variances: variances.concat(),
    })
}

/// Predictive distribution for each input (`input_len x R`, time-major).
pub fn predict_distribution(model: &TrainedModel, inputs: &[&[f64]]) -> Result<ForecastDistribution> {
    check_inputs(model, inputs)?;
    let r = model.config.output_resources;
    match model.config.kind {
        ModelKind::BayesianLastLayer => Ok(moment_match(&predict_mixture(
            model,
            inputs,
            model.config.epistemic_samples,
        )?)),
        kind => {
            let twin = model.network.realize(&model.params, None);
            let outs = par::map(inputs, |x| model.network.forward(&twin, x).output().to_vec());
            let mean = outs.iter().flat_map(|o| o[..r].to_vec()).collect();
            let std = (kind == ModelKind::Distributional)
                .then(|| outs.iter().flat_map(|o| o[r..2 * r].iter().map(|&v| std_link(v))).collect());
            Ok(ForecastDistribution {
                resources: r,
                mean,
                std,
                threshold: None,
            })
        }
    }
}

pub fn predict_samples(model: &TrainedModel, samples: &[WindowSample]) -> Result<ForecastDistribution> {
    let inputs: Vec<&[f64]> = samples.iter().map(|s| s.input()).collect();
    predict_distribution(model, &inputs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalSide {
    /// `z = Phi^-1((1 + c) / 2)`: upper end of the central interval.
    #[default]
    TwoSided,
    /// `z = Phi^-1(c)`.
    OneSided,
}

pub fn z_score(confidence: f64, side: IntervalSide) -> Result<f64> {
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "confidence must lie in (0, 1), got {confidence}"
        )));
    }
    Ok(match side {
        IntervalSide::TwoSided => normal_quantile((1.0 + confidence) / 2.0),
        IntervalSide::OneSided => normal_quantile(confidence),
    })
}

/// Upper bound of the predicted interval, flattened like `dist.mean`.
pub fn upper_bound(dist: &ForecastDistribution, confidence: f64) -> Result<Vec<f64>> {
    upper_bound_with(dist, confidence, IntervalSide::TwoSided)
}

pub fn upper_bound_with(dist: &ForecastDistribution, confidence: f64, side: IntervalSide) -> Result<Vec<f64>> {
    let z = z_score(confidence, side)?;
    Ok(match &dist.std {
        Some(std) => dist.mean.iter().zip(std).map(|(m, s)| m + z * s).collect(),
        None => {
            let theta = dist.threshold.unwrap_or(0.0);
            dist.mean.iter().map(|m| m * (1.0 + theta)).collect()
        }
    })
}

fn weights_bytes(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|p| p.to_le_bytes()).collect()
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Lower-case hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

const WEIGHTS_MAGIC: &[u8; 8] = b"CCWGHT01";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointMeta {
    seed: u64,
    stop_epoch: usize,
    max_epochs: usize,
    input_len: usize,
    resources: Vec<String>,
    scalers: BTreeMap<String, MinMaxScaler>,
    content_hash: String,
    config_hash: String,
}

/// Writes `config.json`, `weights.bin`, `history.csv` and `meta.json`.
///
/// `weights.bin` is the 8-byte magic `CCWGHT01`, a little-endian `u64`
/// parameter count, then the parameters as little-endian `f64`.
pub fn save_checkpoint(model: &TrainedModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.json"), serde_json::to_string_pretty(&model.config)?)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("weights.bin"))?);
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_all(&(model.params.len() as u64).to_le_bytes())?;
    w.write_all(&weights_bytes(&model.params))?;
    w.flush()?;
    let mut h = BufWriter::new(fs::File::create(dir.join("history.csv"))?);
    writeln!(h, "epoch,train_loss,val_loss")?;
    for e in &model.history {
        writeln!(h, "{},{},{}", e.epoch, e.train_loss, e.val_loss)?;
    }
    h.flush()?;
    let meta = CheckpointMeta {
        seed: model.seed,
        stop_epoch: model.stop_epoch,
        max_epochs: model.max_epochs,
        input_len: model.input_len,
        resources: model.resources.clone(),
        scalers: model.scalers.clone(),
        content_hash: model.content_hash(),
        config_hash: model.config.content_hash(),
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<TrainedModel> {
    let config: ModelConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
    let meta_path = dir.join("meta.json");
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    let weights_path = dir.join("weights.bin");
    let bytes = fs::read(&weights_path)?;
    if bytes.len() < 16 || &bytes[..8] != WEIGHTS_MAGIC {
        return Err(Error::artifact(&weights_path, "bad weights header"));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() != 16 + 8 * count {
        return Err(Error::artifact(&weights_path, "truncated weights"));
    }
    let params: Vec<f64> = bytes[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let history_path = dir.join("history.csv");
    let mut reader = csv::Reader::from_path(&history_path)?;
    let history = reader
        .deserialize::<EpochRecord>()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let model = build_model(&config, meta.input_len)?;
    if model.network.num_params() != params.len() {
        return Err(Error::artifact(
            &weights_path,
            format!("{} weights, config needs {}", params.len(), model.network.num_params()),
        ));
    }
    let trained = TrainedModel {
        config,
        input_len: meta.input_len,
        network: model.network,
        params,
        resources: meta.resources,
        scalers: meta.scalers,
        history,
        stop_epoch: meta.stop_epoch,
        max_epochs: meta.max_epochs,
        seed: meta.seed,
    };
    if trained.content_hash() != meta.content_hash {
        return Err(Error::artifact(&meta_path, "content hash does not match weights"));
    }
    Ok(trained)
}

/// Writes `cluster_id,target_index,resource,mean,std` rows; `std` is empty
/// for point models.
pub fn write_predictions(
    path: &Path,
    cluster_id: &str,
    target_indices: &[usize],
    resources: &[String],
    dist: &ForecastDistribution,
) -> Result<()> {
    if target_indices.len() != dist.len() || resources.len() != dist.resources {
        return Err(Error::ShapeMismatch(format!(
            "{} indices / {} resources for {} rows of width {}",
            target_indices.len(),
            resources.len(),
            dist.len(),
            dist.resources
        )));
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    writeln!(out, "cluster_id,target_index,resource,mean,std")?;
    for (i, idx) in target_indices.iter().enumerate() {
        for (r, name) in resources.iter().enumerate() {
            let k = i * dist.resources + r;
            match &dist.std {
                Some(s) => writeln!(out, "{cluster_id},{idx},{name},{},{}", dist.mean[k], s[k])?,
                None => writeln!(out, "{cluster_id},{idx},{name},{},", dist.mean[k])?,
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Predictions file contents.
#[derive(Debug, Clone)]
pub struct PredictionTable {
    pub cluster_id: String,
    pub resources: Vec<String>,
    pub target_indices: Vec<usize>,
    pub dist: ForecastDistribution,
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    cluster_id: String,
    target_index: usize,
    resource: String,
    mean: f64,
    std: Option<f64>,
}

pub fn read_predictions(path: &Path) -> Result<PredictionTable> {
    let mut reader = csv::Reader::from_path(path)?;
    let rows = reader
        .deserialize::<PredictionRow>()
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let first = rows.first().ok_or_else(|| Error::artifact(path, "no prediction rows"))?;
    let cluster_id = first.cluster_id.clone();
    let mut resources: Vec<String> = Vec::new();
    for row in &rows {
        if row.target_index != first.target_index {
            break;
        }
        resources.push(row.resource.clone());
    }
    let r = resources.len();
    if rows.len() % r != 0 {
        return Err(Error::artifact(path, "ragged prediction rows"));
    }
    let has_std = rows.iter().all(|row| row.std.is_some());
    let mut target_indices = Vec::with_capacity(rows.len() / r);
    for (i, chunk) in rows.chunks(r).enumerate() {
        if chunk.iter().zip(&resources).any(|(row, name)| &row.resource != name)
            || chunk.iter().any(|row| row.target_index != chunk[0].target_index)
        {
            return Err(Error::artifact(path, format!("inconsistent resource block {i}")));
        }
        target_indices.push(chunk[0].target_index);
    }
    Ok(PredictionTable {
        cluster_id,
        resources,
        target_indices,
        dist: ForecastDistribution {
            resources: r,
            mean: rows.iter().map(|row| row.mean).collect(),
            std: has_std.then(|| rows.iter().map(|row| row.std.unwrap_or(0.0)).collect()),
            threshold: None,
        },
    })
}
