//! Scaling, sliding windows and leak-free train/validation/test splits.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::TraceSeries;

/// One day of five-minute observations.
pub const DEFAULT_INPUT_LEN: usize = 288;
/// Two five-minute steps: the window starting ten minutes after the last
/// observation.
pub const DEFAULT_HORIZON_STEPS: usize = 2;
pub const DEFAULT_TRAIN_FRACTION: f64 = 0.8;
pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

/// Per-resource affine map to `[0, 1]` over the training portion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub resources: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMaxScaler {
    pub fn scale_value(&self, r: usize, x: f64) -> f64 {
        (x - self.min[r]) / (self.max[r] - self.min[r])
    }

    pub fn inverse_value(&self, r: usize, y: f64) -> f64 {
        y * (self.max[r] - self.min[r]) + self.min[r]
    }

    /// Scales a row of raw values (one per resource).
    pub fn scale_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(r, &x)| self.scale_value(r, x)).collect()
    }

    /// Inverse of [`MinMaxScaler::scale_row`].
    pub fn inverse_scale(&self, row: &[f64]) -> Vec<f64> {
        row.iter().enumerate().map(|(r, &y)| self.inverse_value(r, y)).collect()
    }

    /// Restricts the scaler to a subset of its resources.
    pub fn select(&self, columns: &[usize]) -> MinMaxScaler {
        MinMaxScaler {
            resources: columns.iter().map(|&c| self.resources[c].clone()).collect(),
            min: columns.iter().map(|&c| self.min[c]).collect(),
            max: columns.iter().map(|&c| self.max[c]).collect(),
        }
    }
}

/// Fits min/max on the first `floor(train_fraction * T)` points only.
pub fn fit_scaler(series: &TraceSeries, train_fraction: f64) -> Result<MinMaxScaler> {
    if series.is_empty() {
        return Err(Error::NoData("empty series".into()));
    }
    if !(train_fraction > 0.0 && train_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train_fraction must lie in (0, 1], got {train_fraction}"
        )));
    }
    let n_train = (train_fraction * series.len() as f64).floor() as usize;
    if n_train == 0 {
        return Err(Error::InsufficientData("training portion is empty".into()));
    }
    let r_count = series.num_resources();
    let mut min = vec![f64::INFINITY; r_count];
    let mut max = vec![f64::NEG_INFINITY; r_count];
    for row in &series.values[..n_train] {
        for r in 0..r_count {
            min[r] = min[r].min(row[r]);
            max[r] = max[r].max(row[r]);
        }
    }
    for r in 0..r_count {
        if !(max[r] > min[r]) {
            return Err(Error::DegenerateScale {
                resource: series.resources[r].clone(),
                value: min[r],
            });
        }
    }
    Ok(MinMaxScaler {
        resources: series.resources.clone(),
        min,
        max,
    })
}

/// Scaled copy of a trace, stored flat (time-major) so windows are slices.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledSeries {
    pub cluster_id: String,
    pub resources: Vec<String>,
    /// `values[t * R + r]`.
    pub values: Arc<[f64]>,
}

impl ScaledSeries {
    pub fn num_resources(&self) -> usize {
        self.resources.len()
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.resources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let r = self.num_resources();
        &self.values[t * r..(t + 1) * r]
    }
}

pub fn scale(series: &TraceSeries, scaler: &MinMaxScaler) -> Result<ScaledSeries> {
    if scaler.resources != series.resources {
        return Err(Error::ShapeMismatch(format!(
            "scaler resources {:?} vs series resources {:?}",
            scaler.resources, series.resources
        )));
    }
    let values: Vec<f64> = series.values.iter().flat_map(|row| scaler.scale_row(row)).collect();
    Ok(ScaledSeries {
        cluster_id: series.cluster_id.clone(),
        resources: series.resources.clone(),
        values: values.into(),
    })
}

/// Which resources a model consumes and predicts.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceSelector {
    Univariate(String),
    Bivariate,
}

impl ResourceSelector {
    /// Column indices into `resources`.
    pub fn columns(&self, resources: &[String]) -> Result<Vec<usize>> {
        match self {
            ResourceSelector::Univariate(name) => resources
                .iter()
                .position(|r| r == name)
                .map(|i| vec![i])
                .ok_or_else(|| Error::InvalidParameter(format!("resource `{name}` not in {resources:?}"))),
            ResourceSelector::Bivariate if resources.len() == 2 => Ok(vec![0, 1]),
            ResourceSelector::Bivariate => Err(Error::InvalidParameter(format!(
                "bivariate mode needs two resources, trace has {resources:?}"
            ))),
        }
    }

    pub fn width(&self) -> usize {
        match self {
            ResourceSelector::Univariate(_) => 1,
            ResourceSelector::Bivariate => 2,
        }
    }

    /// Short label used in paths and reports (`cpu`, `memory`, `bivariate`).
    pub fn label(&self) -> String {
        match self {
            ResourceSelector::Univariate(r) => r.clone(),
            ResourceSelector::Bivariate => "bivariate".into(),
        }
    }

    pub fn parse(label: &str) -> Self {
        match label {
            "bivariate" | "B" => ResourceSelector::Bivariate,
            other => ResourceSelector::Univariate(other.to_string()),
        }
    }
}

/// A window of scaled history and the scaled demand `horizon` steps after
/// its last observation.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub cluster_id: Arc<str>,
    data: Arc<[f64]>,
    resources: usize,
    first_row: usize,
    input_len: usize,
    target_row: usize,
    horizon_steps: usize,
    pub target_index: usize,
}

impl WindowSample {
    /// Builds a sample that owns its input and target.
    pub fn from_parts(
        cluster_id: Arc<str>,
        input: &[f64],
        target: &[f64],
        horizon_steps: usize,
        target_index: usize,
    ) -> Result<Self> {
        let r = target.len();
        if r == 0 || input.len() % r != 0 || input.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "input length {} is not a multiple of target width {r}",
                input.len()
            )));
        }
        let input_len = input.len() / r;
        if target_index + 1 < input_len + horizon_steps {
            return Err(Error::InvalidParameter(format!(
                "target index {target_index} too small for {input_len} inputs and horizon {horizon_steps}"
            )));
        }
        let mut data = Vec::with_capacity(input.len() + r);
        data.extend_from_slice(input);
        data.extend_from_slice(target);
        Ok(Self {
            cluster_id,
            data: data.into(),
            resources: r,
            first_row: 0,
            input_len,
            target_row: input_len,
            horizon_steps,
            target_index,
        })
    }

    /// `input_len x R`, time-major.
    pub fn input(&self) -> &[f64] {
        let r = self.resources;
        &self.data[self.first_row * r..(self.first_row + self.input_len) * r]
    }

    pub fn target(&self) -> &[f64] {
        let r = self.resources;
        &self.data[self.target_row * r..(self.target_row + 1) * r]
    }

    pub fn resources(&self) -> usize {
        self.resources
    }

    pub fn input_len(&self) -> usize {
        self.input_len
    }

    /// Index of the first input row in the source series.
    pub fn first_input_index(&self) -> usize {
        self.target_index + 1 - self.input_len - self.horizon_steps
    }

    pub fn horizon_steps(&self) -> usize {
        self.horizon_steps
    }
}

/// Builds every window of `input_len` observations followed by a target
/// `horizon_steps` after the last observation.
pub fn make_windows(
    series: &ScaledSeries,
    input_len: usize,
    horizon_steps: usize,
    selector: &ResourceSelector,
) -> Result<Vec<WindowSample>> {
    let columns = selector.columns(&series.resources)?;
    let selected = select_scaled(series, &columns);
    windows_over(&selected, input_len, horizon_steps, 0, usize::MAX)
}

fn select_scaled(series: &ScaledSeries, columns: &[usize]) -> ScaledSeries {
    if columns.len() == series.num_resources() && columns.iter().enumerate().all(|(i, &c)| i == c) {
        return series.clone();
    }
    let values: Vec<f64> = (0..series.len())
        .flat_map(|t| columns.iter().map(move |&c| series.row(t)[c]))
        .collect();
    ScaledSeries {
        cluster_id: series.cluster_id.clone(),
        resources: columns.iter().map(|&c| series.resources[c].clone()).collect(),
        values: values.into(),
    }
}

/// Windows whose first input index is `>= min_start` and whose target index
/// is `< target_limit`.
fn windows_over(
    series: &ScaledSeries,
    input_len: usize,
    horizon_steps: usize,
    min_start: usize,
    target_limit: usize,
) -> Result<Vec<WindowSample>> {
    if input_len == 0 || horizon_steps == 0 {
        return Err(Error::InvalidParameter("input_len and horizon_steps must be positive".into()));
    }
    let t = series.len();
    let needed = input_len + horizon_steps;
    if t < needed {
        return Err(Error::SeriesTooShort { needed, available: t });
    }
    let cluster: Arc<str> = Arc::from(series.cluster_id.as_str());
    let r = series.num_resources();
    let count = t - needed + 1;
    Ok((min_start..count)
        .map(|start| WindowSample {
            cluster_id: cluster.clone(),
            data: series.values.clone(),
            resources: r,
            first_row: start,
            input_len,
            target_row: start + input_len + horizon_steps - 1,
            horizon_steps,
            target_index: start + input_len + horizon_steps - 1,
        })
        .take_while(|s| s.target_index < target_limit)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitOptions {
    pub input_len: usize,
    pub horizon_steps: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    /// Allow test windows to read observations from the training region.
    /// Targets never leak either way.
    pub allow_train_tail_inputs: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            input_len: DEFAULT_INPUT_LEN,
            horizon_steps: DEFAULT_HORIZON_STEPS,
            train_fraction: DEFAULT_TRAIN_FRACTION,
            val_fraction: DEFAULT_VAL_FRACTION,
            allow_train_tail_inputs: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SplitBundle {
    pub cluster_id: String,
    pub selector: ResourceSelector,
    pub resources: Vec<String>,
    pub options: SplitOptions,
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
    pub scaler: MinMaxScaler,
    /// `(train_end, test_start)`: first index outside the training portion
    /// and first input index of the earliest test window.
    pub split_indices: (usize, usize),
}

impl SplitBundle {
    pub fn width(&self) -> usize {
        self.resources.len()
    }

    /// Checks the leak-freedom invariants; returns a description of the
    /// first violation.
    pub fn check_leak_free(&self) -> std::result::Result<(), String> {
        let (train_end, _) = self.split_indices;
        let max_fit = self
            .train
            .iter()
            .chain(&self.val)
            .map(|s| s.target_index)
            .max()
            .unwrap_or(0);
        if max_fit >= train_end {
            return Err(format!("training target {max_fit} beyond train_end {train_end}"));
        }
        for s in &self.test {
            if s.target_index <= max_fit {
                return Err(format!("test target {} not after training targets", s.target_index));
            }
            if !self.options.allow_train_tail_inputs && s.first_input_index() < train_end {
                return Err(format!(
                    "test input starts at {} inside the training region",
                    s.first_input_index()
                ));
            }
        }
        if let (Some(last_train), Some(first_val)) = (self.train.last(), self.val.first()) {
            if first_val.target_index != last_train.target_index + 1 {
                return Err("validation targets are not contiguous with training targets".into());
            }
        }
        Ok(())
    }
}

/// Scales `series` with a scaler fitted on the training portion, windows it
/// and splits the windows into train/val/test without target leakage.
pub fn split(series: &TraceSeries, selector: &ResourceSelector, options: SplitOptions) -> Result<SplitBundle> {
    let columns = selector.columns(&series.resources)?;
    let selected = series.select(&columns)?;
    let scaler = fit_scaler(&selected, options.train_fraction)?;
    let scaled = scale(&selected, &scaler)?;
    let t = scaled.len();
    let train_end = (options.train_fraction * t as f64).floor() as usize;

    let fit = windows_over(&scaled, options.input_len, options.horizon_steps, 0, train_end)
        .map_err(|e| insufficient(&series.cluster_id, "training", e))?;
    let test_min_start = if options.allow_train_tail_inputs {
        (train_end + 1).saturating_sub(options.input_len + options.horizon_steps)
    } else {
        train_end
    };
    let test = windows_over(&scaled, options.input_len, options.horizon_steps, test_min_start, usize::MAX)?;

    let n_val = (options.val_fraction * fit.len() as f64).floor() as usize;
    if fit.len() < 2 || n_val == 0 || test.is_empty() {
        return Err(Error::InsufficientData(format!(
            "cluster `{}`: {} fit windows ({} validation) and {} test windows",
            series.cluster_id,
            fit.len(),
            n_val,
            test.len()
        )));
    }
    let mut train = fit;
    let val = train.split_off(train.len() - n_val);
    let test_start = test[0].first_input_index();
    let bundle = SplitBundle {
        cluster_id: series.cluster_id.clone(),
        selector: selector.clone(),
        resources: selected.resources.clone(),
        options,
        train,
        val,
        test,
        scaler,
        split_indices: (train_end, test_start),
    };
    debug_assert!(bundle.check_leak_free().is_ok());
    Ok(bundle)
}

fn insufficient(cluster: &str, part: &str, e: Error) -> Error {
    match e {
        Error::SeriesTooShort { needed, available } => Error::InsufficientData(format!(
            "cluster `{cluster}`: {part} portion has {available} points, windows need {needed}"
        )),
        other => other,
    }
}

/// Training data pooled across clusters.
#[derive(Debug, Clone)]
pub struct TrainStream {
    /// Shuffled training windows of every cluster.
    pub train: Vec<WindowSample>,
    /// Validation windows, per cluster.
    pub val_by_cluster: Vec<(String, Vec<WindowSample>)>,
    pub input_len: usize,
    pub horizon_steps: usize,
    pub resources: usize,
}

impl TrainStream {
    pub fn val(&self) -> Vec<WindowSample> {
        self.val_by_cluster.iter().flat_map(|(_, v)| v.iter().cloned()).collect()
    }

    pub fn clusters(&self) -> Vec<&str> {
        self.val_by_cluster.iter().map(|(c, _)| c.as_str()).collect()
    }
}

/// Concatenates the training windows of `bundles` and permutes them with
/// `seed`.
pub fn merge_shuffle(bundles: &[&SplitBundle], seed: u64) -> Result<TrainStream> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::NoData("no bundles to merge".into()))?;
    for b in bundles {
        if b.width() != first.width()
            || b.options.input_len != first.options.input_len
            || b.options.horizon_steps != first.options.horizon_steps
        {
            return Err(Error::ShapeMismatch(format!(
                "bundle `{}` (R={}, L={}, h={}) does not match `{}` (R={}, L={}, h={})",
                b.cluster_id,
                b.width(),
                b.options.input_len,
                b.options.horizon_steps,
                first.cluster_id,
                first.width(),
                first.options.input_len,
                first.options.horizon_steps
            )));
        }
    }
    let mut train: Vec<WindowSample> = bundles.iter().flat_map(|b| b.train.iter().cloned()).collect();
    train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(TrainStream {
        train,
        val_by_cluster: bundles.iter().map(|b| (b.cluster_id.clone(), b.val.clone())).collect(),
        input_len: first.options.input_len,
        horizon_steps: first.options.horizon_steps,
        resources: first.width(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BundleMeta {
    cluster_id: String,
    selector: ResourceSelector,
    resources: Vec<String>,
    options: SplitOptions,
    input_len: usize,
    horizon: usize,
    seed: Option<u64>,
    counts: Counts,
    first_target_index: Counts,
    split_indices: (usize, usize),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct Counts {
    train: usize,
    val: usize,
    test: usize,
}

/// Persists a bundle as `scaler.json`, `meta.json` and one headerless CSV per
/// partition. Each CSV row is the flattened `input_len x R` input (time-major)
/// followed by the `R` targets. Targets within a partition are consecutive,
/// starting at `meta.first_target_index`.
pub fn save_bundle(bundle: &SplitBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("scaler.json"), serde_json::to_string_pretty(&bundle.scaler)?)?;
    let first = |v: &[WindowSample]| v.first().map(|s| s.target_index).unwrap_or(0);
    let meta = BundleMeta {
        cluster_id: bundle.cluster_id.clone(),
        selector: bundle.selector.clone(),
        resources: bundle.resources.clone(),
        options: bundle.options,
        input_len: bundle.options.input_len,
        horizon: bundle.options.horizon_steps,
        seed: None,
        counts: Counts {
            train: bundle.train.len(),
            val: bundle.val.len(),
            test: bundle.test.len(),
        },
        first_target_index: Counts {
            train: first(&bundle.train),
            val: first(&bundle.val),
            test: first(&bundle.test),
        },
        split_indices: bundle.split_indices,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    for (name, samples) in [("train", &bundle.train), ("val", &bundle.val), ("test", &bundle.test)] {
        let mut out = BufWriter::new(fs::File::create(dir.join(format!("{name}.csv")))?);
        for s in samples {
            let mut first = true;
            for v in s.input().iter().chain(s.target()) {
                if !first {
                    out.write_all(b",")?;
                }
                first = false;
                write!(out, "{v}")?;
            }
            out.write_all(b"\n")?;
        }
        out.flush()?;
    }
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<SplitBundle> {
    let scaler: MinMaxScaler = serde_json::from_str(&fs::read_to_string(dir.join("scaler.json"))?)?;
    let meta_path = dir.join("meta.json");
    let meta: BundleMeta = serde_json::from_str(&fs::read_to_string(&meta_path)?)?;
    let cluster: Arc<str> = Arc::from(meta.cluster_id.as_str());
    let r = meta.resources.len();
    let width = meta.input_len * r + r;
    let read = |name: &str, first_target: usize, count: usize| -> Result<Vec<WindowSample>> {
        let path = dir.join(format!("{name}.csv"));
        let mut reader = csv::ReaderBuilder::new().has_headers(false).from_path(&path)?;
        let mut samples = Vec::with_capacity(count);
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::artifact(&path, format!("row {i}: {e}")))?;
            if row.len() != width {
                return Err(Error::artifact(&path, format!("row {i} has {} columns, want {width}", row.len())));
            }
            let (input, target) = row.split_at(meta.input_len * r);
            samples.push(WindowSample::from_parts(cluster.clone(), input, target, meta.horizon, first_target + i)?);
        }
        if samples.len() != count {
            return Err(Error::artifact(&path, format!("{} rows, meta says {count}", samples.len())));
        }
        Ok(samples)
    };
    Ok(SplitBundle {
        cluster_id: meta.cluster_id.clone(),
        selector: meta.selector,
        resources: meta.resources,
        options: meta.options,
        train: read("train", meta.first_target_index.train, meta.counts.train)?,
        val: read("val", meta.first_target_index.val, meta.counts.val)?,
        test: read("test", meta.first_target_index.test, meta.counts.test)?,
        scaler,
        split_indices: meta.split_indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(values: Vec<f64>) -> TraceSeries {
        let n = values.len();
        TraceSeries::new(
            "c",
            vec!["cpu".into()],
            300,
            (0..n as i64).map(|i| i * 300).collect(),
            values.into_iter().map(|v| vec![v]).collect(),
        )
        .unwrap()
    }

    fn wave(n: usize) -> TraceSeries {
        series((0..n).map(|i| 1.0 + (i as f64 * 0.05).sin() + (i % 7) as f64 * 0.01).collect())
    }

    fn bivariate(n: usize) -> TraceSeries {
        TraceSeries::new(
            "b",
            vec!["cpu".into(), "memory".into()],
            300,
            (0..n as i64).map(|i| i * 300).collect(),
            (0..n).map(|i| vec![1.0 + (i as f64 * 0.1).sin(), 2.0 + (i as f64 * 0.03).cos()]).collect(),
        )
        .unwrap()
    }

    #[test]
    fn scaler_uses_training_portion_only() {
        // train portion (first 2 of 3 points with fraction 2/3) = {2, 4}
        let s = series(vec![2.0, 4.0, 5.0]);
        let sc = fit_scaler(&s, 2.0 / 3.0).unwrap();
        assert_eq!((sc.min[0], sc.max[0]), (2.0, 4.0));
        assert_eq!(sc.scale_value(0, 2.0), 0.0);
        assert_eq!(sc.scale_value(0, 4.0), 1.0);
        assert!((sc.scale_value(0, 5.0) - 1.5).abs() < 1e-15);
    }

    #[test]
    fn constant_training_portion_is_degenerate() {
        let s = series(vec![3.0, 3.0, 3.0, 9.0]);
        assert!(matches!(fit_scaler(&s, 0.75), Err(Error::DegenerateScale { .. })));
    }

    #[test]
    fn spiked_test_maximum_does_not_move_scaler() {
        let base = wave(1000);
        let mut spiked = base.clone();
        spiked.values[990][0] = 1e6;
        assert_eq!(fit_scaler(&base, 0.8).unwrap(), fit_scaler(&spiked, 0.8).unwrap());
    }

    #[test]
    fn window_counts() {
        let sc = fit_scaler(&wave(8352), 0.8).unwrap();
        let scaled = scale(&wave(8352), &sc).unwrap();
        let sel = ResourceSelector::Univariate("cpu".into());
        assert_eq!(make_windows(&scaled, 288, 2, &sel).unwrap().len(), 8063);

        let short = scale(&wave(290), &fit_scaler(&wave(290), 0.8).unwrap()).unwrap();
        assert_eq!(make_windows(&short, 288, 2, &sel).unwrap().len(), 1);
        let too_short = scale(&wave(289), &fit_scaler(&wave(289), 0.8).unwrap()).unwrap();
        assert!(matches!(
            make_windows(&too_short, 288, 2, &sel),
            Err(Error::SeriesTooShort { .. })
        ));
    }

    #[test]
    fn target_is_two_steps_after_last_input() {
        let s = wave(400);
        let scaled = scale(&s, &fit_scaler(&s, 0.8).unwrap()).unwrap();
        let w = make_windows(&scaled, 288, 2, &ResourceSelector::Univariate("cpu".into())).unwrap();
        for sample in &w {
            assert_eq!(sample.target_index, sample.first_input_index() + 288 + 1);
            assert_eq!(sample.target()[0], scaled.row(sample.target_index)[0]);
            assert_eq!(sample.input()[287], scaled.row(sample.first_input_index() + 287)[0]);
        }
    }

    #[test]
    fn windows_reconstruct_series() {
        let s = bivariate(350);
        let scaled = scale(&s, &fit_scaler(&s, 0.8).unwrap()).unwrap();
        let w = make_windows(&scaled, 20, 2, &ResourceSelector::Bivariate).unwrap();
        // first row of each window, then the tail of the last window
        let mut rebuilt: Vec<f64> = w.iter().flat_map(|s| s.input()[..2].to_vec()).collect();
        rebuilt.extend_from_slice(&w.last().unwrap().input()[2..]);
        assert_eq!(&rebuilt[..], &scaled.values[..rebuilt.len()]);
    }

    #[test]
    fn split_points_for_full_length_series() {
        let b = split(&wave(8352), &ResourceSelector::Univariate("cpu".into()), SplitOptions::default()).unwrap();
        assert_eq!(b.split_indices.0, 6681);
        assert!(b.test.iter().all(|s| s.target_index >= 6681));
        let train_targets: std::collections::HashSet<_> = b.train.iter().map(|s| s.target_index).collect();
        assert!(b.test.iter().all(|s| !train_targets.contains(&s.target_index)));
        // fit windows: targets 289..6680 => 6392; val = floor(0.2 * 6392)
        assert_eq!(b.train.len() + b.val.len(), 6392);
        assert_eq!(b.val.len(), 1278);
        assert_eq!(b.val[0].target_index, b.train.last().unwrap().target_index + 1);
        assert!(b.check_leak_free().is_ok());
    }

    #[test]
    fn train_tail_inputs_are_opt_in() {
        let opts = SplitOptions {
            allow_train_tail_inputs: true,
            ..SplitOptions::default()
        };
        let b = split(&wave(8352), &ResourceSelector::Univariate("cpu".into()), opts).unwrap();
        assert_eq!(b.test[0].target_index, 6681);
        assert!(b.check_leak_free().is_ok());
    }

    #[test]
    fn split_rejects_tiny_series() {
        let r = split(&wave(400), &ResourceSelector::Univariate("cpu".into()), SplitOptions::default());
        assert!(matches!(r, Err(Error::InsufficientData(_))));
    }

    #[test]
    fn merge_counts_and_determinism() {
        let opts = SplitOptions {
            input_len: 24,
            ..SplitOptions::default()
        };
        let sel = ResourceSelector::Univariate("cpu".into());
        let bundles: Vec<SplitBundle> = (0..3)
            .map(|i| {
                let mut s = wave(300 + 50 * i);
                s.cluster_id = format!("c{i}");
                split(&s, &sel, opts).unwrap()
            })
            .collect();
        let refs: Vec<&SplitBundle> = bundles.iter().collect();
        let a = merge_shuffle(&refs, 7).unwrap();
        let b = merge_shuffle(&refs, 7).unwrap();
        let total: usize = bundles.iter().map(|b| b.train.len()).sum();
        assert_eq!(a.train.len(), total);
        let key = |s: &WindowSample| (s.cluster_id.to_string(), s.target_index);
        assert_eq!(a.train.iter().map(key).collect::<Vec<_>>(), b.train.iter().map(key).collect::<Vec<_>>());
        assert_eq!(a.val_by_cluster.len(), 3);

        let single = merge_shuffle(&refs[..1], 1).unwrap();
        let mut got: Vec<_> = single.train.iter().map(|s| s.target_index).collect();
        got.sort_unstable();
        assert_eq!(got, bundles[0].train.iter().map(|s| s.target_index).collect::<Vec<_>>());
    }

    #[test]
    fn merge_rejects_mixed_width() {
        let opts = SplitOptions {
            input_len: 24,
            ..SplitOptions::default()
        };
        let uni = split(&bivariate(300), &ResourceSelector::Univariate("cpu".into()), opts).unwrap();
        let bi = split(&bivariate(300), &ResourceSelector::Bivariate, opts).unwrap();
        assert!(matches!(merge_shuffle(&[&uni, &bi], 0), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn bundle_roundtrip() {
        let opts = SplitOptions {
            input_len: 16,
            ..SplitOptions::default()
        };
        let b = split(&bivariate(200), &ResourceSelector::Bivariate, opts).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&b, dir.path()).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back.scaler, b.scaler);
        assert_eq!(back.split_indices, b.split_indices);
        for (x, y) in back.test.iter().zip(&b.test) {
            assert_eq!(x.input(), y.input());
            assert_eq!(x.target(), y.target());
            assert_eq!(x.target_index, y.target_index);
        }
        assert!(back.check_leak_free().is_ok());
    }

    proptest! {
        #[test]
        fn scale_roundtrip(lo in -1e3f64..1e3, span in 1e-3f64..1e3, xs in prop::collection::vec(-1e4f64..1e4, 1..50)) {
            let sc = MinMaxScaler { resources: vec!["cpu".into()], min: vec![lo], max: vec![lo + span] };
            for x in xs {
                let back = sc.inverse_value(0, sc.scale_value(0, x));
                prop_assert!((back - x).abs() <= 1e-9 * x.abs().max(1.0));
            }
        }
    }
}
