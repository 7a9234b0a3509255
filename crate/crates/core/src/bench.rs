//! Wall-clock timing of training, fine-tuning and single-sample inference.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::SplitBundle;
use crate::error::{Error, Result};
use crate::models::{build_model, continue_training, predict_distribution, train, ModelConfig, TrainOptions, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Training,
    Finetune,
    Inference,
}

impl Phase {
    pub fn label(self) -> &'static str {
        match self {
            Phase::Training => "training",
            Phase::Finetune => "finetune",
            Phase::Inference => "inference",
        }
    }
}

/// One timed cell: every run in seconds plus its summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub phase: Phase,
    /// Training fraction in percent, fine-tune sample count, or 1 for a
    /// single inference sample.
    pub cell: f64,
    pub runs: Vec<f64>,
    /// Arithmetic mean for training and fine-tuning, median for inference.
    pub seconds: f64,
    /// Sample standard deviation; absent for a single run.
    pub std: Option<f64>,
}

impl RuntimeRow {
    fn from_runs(phase: Phase, cell: f64, runs: Vec<f64>) -> Self {
        let n = runs.len() as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let std = (runs.len() > 1).then(|| (runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        let seconds = match phase {
            Phase::Inference => median(&runs),
            _ => mean,
        };
        Self {
            phase,
            cell,
            runs,
            seconds,
            std,
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub model: String,
    pub repetitions: usize,
    pub rows: Vec<RuntimeRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchOptions {
    pub fractions: Vec<f64>,
    pub step_counts: Vec<usize>,
    pub repetitions: usize,
    /// Timed single-sample predictions (at least 100 are taken).
    pub inference_runs: usize,
    /// Untimed predictions before the inference measurements.
    pub warmup: usize,
    pub train: TrainOptions,
    pub finetune_epochs: usize,
    pub finetune_lr_factor: f64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            fractions: vec![0.2, 0.4, 0.6, 0.8],
            step_counts: vec![6, 12, 18, 24],
            repetitions: 10,
            inference_runs: 100,
            warmup: 5,
            train: TrainOptions::default(),
            finetune_epochs: 50,
            finetune_lr_factor: 0.1,
        }
    }
}

fn check_reps(repetitions: usize) -> Result<()> {
    if repetitions == 0 {
        return Err(Error::InvalidParameter("repetitions must be >= 1".into()));
    }
    Ok(())
}

/// Trains on the leading `fraction` of the training windows, `repetitions`
/// times per fraction. Fractions are given as values in (0, 1].
pub fn bench_training(
    config: &ModelConfig,
    bundle: &SplitBundle,
    fractions: &[f64],
    repetitions: usize,
    options: &TrainOptions,
) -> Result<Vec<RuntimeRow>> {
    check_reps(repetitions)?;
    let untrained = build_model(config, bundle.options.input_len)?;
    let mut rows = Vec::with_capacity(fractions.len());
    for &f in fractions {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::InvalidParameter(format!("training fraction must lie in (0, 1], got {f}")));
        }
        let n = (f * bundle.train.len() as f64).floor() as usize;
        if n == 0 {
            return Err(Error::InsufficientData(format!(
                "fraction {f} of {} training windows is empty",
                bundle.train.len()
            )));
        }
        let subset = &bundle.train[..n];
        let mut runs = Vec::with_capacity(repetitions);
        for rep in 0..repetitions {
            let opts = TrainOptions {
                seed: options.seed.wrapping_add(rep as u64),
                ..*options
            };
            let start = Instant::now();
            train(&untrained, subset, &bundle.val, &opts)?;
            runs.push(start.elapsed().as_secs_f64());
        }
        rows.push(RuntimeRow::from_runs(Phase::Training, 100.0 * f, runs));
    }
    Ok(rows)
}

/// Fine-tunes a copy of `model` on the newest `steps` training windows of
/// `bundle`, per step count. The model itself is not modified.
pub fn bench_finetune(
    model: &TrainedModel,
    bundle: &SplitBundle,
    step_counts: &[usize],
    repetitions: usize,
    epochs: usize,
    lr_factor: f64,
) -> Result<Vec<RuntimeRow>> {
    check_reps(repetitions)?;
    let mut rows = Vec::with_capacity(step_counts.len());
    for &steps in step_counts {
        if steps == 0 || steps > bundle.train.len() {
            return Err(Error::InvalidParameter(format!(
                "fine-tune step count must be in 1..={}, got {steps}",
                bundle.train.len()
            )));
        }
        let mut newest: Vec<_> = bundle.train.iter().collect();
        newest.sort_by_key(|s| s.target_index);
        let samples: Vec<_> = newest[newest.len() - steps..].iter().map(|s| (*s).clone()).collect();
        let mut runs = Vec::with_capacity(repetitions);
        for rep in 0..repetitions {
            let opts = TrainOptions {
                max_epochs: epochs,
                patience: epochs,
                seed: model.seed.wrapping_add(rep as u64),
                learning_rate: Some(model.config.learning_rate * lr_factor),
            };
            let start = Instant::now();
            continue_training(model, &samples, &bundle.val, &opts)?;
            runs.push(start.elapsed().as_secs_f64());
        }
        rows.push(RuntimeRow::from_runs(Phase::Finetune, steps as f64, runs));
    }
    Ok(rows)
}

/// Median wall time of one single-sample prediction over at least 100 timed
/// runs, after `warmup` untimed ones.
pub fn bench_inference(model: &TrainedModel, input: &[f64], runs: usize, warmup: usize) -> Result<RuntimeRow> {
    for _ in 0..warmup.max(1) {
        predict_distribution(model, &[input])?;
    }
    let mut times = Vec::with_capacity(runs.max(100));
    for _ in 0..runs.max(100) {
        let start = Instant::now();
        let d = predict_distribution(model, &[input])?;
        times.push(start.elapsed().as_secs_f64());
        std::hint::black_box(d);
    }
    Ok(RuntimeRow::from_runs(Phase::Inference, 1.0, times))
}

/// Full protocol: training per fraction, fine-tuning per step count and
/// inference, for one model configuration.
pub fn run_benchmark(
    label: &str,
    config: &ModelConfig,
    model: &TrainedModel,
    bundle: &SplitBundle,
    options: &BenchOptions,
) -> Result<RuntimeReport> {
    let input = bundle
        .test
        .first()
        .or(bundle.val.first())
        .ok_or_else(|| Error::NoData("bundle has no windows to time inference on".into()))?;
    let mut rows = bench_training(config, bundle, &options.fractions, options.repetitions, &options.train)?;
    rows.extend(bench_finetune(
        model,
        bundle,
        &options.step_counts,
        options.repetitions,
        options.finetune_epochs,
        options.finetune_lr_factor,
    )?);
    rows.push(bench_inference(model, input.input(), options.inference_runs, options.warmup)?);
    Ok(RuntimeReport {
        model: label.to_string(),
        repetitions: options.repetitions,
        rows,
    })
}

/// Exclusive benchmark lock; the file is removed on drop.
#[derive(Debug)]
pub struct BenchLock {
    path: PathBuf,
}

impl BenchLock {
    pub fn acquire(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        match OpenOptions::new().write(true).create_new(true).open(path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self {
                    path: path.to_path_buf(),
                })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::LockHeld(path.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for BenchLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTiming {
    pub model: String,
    pub phase: Phase,
    pub cell: f64,
    pub run: usize,
    pub seconds: f64,
}

/// Appends one JSON line per timed run.
pub fn append_raw_log(path: &Path, report: &RuntimeReport) -> Result<()> {
    let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    for row in &report.rows {
        for (run, &seconds) in row.runs.iter().enumerate() {
            let rec = RawTiming {
                model: report.model.clone(),
                phase: row.phase,
                cell: row.cell,
                run,
                seconds,
            };
            writeln!(w, "{}", serde_json::to_string(&rec)?)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw_log(path: &Path) -> Result<Vec<RawTiming>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn cell_name(row: &RuntimeRow) -> String {
    match row.phase {
        Phase::Training => format!("train_{}pct", row.cell.round() as i64),
        Phase::Finetune => format!("ft_{}", row.cell as usize),
        Phase::Inference => "inference".into(),
    }
}

/// One row per model, one column per cell (seconds) followed by the
/// matching `_std` columns.
pub fn write_report_csv(path: &Path, reports: &[RuntimeReport]) -> Result<()> {
    let first = reports
        .first()
        .ok_or_else(|| Error::NoData("no runtime reports to write".into()))?;
    let cells: Vec<String> = first.rows.iter().map(cell_name).collect();
    let mut w = csv::Writer::from_writer(File::create(path)?);
    let mut header = vec!["model".to_string(), "repetitions".to_string()];
    header.extend(cells.iter().cloned());
    header.extend(cells.iter().map(|c| format!("{c}_std")));
    w.write_record(&header)?;
    for r in reports {
        if r.rows.iter().map(cell_name).collect::<Vec<_>>() != cells {
            return Err(Error::ShapeMismatch(format!("report `{}` has a different cell layout", r.model)));
        }
        let mut rec = vec![r.model.clone(), r.repetitions.to_string()];
        rec.extend(r.rows.iter().map(|row| row.seconds.to_string()));
        rec.extend(r.rows.iter().map(|row| row.std.map(|s| s.to_string()).unwrap_or_default()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
