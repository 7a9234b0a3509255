//! Synthetic workload traces: daily sinusoid plus AR(1) noise.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{TraceSeries, DEFAULT_WINDOW_SECONDS};

/// Samples per day at a five-minute resolution.
pub const DAY_STEPS: usize = 288;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub cluster_id: String,
    pub length: usize,
    pub resources: usize,
    pub daily_amplitude: f64,
    pub ar_coefficient: f64,
    pub noise_std: f64,
    pub base_level: f64,
    pub cross_correlation: f64,
    pub seed: u64,
    pub start_timestamp: i64,
}

impl Default for SynthSpec {
    /// One month of a daily-periodic trace (8352 points, the length of the
    /// public traces after preprocessing).
    fn default() -> Self {
        Self {
            cluster_id: "synthetic".into(),
            length: 8352,
            resources: 2,
            daily_amplitude: 0.25,
            ar_coefficient: 0.8,
            noise_std: 0.05,
            base_level: 1.0,
            cross_correlation: 0.3,
            seed: 0,
            start_timestamp: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::InvalidParameter("length must be at least 1".into()));
        }
        if !(1..=2).contains(&self.resources) {
            return Err(Error::InvalidParameter(format!(
                "resources must be 1 or 2, got {}",
                self.resources
            )));
        }
        if !(self.ar_coefficient.abs() < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "ar_coefficient must lie in (-1, 1), got {}",
                self.ar_coefficient
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::InvalidParameter("noise_std must be finite and >= 0".into()));
        }
        if !(self.base_level > 0.0) || !self.base_level.is_finite() {
            return Err(Error::InvalidParameter("base_level must be finite and > 0".into()));
        }
        if !self.daily_amplitude.is_finite() {
            return Err(Error::InvalidParameter("daily_amplitude must be finite".into()));
        }
        if !(-1.0..=1.0).contains(&self.cross_correlation) {
            return Err(Error::InvalidParameter(format!(
                "cross_correlation must lie in [-1, 1], got {}",
                self.cross_correlation
            )));
        }
        Ok(())
    }
}

/// Generated trace together with the unit innovations that drove it.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub series: TraceSeries,
    /// `innovations[t][r]`, standard-normal scale (before `noise_std`).
    pub innovations: Vec<Vec<f64>>,
}

pub fn generate_trace(spec: &SynthSpec) -> Result<TraceSeries> {
    Ok(generate_with_innovations(spec)?.series)
}

pub fn generate_with_innovations(spec: &SynthSpec) -> Result<SynthOutput> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rho = spec.cross_correlation;
    let ortho = (1.0 - rho * rho).max(0.0).sqrt();
    let phi = spec.ar_coefficient;
    let stationary = 1.0 / (1.0 - phi * phi).sqrt();

    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let z1: f64 = StandardNormal.sample(rng);
        if spec.resources == 1 {
            vec![z1]
        } else {
            let z2: f64 = StandardNormal.sample(rng);
            vec![z1, rho * z1 + ortho * z2]
        }
    };

    // Start the AR state from its stationary distribution.
    let mut state: Vec<f64> = draw(&mut rng)
        .into_iter()
        .map(|z| z * spec.noise_std * stationary)
        .collect();
    let mut values = Vec::with_capacity(spec.length);
    let mut innovations = Vec::with_capacity(spec.length);
    for t in 0..spec.length {
        let e = draw(&mut rng);
        for (s, z) in state.iter_mut().zip(&e) {
            *s = phi * *s + spec.noise_std * z;
        }
        let season = spec.daily_amplitude * (2.0 * PI * t as f64 / DAY_STEPS as f64).sin();
        values.push(state.iter().map(|s| (spec.base_level + season + s).max(0.0)).collect());
        innovations.push(e);
    }

    let resources = if spec.resources == 1 {
        vec!["cpu".to_string()]
    } else {
        vec!["cpu".to_string(), "memory".to_string()]
    };
    let w = DEFAULT_WINDOW_SECONDS as i64;
    let timestamps = (0..spec.length as i64).map(|i| spec.start_timestamp + i * w).collect();
    let series = TraceSeries::new(spec.cluster_id.clone(), resources, DEFAULT_WINDOW_SECONDS, timestamps, values)?;
    Ok(SynthOutput { series, innovations })
}
