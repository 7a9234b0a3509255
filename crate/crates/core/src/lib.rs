//! Probabilistic forecasting of cloud-cluster resource demand.
//!
//! The crate turns usage events into five-minute demand traces
//! ([`trace`]), windows and splits them without leakage ([`dataset`]),
//! trains point, distributional and Bayesian-last-layer recurrent
//! forecasters ([`models`]), orchestrates transfer-learning scenarios
//! ([`scenarios`]) and scores the predicted intervals ([`evaluation`]).

pub mod bench;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod nn;
pub mod par;
pub mod scenarios;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
