//! Joint multi-dimensional annotation fusion.
//!
//! Multiple annotators rate the same instances on several dimensions at once;
//! this crate estimates the latent ground truth by modeling the dimensions
//! jointly instead of one at a time. Two settings are supported:
//!
//! - **global**: one D-vector of ratings per instance. The ground truth is a
//!   linear function of the instance features plus Gaussian noise, each
//!   annotator distorts it through a personal D x D matrix, and the model is
//!   fit by expectation-maximization with closed-form Gaussian conditioning
//!   ([`global`]).
//! - **time series**: a T x D matrix of ratings per instance. Each annotator
//!   acts as a bank of causal FIR filters capturing lag, scaling and
//!   smoothing, and the model is fit by hard EM with a banded mode solve
//!   ([`timeseries`]).
//!
//! [`baselines`] holds the reference fusers (averaging, majority vote, and
//! per-dimension independent fits), [`synthetic`] the seeded data generators,
//! and [`eval`] the metrics, cross-validation and significance machinery.
//!
//! All numerics are generic over the scalar type through [`num::Real`];
//! the `*64` aliases below fix f64, which is what the file formats store.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod global;
pub mod io;
pub mod linalg;
pub mod num;
pub mod synthetic;
pub mod timeseries;
pub mod types;

pub use error::{Error, Result};
pub use num::Real;

pub type GlobalDataset64 = types::GlobalDataset<f64>;
pub type TimeSeriesDataset64 = types::TimeSeriesDataset<f64>;
pub type Dataset64 = types::Dataset<f64>;
pub type PosteriorEstimate64 = types::PosteriorEstimate<f64>;
pub type GlobalModelParams64 = global::GlobalModelParams<f64>;
pub type TimeSeriesModelParams64 = timeseries::TimeSeriesModelParams<f64>;
pub type FilterBank64 = timeseries::FilterBank<f64>;
