//! Censored adaptive-LASSO estimation for accelerated failure time models,
//! with divide-and-conquer aggregation over interleaved groups.

pub mod aggregate;
pub mod config;
pub mod data;
pub mod error;
pub mod km;
pub mod loss;
pub mod simulation;
pub mod solver;
pub mod tuning;

pub use data::{Observation, SurvivalDataset};
pub use error::{Error, ErrorKind, Result};
pub use km::{CensoringSurvivalCurve, IpcwWeights};
pub use loss::LossKind;
pub use solver::{EstimatorResult, FitConfig};
