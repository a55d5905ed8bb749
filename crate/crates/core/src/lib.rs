//! Respiration-to-SpO2 sequence regression: a small autodiff engine, the
//! BERT-UNet family of models with gated multi-head prediction, and the data,
//! training and evaluation machinery around them.

pub mod error;
pub mod numerics;
pub mod registry;

pub mod data;
pub mod gate;
pub mod model;
pub mod train;

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradsuite;
pub mod parallel;

pub use error::{Error, Result};
