//! Frequency-aware mixture of low-rank token experts for adapting a frozen
//! transformer to shifted multispectral imagery.

pub mod adapter;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod experts;
pub mod faf;
pub mod rng;
pub mod router;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
