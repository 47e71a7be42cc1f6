//! Spiking neural networks, rate and event encodings, model-inversion
//! attacks against them and the metrics used to score the attacks.

pub mod attack;
pub mod data;
pub mod encoding;
pub mod error;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod io;
pub mod metrics;
pub mod model;
pub mod snn;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
