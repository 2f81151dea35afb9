pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics_log;
pub mod nn;
pub mod tokenizer;
pub mod train;
pub mod transformer;

pub use error::{GstError, Result};
