//! Dataset synthesis and loading, the two-phase training schedule,
//! evaluation metrics, checkpoints and configuration.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod run;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use config::TrainConfig;
pub use error::{PipelineError, Result};
