//! IO, file formats, and orchestration around `meafdet-core`: PPM/PGM image
//! pairs, the dataset layout, the run-config file, the checkpoint format,
//! the training loop, evaluation with CSV/report export, and fusion
//! visualization.

pub mod checkpoint;
pub mod commands;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod image_io;
pub mod runconfig;
pub mod trainer;

pub use error::{CliError, CliResult};
