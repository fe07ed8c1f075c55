//! File formats, configuration and stage orchestration for post-hoc
//! pseudo-OOD regularization, on top of `poore-core`.

pub mod config;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod plot;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use poore_core as core;
