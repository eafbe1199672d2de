//! Dataset ingestion, model archives and run configuration.

pub mod archive;
pub mod config;
pub mod idx;
pub mod synth;

pub use archive::{load_model, save_model};
pub use config::RunConfig;
pub use idx::load_idx;
pub use synth::synth_dataset;
