//! Dataset ingestion, run configuration and artifact persistence.

pub mod artifacts;
pub mod config;
pub mod dataset;
pub mod plot;

pub use config::{parse_config, parse_config_str};
pub use dataset::{load_dataset, save_dataset, DatasetFormat, DatasetRef};
