//! Experiment harness for the fedsig toolkit: configuration, the five
//! experiment kinds, and CSV/JSON result files.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;

pub use config::{parse_config, resolve, ConfigLayers, ExperimentConfig, ExperimentKind, Preset};
pub use error::{HarnessError, Result};
pub use experiments::run;
