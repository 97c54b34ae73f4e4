//! Experiment configuration, dataset artifacts, cached training runs and
//! comparison reports behind the `daod` command.

pub mod config;
pub mod data;
pub mod report;
pub mod runs;

pub use config::ExperimentConfig;
pub use data::{generate, load_pair, Manifest};
pub use report::{ablate, compare, AblationAxis, Report};
pub use runs::{RunSummary, Workspace};
