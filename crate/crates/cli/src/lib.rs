//! Config-driven experiment runner: every experiment is one JSON file that
//! produces CSV/JSON artifacts and a manifest in a run directory.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod pipelines;
pub mod report;
pub mod run;

pub use config::{apply_seed_override, load_config, parse_config, ExperimentConfig};
pub use error::CliError;
pub use report::emit_report;
pub use run::{run_experiment, Manifest};
