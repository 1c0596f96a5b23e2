//! Command-line front end: CSV ingestion, run configuration, model
//! artifacts and the `fit`, `cv`, `predict` and `simulate` commands.

pub mod artifact;
pub mod commands;
pub mod config;
pub mod error;
pub mod ingest;

pub use artifact::ModelArtifact;
pub use config::RunConfig;
pub use error::{CliError, CliResult};
