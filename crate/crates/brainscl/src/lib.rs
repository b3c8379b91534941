//! Files, run directories and the command line for the brainscl pipeline.
//!
//! The numerical work lives in [`brainscl_core`]; this crate reads cohorts
//! from disk, talks to optional text-embedding services, persists every stage
//! under a workdir and exposes the stages as subcommands.

pub mod config;
pub mod error;
pub mod exec;
pub mod io;
pub mod provider;
pub mod stages;
pub mod workdir;

pub use brainscl_core;
pub use config::RunConfig;
pub use error::{AppError, AppResult};
pub use exec::Exec;
