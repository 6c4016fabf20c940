//! Configuration, execution and reporting behind the `fedaf` command.

pub mod config;
pub mod metrics;
pub mod report;
pub mod runner;

pub use config::{RunConfig, SchemaError};
