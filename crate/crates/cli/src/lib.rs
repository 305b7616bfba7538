//! Config-driven driver for the `singular-lq` solvers: TOML configs in,
//! CSV and JSON artifacts out.

pub mod config;
pub mod output;
pub mod run;

pub use config::{parse_config, Command, ConfigError, FieldError, RunConfig};
pub use run::{run, RunError, RunOutcome};
