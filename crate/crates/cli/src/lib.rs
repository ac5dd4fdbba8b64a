//! Configuration and command implementations behind the `stylerec` binary.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{cmd_eval, cmd_gen, cmd_report, cmd_train_dynamic, cmd_train_static};
pub use config::RunConfig;
pub use error::{CliError, CliResult};
