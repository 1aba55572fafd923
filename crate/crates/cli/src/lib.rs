//! Front end for the delay-LQR toolkit: JSON problem configs in, CSV and
//! JSON artifacts out.

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{exit, CliError, Outcome};
pub use config::{Problem, ProblemConfig};
