//! Experiment harness behind the `btrans` binary.
//!
//! Commands read an [`config::ExperimentConfig`], apply flag overrides, and
//! write deterministic artifacts into the run directory.

pub mod args;
pub mod commands;
pub mod config;

use std::fmt;

/// Process exit status for a failed command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExitKind {
    /// Bad config, missing file, unreadable input.
    Input,
    /// Training produced non-finite values.
    Divergence,
    Internal,
}

impl ExitKind {
    pub fn code(self) -> i32 {
        match self {
            ExitKind::Input => 2,
            ExitKind::Divergence => 3,
            ExitKind::Internal => 1,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn input(message: impl Into<String>) -> Self {
        Self { kind: ExitKind::Input, message: message.into() }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Maps an error chain to its exit status.
pub fn exit_kind(err: &anyhow::Error) -> ExitKind {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.kind;
        }
        if let Some(e) = cause.downcast_ref::<btrans::Error>() {
            return match e {
                btrans::Error::Divergence { .. } => ExitKind::Divergence,
                btrans::Error::Config(_)
                | btrans::Error::Corrupt(_)
                | btrans::Error::Io(_)
                | btrans::Error::Json(_)
                | btrans::Error::Index(_) => ExitKind::Input,
                _ => ExitKind::Internal,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return ExitKind::Input;
        }
    }
    ExitKind::Internal
}
