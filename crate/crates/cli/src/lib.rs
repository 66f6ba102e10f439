//! Scenario runner for the ergolab workbench: TOML configs in, JSON reports
//! and CSV side files out.

use std::path::Path;

pub mod runner;
pub mod scenario;

pub use runner::{run_config, run_scenario, RunOptions, RunOutcome, Summary, TaskStatus, TaskSummary};
pub use scenario::{parse_scenario, Region, Resolved, Scenario, Task};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("budget exhausted: {0}")]
    Budget(String),
    #[error("{0}")]
    Failed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Invalid(_) => 3,
            CliError::Budget(_) => 4,
            CliError::Failed(_) | CliError::Io(_) => 1,
        }
    }
}

/// Bundled scenarios, by name.
pub const BUNDLED: &[(&str, &str)] = &[
    ("rotation-baseline", include_str!("../scenarios/rotation-baseline.toml")),
    ("theorem-b-torus", include_str!("../scenarios/theorem-b-torus.toml")),
    ("two-sink-control", include_str!("../scenarios/two-sink-control.toml")),
    ("two-rotations-cover", include_str!("../scenarios/two-rotations-cover.toml")),
];

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Read a config from a path, falling back to a bundled scenario name.
pub fn load_source(source: &str) -> Result<String, CliError> {
    let path = Path::new(source);
    if path.exists() {
        return Ok(std::fs::read_to_string(path)?);
    }
    bundled(source)
        .map(str::to_string)
        .ok_or_else(|| CliError::Parse(format!("no config file or bundled scenario named {source:?}")))
}
