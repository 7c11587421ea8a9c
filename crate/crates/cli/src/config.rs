//! Config loading and the error kinds that map to exit codes.

use std::path::{Path, PathBuf};

use rbso::experiments::ExperimentConfig;

/// Exit codes. 1 is reserved for failed checks.
pub const EXIT_CHECKS_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_MISSING_FILE: i32 = 3;
pub const EXIT_PARSE: i32 = 4;
pub const EXIT_INVALID: i32 = 5;
pub const EXIT_RUN: i32 = 6;
pub const EXIT_OUTPUT: i32 = 7;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{0}")]
    Usage(String),
    #[error("config file {}: {source}", path.display())]
    MissingFile { path: PathBuf, source: std::io::Error },
    #[error("config file {}: {msg}", path.display())]
    Parse { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("run failed: {0}")]
    Run(rbso::Error),
    #[error("{}: {source}", path.display())]
    Output { path: PathBuf, source: std::io::Error },
}

impl LabError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Usage(_) => EXIT_USAGE,
            LabError::MissingFile { .. } => EXIT_MISSING_FILE,
            LabError::Parse { .. } => EXIT_PARSE,
            LabError::Invalid(_) => EXIT_INVALID,
            LabError::Run(_) => EXIT_RUN,
            LabError::Output { .. } => EXIT_OUTPUT,
        }
    }

    pub fn output(path: &Path, source: std::io::Error) -> Self {
        LabError::Output { path: path.to_path_buf(), source }
    }
}

impl From<rbso::Error> for LabError {
    fn from(e: rbso::Error) -> Self {
        match e {
            // invariant violations found while running still name the offending key
            rbso::Error::Config(m) => LabError::Invalid(m),
            rbso::Error::Domain(m) => LabError::Invalid(m),
            other => LabError::Run(other),
        }
    }
}

/// Strict parse: unknown keys and missing required keys are errors.
pub fn parse_config(text: &str, path: &Path) -> Result<ExperimentConfig, LabError> {
    toml::from_str(text).map_err(|e| LabError::Parse { path: path.to_path_buf(), msg: e.message().to_string() })
}

/// Read, parse and validate.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, LabError> {
    let text = std::fs::read_to_string(path).map_err(|source| LabError::MissingFile { path: path.to_path_buf(), source })?;
    let cfg = parse_config(&text, path)?;
    cfg.validate()?;
    Ok(cfg)
}
