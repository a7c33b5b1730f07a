use cda_core::data::DataError;
use cda_core::model::ModelError;
use cda_core::optim::OptimError;
use cda_core::pseudo::PseudoError;
use cda_core::snapshot::SnapshotError;
use cda_core::train::TrainError;
use thiserror::Error;

/// An error with a machine-readable code, raised by the commands themselves.
#[derive(Debug, Error)]
#[error("{message}")]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }
}

/// Stable diagnostic code for any error produced by a command.
pub fn error_code(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.code;
        }
        if cause.is::<SnapshotError>() {
            return "snapshot";
        }
        if cause.is::<DataError>() {
            return "data";
        }
        if cause.is::<ModelError>() || cause.is::<OptimError>() || cause.is::<PseudoError>() {
            return "config";
        }
        if cause.is::<TrainError>() {
            return "train";
        }
        if cause.is::<toml::de::Error>() {
            return "config";
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "internal"
}

/// One-line JSON diagnostic for stderr.
pub fn diagnostic(err: &anyhow::Error) -> String {
    serde_json::json!({
        "level": "error",
        "code": error_code(err),
        "message": format!("{err:#}"),
    })
    .to_string()
}
