use std::fmt;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    GenData,
    Load,
    Train,
    Probe,
    Report,
    Plot,
    Verify,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::GenData => "gen-data",
            Stage::Load => "load",
            Stage::Train => "train",
            Stage::Probe => "probe",
            Stage::Report => "report",
            Stage::Plot => "plot",
            Stage::Verify => "verify",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Any failure, tagged with the stage it happened in.
#[derive(Debug, Error)]
#[error("[{stage}] {message}")]
pub struct StageError {
    pub stage: Stage,
    pub message: String,
}

impl StageError {
    pub fn new(stage: Stage, message: impl Into<String>) -> Self {
        Self {
            stage,
            message: message.into(),
        }
    }
}

pub type Result<T, E = StageError> = std::result::Result<T, E>;

/// Attaches a stage to core errors and I/O failures.
pub trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T>;
}

impl<T, E: fmt::Display> AtStage<T> for std::result::Result<T, E> {
    fn at(self, stage: Stage) -> Result<T> {
        self.map_err(|e| StageError::new(stage, e.to_string()))
    }
}
