use std::fmt;
use std::process::ExitCode;

use edgegnn::ir::{ExecError, FormatError};
use edgegnn::models::ModelError;
use edgegnn::pipeline::{DataError, EvalError, MetricError};
use edgegnn::training::TrainError;

/// Process exit statuses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Usage = 2,
    Data = 3,
    Model = 4,
    Execution = 5,
}

#[derive(Debug)]
pub struct Failure {
    pub status: Status,
    pub message: String,
}

impl Failure {
    pub fn new(status: Status, message: impl fmt::Display) -> Self {
        Self {
            status,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.status as u8)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        let status = match e {
            DataError::Config(_) => Status::Usage,
            _ => Status::Data,
        };
        Failure::new(status, e)
    }
}

impl From<MetricError> for Failure {
    fn from(e: MetricError) -> Self {
        Failure::new(Status::Data, e)
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        Failure::new(Status::Model, e)
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        Failure::new(Status::Model, e)
    }
}

impl From<ExecError> for Failure {
    fn from(e: ExecError) -> Self {
        let status = match e {
            ExecError::InvalidModel(_) | ExecError::Arity { .. } => Status::Model,
            _ => Status::Execution,
        };
        Failure::new(status, e)
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(e) => e.into(),
            EvalError::Exec(e) => e.into(),
            EvalError::Metric(e) => e.into(),
            EvalError::Mismatch(_) | EvalError::EmptyDataset => Failure::new(Status::Data, e),
            EvalError::Config(_) => Failure::new(Status::Usage, e),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        let status = match e {
            TrainError::Config(_) => Status::Usage,
            TrainError::Batch(_) | TrainError::EmptyTrainingSet => Status::Data,
            TrainError::Model(_) => Status::Model,
            _ => Status::Execution,
        };
        Failure::new(status, e)
    }
}
