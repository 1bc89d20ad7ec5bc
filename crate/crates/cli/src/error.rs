use affectune::emotion::DatasetError;
use affectune::generate::GenerateError;
use affectune::metrics::MetricsError;
use affectune::midi::MidiError;
use affectune::model::ModelError;
use affectune::nn::checkpoint::CheckpointError;
use affectune::remi::RemiError;
use affectune::study::StudyError;
use affectune::train::TrainError;
use thiserror::Error;

/// Every failure a subcommand can report. The variant decides the exit
/// code; `kind` keeps the name of the module error it came from.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{kind}: {message}")]
    Data { kind: &'static str, message: String },
    #[error("{kind}: {message}")]
    Runtime { kind: &'static str, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data { .. } => 2,
            CliError::Runtime { .. } => 3,
        }
    }

    pub fn data(kind: &'static str, message: impl Into<String>) -> Self {
        CliError::Data { kind, message: message.into() }
    }

    pub fn runtime(kind: &'static str, message: impl Into<String>) -> Self {
        CliError::Runtime { kind, message: message.into() }
    }
}

macro_rules! data_error {
    ($($t:ty => $name:literal),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::data($name, e.to_string())
            }
        })*
    };
}

macro_rules! runtime_error {
    ($($t:ty => $name:literal),* $(,)?) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::runtime($name, e.to_string())
            }
        })*
    };
}

data_error! {
    DatasetError => "DatasetError",
    MidiError => "MidiError",
    RemiError => "RemiError",
    MetricsError => "MetricsError",
    CheckpointError => "CheckpointError",
    StudyError => "StudyError",
    serde_json::Error => "JsonError",
}

runtime_error! {
    ModelError => "ModelError",
    TrainError => "TrainError",
    GenerateError => "GenerateError",
    std::io::Error => "IoError",
}

impl From<toml::de::Error> for CliError {
    fn from(e: toml::de::Error) -> Self {
        CliError::Usage(format!("config: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
