use cfam_core::CfamError;
use thiserror::Error;

/// Failure of a CLI command, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Data(_) => "data",
            CliError::Numerical(_) => "numerical",
        }
    }

    /// One-line JSON reason for standard error.
    pub fn machine_line(&self) -> String {
        serde_json::json!({ "error": self.kind(), "exit": self.exit_code(), "message": self.to_string() }).to_string()
    }
}

impl From<CfamError> for CliError {
    fn from(e: CfamError) -> Self {
        match e {
            CfamError::Config(_) => CliError::Config(e.to_string()),
            CfamError::Numerical { .. } => CliError::Numerical(e.to_string()),
            CfamError::Input(_) | CfamError::MissingArm { .. } | CfamError::NoOverlap => CliError::Data(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
