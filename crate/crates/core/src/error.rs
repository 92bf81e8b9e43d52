use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("layer {layer}: expected {expected} values, got {got}")]
    Dim { layer: usize, expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bad parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("action contains NaN or has wrong length ({0})")]
    BadAction(String),
    #[error("oracle reset requested from reset-free training")]
    OracleResetForbidden,
    #[error("waypoint index {0} out of range")]
    WaypointIndex(usize),
    #[error("maze layout: {0}")]
    MazeLayout(String),
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl ConfigError {
    pub fn invalid(path: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("skill {skill} out of range for {num_skills} skills")]
    SkillOutOfRange { skill: usize, num_skills: usize },
    #[error("{0}")]
    Invalid(String),
    #[error("{file}: {message}")]
    Data { file: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("plot {file}: {message}")]
    Plot { file: String, message: String },
    #[error("state serialization: {0}")]
    Serialize(#[from] bincode::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
