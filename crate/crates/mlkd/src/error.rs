use std::path::PathBuf;

/// Errors surfaced by the driver. Each maps to an exit code and a short
/// machine-readable tag printed as `error[tag]: message`.
#[derive(Debug, thiserror::Error)]
pub enum MlkdError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file at byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error(transparent)]
    Core(#[from] mlkd_core::Error),
    #[error("{0}")]
    Runtime(String),
}

pub type Result<T, E = MlkdError> = std::result::Result<T, E>;

impl MlkdError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MlkdError::Io { path: path.into(), source }
    }

    pub(crate) fn format(offset: usize, reason: impl Into<String>) -> Self {
        MlkdError::Format { offset, reason: reason.into() }
    }

    pub fn tag(&self) -> &'static str {
        use mlkd_core::Error as E;
        match self {
            MlkdError::Config(_) | MlkdError::Core(E::Config(_)) => "config",
            MlkdError::Io { .. } => "io",
            MlkdError::Format { .. } => "format",
            MlkdError::Core(E::Capability(_)) => "capability",
            MlkdError::Core(E::Data(_)) => "data",
            MlkdError::Core(E::NonFinite { .. }) => "numeric",
            MlkdError::Core(_) | MlkdError::Runtime(_) => "runtime",
        }
    }

    /// 1 for configuration problems, 2 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        if self.tag() == "config" {
            1
        } else {
            2
        }
    }
}
