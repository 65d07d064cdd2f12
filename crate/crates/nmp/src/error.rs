use std::path::Path;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("data: {0}")]
    Data(String),
    #[error(transparent)]
    Core(#[from] nmp_core::Error),
}

impl CliError {
    /// 0 success, 1 usage or config, 2 data, 3 numerical divergence.
    pub fn exit_code(&self) -> i32 {
        use nmp_core::Error as E;
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Io { .. } | CliError::Data(_) => 2,
            CliError::Core(e) => match e {
                E::Divergence { .. } | E::NonFiniteLoss { .. } | E::NonFinite(_) | E::InvertedElement { .. } => 3,
                E::InvalidParameter(_) => 1,
                _ => 2,
            },
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }

    pub fn data(msg: impl Into<String>) -> Self {
        CliError::Data(msg.into())
    }
}
