use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Bad invocation or incomplete config; exit code 2.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("arm `{arm}` is infeasible: {reason}")]
    Infeasible { arm: String, reason: String },

    #[error("{path}: {source}")]
    File {
        path: String,
        #[source]
        source: aasc_core::Error,
    },

    #[error(transparent)]
    Core(#[from] aasc_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn missing_key(key: &str) -> Self {
        HarnessError::Usage(format!("missing required config key `{key}`"))
    }

    pub fn in_file(path: &std::path::Path, source: aasc_core::Error) -> Self {
        HarnessError::File {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
