use thiserror::Error;

pub type Result<T> = std::result::Result<T, PearlError>;

#[derive(Debug, Error)]
pub enum PearlError {
    /// Malformed `PRL1` bytes.
    #[error("container format error: {0}")]
    Format(String),

    /// A container that cannot be written (non-finite values, bad names).
    #[error("container serialization error: {0}")]
    Serialization(String),

    /// A configuration key or input value outside its admissible range.
    #[error("invalid value for `{key}`: {message}")]
    Validation { key: String, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("window planning error: {0}")]
    Planning(String),

    /// A tensor the pipeline needs is missing or has the wrong shape.
    #[error("load error: {0}")]
    Load(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PearlError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PearlError {
    pub fn validation(key: impl Into<String>, message: impl Into<String>) -> Self {
        PearlError::Validation {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn at(self, stage: &'static str) -> Self {
        PearlError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Innermost error, with stage tags stripped.
    pub fn root(&self) -> &PearlError {
        match self {
            PearlError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code used by the command-line front end.
    ///
    /// Solver failures map to 3, I/O failures to 1 and every other input
    /// problem to 2.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            PearlError::Solver(_) => 3,
            PearlError::Io(_) => 1,
            _ => 2,
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.at(stage))
    }
}
