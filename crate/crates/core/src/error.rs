use thiserror::Error;

/// Pipeline stage tag attached to errors raised inside `fit_2sdr`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Mpca,
    NoiseVariance,
    Sure,
    Pca,
    Gic,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Stage::Mpca => "mpca",
            Stage::NoiseVariance => "noise-variance",
            Stage::Sure => "sure",
            Stage::Pca => "pca",
            Stage::Gic => "gic",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("rank selection failed: {0}")]
    SelectionFailed(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn at(self, stage: Stage) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, with stage tags peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for errors caused by bad caller input rather than runtime conditions.
    pub fn is_validation(&self) -> bool {
        matches!(self.root(), Error::InvalidInput(_) | Error::Format { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
