use ndiff::NdiffError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, SipError>;

#[derive(Debug, Error)]
pub enum SipError {
    #[error(transparent)]
    Numeric(#[from] NdiffError),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate data: {0}")]
    DegenerateData(String),
    #[error("covariance still not positive definite with jitter {jitter:e}")]
    Conditioning { jitter: f64 },
    #[error("training diverged at epoch {epoch}: {detail}")]
    Divergence { epoch: usize, detail: String },
    #[error("GP fitting failed: {0}")]
    Fitting(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{failed} of {total} instances failed: {details}")]
    Instances {
        failed: usize,
        total: usize,
        details: String,
    },
}

impl SipError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        SipError::Contract(msg.into())
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        SipError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// True for failures caused by numerics rather than configuration.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            SipError::Numeric(_)
                | SipError::Conditioning { .. }
                | SipError::Divergence { .. }
                | SipError::Fitting(_)
                | SipError::DegenerateData(_)
                | SipError::Instances { .. }
        )
    }
}
