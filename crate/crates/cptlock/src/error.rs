use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical accuracy: {what} did not converge (estimates {first} and {second})")]
    Accuracy {
        what: &'static str,
        first: f64,
        second: f64,
    },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("fit did not converge after {iterations} iterations (best residual {residual:.4} dB rms)")]
    FitNonConvergent {
        best: Box<crate::spectral::NoiseFit>,
        residual: f64,
        iterations: usize,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("loop aborted at step {step}: {reason}")]
    LoopAbort { step: usize, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
