//! Crate-wide error type.
//!
//! Validation problems (bad configs, malformed files, dimension mismatches)
//! are distinguished from numerical failures (factorization breakdowns,
//! optimizer stalls) so the CLI can map them to distinct exit codes.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Validation(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("gram matrix is degenerate (not factorizable after jitter escalation): {0}")]
    DegenerateGram(String),

    #[error("symmetric eigensolver failed to converge (matrix size {size})")]
    EigenFailure { size: usize },

    #[error("linear solver failed: {0}")]
    LinearSolve(String),

    #[error("non-finite value encountered in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error(
        "basis pursuit did not converge within the iteration budget \
         (achieved residual {achieved:.6e}, target {epsilon:.6e})"
    )]
    BpdnNonConvergence {
        achieved: f64,
        epsilon: f64,
        /// Best iterate found, including the bias coordinate.
        best: Vec<f64>,
    },

    #[error("observable is constant (standard deviation {sigma:.3e}); no direction to identify")]
    DegenerateObservable { sigma: f64 },

    #[error("surrogate stage {stage} failed: {source}")]
    SurrogateStage {
        stage: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("kernel density estimation requires non-constant samples")]
    DegenerateSample,

    #[error("matrix file {path}: {kind}")]
    MatrixFormat { path: PathBuf, kind: MatrixFormatError },

    #[error("artifact {path} for stage `{stage}` is {problem}; rerun the upstream stage")]
    StaleArtifact {
        stage: String,
        path: PathBuf,
        problem: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// What went wrong while decoding a binary matrix file.
#[derive(Debug, Error)]
pub enum MatrixFormatError {
    #[error("bad magic (not a CKBA matrix file)")]
    BadMagic,
    #[error("unsupported format version {0}")]
    BadVersion(u32),
    #[error("file truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("non-finite entry at flat index {0}")]
    NonFinite(usize),
}

impl Error {
    /// Exit code for the CLI: 1 for validation problems, 2 for numerical ones.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation(_)
            | Error::DimensionMismatch { .. }
            | Error::MatrixFormat { .. }
            | Error::StaleArtifact { .. }
            | Error::Io { .. }
            | Error::Json { .. } => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
