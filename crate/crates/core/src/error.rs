use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the EKI library.
#[derive(Debug, Error)]
pub enum EkiError {
    #[error("matrix is not symmetric (relative asymmetry {asymmetry:.3e})")]
    NotSymmetric { asymmetry: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("ensemble needs at least two particles, got {0}")]
    TooFewParticles(usize),

    #[error("noise draw has shape {got_rows}x{got_cols}, expected {want_rows}x{want_cols}")]
    NoiseDimensionMismatch {
        got_rows: usize,
        got_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },

    #[error("linear solve failed: {0}")]
    SolveFailure(String),

    #[error("populated count r = {r} exceeds rank h = {h}; rank tolerance is misconfigured")]
    RankDeficiencyInconsistent { r: usize, h: usize },

    #[error("rate fit impossible: {0}")]
    NonPositiveValues(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("problem generation failed after {attempts} attempts: {reason}")]
    GenerationFailed { attempts: usize, reason: String },

    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("problem file does not match schema version {expected}: {detail}")]
    SchemaVersionMismatch { expected: u32, detail: String },

    #[error("checksum mismatch: stored {stored}, computed {computed}")]
    ChecksumMismatch { stored: String, computed: String },
}

pub type Result<T, E = EkiError> = std::result::Result<T, E>;

pub(crate) fn dim_check(ok: bool, what: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(EkiError::DimensionMismatch(what()))
    }
}
