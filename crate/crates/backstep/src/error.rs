use thiserror::Error;

/// Crate-wide error type.
///
/// Configuration problems (grid mismatches, CFL violations, bad bounds) are
/// reported at construction time; numerical failures (series divergence,
/// training divergence) carry enough context to diagnose the run; file
/// format problems distinguish bad magic, unsupported version, truncation
/// and checksum failure so callers can react to each.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: {left} vs {right} points")]
    GridMismatch { left: usize, right: usize },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    #[error("invalid {field}: {message}")]
    InvalidConfig { field: &'static str, message: String },

    #[error("CFL condition violated: dt = {dt} exceeds dx = {dx}")]
    CflViolation { dt: f64, dx: f64 },

    #[error(
        "successive approximation did not converge after {terms} terms \
         (last term sup-norm {last_term:e}, tolerance {tolerance:e})"
    )]
    SeriesDiverged {
        terms: usize,
        last_term: f64,
        tolerance: f64,
    },

    #[error("projection estimate |{estimate}| exceeds bound {bound}")]
    ProjectionBound { estimate: f64, bound: f64 },

    #[error("training diverged: non-finite loss at epoch {epoch}")]
    TrainingDiverged { epoch: usize },

    #[error("bad magic bytes {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },

    #[error("unsupported format version {found}, this build reads version {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("file truncated: expected at least {expected} more bytes")]
    Truncated { expected: usize },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },

    #[error("duplicate sample key (run {run_id}, index {sample_index})")]
    DuplicateSample { run_id: u32, sample_index: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
