//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor or layer dimensions.
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Test-time statistics need at least two rows.
    #[error("batch of {n} rows is too small for test-time statistics (need >= 2)")]
    BatchTooSmall { n: usize },

    /// Bad hyperparameter or config value. The message names the offending key.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A histogram must contain at least one sample.
    #[error("empty histogram")]
    EmptyHistogram,

    /// The benign reference histogram has zero range but the distance is nonzero.
    #[error("degenerate reference histogram: zero range with nonzero distance")]
    DegenerateReference,

    /// Smoothed variance collapsed to zero; the analytic gradient is singular.
    #[error("singular smoothed variance")]
    SingularVariance,

    /// Malformed checkpoint document.
    #[error("checkpoint parse error at layer {layer}: {detail}")]
    Checkpoint { layer: usize, detail: String },

    /// A computation produced NaN or infinity.
    #[error("non-finite value in {op} at step {step}")]
    NonFinite { op: &'static str, step: usize },

    /// Source-model training diverged.
    #[error("training failed: {0}")]
    Training(String),

    /// Two BN snapshots do not describe the same network.
    #[error("snapshot topology mismatch: {0}")]
    Topology(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 1 config/parse, 2 numeric, 0 elsewhere.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_)
            | Error::Checkpoint { .. }
            | Error::Shape { .. }
            | Error::Topology(_)
            | Error::EmptyHistogram
            | Error::BatchTooSmall { .. }
            | Error::Io(_) => 1,
            Error::NonFinite { .. }
            | Error::Training(_)
            | Error::SingularVariance
            | Error::DegenerateReference => 2,
        }
    }
}
