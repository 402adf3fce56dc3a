//! Error taxonomy shared by every module in the core crate.

use alloc::string::String;

/// Anything that can go wrong inside the core engine.
///
/// Variants map onto the harness exit codes: `Config` and `Usage` are
/// caller mistakes, `NumericalFault` aborts a run with a checkpoint, and
/// the remaining variants surface internal contract violations loudly
/// instead of silently reordering or truncating work.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoreError {
    /// Operand shapes do not conform for an op.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// A forward op, gradient, or recorded statistic went NaN/Inf.
    #[error("numerical fault in {context}")]
    NumericalFault { context: String },

    /// An API was called out of contract (backward on non-scalar, etc.).
    #[error("usage error: {0}")]
    Usage(String),

    /// A configuration value is out of its documented range.
    #[error("config error: {field}: {detail}")]
    Config { field: &'static str, detail: String },

    /// The offload engine was asked to update a shard that is not device
    /// resident, or observed events out of contract order.
    #[error("scheduling error: {0}")]
    Scheduling(String),

    /// A shard does not fit the configured device buffers.
    #[error("capacity error: {0}")]
    Capacity(String),

    /// A serialized blob failed its length or checksum validation.
    #[error("integrity error: {0}")]
    Integrity(String),

    /// Memory accounting went negative or freed more than was allocated.
    #[error("accounting error: {0}")]
    Accounting(String),
}

impl CoreError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CoreError::Usage(msg.into())
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        CoreError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn numerical(context: impl Into<String>) -> Self {
        CoreError::NumericalFault {
            context: context.into(),
        }
    }
}
