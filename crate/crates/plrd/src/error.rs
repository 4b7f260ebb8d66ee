//! Crate-wide error type.

/// Errors produced by the library.
///
/// Variants split into two classes: *validation* errors (bad user input:
/// out-of-range ranks, infeasible budgets, malformed plans) and *runtime*
/// errors (I/O, numerical failures, corrupted files). The CLI maps the two
/// classes to distinct exit codes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix data length {len} does not match {rows}x{cols}")]
    DataLength { rows: usize, cols: usize, len: usize },

    #[error("non-finite matrix element at flat index {0}")]
    NonFinite(usize),

    #[error("rank {rank} outside valid range [1, {max}]{}", context.as_deref().map(|c| format!(" for {c}")).unwrap_or_default())]
    RankOutOfRange { rank: usize, max: usize, context: Option<String> },

    #[error("svd failed to converge after {sweeps} sweeps (relative off-diagonal residual {residual:.3e})")]
    SvdNonConvergence { sweeps: usize, residual: f64 },

    #[error("infeasible budget {budget} for {d_in}x{d_out} layer: rank 1 already needs {} parameters", d_in + d_out)]
    InfeasibleBudget { budget: u64, d_in: usize, d_out: usize },

    #[error("invalid plan: {0}")]
    PlanValidation(String),

    #[error("checkpoint corrupted: {0}")]
    Corruption(String),

    #[error("unsupported checkpoint version {found}, this build reads version {supported}")]
    VersionMismatch { found: u32, supported: u32 },

    #[error("checkpoint payload truncated: need {expected} bytes, file holds {actual}")]
    TruncatedPayload { expected: u64, actual: u64 },

    #[error("checkpoint checksum mismatch: stored {stored}, computed {computed}")]
    ChecksumMismatch { stored: String, computed: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("gradient check failed: max relative error {max_rel_error:.3e} exceeds {tolerance:.3e}; worst tensors: {worst}")]
    GradCheckFailed { max_rel_error: f64, tolerance: f64, worst: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by invalid user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::RankOutOfRange { .. }
                | Error::InfeasibleBudget { .. }
                | Error::PlanValidation(_)
                | Error::InvalidInput(_)
                | Error::Config(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
