use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    /// The inputs or configuration are invalid.
    Config,
    /// A declared invariant or audit did not hold.
    Invariant,
    /// A numerical computation broke down.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("explicit scheme unstable: sigma_hi^2*dt/dx^2 = {ratio:.6} exceeds {limit}")]
    Stability { ratio: f64, limit: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("non-finite value at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("regression rank deficient at step {step} (rank {rank} < {columns})")]
    RankDeficient { step: usize, rank: usize, columns: usize },

    #[error("driver is not declared Lipschitz and no approximation ladder was supplied")]
    DriverNotLipschitz,

    #[error("terminal value {terminal} below barrier {barrier} at state {state}")]
    TerminalBelowBarrier { state: f64, terminal: f64, barrier: f64 },

    #[error(
        "monotone chain broken at iteration {iteration}: {what} violation {magnitude:.3e} exceeds slack {slack:.3e}"
    )]
    Monotonicity {
        iteration: usize,
        what: &'static str,
        magnitude: f64,
        slack: f64,
    },

    #[error("envelope breached at iteration {iteration}: {what} by {magnitude:.3e} (slack {slack:.3e})")]
    EnvelopeBreach {
        iteration: usize,
        what: &'static str,
        magnitude: f64,
        slack: f64,
    },

    #[error("audit failed: {0}")]
    Audit(String),
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::Config(_)
            | Error::Stability { .. }
            | Error::GridMismatch(_)
            | Error::DriverNotLipschitz
            | Error::TerminalBelowBarrier { .. } => Category::Config,
            Error::Monotonicity { .. } | Error::EnvelopeBreach { .. } | Error::Audit(_) => Category::Invariant,
            Error::NonFinite { .. } | Error::RankDeficient { .. } => Category::Numerical,
        }
    }
}

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
