use thiserror::Error;

/// Errors raised by the library.
///
/// Variants fall in two families: validation failures (malformed inputs,
/// violated preconditions) and numerical failures (non-convergence, singular
/// systems). [`Error::is_numerical`] tells them apart; the CLI maps them to
/// distinct exit codes.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid chain: {0}")]
    InvalidChain(String),
    #[error("invalid probability vector: {0}")]
    InvalidMeasure(String),
    #[error("invalid flow: {0}")]
    InvalidFlow(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("unknown state `{0}`")]
    UnknownState(String),
    #[error("chain is not irreducible ({0})")]
    NotIrreducible(String),
    #[error("limit chain has no edge of exponent 0")]
    EmptyLimit,
    #[error("singular linear system: {0}")]
    SingularSystem(String),
    #[error("state `{0}` cannot reach the kept set")]
    Unreachable(String),
    #[error("flow is not divergence-free (max |div| = {0:e})")]
    NotDivergenceFree(f64),
    #[error("flow is positive on edge {from}->{to} joining distinct classes")]
    CrossClassFlow { from: String, to: String },
    #[error("measure is not strictly positive at state `{0}`")]
    NotStrictlyPositive(String),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("degenerate fit: max log-residual {0:e} exceeds threshold")]
    DegenerateFit(f64),
    #[error("all reduced rates vanish at this time-scale")]
    AllRatesVanish,
    #[error("reduced chain does not coarsen the partition")]
    NotCoarser,
    #[error("reduced rate {from}->{to} diverges (fitted exponent {exponent:.3})")]
    DivergingRate { from: usize, to: usize, exponent: f64 },
    #[error("time-scale exponent {current:.3} does not exceed the previous level's {previous:.3}")]
    NonIncreasingScale { previous: f64, current: f64 },
    #[error("hierarchy exceeded {0} levels")]
    IterationBound(usize),
    #[error("function is not mean-zero (mean {0:e})")]
    NotMeanZero(f64),
    #[error("symmetric part is singular on mean-zero functions")]
    SingularSymmetricPart,
    #[error("negative square root argument {0:e} while recovering rate products")]
    NegativeRoot(f64),
    #[error("recovered chain disagrees with the oracle (mismatch {0:e})")]
    InconsistentRecovery(f64),
    #[error("state `{0}` is absorbing")]
    AbsorbingState(String),
    #[error("io: {0}")]
    Io(String),
    #[error("parse: {0}")]
    Parse(String),
}

impl Error {
    /// True for failures of a numerical procedure rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonConvergence { .. }
                | Error::SingularSystem(_)
                | Error::DegenerateFit(_)
                | Error::AllRatesVanish
                | Error::NotCoarser
                | Error::DivergingRate { .. }
                | Error::NonIncreasingScale { .. }
                | Error::IterationBound(_)
                | Error::SingularSymmetricPart
                | Error::NegativeRoot(_)
                | Error::InconsistentRecovery(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
