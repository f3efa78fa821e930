//! Numerical tolerances shared across modules.
//!
//! Each constant is the default for one kind of check; operations that take
//! an options struct allow overriding them.

/// Probability vectors must sum to one within this absolute error.
pub const MEASURE_SUM: f64 = 1e-12;

/// Per-state absolute divergence allowed for a flow to count as divergence-free.
pub const DIVERGENCE_FREE: f64 = 1e-12;

/// Residual bound for stationary distributions and hitting-probability solves.
pub const LINEAR_RESIDUAL: f64 = 1e-10;

/// Gradient sup-norm at exit of the tilt Newton solver, relative to the
/// largest edge current `max mu(x) R(x,y)` (floored at one).
pub const TILT_GRADIENT: f64 = 1e-10;

/// KKT residual at exit of the current-space (projection) solver, relative
/// to the same current scale.
pub const PROJECTION_KKT: f64 = 1e-8;

/// Default Newton iteration cap.
pub const MAX_NEWTON_ITERATIONS: usize = 200;

/// Max residual of a log-log fit before it is declared degenerate.
pub const FIT_RESIDUAL: f64 = 0.05;

/// Fitted exponents below `-VANISHING_EXPONENT` mark a vanishing rate; the
/// open band around zero is a dead zone that demands a clean fit.
pub const VANISHING_EXPONENT: f64 = 0.1;

/// Required strict increase of time-scale exponents between levels.
pub const EXPONENT_MARGIN: f64 = 0.1;

/// Mixture decomposition and induced-current matching for level-p functionals.
pub const MIXTURE: f64 = 1e-9;

/// Same checks at level zero.
pub const MIXTURE_LEVEL0: f64 = 1e-10;

/// A functional value at or below this is treated as a zero.
pub const ZERO_VALUE: f64 = 1e-10;

/// Pointwise probe: finite targets must be matched to this at the top of the grid.
pub const POINTWISE_GAP: f64 = 1e-3;

/// Pointwise probe: infinite targets must exceed this at the top of the grid.
pub const DIVERGENCE_THRESHOLD: f64 = 1e3;

/// Mean-zero checks for calculus operations.
pub const MEAN_ZERO: f64 = 1e-12;
