//! Large-deviations rate functionals for finite continuous-time Markov chains.
//!
//! The crate covers:
//!
//! * chains and monomial-rate families ([`chain`]),
//! * flows, divergence and cycle decompositions ([`flows`]),
//! * the Donsker–Varadhan and measure-current rate functionals together with
//!   the tilt machinery ([`rate`]),
//! * the metastable hierarchy of a family ([`hierarchy`]) and the
//!   level functionals of its Γ-expansion ([`gamma`]),
//! * derivatives and the asymptotic variance ([`calculus`]),
//! * recovery of a chain from its rate functional ([`identify`]),
//! * exact simulation ([`sim`]).

pub mod calculus;
pub mod catalog;
pub mod chain;
pub mod error;
pub mod flows;
pub mod gamma;
pub mod hierarchy;
pub mod identify;
pub mod io;
pub mod numeric;
pub mod rate;
pub mod sim;
pub mod tolerances;

pub use chain::{ChainSpec, ClassDecomposition, Edge, Exponent, ParamChainSpec, ParamEdge, ProbabilityVector};
pub use error::{Error, Result};
pub use flows::{Cycle, Flow};
pub use hierarchy::{AsymptoticScale, HierarchyLevel, MetastableTree, NGrid};
pub use numeric::Precision;
pub use rate::{ExtendedValue, TiltField};
