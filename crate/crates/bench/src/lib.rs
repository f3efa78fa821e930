//! Shared fixtures for the benchmarks.

use ldmc_core::{ChainSpec, ProbabilityVector};

/// Directed ring on `n` states with a reverse edge of rate `0.5` on every
/// second state, so the chain is irreducible but not reversible.
pub fn ring(n: usize) -> ChainSpec {
    let names = (0..n).map(|i| format!("s{i}")).collect();
    let mut edges = Vec::new();
    for a in 0..n {
        edges.push((a, (a + 1) % n, 1.0 + (a % 3) as f64));
        if a % 2 == 0 {
            edges.push(((a + 1) % n, a, 0.5));
        }
    }
    ChainSpec::new(names, edges).expect("valid ring")
}

/// A strictly positive, non-stationary measure on `n` states.
pub fn skewed_measure(n: usize) -> ProbabilityVector {
    ProbabilityVector::normalized((1..=n).map(|i| i as f64).collect()).expect("positive weights")
}
