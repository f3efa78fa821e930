//! Nonnegative flows on a directed edge set.
//!
//! A [`Flow`] carries its own edge universe in declared order; values on
//! edges outside the universe are zero. Flows built from a chain use that
//! chain's edge list, so restricting a computation to a sub-chain (the limit
//! chain of a family, say) only needs lookups by `(from, to)`.

use crate::chain::{ChainSpec, ClassDecomposition, ProbabilityVector};
use crate::error::{Error, Result};
use crate::numeric::sup_norm;
use crate::tolerances;
use std::collections::HashMap;

/// A nonnegative function on a list of directed edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Flow {
    n_states: usize,
    edges: Vec<(usize, usize)>,
    values: Vec<f64>,
    lookup: HashMap<(usize, usize), usize>,
}

impl Flow {
    pub fn new(n_states: usize, edges: Vec<(usize, usize)>, values: Vec<f64>) -> Result<Self> {
        if edges.len() != values.len() {
            return Err(Error::InvalidFlow(format!(
                "{} edges but {} values",
                edges.len(),
                values.len()
            )));
        }
        let mut lookup = HashMap::with_capacity(edges.len());
        for (i, &(a, b)) in edges.iter().enumerate() {
            if a >= n_states || b >= n_states || a == b {
                return Err(Error::InvalidFlow(format!("bad edge ({a},{b})")));
            }
            if lookup.insert((a, b), i).is_some() {
                return Err(Error::InvalidFlow(format!("duplicate edge ({a},{b})")));
            }
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidFlow(format!("value {v} is not a nonnegative number")));
        }
        Ok(Flow { n_states, edges, values, lookup })
    }

    /// The zero flow on the edges of `chain`.
    pub fn zero(chain: &ChainSpec) -> Self {
        let edges: Vec<_> = chain.edges().iter().map(|e| (e.from, e.to)).collect();
        let values = vec![0.0; edges.len()];
        Flow::new(chain.n_states(), edges, values).expect("chain edges are valid")
    }

    /// A flow on the edges of `chain` with values in edge order.
    pub fn on_chain(chain: &ChainSpec, values: Vec<f64>) -> Result<Self> {
        let edges = chain.edges().iter().map(|e| (e.from, e.to)).collect();
        Flow::new(chain.n_states(), edges, values)
    }

    /// A flow on the edges of `chain` from `(from, to, value)` triples; edges
    /// not listed are zero, listed edges must belong to the chain.
    pub fn from_triples(chain: &ChainSpec, triples: &[(usize, usize, f64)]) -> Result<Self> {
        let mut f = Flow::zero(chain);
        for &(a, b, v) in triples {
            let i = *f.lookup.get(&(a, b)).ok_or_else(|| {
                Error::InvalidFlow(format!("edge ({a},{b}) is not an edge of the chain"))
            })?;
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidFlow(format!("value {v} is not a nonnegative number")));
            }
            f.values[i] = v;
        }
        Ok(f)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `J(from, to)`, zero off the edge universe.
    pub fn value(&self, from: usize, to: usize) -> f64 {
        self.lookup.get(&(from, to)).map_or(0.0, |&i| self.values[i])
    }

    /// Positive entries as `(from, to, value)`.
    pub fn support(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.edges
            .iter()
            .zip(&self.values)
            .filter(|(_, v)| **v > 0.0)
            .map(|(&(a, b), &v)| (a, b, v))
    }

    /// `(div J)(x) = sum_y J(x,y) - sum_y J(y,x)`.
    pub fn divergence(&self) -> Vec<f64> {
        let mut div = vec![0.0; self.n_states];
        for (&(a, b), &v) in self.edges.iter().zip(&self.values) {
            div[a] += v;
            div[b] -= v;
        }
        div
    }

    pub fn is_divergence_free(&self, tol: f64) -> bool {
        sup_norm(&self.divergence()) <= tol
    }

    /// Same universe, values multiplied by `c >= 0`.
    pub fn scaled(&self, c: f64) -> Result<Flow> {
        Flow::new(self.n_states, self.edges.clone(), self.values.iter().map(|v| v * c).collect())
    }

    /// Pointwise sum; the universe is the union, in order of first appearance.
    pub fn plus(&self, other: &Flow) -> Result<Flow> {
        if self.n_states != other.n_states {
            return Err(Error::InvalidFlow("state counts differ".into()));
        }
        let mut edges = self.edges.clone();
        let mut values = self.values.clone();
        let mut lookup = self.lookup.clone();
        for (&e, &v) in other.edges.iter().zip(&other.values) {
            match lookup.get(&e) {
                Some(&i) => values[i] += v,
                None => {
                    lookup.insert(e, edges.len());
                    edges.push(e);
                    values.push(v);
                }
            }
        }
        Flow::new(self.n_states, edges, values)
    }

    /// Largest `|J(e) - K(e)|` over both universes.
    pub fn max_abs_diff(&self, other: &Flow) -> f64 {
        let mut m = 0.0_f64;
        for (&(a, b), &v) in self.edges.iter().zip(&self.values) {
            m = m.max((v - other.value(a, b)).abs());
        }
        for (&(a, b), &v) in other.edges.iter().zip(&other.values) {
            m = m.max((v - self.value(a, b)).abs());
        }
        m
    }

    /// Copy with every value outside `keep` set to zero.
    pub fn restricted_to(&self, keep: impl Fn(usize, usize) -> bool) -> Flow {
        let values = self
            .edges
            .iter()
            .zip(&self.values)
            .map(|(&(a, b), &v)| if keep(a, b) { v } else { 0.0 })
            .collect();
        Flow { values, ..self.clone() }
    }
}

/// `J_{mu,R}(x,y) = mu(x) R(x,y)` on the edges of `chain`.
pub fn induced_current(mu: &ProbabilityVector, chain: &ChainSpec) -> Result<Flow> {
    chain.check_len(mu.len(), "measure")?;
    let w = mu.weights();
    Flow::on_chain(chain, chain.edges().iter().map(|e| w[e.from] * e.rate).collect())
}

/// A closed path of distinct edges carrying a constant positive amplitude.
#[derive(Debug, Clone, PartialEq)]
pub struct Cycle {
    pub edges: Vec<(usize, usize)>,
    pub amplitude: f64,
}

impl Cycle {
    /// States visited, starting at the tail of the first edge.
    pub fn states(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.0).collect()
    }
}

/// Peel cycles off a divergence-free flow.
///
/// At each step the smallest positive edge (first in declared order on ties)
/// is completed to a cycle by a depth-first search along positive edges, and
/// the cycle is removed with that edge's value as amplitude. Each peel zeros
/// at least one edge, so there are at most `|E|` cycles.
pub fn cycle_decomposition(flow: &Flow) -> Result<Vec<Cycle>> {
    let scale = flow.values.iter().fold(0.0_f64, |m, v| m.max(*v)).max(1.0);
    let div = sup_norm(&flow.divergence());
    if div > tolerances::DIVERGENCE_FREE * scale {
        return Err(Error::NotDivergenceFree(div));
    }
    // Residues below this are rounding noise from earlier peels.
    let noise = 1e-13 * scale;
    let mut values = flow.values.clone();
    let n = flow.n_states;
    let mut out_edges: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, &(a, _)) in flow.edges.iter().enumerate() {
        out_edges[a].push(i);
    }
    let mut cycles = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for (i, &v) in values.iter().enumerate() {
            if v > 0.0 && best.map_or(true, |b| v < values[b]) {
                best = Some(i);
            }
        }
        let Some(start) = best else { break };
        let (u, v) = flow.edges[start];
        match find_path(v, u, &values, &flow.edges, &out_edges) {
            Some(mut path) => {
                path.insert(0, start);
                let amp = values[start];
                for &i in &path {
                    values[i] -= amp;
                    if values[i] <= noise {
                        values[i] = 0.0;
                    }
                }
                values[start] = 0.0;
                cycles.push(Cycle {
                    edges: path.iter().map(|&i| flow.edges[i]).collect(),
                    amplitude: amp,
                });
            }
            None if values[start] <= 1e-10 * scale => values[start] = 0.0,
            None => return Err(Error::NotDivergenceFree(values[start])),
        }
    }
    Ok(cycles)
}

/// Depth-first search for a path of positive edges from `from` to `to`,
/// returning edge indices.
fn find_path(
    from: usize,
    to: usize,
    values: &[f64],
    edges: &[(usize, usize)],
    out_edges: &[Vec<usize>],
) -> Option<Vec<usize>> {
    let mut visited = vec![false; out_edges.len()];
    let mut path = Vec::new();
    fn dfs(
        x: usize,
        to: usize,
        values: &[f64],
        edges: &[(usize, usize)],
        out_edges: &[Vec<usize>],
        visited: &mut [bool],
        path: &mut Vec<usize>,
    ) -> bool {
        if x == to {
            return true;
        }
        visited[x] = true;
        for &i in &out_edges[x] {
            let y = edges[i].1;
            if values[i] > 0.0 && !visited[y] {
                path.push(i);
                if dfs(y, to, values, edges, out_edges, visited, path) {
                    return true;
                }
                path.pop();
            }
        }
        false
    }
    if dfs(from, to, values, edges, out_edges, &mut visited, &mut path) {
        Some(path)
    } else {
        None
    }
}

/// Reassemble a flow from cycles on the universe of `like`.
pub fn sum_cycles(like: &Flow, cycles: &[Cycle]) -> Result<Flow> {
    let mut values = vec![0.0; like.edges.len()];
    for c in cycles {
        for e in &c.edges {
            let i = *like
                .lookup
                .get(e)
                .ok_or_else(|| Error::InvalidFlow(format!("cycle edge {e:?} outside universe")))?;
            values[i] += c.amplitude;
        }
    }
    Flow::new(like.n_states, like.edges.clone(), values)
}

/// Strongly connected components of `chain` that are not closed classes:
/// the equivalence classes of mutual reachability inside the transient set.
pub fn equivalence_classes(chain: &ChainSpec) -> Vec<Vec<usize>> {
    let dec = chain.class_decomposition();
    chain
        .strongly_connected_components()
        .into_iter()
        .filter(|c| !dec.closed_classes.contains(c))
        .collect()
}

/// Split a divergence-free flow on the limit edges into one flow per closed
/// class and per transient equivalence class. Only nonzero components are
/// returned, closed classes first.
pub fn class_structure_decomposition(
    flow: &Flow,
    decomposition: &ClassDecomposition,
    equivalence_classes: &[Vec<usize>],
    state_names: &[String],
) -> Result<Vec<Flow>> {
    let scale = flow.values.iter().fold(0.0_f64, |m, v| m.max(*v)).max(1.0);
    let div = sup_norm(&flow.divergence());
    if div > tolerances::DIVERGENCE_FREE * scale {
        return Err(Error::NotDivergenceFree(div));
    }
    let groups: Vec<&Vec<usize>> =
        decomposition.closed_classes.iter().chain(equivalence_classes).collect();
    let mut group_of = vec![usize::MAX; flow.n_states];
    for (g, members) in groups.iter().enumerate() {
        for &x in members.iter() {
            group_of[x] = g;
        }
    }
    let name = |x: usize| state_names.get(x).cloned().unwrap_or_else(|| x.to_string());
    for (a, b, _) in flow.support() {
        if group_of[a] == usize::MAX || group_of[a] != group_of[b] {
            return Err(Error::CrossClassFlow { from: name(a), to: name(b) });
        }
    }
    let mut out = Vec::new();
    for g in 0..groups.len() {
        let part = flow.restricted_to(|a, _| group_of[a] == g);
        if part.values.iter().any(|&v| v > 0.0) {
            out.push(part);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use proptest::prelude::*;

    fn unit_cycle_flow() -> Flow {
        Flow::on_chain(&catalog::three_cycle(), vec![1.0; 3]).unwrap()
    }

    #[test]
    fn divergence_examples() {
        let c3 = catalog::three_cycle();
        assert_eq!(Flow::zero(&c3).divergence(), vec![0.0; 3]);
        assert_eq!(unit_cycle_flow().divergence(), vec![0.0; 3]);
        let single = Flow::from_triples(&c3, &[(0, 1, 2.0)]).unwrap();
        assert_eq!(single.divergence(), vec![2.0, -2.0, 0.0]);
    }

    #[test]
    fn induced_current_examples() {
        let two = catalog::two_state(2.0, 3.0);
        let pi = two.stationary_distribution().unwrap();
        let j = induced_current(&pi, &two).unwrap();
        assert!((j.value(0, 1) - 1.2).abs() < 1e-15 && (j.value(1, 0) - 1.2).abs() < 1e-15);

        let c3 = catalog::three_cycle();
        let j = induced_current(&ProbabilityVector::dirac(3, 0), &c3).unwrap();
        assert_eq!(j.values(), &[1.0, 0.0, 0.0]);
        let j = induced_current(&ProbabilityVector::uniform(3), &c3).unwrap();
        assert!(j.values().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-16));
        assert!(j.is_divergence_free(1e-15));
    }

    #[test]
    fn single_cycle_recovered() {
        let cycles = cycle_decomposition(&unit_cycle_flow()).unwrap();
        assert_eq!(cycles.len(), 1);
        assert_eq!(cycles[0].amplitude, 1.0);
        assert_eq!(cycles[0].edges, vec![(0, 1), (1, 2), (2, 0)]);
    }

    #[test]
    fn two_disjoint_cycles_recovered() {
        let c = ChainSpec::named(
            &["a", "b", "c", "d"],
            &[("a", "b", 1.0), ("b", "a", 1.0), ("c", "d", 1.0), ("d", "c", 1.0)],
        )
        .unwrap();
        let f = Flow::on_chain(&c, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let cycles = cycle_decomposition(&f).unwrap();
        assert_eq!(cycles.len(), 2);
        assert_eq!(cycles[0].amplitude, 1.0);
        assert_eq!(cycles[1].amplitude, 2.0);
        assert!(sum_cycles(&f, &cycles).unwrap().max_abs_diff(&f) < 1e-15);
    }

    #[test]
    fn cycle_decomposition_rejects_divergence() {
        let f = Flow::from_triples(&catalog::three_cycle(), &[(0, 1, 1.0)]).unwrap();
        assert!(matches!(cycle_decomposition(&f), Err(Error::NotDivergenceFree(_))));
    }

    #[test]
    fn flow_rejects_negative_values() {
        assert!(Flow::on_chain(&catalog::three_cycle(), vec![1.0, -1.0, 0.0]).is_err());
    }

    fn rm5_limit() -> ChainSpec {
        catalog::rm5().limit_chain().unwrap()
    }

    #[test]
    fn class_structure_single_well() {
        let lim = rm5_limit();
        let dec = lim.class_decomposition();
        let eq = equivalence_classes(&lim);
        let f = Flow::from_triples(&lim, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let parts = class_structure_decomposition(&f, &dec, &eq, lim.states()).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0], f);
    }

    #[test]
    fn class_structure_two_wells() {
        let lim = rm5_limit();
        let dec = lim.class_decomposition();
        let eq = equivalence_classes(&lim);
        assert_eq!(eq, vec![vec![2], vec![3], vec![4]]);
        let f = Flow::from_triples(&lim, &[(0, 1, 1.0), (1, 0, 1.0), (5, 6, 1.0), (6, 5, 1.0)])
            .unwrap();
        let parts = class_structure_decomposition(&f, &dec, &eq, lim.states()).unwrap();
        assert_eq!(parts.len(), 2);
        let total = parts[0].plus(&parts[1]).unwrap();
        assert!(total.max_abs_diff(&f) == 0.0);
        assert!(parts.iter().all(|p| p.is_divergence_free(1e-15)));
    }

    #[test]
    fn class_structure_rejects_transient_leak() {
        // Limit edges t -> a, a <-> b; the extra edge a -> t closes a cycle
        // through the transient state, which no limit flow can carry.
        let limit = ChainSpec::named(
            &["t", "a", "b"],
            &[("t", "a", 1.0), ("a", "b", 1.0), ("b", "a", 1.0)],
        )
        .unwrap();
        let dec = limit.class_decomposition();
        let eq = equivalence_classes(&limit);
        let full = ChainSpec::named(
            &["t", "a", "b"],
            &[("t", "a", 1.0), ("a", "t", 1.0), ("a", "b", 1.0), ("b", "a", 1.0)],
        )
        .unwrap();
        let f = Flow::from_triples(&full, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        assert!(matches!(
            class_structure_decomposition(&f, &dec, &eq, limit.states()),
            Err(Error::CrossClassFlow { .. })
        ));
    }

    fn random_cycle_flow() -> impl Strategy<Value = (Flow, usize)> {
        (3usize..7).prop_flat_map(|n| {
            let cyc = proptest::collection::vec(
                (proptest::sample::subsequence((0..n).collect::<Vec<_>>(), 2..=n), 0.01f64..5.0, any::<bool>()),
                1..6,
            );
            (Just(n), cyc)
        })
        .prop_map(|(n, cycles)| {
            let mut edges: Vec<(usize, usize)> = Vec::new();
            for a in 0..n {
                for b in 0..n {
                    if a != b {
                        edges.push((a, b));
                    }
                }
            }
            let mut values = vec![0.0; edges.len()];
            for (mut states, amp, rev) in cycles {
                if rev {
                    states.reverse();
                }
                for k in 0..states.len() {
                    let e = (states[k], states[(k + 1) % states.len()]);
                    let i = edges.iter().position(|&x| x == e).unwrap();
                    values[i] += amp;
                }
            }
            (Flow::new(n, edges, values).unwrap(), n)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn decomposition_round_trip((f, _n) in random_cycle_flow()) {
            let cycles = cycle_decomposition(&f).unwrap();
            let positive = f.values().iter().filter(|&&v| v > 0.0).count();
            prop_assert!(cycles.len() <= positive);
            let back = sum_cycles(&f, &cycles).unwrap();
            prop_assert!(back.max_abs_diff(&f) <= 1e-10);
            for c in &cycles {
                prop_assert!(c.amplitude > 0.0);
                let mut seen = std::collections::HashSet::new();
                prop_assert!(c.edges.iter().all(|e| seen.insert(*e)));
                for k in 0..c.edges.len() {
                    prop_assert_eq!(c.edges[k].1, c.edges[(k + 1) % c.edges.len()].0);
                }
            }
        }

        #[test]
        fn divergence_sums_to_zero(vals in proptest::collection::vec(0.0f64..10.0, 6)) {
            let c = ChainSpec::named(
                &["a", "b", "c"],
                &[("a","b",1.0),("b","a",1.0),("b","c",1.0),("c","b",1.0),("a","c",1.0),("c","a",1.0)],
            ).unwrap();
            let f = Flow::on_chain(&c, vals).unwrap();
            let s: f64 = f.divergence().iter().sum();
            prop_assert!(s.abs() <= 1e-12);
        }

        #[test]
        fn induced_divergence_free_iff_stationary(w in proptest::collection::vec(0.01f64..1.0, 4)) {
            let c = ChainSpec::named(
                &["a","b","c","d"],
                &[("a","b",1.0),("b","c",2.0),("c","d",0.5),("d","a",1.5),("b","a",0.7),("c","a",0.3)],
            ).unwrap();
            let mu = ProbabilityVector::normalized(w).unwrap();
            let j = induced_current(&mu, &c).unwrap();
            let stationary = sup_norm(&c.adjoint_apply(mu.weights())) < 1e-10;
            prop_assert_eq!(j.is_divergence_free(1e-10), stationary);
            let pi = c.stationary_distribution().unwrap();
            prop_assert!(induced_current(&pi, &c).unwrap().is_divergence_free(1e-12));
        }
    }
}
