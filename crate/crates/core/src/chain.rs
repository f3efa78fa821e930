//! Finite continuous-time Markov chains and scale-parametrized families.
//!
//! A [`ChainSpec`] is a fixed chain: an ordered list of named states and a
//! list of directed edges with strictly positive rates. Absent edges are
//! absent; a rate is never stored as zero. A [`ParamChainSpec`] describes a
//! family `R_n(x,y) = c(x,y) n^{-k(x,y)}` with nonnegative rational
//! exponents; its edge set does not depend on `n`.

use crate::error::{Error, Result};
use crate::numeric::{self, Precision, Real};
use crate::tolerances;
use nalgebra::{DMatrix, DVector};
use num_rational::Ratio;
use petgraph::algo::tarjan_scc;
use petgraph::graph::DiGraph;
use std::collections::HashMap;
use twofloat::TwoFloat;

/// A directed edge with a positive rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub rate: f64,
}

/// A fixed finite chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainSpec {
    states: Vec<String>,
    edges: Vec<Edge>,
    index: HashMap<String, usize>,
    lookup: HashMap<(usize, usize), usize>,
}

fn build_index(states: &[String]) -> Result<HashMap<String, usize>> {
    if states.is_empty() {
        return Err(Error::InvalidChain("no states".into()));
    }
    let mut index = HashMap::with_capacity(states.len());
    for (i, s) in states.iter().enumerate() {
        if index.insert(s.clone(), i).is_some() {
            return Err(Error::InvalidChain(format!("duplicate state `{s}`")));
        }
    }
    Ok(index)
}

impl ChainSpec {
    /// Build a chain from state names and `(from, to, rate)` index triples.
    pub fn new(states: Vec<String>, edges: Vec<(usize, usize, f64)>) -> Result<Self> {
        let index = build_index(&states)?;
        let n = states.len();
        let mut lookup = HashMap::with_capacity(edges.len());
        let mut out = Vec::with_capacity(edges.len());
        for (from, to, rate) in edges {
            if from >= n || to >= n {
                return Err(Error::InvalidChain(format!(
                    "edge ({from},{to}) references an undeclared state"
                )));
            }
            if from == to {
                return Err(Error::InvalidChain(format!(
                    "self-loop at `{}`",
                    states[from]
                )));
            }
            if !(rate > 0.0) || !rate.is_finite() {
                return Err(Error::InvalidChain(format!(
                    "rate {rate} on {}->{} is not a positive finite number",
                    states[from], states[to]
                )));
            }
            if lookup.insert((from, to), out.len()).is_some() {
                return Err(Error::InvalidChain(format!(
                    "duplicate edge {}->{}",
                    states[from], states[to]
                )));
            }
            out.push(Edge { from, to, rate });
        }
        Ok(ChainSpec { states, edges: out, index, lookup })
    }

    /// Build a chain from names, e.g. `ChainSpec::named(&["a","b"], &[("a","b",1.0)])`.
    pub fn named(states: &[&str], edges: &[(&str, &str, f64)]) -> Result<Self> {
        let states: Vec<String> = states.iter().map(|s| s.to_string()).collect();
        let index = build_index(&states)?;
        let mut idx = Vec::with_capacity(edges.len());
        for (a, b, r) in edges {
            let from = *index.get(*a).ok_or_else(|| Error::UnknownState(a.to_string()))?;
            let to = *index.get(*b).ok_or_else(|| Error::UnknownState(b.to_string()))?;
            idx.push((from, to, *r));
        }
        ChainSpec::new(states, idx)
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn state_index(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownState(name.to_string()))
    }

    /// Indices of a list of state names.
    pub fn subset(&self, names: &[&str]) -> Result<Vec<usize>> {
        names.iter().map(|n| self.state_index(n)).collect()
    }

    /// `R(x,y)`, zero when the edge is absent.
    pub fn rate(&self, from: usize, to: usize) -> f64 {
        self.lookup.get(&(from, to)).map_or(0.0, |&i| self.edges[i].rate)
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.lookup.contains_key(&(from, to))
    }

    pub fn edge_index(&self, from: usize, to: usize) -> Option<usize> {
        self.lookup.get(&(from, to)).copied()
    }

    /// Outgoing edges of every state, in declared edge order.
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n_states()];
        for e in &self.edges {
            adj[e.from].push((e.to, e.rate));
        }
        adj
    }

    /// Dense off-diagonal rate matrix.
    pub fn rate_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.n_states();
        let mut r = vec![vec![0.0; n]; n];
        for e in &self.edges {
            r[e.from][e.to] = e.rate;
        }
        r
    }

    /// Generator matrix `L(x,y) = R(x,y)`, `L(x,x) = -lambda(x)`.
    pub fn generator_matrix(&self) -> DMatrix<f64> {
        let n = self.n_states();
        let mut l = DMatrix::zeros(n, n);
        for e in &self.edges {
            l[(e.from, e.to)] += e.rate;
            l[(e.from, e.from)] -= e.rate;
        }
        l
    }

    /// Holding rates `lambda(x) = sum_y R(x,y)`.
    pub fn holding_rates(&self) -> Vec<f64> {
        let mut lambda = vec![0.0; self.n_states()];
        for e in &self.edges {
            lambda[e.from] += e.rate;
        }
        lambda
    }

    /// `(L f)(x) = sum_y R(x,y) (f(y) - f(x))`.
    pub fn apply_generator(&self, f: &[f64]) -> Result<Vec<f64>> {
        self.check_len(f.len(), "function")?;
        let mut out = vec![0.0; self.n_states()];
        for e in &self.edges {
            out[e.from] += e.rate * (f[e.to] - f[e.from]);
        }
        Ok(out)
    }

    /// `(mu^T L)(y)`: the stationarity residual of a measure.
    pub fn adjoint_apply(&self, mu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_states()];
        for e in &self.edges {
            let j = mu[e.from] * e.rate;
            out[e.to] += j;
            out[e.from] -= j;
        }
        out
    }

    /// Same edges with every rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<ChainSpec> {
        ChainSpec::new(
            self.states.clone(),
            self.edges.iter().map(|e| (e.from, e.to, e.rate * factor)).collect(),
        )
    }

    /// Sub-chain on `keep` (in the given order) with the edges inside it.
    pub fn restrict(&self, keep: &[usize]) -> Result<ChainSpec> {
        let mut pos = vec![usize::MAX; self.n_states()];
        for (i, &s) in keep.iter().enumerate() {
            pos[s] = i;
        }
        let states = keep.iter().map(|&s| self.states[s].clone()).collect();
        let edges = self
            .edges
            .iter()
            .filter(|e| pos[e.from] != usize::MAX && pos[e.to] != usize::MAX)
            .map(|e| (pos[e.from], pos[e.to], e.rate))
            .collect();
        ChainSpec::new(states, edges)
    }

    /// Strongly connected components, each sorted, ordered by smallest member.
    pub fn strongly_connected_components(&self) -> Vec<Vec<usize>> {
        scc(self.n_states(), self.edges.iter().map(|e| (e.from, e.to)))
    }

    /// Closed irreducible classes and the transient remainder.
    pub fn class_decomposition(&self) -> ClassDecomposition {
        let comps = self.strongly_connected_components();
        let mut comp_of = vec![0; self.n_states()];
        for (c, members) in comps.iter().enumerate() {
            for &s in members {
                comp_of[s] = c;
            }
        }
        let mut closed = vec![true; comps.len()];
        for e in &self.edges {
            if comp_of[e.from] != comp_of[e.to] {
                closed[comp_of[e.from]] = false;
            }
        }
        let mut closed_classes = Vec::new();
        let mut transient = Vec::new();
        for (c, members) in comps.into_iter().enumerate() {
            if closed[c] {
                closed_classes.push(members);
            } else {
                transient.extend(members);
            }
        }
        transient.sort_unstable();
        ClassDecomposition { closed_classes, transient }
    }

    pub fn is_irreducible(&self) -> bool {
        self.strongly_connected_components().len() == 1
    }

    fn require_irreducible(&self) -> Result<()> {
        let comps = self.strongly_connected_components();
        if comps.len() == 1 {
            Ok(())
        } else {
            Err(Error::NotIrreducible(format!(
                "{} strongly connected components",
                comps.len()
            )))
        }
    }

    /// Unique stationary distribution of an irreducible chain.
    pub fn stationary_distribution(&self) -> Result<ProbabilityVector> {
        self.stationary_distribution_with(Precision::Double)
    }

    pub fn stationary_distribution_with(&self, precision: Precision) -> Result<ProbabilityVector> {
        self.require_irreducible()?;
        if self.n_states() == 1 {
            return Ok(ProbabilityVector::dirac(1, 0));
        }
        let rates = self.rate_matrix();
        let pi = match precision {
            Precision::Double => numeric::gth_stationary::<f64>(&rates),
            Precision::DoubleDouble => numeric::gth_stationary::<TwoFloat>(&rates),
        }
        .ok_or_else(|| Error::NotIrreducible("elimination met a trapping state".into()))?;
        let scale = self
            .edges
            .iter()
            .map(|e| pi[e.from] * e.rate)
            .fold(1.0_f64, f64::max);
        let residual = numeric::sup_norm(&self.adjoint_apply(&pi));
        if residual > tolerances::LINEAR_RESIDUAL * scale {
            return Err(Error::SingularSystem(format!(
                "stationarity residual {residual:e}"
            )));
        }
        Ok(ProbabilityVector { weights: pi })
    }

    /// `h(x) = P_x[H_target < H_avoid]` by a dense LU solve.
    pub fn hitting_probability(&self, target: &[usize], avoid: &[usize]) -> Result<Vec<f64>> {
        let n = self.n_states();
        if target.is_empty() {
            return Err(Error::InvalidArgument("empty target set".into()));
        }
        let mut role = vec![0u8; n]; // 0 unknown, 1 target, 2 avoid
        for &t in target {
            self.check_state(t)?;
            role[t] = 1;
        }
        for &a in avoid {
            self.check_state(a)?;
            if role[a] == 1 {
                return Err(Error::InvalidArgument("target and avoid sets intersect".into()));
            }
            role[a] = 2;
        }
        // Every unknown state must reach the boundary.
        let reach = self.reaches(&role.iter().map(|&r| r != 0).collect::<Vec<_>>());
        if let Some(x) = (0..n).find(|&x| !reach[x]) {
            return Err(Error::SingularSystem(format!(
                "state `{}` cannot reach target or avoid set",
                self.states[x]
            )));
        }
        let unknown: Vec<usize> = (0..n).filter(|&x| role[x] == 0).collect();
        let mut pos = vec![usize::MAX; n];
        for (i, &x) in unknown.iter().enumerate() {
            pos[x] = i;
        }
        let m = unknown.len();
        let mut a = DMatrix::zeros(m, m);
        let mut b = DVector::zeros(m);
        for e in &self.edges {
            if role[e.from] != 0 {
                continue;
            }
            let i = pos[e.from];
            a[(i, i)] += e.rate;
            match role[e.to] {
                0 => a[(i, pos[e.to])] -= e.rate,
                1 => b[i] += e.rate,
                _ => {}
            }
        }
        let sol = numeric::lu_solve(a.clone(), &b)?;
        let residual = (&a * &sol - &b).amax();
        let scale = a.amax().max(1.0);
        if residual > tolerances::LINEAR_RESIDUAL * scale {
            return Err(Error::SingularSystem(format!("hitting residual {residual:e}")));
        }
        let mut h = vec![0.0; n];
        for x in 0..n {
            h[x] = match role[x] {
                0 => sol[pos[x]].clamp(0.0, 1.0),
                1 => 1.0,
                _ => 0.0,
            };
        }
        Ok(h)
    }

    /// `Cap(A,B) = sum_{x in A} pi(x) lambda(x) P_x[H_B < H_A^+]`, with the
    /// escape probability expanded over the first jump.
    pub fn capacity(&self, a: &[usize], b: &[usize]) -> Result<f64> {
        check_disjoint_nonempty(a, b)?;
        let pi = self.stationary_distribution()?;
        let h = self.hitting_probability(b, a)?;
        let mut cap = 0.0;
        for e in &self.edges {
            if a.contains(&e.from) {
                cap += pi.weights[e.from] * e.rate * h[e.to];
            }
        }
        Ok(cap)
    }

    /// Capacity through the trace on `A ∪ B`: the stationary flux from `A`
    /// to `B` of the trace chain. Subtraction-free, so usable when rates
    /// span many orders of magnitude.
    pub fn capacity_by_trace(&self, a: &[usize], b: &[usize], precision: Precision) -> Result<f64> {
        check_disjoint_nonempty(a, b)?;
        let pi = self.stationary_distribution_with(precision)?;
        let mut keep = vec![false; self.n_states()];
        for &x in a.iter().chain(b) {
            keep[x] = true;
        }
        let tr = self.trace_rates(&keep, precision)?;
        let mut cap = 0.0;
        for &x in a {
            for &z in b {
                cap += pi.weights[x] * tr[x][z];
            }
        }
        Ok(cap)
    }

    /// Dense trace rates on the flagged states (other rows/columns zero).
    pub fn trace_rates(&self, keep: &[bool], precision: Precision) -> Result<Vec<Vec<f64>>> {
        if !keep.iter().any(|&k| k) {
            return Err(Error::InvalidArgument("empty kept set".into()));
        }
        let rates = self.rate_matrix();
        let res = match precision {
            Precision::Double => numeric::eliminate::<f64>(&rates, keep),
            Precision::DoubleDouble => numeric::eliminate::<TwoFloat>(&rates, keep),
        };
        res.map_err(|y| Error::Unreachable(self.states[y].clone()))
    }

    /// Trace chain on `keep`, states in the order given by `keep`.
    pub fn trace_chain(&self, keep: &[usize]) -> Result<ChainSpec> {
        let mut flag = vec![false; self.n_states()];
        for &k in keep {
            self.check_state(k)?;
            flag[k] = true;
        }
        let reach = self.reaches(&flag);
        if let Some(x) = (0..self.n_states()).find(|&x| !reach[x]) {
            return Err(Error::Unreachable(self.states[x].clone()));
        }
        let tr = self.trace_rates(&flag, Precision::Double)?;
        let states = keep.iter().map(|&k| self.states[k].clone()).collect();
        let mut edges = Vec::new();
        for (i, &x) in keep.iter().enumerate() {
            for (j, &z) in keep.iter().enumerate() {
                if tr[x][z] > 0.0 {
                    edges.push((i, j, tr[x][z]));
                }
            }
        }
        ChainSpec::new(states, edges)
    }

    /// Tilted rates `R_H(x,y) = R(x,y) exp(H(y) - H(x))` on the same edges.
    pub fn tilted(&self, h: &[f64]) -> Result<ChainSpec> {
        self.check_len(h.len(), "tilt")?;
        ChainSpec::new(
            self.states.clone(),
            self.edges
                .iter()
                .map(|e| (e.from, e.to, e.rate * (h[e.to] - h[e.from]).exp()))
                .collect(),
        )
    }

    /// States from which the flagged set is reachable (flagged states included).
    pub fn reaches(&self, target: &[bool]) -> Vec<bool> {
        let n = self.n_states();
        let mut rev = vec![Vec::new(); n];
        for e in &self.edges {
            rev[e.to].push(e.from);
        }
        let mut seen = target.to_vec();
        let mut stack: Vec<usize> = (0..n).filter(|&x| target[x]).collect();
        while let Some(y) = stack.pop() {
            for &x in &rev[y] {
                if !seen[x] {
                    seen[x] = true;
                    stack.push(x);
                }
            }
        }
        seen
    }

    pub(crate) fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len != self.n_states() {
            return Err(Error::InvalidArgument(format!(
                "{what} has {len} entries, chain has {} states",
                self.n_states()
            )));
        }
        Ok(())
    }

    fn check_state(&self, x: usize) -> Result<()> {
        if x >= self.n_states() {
            return Err(Error::InvalidArgument(format!("state index {x} out of range")));
        }
        Ok(())
    }
}

fn check_disjoint_nonempty(a: &[usize], b: &[usize]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidArgument("capacity needs nonempty sets".into()));
    }
    if a.iter().any(|x| b.contains(x)) {
        return Err(Error::InvalidArgument("capacity needs disjoint sets".into()));
    }
    Ok(())
}

/// Strongly connected components of a directed graph on `0..n`.
pub(crate) fn scc(n: usize, edges: impl Iterator<Item = (usize, usize)>) -> Vec<Vec<usize>> {
    let mut g: DiGraph<(), ()> = DiGraph::with_capacity(n, 0);
    let nodes: Vec<_> = (0..n).map(|_| g.add_node(())).collect();
    for (a, b) in edges {
        g.add_edge(nodes[a], nodes[b], ());
    }
    let mut comps: Vec<Vec<usize>> = tarjan_scc(&g)
        .into_iter()
        .map(|c| {
            let mut v: Vec<usize> = c.into_iter().map(|ix| ix.index()).collect();
            v.sort_unstable();
            v
        })
        .collect();
    comps.sort_by_key(|c| c[0]);
    comps
}

/// Closed irreducible classes `V_1..V_n` and transient states `Delta`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDecomposition {
    pub closed_classes: Vec<Vec<usize>>,
    pub transient: Vec<usize>,
}

impl ClassDecomposition {
    /// Label of the closed class containing `x`, if any.
    pub fn class_of(&self, x: usize) -> Option<usize> {
        self.closed_classes.iter().position(|c| c.contains(&x))
    }
}

/// A probability measure on the states of a chain, stored in state order.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityVector {
    weights: Vec<f64>,
}

impl ProbabilityVector {
    /// Validates nonnegativity and unit mass within `1e-12`.
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidMeasure("empty".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidMeasure(format!("weight {w} is not a nonnegative number")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > tolerances::MEASURE_SUM {
            return Err(Error::InvalidMeasure(format!("weights sum to {total}")));
        }
        Ok(ProbabilityVector { weights })
    }

    /// Rescale nonnegative weights to unit mass.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidMeasure(format!("weight {w} is not a nonnegative number")));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::InvalidMeasure("zero total mass".into()));
        }
        Ok(ProbabilityVector { weights: weights.into_iter().map(|w| w / total).collect() })
    }

    pub fn dirac(n: usize, at: usize) -> Self {
        let mut weights = vec![0.0; n];
        weights[at] = 1.0;
        ProbabilityVector { weights }
    }

    pub fn uniform(n: usize) -> Self {
        ProbabilityVector { weights: vec![1.0 / n as f64; n] }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn mass(&self, set: &[usize]) -> f64 {
        set.iter().map(|&x| self.weights[x]).sum()
    }

    /// First state with zero mass, if any.
    pub fn first_zero(&self) -> Option<usize> {
        self.weights.iter().position(|&w| w <= 0.0)
    }

    pub fn sup_distance(&self, other: &ProbabilityVector) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Exponent of a monomial rate, a nonnegative rational.
pub type Exponent = Ratio<i64>;

/// One edge of a parametrized family: `R_n = coeff * n^(-exponent)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEdge {
    pub from: usize,
    pub to: usize,
    pub coeff: f64,
    pub exponent: Exponent,
}

impl ParamEdge {
    pub fn rate_at(&self, n: f64) -> f64 {
        let k = self.exponent;
        if *k.denom() == 1 {
            self.coeff * n.powi(-(*k.numer() as i32))
        } else {
            self.coeff * n.powf(-(*k.numer() as f64) / (*k.denom() as f64))
        }
    }

    pub fn exponent_f64(&self) -> f64 {
        *self.exponent.numer() as f64 / *self.exponent.denom() as f64
    }
}

/// Scale-parametrized family with monomial rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamChainSpec {
    states: Vec<String>,
    edges: Vec<ParamEdge>,
}

impl ParamChainSpec {
    pub fn new(states: Vec<String>, edges: Vec<ParamEdge>) -> Result<Self> {
        build_index(&states)?;
        let n = states.len();
        let mut seen = std::collections::HashSet::new();
        for e in &edges {
            if e.from >= n || e.to >= n {
                return Err(Error::InvalidChain("edge references an undeclared state".into()));
            }
            if e.from == e.to {
                return Err(Error::InvalidChain(format!("self-loop at `{}`", states[e.from])));
            }
            if !(e.coeff > 0.0) || !e.coeff.is_finite() {
                return Err(Error::InvalidChain(format!(
                    "coefficient {} on {}->{} is not positive",
                    e.coeff, states[e.from], states[e.to]
                )));
            }
            if e.exponent < Ratio::from_integer(0) {
                return Err(Error::InvalidChain(format!(
                    "negative exponent {} on {}->{}",
                    e.exponent, states[e.from], states[e.to]
                )));
            }
            if !seen.insert((e.from, e.to)) {
                return Err(Error::InvalidChain(format!(
                    "duplicate edge {}->{}",
                    states[e.from], states[e.to]
                )));
            }
        }
        Ok(ParamChainSpec { states, edges })
    }

    /// Build from names with integer exponents.
    pub fn named(states: &[&str], edges: &[(&str, &str, f64, i64)]) -> Result<Self> {
        let names: Vec<String> = states.iter().map(|s| s.to_string()).collect();
        let index = build_index(&names)?;
        let mut out = Vec::with_capacity(edges.len());
        for (a, b, c, k) in edges {
            out.push(ParamEdge {
                from: *index.get(*a).ok_or_else(|| Error::UnknownState(a.to_string()))?,
                to: *index.get(*b).ok_or_else(|| Error::UnknownState(b.to_string()))?,
                coeff: *c,
                exponent: Ratio::from_integer(*k),
            });
        }
        ParamChainSpec::new(names, out)
    }

    /// A fixed chain viewed as an n-independent family.
    pub fn constant(chain: &ChainSpec) -> Self {
        ParamChainSpec {
            states: chain.states().to_vec(),
            edges: chain
                .edges()
                .iter()
                .map(|e| ParamEdge {
                    from: e.from,
                    to: e.to,
                    coeff: e.rate,
                    exponent: Ratio::from_integer(0),
                })
                .collect(),
        }
    }

    pub fn states(&self) -> &[String] {
        &self.states
    }

    pub fn edges(&self) -> &[ParamEdge] {
        &self.edges
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn state_index(&self, name: &str) -> Result<usize> {
        self.states
            .iter()
            .position(|s| s == name)
            .ok_or_else(|| Error::UnknownState(name.to_string()))
    }

    /// The chain with rates `R_n`.
    pub fn instantiate(&self, n: f64) -> Result<ChainSpec> {
        if !(n >= 1.0) || !n.is_finite() {
            return Err(Error::InvalidArgument(format!("scale parameter n = {n} must be >= 1")));
        }
        ChainSpec::new(
            self.states.clone(),
            self.edges.iter().map(|e| (e.from, e.to, e.rate_at(n))).collect(),
        )
    }

    /// The limit chain on the edges with exponent zero; may have absorbing states.
    pub fn limit_chain(&self) -> Result<ChainSpec> {
        let zero = Ratio::from_integer(0);
        let edges: Vec<_> = self
            .edges
            .iter()
            .filter(|e| e.exponent == zero)
            .map(|e| (e.from, e.to, e.coeff))
            .collect();
        if edges.is_empty() {
            return Err(Error::EmptyLimit);
        }
        ChainSpec::new(self.states.clone(), edges)
    }
}

/// Unnormalized stationary weights from the matrix-tree theorem: the weight
/// of `x` is the sum over spanning arborescences oriented toward `x` of the
/// product of their rates. Exponential in the number of states.
pub fn arborescence_weights(chain: &ChainSpec) -> Result<Vec<f64>> {
    let n = chain.n_states();
    if n > 8 {
        return Err(Error::InvalidArgument(format!(
            "arborescence enumeration limited to 8 states, got {n}"
        )));
    }
    let adj = chain.adjacency();
    let mut weights = vec![0.0; n];
    for (root, w) in weights.iter_mut().enumerate() {
        let mut parent = vec![usize::MAX; n];
        *w = enumerate_arborescences(&adj, root, 0, &mut parent, 1.0);
    }
    Ok(weights)
}

fn enumerate_arborescences(
    adj: &[Vec<(usize, f64)>],
    root: usize,
    v: usize,
    parent: &mut Vec<usize>,
    product: f64,
) -> f64 {
    let n = adj.len();
    if v == n {
        return product;
    }
    if v == root {
        return enumerate_arborescences(adj, root, v + 1, parent, product);
    }
    let mut total = 0.0;
    for &(to, rate) in &adj[v] {
        parent[v] = to;
        // Reject if following parents from v returns to v.
        let mut cur = to;
        let mut cyclic = false;
        while cur != root && parent[cur] != usize::MAX {
            if cur == v {
                cyclic = true;
                break;
            }
            cur = parent[cur];
        }
        if cur == v {
            cyclic = true;
        }
        if !cyclic {
            total += enumerate_arborescences(adj, root, v + 1, parent, product * rate);
        }
        parent[v] = usize::MAX;
    }
    total
}

/// Stationary distribution of an irreducible chain from arborescence weights.
pub fn stationary_by_arborescences(chain: &ChainSpec) -> Result<ProbabilityVector> {
    let w = arborescence_weights(chain)?;
    if w.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::NotIrreducible("a state has no spanning arborescence".into()));
    }
    ProbabilityVector::normalized(w)
}

#[allow(dead_code)]
pub(crate) fn as_real<T: Real>(x: f64) -> T {
    T::from_f64(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn holding_rates_examples() {
        assert_eq!(catalog::three_cycle().holding_rates(), vec![1.0, 1.0, 1.0]);
        assert_eq!(catalog::two_state(2.0, 3.0).holding_rates(), vec![2.0, 3.0]);
        let rm5 = catalog::rm5().instantiate(10.0).unwrap();
        let m2 = rm5.state_index("-2").unwrap();
        assert!(close(rm5.holding_rates()[m2], 1.1, 1e-15));
    }

    #[test]
    fn generator_examples() {
        let c3 = catalog::three_cycle();
        assert_eq!(c3.apply_generator(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
        assert_eq!(c3.apply_generator(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 1.0, -2.0]);
        let two = catalog::two_state(2.0, 3.0);
        assert_eq!(two.apply_generator(&[0.0, 1.0]).unwrap(), vec![2.0, -3.0]);
    }

    #[test]
    fn stationary_examples() {
        let pi = catalog::two_state(2.0, 3.0).stationary_distribution().unwrap();
        assert!(close(pi.weights()[0], 0.6, 1e-15) && close(pi.weights()[1], 0.4, 1e-15));
        let pi = catalog::three_cycle().stationary_distribution().unwrap();
        assert!(pi.weights().iter().all(|&p| close(p, 1.0 / 3.0, 1e-15)));
        for &n in &[4.0, 100.0, 65536.0] {
            let chain = catalog::rm5().instantiate(n).unwrap();
            let pi = chain.stationary_distribution().unwrap();
            let un = [1.0, 1.0, 1.0 / n, 1.0 / (n * n), 1.0 / n, 1.0, 1.0];
            let z: f64 = un.iter().sum();
            for (p, u) in pi.weights().iter().zip(un) {
                assert!((p - u / z).abs() <= 1e-13 * (u / z));
            }
        }
    }

    #[test]
    fn stationary_rejects_reducible() {
        let lim = catalog::rm5().limit_chain().unwrap();
        assert!(matches!(lim.stationary_distribution(), Err(Error::NotIrreducible(_))));
    }

    #[test]
    fn class_decomposition_examples() {
        let d = catalog::three_cycle().class_decomposition();
        assert_eq!(d.closed_classes, vec![vec![0, 1, 2]]);
        assert!(d.transient.is_empty());

        let lim = catalog::rm5().limit_chain().unwrap();
        let d = lim.class_decomposition();
        let names = |v: &Vec<usize>| v.iter().map(|&i| lim.states()[i].clone()).collect::<Vec<_>>();
        assert_eq!(names(&d.closed_classes[0]), vec!["-3", "-2"]);
        assert_eq!(names(&d.closed_classes[1]), vec!["2", "3"]);
        assert_eq!(names(&d.transient), vec!["-1", "0", "1"]);

        let (first, _) = catalog::ex02_pair();
        let d = first.class_decomposition();
        assert_eq!(d.closed_classes, vec![vec![1, 2]]);
        assert_eq!(d.transient, vec![0]);
    }

    #[test]
    fn limit_and_instantiate() {
        let fam = catalog::rm5();
        let lim = fam.limit_chain().unwrap();
        assert_eq!(lim.edges().len(), 8);
        let c = fam.instantiate(100.0).unwrap();
        let (a, b) = (c.state_index("-2").unwrap(), c.state_index("-1").unwrap());
        assert!(close(c.rate(a, b), 0.01, 1e-17));

        let flat = ParamChainSpec::constant(&catalog::three_cycle());
        assert_eq!(flat.limit_chain().unwrap(), flat.instantiate(37.0).unwrap());

        let all_small = ParamChainSpec::named(&["a", "b"], &[("a", "b", 1.0, 1), ("b", "a", 1.0, 2)]).unwrap();
        assert_eq!(all_small.limit_chain(), Err(Error::EmptyLimit));
    }

    #[test]
    fn param_spec_rejects_bad_input() {
        let bad = ParamChainSpec::named(&["a", "b"], &[("a", "b", 1.0, -1)]);
        assert!(bad.is_err());
        let bad = ParamChainSpec::named(&["a", "b"], &[("a", "b", 0.0, 0)]);
        assert!(bad.is_err());
    }

    #[test]
    fn chain_spec_rejects_bad_input() {
        assert!(ChainSpec::named(&["a", "b"], &[("a", "b", -1.0)]).is_err());
        assert!(ChainSpec::named(&["a", "b"], &[("a", "a", 1.0)]).is_err());
        assert!(ChainSpec::named(&["a", "b"], &[("a", "b", 1.0), ("a", "b", 2.0)]).is_err());
        assert!(ChainSpec::named(&["a", "b"], &[("a", "c", 1.0)]).is_err());
        assert!(ChainSpec::named(&["a", "a"], &[]).is_err());
    }

    #[test]
    fn hitting_examples() {
        let path = ChainSpec::named(
            &["a", "b", "c"],
            &[("a", "b", 1.0), ("b", "a", 1.0), ("b", "c", 1.0), ("c", "b", 1.0)],
        )
        .unwrap();
        let h = path.hitting_probability(&[2], &[0]).unwrap();
        assert_eq!(h[2], 1.0);
        assert!(close(h[1], 0.5, 1e-15));
        let h = catalog::three_cycle().hitting_probability(&[2], &[0]).unwrap();
        assert!(close(h[1], 1.0, 1e-15));
    }

    #[test]
    fn hitting_singular_when_trapped() {
        let c = ChainSpec::named(&["a", "b", "c"], &[("a", "b", 1.0), ("c", "b", 1.0)]).unwrap();
        // b is absorbing and neither target nor avoid
        assert!(matches!(c.hitting_probability(&[2], &[0]), Err(Error::SingularSystem(_))));
    }

    #[test]
    fn two_state_capacity() {
        let c = catalog::two_state(2.0, 3.0);
        let cap = c.capacity(&[0], &[1]).unwrap();
        assert!(close(cap, 6.0 / 5.0, 1e-14));
        let cap2 = c.capacity_by_trace(&[0], &[1], Precision::Double).unwrap();
        assert!(close(cap2, 6.0 / 5.0, 1e-14));
    }

    #[test]
    fn trace_examples() {
        let c = ChainSpec::named(
            &["a", "b", "c"],
            &[("a", "b", 2.0), ("b", "a", 1.0), ("b", "c", 3.0), ("c", "b", 5.0)],
        )
        .unwrap();
        let same = c.trace_chain(&[0, 1, 2]).unwrap();
        assert_eq!(same, c);
        let t = c.trace_chain(&[0, 2]).unwrap();
        assert!(close(t.rate(0, 1), 2.0 * 3.0 / 4.0, 1e-15));
        assert!(matches!(
            ChainSpec::named(&["a", "b"], &[("a", "b", 1.0)]).unwrap().trace_chain(&[0]),
            Err(Error::Unreachable(_))
        ));
    }

    #[test]
    fn tilted_two_state() {
        let c = catalog::two_state(2.0, 3.0);
        let t = c.tilted(&[0.0, 2f64.ln()]).unwrap();
        assert!(close(t.rate(0, 1), 4.0, 1e-14));
        assert!(close(t.rate(1, 0), 1.5, 1e-14));
    }

    #[test]
    fn arborescence_matches_two_state() {
        let w = arborescence_weights(&catalog::two_state(2.0, 3.0)).unwrap();
        assert_eq!(w, vec![3.0, 2.0]);
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("s{i}")).collect()
    }

    /// Random digraph on 2..=6 states; with `ring` a directed ring is added
    /// so the chain is irreducible.
    fn random_chain(ring: bool) -> impl Strategy<Value = ChainSpec> {
        (2usize..=6)
            .prop_flat_map(|n| (Just(n), proptest::collection::vec(proptest::option::weighted(0.5, 0.1f64..5.0), n * n)))
            .prop_map(move |(n, rates)| {
                let mut edges = Vec::new();
                for a in 0..n {
                    for b in 0..n {
                        let on_ring = ring && b == (a + 1) % n;
                        match rates[a * n + b] {
                            Some(r) if a != b => edges.push((a, b, r)),
                            None if on_ring && a != b => edges.push((a, b, 1.0)),
                            _ => {}
                        }
                    }
                }
                if edges.is_empty() {
                    edges.push((0, 1, 1.0));
                }
                ChainSpec::new(names(n), edges).unwrap()
            })
    }

    /// Reversible chain `R(x,y) = c(x,y) / w(x)` with symmetric conductances
    /// on a connected graph.
    fn reversible_chain() -> impl Strategy<Value = ChainSpec> {
        (3usize..=6)
            .prop_flat_map(|n| {
                (
                    Just(n),
                    proptest::collection::vec(0.2f64..2.0, n),
                    proptest::collection::vec(proptest::option::weighted(0.5, 0.1f64..3.0), n * n),
                )
            })
            .prop_map(|(n, w, c)| {
                let mut edges = Vec::new();
                for a in 0..n {
                    for b in a + 1..n {
                        let cond = match c[a * n + b] {
                            Some(v) => v,
                            None if b == a + 1 => 1.0,
                            None => continue,
                        };
                        edges.push((a, b, cond / w[a]));
                        edges.push((b, a, cond / w[b]));
                    }
                }
                ChainSpec::new(names(n), edges).unwrap()
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn stationary_solves_balance_and_matches_arborescences(chain in random_chain(true)) {
            let pi = chain.stationary_distribution().unwrap();
            let scale = chain.holding_rates().iter().fold(1.0_f64, |m, v| m.max(*v));
            let residual = chain.adjoint_apply(pi.weights()).iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            prop_assert!(residual < 1e-10 * scale, "{residual}");
            let tree = stationary_by_arborescences(&chain).unwrap();
            for (a, b) in pi.weights().iter().zip(tree.weights()) {
                prop_assert!((a - b).abs() <= 1e-10 * b.max(1e-300), "{a} vs {b}");
            }
        }

        #[test]
        fn class_decomposition_partitions_states(chain in random_chain(false)) {
            let d = chain.class_decomposition();
            let mut all: Vec<usize> = d.closed_classes.iter().flatten().copied().chain(d.transient.iter().copied()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..chain.n_states()).collect::<Vec<_>>());
            prop_assert!(!d.closed_classes.is_empty());
            for class in &d.closed_classes {
                for e in chain.edges() {
                    prop_assert!(!class.contains(&e.from) || class.contains(&e.to));
                }
            }
        }

        #[test]
        fn hitting_probabilities_bounded_and_monotone(chain in random_chain(true)) {
            let n = chain.n_states();
            prop_assume!(n >= 3);
            let avoid = [n - 1];
            let small = chain.hitting_probability(&[0], &avoid).unwrap();
            let large = chain.hitting_probability(&[0, 1], &avoid).unwrap();
            for (a, b) in small.iter().zip(&large) {
                prop_assert!((0.0..=1.0).contains(a) && (0.0..=1.0).contains(b));
                prop_assert!(*b >= a - 1e-12);
            }
        }

        #[test]
        fn capacity_positive_and_symmetric_when_reversible(chain in reversible_chain()) {
            let n = chain.n_states();
            let (a, b) = (vec![0], vec![n - 1]);
            let ab = chain.capacity(&a, &b).unwrap();
            let ba = chain.capacity(&b, &a).unwrap();
            prop_assert!(ab > 0.0);
            prop_assert!((ab - ba).abs() <= 1e-10 * ab, "{ab} vs {ba}");
        }

        #[test]
        fn capacity_positive_on_irreducible(chain in random_chain(true)) {
            let n = chain.n_states();
            prop_assert!(chain.capacity(&[0], &[n - 1]).unwrap() > 0.0);
        }

        #[test]
        fn trace_preserves_conditioned_measure(chain in random_chain(true), cut in 1usize..5) {
            let n = chain.n_states();
            let keep: Vec<usize> = (0..n).filter(|x| x % (cut + 1) != 1 || *x == 0).collect();
            prop_assume!(!keep.is_empty() && keep.len() < n);
            let pi = chain.stationary_distribution().unwrap();
            let mass = pi.mass(&keep);
            let traced = chain.trace_chain(&keep).unwrap().stationary_distribution().unwrap();
            for (i, &x) in keep.iter().enumerate() {
                prop_assert!((traced.weights()[i] - pi.weights()[x] / mass).abs() <= 1e-9);
            }
        }
    }
}
