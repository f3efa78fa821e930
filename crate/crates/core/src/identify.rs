//! Recovering a chain from its rate functional, and the two examples showing
//! where that fails.
//!
//! Oracles are black boxes returning functional values only. Minimization
//! uses finite-difference Newton steps, in softmax coordinates for measures
//! and in cycle-space coordinates for divergence-free currents.

use crate::chain::{ChainSpec, ProbabilityVector};
use crate::error::{Error, Result};
use crate::flows::Flow;
use crate::rate::{bfg_rate, dv_rate_projection, phi, ExtendedValue};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Black-box DV functional.
pub trait DvOracle {
    fn n_states(&self) -> usize;
    fn evaluate(&self, mu: &ProbabilityVector) -> Result<ExtendedValue>;
}

/// Black-box measure-current functional.
pub trait BfgOracle {
    fn n_states(&self) -> usize;
    fn evaluate(&self, mu: &ProbabilityVector, j: &Flow) -> Result<ExtendedValue>;
}

/// Counts the queries passed through to an oracle.
struct Counted<'a, O: ?Sized> {
    inner: &'a O,
    calls: AtomicUsize,
}

impl<'a, O: ?Sized> Counted<'a, O> {
    fn new(inner: &'a O) -> Self {
        Counted { inner, calls: AtomicUsize::new(0) }
    }

    fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl DvOracle for Counted<'_, dyn DvOracle + '_> {
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    fn evaluate(&self, mu: &ProbabilityVector) -> Result<ExtendedValue> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(mu)
    }
}

impl BfgOracle for Counted<'_, dyn BfgOracle + '_> {
    fn n_states(&self) -> usize {
        self.inner.n_states()
    }

    fn evaluate(&self, mu: &ProbabilityVector, j: &Flow) -> Result<ExtendedValue> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(mu, j)
    }
}

/// DV oracle backed by a hidden chain.
#[derive(Debug)]
pub struct ChainDvOracle {
    chain: ChainSpec,
    calls: AtomicUsize,
}

impl ChainDvOracle {
    pub fn new(chain: ChainSpec) -> Self {
        ChainDvOracle { chain, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl DvOracle for ChainDvOracle {
    fn n_states(&self) -> usize {
        self.chain.n_states()
    }

    fn evaluate(&self, mu: &ProbabilityVector) -> Result<ExtendedValue> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        Ok(ExtendedValue::Finite(dv_rate_projection(&self.chain, mu)?))
    }
}

/// Measure-current oracle backed by a hidden chain.
#[derive(Debug)]
pub struct ChainBfgOracle {
    chain: ChainSpec,
    calls: AtomicUsize,
}

impl ChainBfgOracle {
    pub fn new(chain: ChainSpec) -> Self {
        ChainBfgOracle { chain, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl BfgOracle for ChainBfgOracle {
    fn n_states(&self) -> usize {
        self.chain.n_states()
    }

    fn evaluate(&self, mu: &ProbabilityVector, j: &Flow) -> Result<ExtendedValue> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        bfg_rate(&self.chain, mu, j)
    }
}

/// One precomputed oracle answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub mu: Vec<f64>,
    pub value: ExtendedValue,
}

/// DV oracle answering from a table of precomputed values; queries off the
/// table are errors. Tables from [`TableOracle::tabulate_products`] cover
/// exactly the queries of [`recover_holding_and_products`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableOracle {
    pub states: Vec<String>,
    pub entries: Vec<TableEntry>,
}

impl TableOracle {
    pub fn tabulate_products(oracle: &dyn DvOracle, states: &[String]) -> Result<Self> {
        let entries = product_queries(states.len())
            .into_iter()
            .map(|mu| Ok(TableEntry { value: oracle.evaluate(&mu)?, mu: mu.weights().to_vec() }))
            .collect::<Result<_>>()?;
        Ok(TableOracle { states: states.to_vec(), entries })
    }
}

impl DvOracle for TableOracle {
    fn n_states(&self) -> usize {
        self.states.len()
    }

    fn evaluate(&self, mu: &ProbabilityVector) -> Result<ExtendedValue> {
        self.entries
            .iter()
            .find(|e| e.mu.len() == mu.len() && e.mu.iter().zip(mu.weights()).all(|(a, b)| (a - b).abs() <= 1e-12))
            .map(|e| e.value)
            .ok_or_else(|| Error::InvalidArgument(format!("oracle table has no entry for {:?}", mu.weights())))
    }
}

fn product_queries(n: usize) -> Vec<ProbabilityVector> {
    let mut out: Vec<ProbabilityVector> = (0..n).map(|z| ProbabilityVector::dirac(n, z)).collect();
    for x in 0..n {
        for y in x + 1..n {
            out.push(pair_mixture(n, x, y));
        }
    }
    out
}

fn pair_mixture(n: usize, x: usize, y: usize) -> ProbabilityVector {
    let mut w = vec![0.0; n];
    w[x] = 0.5;
    w[y] = 0.5;
    ProbabilityVector::new(w).expect("valid mixture")
}

fn finite(v: ExtendedValue, what: &str) -> Result<f64> {
    v.finite().ok_or_else(|| Error::InvalidArgument(format!("oracle returned +inf at {what}")))
}

/// Holding rates and products of opposite rates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoldingAndProducts {
    pub holding: Vec<f64>,
    /// `R(x,y) R(y,x)` keyed by `(x, y)` with `x < y`.
    pub products: BTreeMap<(usize, usize), f64>,
}

impl HoldingAndProducts {
    pub fn product(&self, x: usize, y: usize) -> f64 {
        let key = if x < y { (x, y) } else { (y, x) };
        self.products.get(&key).copied().unwrap_or(0.0)
    }

    /// Groups of states linked by positive products.
    pub fn product_components(&self, threshold: f64) -> Vec<Vec<usize>> {
        let n = self.holding.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            let mut r = x;
            while p[r] != r {
                r = p[r];
            }
            p[x] = r;
            r
        }
        for (&(x, y), &v) in &self.products {
            if v > threshold {
                let (a, b) = (find(&mut parent, x), find(&mut parent, y));
                parent[a.max(b)] = a.min(b);
            }
        }
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for x in 0..n {
            let r = find(&mut parent, x);
            groups.entry(r).or_default().push(x);
        }
        groups.into_values().collect()
    }
}

/// `lambda(z) = I(delta_z)`; `R(x,y)R(y,x) = ((lambda(x)+lambda(y))/2 - I(delta_x/2 + delta_y/2))^2`.
pub fn recover_holding_and_products(oracle: &dyn DvOracle) -> Result<HoldingAndProducts> {
    let n = oracle.n_states();
    let holding: Vec<f64> = (0..n)
        .map(|z| finite(oracle.evaluate(&ProbabilityVector::dirac(n, z))?, "a Dirac mass"))
        .collect::<Result<_>>()?;
    let mut products = BTreeMap::new();
    for x in 0..n {
        for y in x + 1..n {
            let v = finite(oracle.evaluate(&pair_mixture(n, x, y))?, "a two-point mixture")?;
            let root = 0.5 * (holding[x] + holding[y]) - v;
            let tol = 1e-9 * (1.0 + holding[x] + holding[y]);
            if root < -tol {
                return Err(Error::NegativeRoot(root));
            }
            // Roots inside the noise band are missing edge pairs.
            products.insert((x, y), if root <= tol { 0.0 } else { root * root });
        }
    }
    Ok(HoldingAndProducts { holding, products })
}

/// Minimize `f` by Newton steps on central finite differences.
///
/// `f` may return `+inf` outside its domain; the line search backs off
/// from such points. Stops once the gradient sup-norm drops below `tol`
/// or no step decreases `f`.
fn fd_newton(f: &dyn Fn(&[f64]) -> f64, x0: Vec<f64>, tol: f64, max_iter: usize) -> Result<(Vec<f64>, f64, f64)> {
    let d = x0.len();
    let mut x = x0;
    let mut fx = f(&x);
    if !fx.is_finite() {
        return Err(Error::InvalidArgument("minimization starts outside the domain".into()));
    }
    if d == 0 {
        return Ok((x, fx, 0.0));
    }
    let h = 1e-4;
    let shifted = |x: &[f64], i: usize, a: f64, j: usize, b: f64| -> f64 {
        let mut y = x.to_vec();
        y[i] += a;
        y[j] += b;
        f(&y)
    };
    let mut gnorm = f64::INFINITY;
    for _ in 0..max_iter {
        let mut g = DVector::zeros(d);
        let mut hess = DMatrix::zeros(d, d);
        for i in 0..d {
            let fp = shifted(&x, i, h, i, 0.0);
            let fm = shifted(&x, i, -h, i, 0.0);
            g[i] = (fp - fm) / (2.0 * h);
            hess[(i, i)] = (fp - 2.0 * fx + fm) / (h * h);
            for j in 0..i {
                let v = (shifted(&x, i, h, j, h) - shifted(&x, i, h, j, -h) - shifted(&x, i, -h, j, h)
                    + shifted(&x, i, -h, j, -h))
                    / (4.0 * h * h);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
            }
        }
        if g.iter().any(|v| !v.is_finite()) {
            // Too close to the boundary for the stencil; stop here.
            return Ok((x, fx, gnorm));
        }
        gnorm = g.amax();
        if gnorm <= tol {
            return Ok((x, fx, gnorm));
        }
        // Levenberg shift until the model is convex.
        let mut shift = 0.0;
        let step = loop {
            let mut m = hess.clone();
            for i in 0..d {
                m[(i, i)] += shift;
            }
            if let Some(ch) = m.cholesky() {
                break ch.solve(&(-&g));
            }
            shift = if shift == 0.0 { 1e-8 * (1.0 + hess.amax()) } else { shift * 10.0 };
        };
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-10 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let ft = f(&trial);
            if ft.is_finite() && ft <= fx {
                moved = ft < fx || trial != x;
                x = trial;
                fx = ft;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            return Ok((x, fx, gnorm));
        }
    }
    Ok((x, fx, gnorm))
}

fn softmax_on(n: usize, support: &[usize], theta: &[f64]) -> Result<ProbabilityVector> {
    let mut full = vec![0.0; n];
    let mut logits = vec![0.0];
    logits.extend_from_slice(theta);
    let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    for (&x, &l) in support.iter().zip(&logits) {
        full[x] = (l - m).exp();
    }
    ProbabilityVector::normalized(full)
}

/// Minimizer of the DV oracle over measures supported on `support`.
fn minimize_on(oracle: &dyn DvOracle, support: &[usize]) -> Result<(ProbabilityVector, f64)> {
    let n = oracle.n_states();
    let objective = |theta: &[f64]| -> f64 {
        match softmax_on(n, support, theta).and_then(|mu| oracle.evaluate(&mu)) {
            Ok(v) => v.value(),
            Err(_) => f64::INFINITY,
        }
    };
    let (theta, value, _) = fd_newton(&objective, vec![0.0; support.len() - 1], 1e-11, 100)?;
    Ok((softmax_on(n, support, &theta)?, value))
}

/// Stationary profiles of the closed classes, with notes on anything the
/// oracle could not resolve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileReport {
    pub classes: Vec<Vec<usize>>,
    #[serde(skip)]
    pub profiles: Vec<ProbabilityVector>,
    /// States in no recovered class.
    pub unresolved: Vec<usize>,
    pub notes: Vec<String>,
}

const ZERO: f64 = 1e-9;
const SUPPORT: f64 = 1e-5;

/// Minimize the oracle on each group of states linked by positive products;
/// groups whose minimum is positive are merged and minimized jointly, and
/// the support of every zero found is split off as a class.
pub fn recover_stationary_profiles(oracle: &dyn DvOracle, hp: &HoldingAndProducts) -> Result<ProfileReport> {
    let n = oracle.n_states();
    let scale = hp.holding.iter().fold(1.0_f64, |a, &b| a.max(b));
    let groups = hp.product_components(1e-12 * scale * scale);
    let mut classes = Vec::new();
    let mut profiles = Vec::new();
    let mut unresolved: Vec<usize> = Vec::new();
    let mut notes = Vec::new();
    for g in groups {
        let (mu, v) = minimize_on(oracle, &g)?;
        if v <= ZERO * scale && mu.first_zero().map_or(true, |_| g.iter().all(|&x| mu.weights()[x] > SUPPORT)) {
            classes.push(g);
            profiles.push(mu);
        } else {
            unresolved.extend(g);
        }
    }
    // Zeros of the merged remainder are classes without reverse edges.
    while !unresolved.is_empty() {
        unresolved.sort_unstable();
        let (mu, v) = minimize_on(oracle, &unresolved)?;
        if v > ZERO * scale {
            notes.push(format!("no zero among states {unresolved:?} (minimum {v:e}); treated as transient"));
            break;
        }
        let support: Vec<usize> = unresolved.iter().copied().filter(|&x| mu.weights()[x] > SUPPORT).collect();
        let (mu, v) = if support.len() < unresolved.len() { minimize_on(oracle, &support)? } else { (mu, v) };
        if v > ZERO * scale || support.is_empty() {
            notes.push(format!("zero among {unresolved:?} could not be isolated"));
            break;
        }
        if support.len() > 1 && hp.product_components(0.0).len() < n {
            notes.push(format!("class {support:?} found without reverse edges; its rates are not identified by products"));
        }
        unresolved.retain(|x| !support.contains(x));
        classes.push(support);
        profiles.push(mu);
    }
    let order = {
        let mut idx: Vec<usize> = (0..classes.len()).collect();
        idx.sort_by_key(|&i| classes[i][0]);
        idx
    };
    Ok(ProfileReport {
        classes: order.iter().map(|&i| classes[i].clone()).collect(),
        profiles: order.iter().map(|&i| profiles[i].clone()).collect(),
        unresolved,
        notes,
    })
}

/// A recovered chain with its consistency checks against the oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct Recovery {
    pub chain: ChainSpec,
    pub classes: Vec<Vec<usize>>,
    /// Largest `|lambda(x) - sum_y R'(x,y)|`.
    pub holding_mismatch: f64,
    /// Largest difference between the oracle and the functional of the
    /// recovered chain on the probe set.
    pub oracle_mismatch: f64,
    pub notes: Vec<String>,
    pub oracle_calls: usize,
}

impl Recovery {
    /// True when the recovered chain reproduces the oracle on the probes.
    pub fn consistent(&self, tol: f64) -> bool {
        self.holding_mismatch <= tol && self.oracle_mismatch <= tol
    }

    /// Largest relative error against a reference chain over the union of
    /// both edge sets.
    pub fn max_relative_error(&self, reference: &ChainSpec) -> f64 {
        max_relative_rate_error(&self.chain, reference)
    }
}

pub fn max_relative_rate_error(a: &ChainSpec, b: &ChainSpec) -> f64 {
    let mut worst = 0.0_f64;
    for e in a.edges().iter().chain(b.edges()) {
        let (x, y) = (a.rate(e.from, e.to), b.rate(e.from, e.to));
        let d = (x - y).abs() / x.abs().max(y.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max(d);
    }
    worst
}

fn dv_probes(n: usize) -> Vec<ProbabilityVector> {
    let mut out = product_queries(n);
    out.push(ProbabilityVector::uniform(n));
    let mut w: Vec<f64> = (1..=n).map(|i| i as f64).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    out.push(ProbabilityVector::new(w).expect("valid"));
    out
}

/// Reversible recovery: `R(x,y)^2 = (pi_j(y)/pi_j(x)) R(x,y) R(y,x)` within
/// each class. The result is compared with the oracle, which exposes
/// non-reversible hidden chains.
pub fn recover_reversible(oracle: &dyn DvOracle, states: &[String]) -> Result<Recovery> {
    let counted = Counted::new(oracle);
    let oracle: &dyn DvOracle = &counted;
    let n = oracle.n_states();
    if states.len() != n {
        return Err(Error::InvalidArgument("state names do not match the oracle".into()));
    }
    let hp = recover_holding_and_products(oracle)?;
    let profiles = recover_stationary_profiles(oracle, &hp)?;
    let mut edges = Vec::new();
    for (class, pi) in profiles.classes.iter().zip(&profiles.profiles) {
        for &x in class {
            for &y in class {
                let p = if x != y { hp.product(x, y) } else { 0.0 };
                if p > 0.0 {
                    let r = (pi.weights()[y] / pi.weights()[x] * p).sqrt();
                    edges.push((x, y, r));
                }
            }
        }
    }
    let chain = ChainSpec::new(states.to_vec(), edges)?;
    let holding_mismatch = chain
        .holding_rates()
        .iter()
        .zip(&hp.holding)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    let mut oracle_mismatch = 0.0_f64;
    for mu in dv_probes(n) {
        let a = oracle.evaluate(&mu)?.value();
        let b = dv_rate_projection(&chain, &mu)?;
        oracle_mismatch = oracle_mismatch.max((a - b).abs());
    }
    let mut notes = profiles.notes;
    if !profiles.unresolved.is_empty() {
        notes.push(format!("states {:?} belong to no recovered class", profiles.unresolved));
    }
    if holding_mismatch > 1e-6 || oracle_mismatch > 1e-6 {
        notes.push("recovered reversible chain does not reproduce the oracle; the hidden chain is not reversible".into());
    }
    Ok(Recovery { chain, classes: profiles.classes, holding_mismatch, oracle_mismatch, notes, oracle_calls: counted.calls() })
}

/// Simple cycles of the complete digraph on `n` states, smallest state first.
fn simple_cycles(n: usize) -> Vec<Vec<usize>> {
    fn extend(path: &mut Vec<usize>, used: &mut [bool], n: usize, out: &mut Vec<Vec<usize>>) {
        if path.len() >= 2 {
            out.push(path.clone());
        }
        for v in path[0] + 1..n {
            if !used[v] {
                used[v] = true;
                path.push(v);
                extend(path, used, n, out);
                path.pop();
                used[v] = false;
            }
        }
    }
    let mut out = Vec::new();
    for s in 0..n {
        let mut used = vec![false; n];
        used[s] = true;
        extend(&mut vec![s], &mut used, n, &mut out);
    }
    out
}

fn cycle_edges(c: &[usize]) -> Vec<(usize, usize)> {
    (0..c.len()).map(|i| (c[i], c[(i + 1) % c.len()])).collect()
}

/// Largest state count for edge discovery by cycle enumeration.
pub const MAX_BFG_STATES: usize = 8;

/// Recovery from the measure-current functional for chains whose states are
/// all recurrent. Edges are the union of the simple cycles with finite
/// value; on each class the zero `(pi_j, J*)` is located and
/// `R(x,y) = J*(x,y) / pi_j(x)`.
pub fn recover_from_bfg(oracle: &dyn BfgOracle, states: &[String]) -> Result<Recovery> {
    let counted = Counted::new(oracle);
    let oracle: &dyn BfgOracle = &counted;
    let n = oracle.n_states();
    if states.len() != n {
        return Err(Error::InvalidArgument("state names do not match the oracle".into()));
    }
    if n > MAX_BFG_STATES {
        return Err(Error::InvalidArgument(format!("edge discovery supports at most {MAX_BFG_STATES} states")));
    }
    let uniform = ProbabilityVector::uniform(n);
    let mut known: Vec<(usize, usize)> = Vec::new();
    let mut finite_cycles: Vec<Vec<(usize, usize)>> = Vec::new();
    for c in simple_cycles(n) {
        let ce = cycle_edges(&c);
        if ce.iter().all(|e| known.contains(e)) {
            finite_cycles.push(ce);
            continue;
        }
        let flow = Flow::new(n, ce.clone(), vec![1.0; ce.len()])?;
        if oracle.evaluate(&uniform, &flow)?.is_finite() {
            for e in &ce {
                if !known.contains(e) {
                    known.push(*e);
                }
            }
            finite_cycles.push(ce);
        }
    }
    known.sort_unstable();
    let zero_flow = Flow::new(n, Vec::new(), Vec::new())?;
    let holding: Vec<f64> = (0..n)
        .map(|z| finite(oracle.evaluate(&ProbabilityVector::dirac(n, z), &zero_flow)?, "a Dirac mass"))
        .collect::<Result<_>>()?;
    let classes = crate::chain::scc(n, known.iter().copied());
    let mut edges = Vec::new();
    let mut notes = Vec::new();
    for class in &classes {
        let class_edges: Vec<(usize, usize)> =
            known.iter().copied().filter(|(a, _)| class.contains(a)).collect();
        if class_edges.is_empty() {
            if holding[class[0]] > 1e-12 {
                notes.push(format!("state {} has holding rate {} but lies on no cycle", class[0], holding[class[0]]));
            }
            continue;
        }
        let cycles: Vec<&Vec<(usize, usize)>> =
            finite_cycles.iter().filter(|c| c.iter().all(|e| class_edges.contains(e))).collect();
        let (mu, j) = locate_zero(oracle, class, &class_edges, &cycles, &holding)?;
        for (&(a, b), &v) in class_edges.iter().zip(&j) {
            edges.push((a, b, v / mu[a]));
        }
    }
    let chain = ChainSpec::new(states.to_vec(), edges)?;
    let holding_mismatch = chain
        .holding_rates()
        .iter()
        .zip(&holding)
        .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()));
    if holding_mismatch > 1e-6 {
        notes.push("holding rates disagree with the recovered chain; some states may be transient".into());
    }
    let mut oracle_mismatch = 0.0_f64;
    for mu in dv_probes(n) {
        let j = crate::flows::induced_current(&chain.stationary_distribution().unwrap_or(mu.clone()), &chain)?;
        let a = oracle.evaluate(&mu, &j)?;
        let b = bfg_rate(&chain, &mu, &j)?;
        if a.is_finite() != b.is_finite() {
            oracle_mismatch = f64::INFINITY;
        } else if a.is_finite() {
            oracle_mismatch = oracle_mismatch.max((a.value() - b.value()).abs());
        }
    }
    Ok(Recovery { chain, classes, holding_mismatch, oracle_mismatch, notes, oracle_calls: counted.calls() })
}

/// Orthonormal basis of the divergence-free currents on `edges` over `class`.
fn cycle_space(class: &[usize], edges: &[(usize, usize)]) -> DMatrix<f64> {
    let k = class.len();
    let m = edges.len();
    let mut a = DMatrix::zeros(k, m);
    for (e, &(x, y)) in edges.iter().enumerate() {
        let ix = class.iter().position(|&s| s == x).expect("edge in class");
        let iy = class.iter().position(|&s| s == y).expect("edge in class");
        a[(ix, e)] += 1.0;
        a[(iy, e)] -= 1.0;
    }
    let eig: SymmetricEigen<f64, nalgebra::Dyn> = SymmetricEigen::new(a.transpose() * &a);
    let cols: Vec<DVector<f64>> = (0..m)
        .filter(|&i| eig.eigenvalues[i].abs() < 1e-9)
        .map(|i| eig.eigenvectors.column(i).clone_owned())
        .collect();
    if cols.is_empty() {
        DMatrix::zeros(m, 0)
    } else {
        DMatrix::from_columns(&cols)
    }
}

fn locate_zero(
    oracle: &dyn BfgOracle,
    class: &[usize],
    edges: &[(usize, usize)],
    cycles: &[&Vec<(usize, usize)>],
    holding: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = oracle.n_states();
    let k = class.len();
    let m = edges.len();
    let basis = cycle_space(class, edges);
    let d = basis.ncols();
    // Start from the sum of the finite cycles, scaled to the total flux of
    // the uniform measure on the class.
    let mut j0 = vec![0.0; m];
    for c in cycles {
        for e in c.iter() {
            let i = edges.iter().position(|x| x == e).expect("cycle edge");
            j0[i] += 1.0;
        }
    }
    let flux: f64 = class.iter().map(|&x| holding[x]).sum::<f64>() / k as f64;
    let total: f64 = j0.iter().sum();
    j0.iter_mut().for_each(|v| *v *= flux / total);
    let j0v = DVector::from_vec(j0);
    let unpack = |p: &[f64]| -> Result<(ProbabilityVector, Vec<f64>)> {
        let mu = softmax_on(n, class, &p[..k - 1])?;
        let alpha = DVector::from_column_slice(&p[k - 1..]);
        let j = &j0v + &basis * alpha;
        Ok((mu, j.iter().copied().collect()))
    };
    let objective = |p: &[f64]| -> f64 {
        let Ok((mu, j)) = unpack(p) else { return f64::INFINITY };
        if j.iter().any(|v| !(*v > 0.0)) {
            return f64::INFINITY;
        }
        match Flow::new(n, edges.to_vec(), j).and_then(|f| oracle.evaluate(&mu, &f)) {
            Ok(v) => v.value(),
            Err(_) => f64::INFINITY,
        }
    };
    let (p, value, gnorm) = fd_newton(&objective, vec![0.0; k - 1 + d], 1e-11, 200)?;
    if value > 1e-8 * (1.0 + flux) {
        return Err(Error::NonConvergence { iterations: 200, residual: gnorm.max(value) });
    }
    let (mu, j) = unpack(&p)?;
    Ok((mu.weights().to_vec(), j))
}

/// Both orientations of the 3-cycle on a simplex grid against
/// `1 - 3 (mu_a mu_b mu_c)^(1/3)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DvCounterexampleReport {
    pub points: usize,
    /// Largest `|I(mu) - I'(mu)|`.
    pub max_difference: f64,
    /// Largest distance of either orientation from the closed form.
    pub max_closed_form_error: f64,
}

pub fn counterexample_dv(resolution: usize) -> Result<DvCounterexampleReport> {
    if resolution == 0 {
        return Err(Error::InvalidArgument("grid resolution must be positive".into()));
    }
    let fwd = crate::catalog::three_cycle();
    let rev = crate::catalog::three_cycle_reversed();
    let mut report = DvCounterexampleReport { points: 0, max_difference: 0.0, max_closed_form_error: 0.0 };
    let r = resolution as f64;
    for i in 0..=resolution {
        for j in 0..=resolution - i {
            let w = vec![i as f64 / r, j as f64 / r, (resolution - i - j) as f64 / r];
            let closed = 1.0 - 3.0 * (w[0] * w[1] * w[2]).cbrt();
            let mu = ProbabilityVector::new(w)?;
            let a = dv_rate_projection(&fwd, &mu)?;
            let b = dv_rate_projection(&rev, &mu)?;
            report.points += 1;
            report.max_difference = report.max_difference.max((a - b).abs());
            report.max_closed_form_error = report.max_closed_form_error.max((a - closed).abs()).max((b - closed).abs());
        }
    }
    Ok(report)
}

/// The two chains of [`crate::catalog::ex02_pair`] on random pairs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BfgCounterexampleReport {
    pub samples: usize,
    /// Largest `|I - I'|` over pairs where both are finite.
    pub max_difference: f64,
    /// Largest distance from `2 mu_a + Phi(t, mu_b) + Phi(t, mu_c)`.
    pub max_formula_error: f64,
    /// Pairs where exactly one side is infinite.
    pub finiteness_mismatches: usize,
    /// Non-divergence-free controls where both sides were `+inf`.
    pub infinite_controls: usize,
}

pub fn counterexample_bfg(samples: usize, rng: &mut impl Rng) -> Result<BfgCounterexampleReport> {
    let (first, second) = crate::catalog::ex02_pair();
    let universe = ChainSpec::named(
        &["a", "b", "c"],
        &[("a", "b", 1.0), ("a", "c", 1.0), ("b", "c", 1.0), ("c", "b", 1.0)],
    )?;
    let mut report = BfgCounterexampleReport {
        samples,
        max_difference: 0.0,
        max_formula_error: 0.0,
        finiteness_mismatches: 0,
        infinite_controls: 0,
    };
    for s in 0..samples {
        let mut w: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        // Every fifth sample sits on the boundary of the simplex.
        if s % 5 == 0 {
            w[rng.gen_range(0..3)] = 0.0;
        }
        let mu = ProbabilityVector::normalized(w)?;
        let t = if s % 7 == 0 { 0.0 } else { rng.gen_range(0.0..2.0) };
        let control = s % 4 == 3;
        let j = if control {
            Flow::from_triples(&universe, &[(0, 1, rng.gen_range(0.01..1.0)), (1, 2, t), (2, 1, t)])?
        } else {
            Flow::from_triples(&universe, &[(1, 2, t), (2, 1, t)])?
        };
        let a = bfg_rate(&first, &mu, &j)?;
        let b = bfg_rate(&second, &mu, &j)?;
        match (a, b) {
            (ExtendedValue::Finite(x), ExtendedValue::Finite(y)) => {
                report.max_difference = report.max_difference.max((x - y).abs());
                let w = mu.weights();
                let formula = 2.0 * w[0] + phi(t, w[1]).value() + phi(t, w[2]).value();
                report.max_formula_error = report.max_formula_error.max((x - formula).abs());
            }
            (ExtendedValue::Infinite, ExtendedValue::Infinite) => {
                if control {
                    report.infinite_controls += 1;
                }
            }
            _ => report.finiteness_mismatches += 1,
        }
    }
    Ok(report)
}

/// Random reversible chain: detailed balance with respect to a random
/// measure, conductances on a random connected graph.
pub fn random_reversible_chain(n: usize, rng: &mut impl Rng) -> ChainSpec {
    let pi: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    let mut edges = Vec::new();
    for x in 0..n {
        for y in x + 1..n {
            if y == x + 1 || rng.gen_bool(0.4) {
                let c = rng.gen_range(0.2..2.0);
                edges.push((x, y, c / pi[x]));
                edges.push((y, x, c / pi[y]));
            }
        }
    }
    ChainSpec::new((0..n).map(|i| format!("s{i}")).collect(), edges).expect("valid chain")
}

/// Random chain made of 1 to 3 isolated strongly connected classes.
pub fn random_recurrent_chain(n: usize, rng: &mut impl Rng) -> ChainSpec {
    let k = rng.gen_range(1..=3.min(n));
    let mut cuts: Vec<usize> = (1..n).collect();
    rand::seq::SliceRandom::shuffle(cuts.as_mut_slice(), rng);
    let mut cuts: Vec<usize> = cuts.into_iter().take(k - 1).collect();
    cuts.sort_unstable();
    let mut bounds = vec![0];
    bounds.extend(cuts);
    bounds.push(n);
    let mut edges = Vec::new();
    for w in bounds.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let size = hi - lo;
        if size < 2 {
            continue;
        }
        for i in 0..size {
            let (x, y) = (lo + i, lo + (i + 1) % size);
            if size > 2 || i == 0 {
                edges.push((x, y, rng.gen_range(0.2..2.0)));
            }
        }
        if size == 2 {
            edges.push((lo + 1, lo, rng.gen_range(0.2..2.0)));
        }
        for x in lo..hi {
            for y in lo..hi {
                if x != y && y != lo + (x - lo + 1) % size && rng.gen_bool(0.3) {
                    edges.push((x, y, rng.gen_range(0.2..2.0)));
                }
            }
        }
    }
    ChainSpec::new((0..n).map(|i| format!("s{i}")).collect(), edges).expect("valid chain")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn names(c: &ChainSpec) -> Vec<String> {
        c.states().to_vec()
    }

    #[test]
    fn holding_and_products_examples() {
        let hp = recover_holding_and_products(&ChainDvOracle::new(catalog::three_cycle())).unwrap();
        assert!(hp.holding.iter().all(|&l| (l - 1.0).abs() < 1e-12));
        assert!(hp.products.values().all(|&p| p.abs() < 1e-12));

        let hp = recover_holding_and_products(&ChainDvOracle::new(catalog::two_state(2.0, 3.0))).unwrap();
        assert!((hp.holding[0] - 2.0).abs() < 1e-12 && (hp.holding[1] - 3.0).abs() < 1e-12);
        assert!((hp.product(0, 1) - 6.0).abs() < 1e-9);

        let walk = ChainSpec::named(
            &["0", "1", "2", "3"],
            &[
                ("0", "1", 1.0), ("1", "0", 1.0), ("1", "2", 1.0), ("2", "1", 1.0),
                ("2", "3", 1.0), ("3", "2", 1.0), ("3", "0", 1.0), ("0", "3", 1.0),
            ],
        )
        .unwrap();
        let hp = recover_holding_and_products(&ChainDvOracle::new(walk)).unwrap();
        assert!((hp.product(0, 1) - 1.0).abs() < 1e-9 && hp.product(0, 2).abs() < 1e-9);
    }

    #[test]
    fn profiles_examples() {
        let c3 = catalog::three_cycle();
        let o = ChainDvOracle::new(c3.clone());
        let hp = recover_holding_and_products(&o).unwrap();
        let rep = recover_stationary_profiles(&o, &hp).unwrap();
        assert_eq!(rep.classes, vec![vec![0, 1, 2]]);
        assert!(rep.profiles[0].sup_distance(&ProbabilityVector::uniform(3)) < 1e-6);

        let two_classes = ChainSpec::named(
            &["a", "b", "c", "d"],
            &[("a", "b", 1.0), ("b", "a", 2.0), ("c", "d", 0.5), ("d", "c", 1.5)],
        )
        .unwrap();
        let o = ChainDvOracle::new(two_classes);
        let hp = recover_holding_and_products(&o).unwrap();
        let rep = recover_stationary_profiles(&o, &hp).unwrap();
        assert_eq!(rep.classes, vec![vec![0, 1], vec![2, 3]]);
        assert!((rep.profiles[0].weights()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((rep.profiles[1].weights()[2] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn reversible_recovery() {
        let two = catalog::two_state(2.0, 3.0);
        let oracle = ChainDvOracle::new(two.clone());
        let rec = recover_reversible(&oracle, &names(&two)).unwrap();
        assert!(rec.max_relative_error(&two) < 1e-6 && rec.consistent(1e-6), "{rec:?}");
        assert_eq!(rec.oracle_calls, oracle.calls());
        assert!(rec.oracle_calls > 0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let hidden = random_reversible_chain(5, &mut rng);
        let rec = recover_reversible(&ChainDvOracle::new(hidden.clone()), &names(&hidden)).unwrap();
        assert!(rec.max_relative_error(&hidden) < 1e-4, "{}", rec.max_relative_error(&hidden));
    }

    #[test]
    fn non_reversible_is_detected() {
        let c3 = catalog::three_cycle();
        let rec = recover_reversible(&ChainDvOracle::new(c3.clone()), &names(&c3)).unwrap();
        assert!(!rec.consistent(1e-6));
        assert!(rec.notes.iter().any(|n| n.contains("not reversible")));
    }

    #[test]
    fn bfg_recovery_examples() {
        let c3 = catalog::three_cycle();
        let rec = recover_from_bfg(&ChainBfgOracle::new(c3.clone()), &names(&c3)).unwrap();
        assert!(rec.max_relative_error(&c3) < 1e-6, "{rec:?}");
        assert!(!rec.chain.has_edge(1, 0));

        let isolated = ChainSpec::named(
            &["a", "b", "c", "d"],
            &[("a", "b", 1.0), ("b", "a", 2.0), ("c", "d", 0.5), ("d", "c", 1.5)],
        )
        .unwrap();
        let rec = recover_from_bfg(&ChainBfgOracle::new(isolated.clone()), &names(&isolated)).unwrap();
        assert!(rec.max_relative_error(&isolated) < 1e-6);
        assert_eq!(rec.classes.len(), 2);

        let two = catalog::two_state(2.0, 3.0);
        let a = recover_from_bfg(&ChainBfgOracle::new(two.clone()), &names(&two)).unwrap();
        let b = recover_reversible(&ChainDvOracle::new(two.clone()), &names(&two)).unwrap();
        assert!(max_relative_rate_error(&a.chain, &b.chain) < 1e-6);
    }

    #[test]
    fn bfg_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let n = rng.gen_range(2..=5);
            let hidden = random_recurrent_chain(n, &mut rng);
            let rec = recover_from_bfg(&ChainBfgOracle::new(hidden.clone()), &names(&hidden)).unwrap();
            assert!(rec.max_relative_error(&hidden) < 1e-4, "{hidden:?} {rec:?}");
        }
    }

    #[test]
    fn table_oracle_products() {
        let two = catalog::two_state(2.0, 3.0);
        let table = TableOracle::tabulate_products(&ChainDvOracle::new(two.clone()), &names(&two)).unwrap();
        let hp = recover_holding_and_products(&table).unwrap();
        assert!((hp.product(0, 1) - 6.0).abs() < 1e-9);
        assert!(table.evaluate(&ProbabilityVector::uniform(2)).is_ok());
        assert!(table.evaluate(&ProbabilityVector::new(vec![0.3, 0.7]).unwrap()).is_err());
    }

    #[test]
    fn counterexample_dv_examples() {
        let rep = counterexample_dv(20).unwrap();
        assert_eq!(rep.points, 231);
        assert!(rep.max_difference < 1e-8 && rep.max_closed_form_error < 1e-8, "{rep:?}");
        let mu = ProbabilityVector::new(vec![0.6, 0.3, 0.1]).unwrap();
        let v = dv_rate_projection(&catalog::three_cycle(), &mu).unwrap();
        assert!((v - (1.0 - 3.0 * 0.018f64.cbrt())).abs() < 1e-9);
        assert!((v - 0.2137776).abs() < 1e-6);
    }

    #[test]
    fn counterexample_bfg_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rep = counterexample_bfg(400, &mut rng).unwrap();
        assert!(rep.max_difference < 1e-10 && rep.max_formula_error < 1e-10, "{rep:?}");
        assert_eq!(rep.finiteness_mismatches, 0);
        assert!(rep.infinite_controls > 0);

        let (a, b) = catalog::ex02_pair();
        let universe = ChainSpec::named(&["a", "b", "c"], &[("b", "c", 1.0), ("c", "b", 1.0)]).unwrap();
        let half = Flow::from_triples(&universe, &[(1, 2, 0.5), (2, 1, 0.5)]).unwrap();
        let mu = ProbabilityVector::new(vec![0.0, 0.5, 0.5]).unwrap();
        assert!(bfg_rate(&a, &mu, &half).unwrap().value().abs() < 1e-15);
        assert!(bfg_rate(&b, &mu, &half).unwrap().value().abs() < 1e-15);
        let dirac = ProbabilityVector::dirac(3, 0);
        let zero = Flow::zero(&universe);
        assert_eq!(bfg_rate(&a, &dirac, &zero).unwrap(), ExtendedValue::Finite(2.0));
        assert_eq!(bfg_rate(&b, &dirac, &zero).unwrap(), ExtendedValue::Finite(2.0));
    }
}
