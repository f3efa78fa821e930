//! Rate functionals: `Phi`, `Upsilon`, the measure-current functional `I`,
//! the Donsker–Varadhan functional in its two dual forms, and tilts.
//!
//! The DV functional is computed either as a supremum over tilts `H`,
//!
//! ```text
//! I(mu) = sup_H  sum_{(x,y)} mu(x) R(x,y) (1 - exp(H(y) - H(x))),
//! ```
//!
//! or as a projection, the minimum of `Upsilon(mu, J)` over divergence-free
//! currents `J`. The first needs `mu > 0`; the second works on the boundary
//! of the simplex and on reducible chains.

use crate::chain::{scc, ChainSpec, ProbabilityVector};
use crate::error::{Error, Result};
use crate::flows::Flow;
use crate::numeric::{lu_solve, sup_norm};
use crate::tolerances;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::fmt;
use std::ops::Add;

/// A value in `[0, +inf]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ExtendedValue {
    Finite(f64),
    Infinite,
}

impl ExtendedValue {
    pub fn is_finite(self) -> bool {
        matches!(self, ExtendedValue::Finite(_))
    }

    pub fn is_infinite(self) -> bool {
        !self.is_finite()
    }

    /// As an `f64`, with `+inf` for the sentinel.
    pub fn value(self) -> f64 {
        match self {
            ExtendedValue::Finite(v) => v,
            ExtendedValue::Infinite => f64::INFINITY,
        }
    }

    pub fn finite(self) -> Option<f64> {
        match self {
            ExtendedValue::Finite(v) => Some(v),
            ExtendedValue::Infinite => None,
        }
    }

    pub fn from_f64(v: f64) -> Self {
        if v.is_finite() {
            ExtendedValue::Finite(v)
        } else {
            ExtendedValue::Infinite
        }
    }
}

impl Add for ExtendedValue {
    type Output = ExtendedValue;
    fn add(self, rhs: ExtendedValue) -> ExtendedValue {
        match (self, rhs) {
            (ExtendedValue::Finite(a), ExtendedValue::Finite(b)) => ExtendedValue::Finite(a + b),
            _ => ExtendedValue::Infinite,
        }
    }
}

impl std::iter::Sum for ExtendedValue {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ExtendedValue::Finite(0.0), |a, b| a + b)
    }
}

impl fmt::Display for ExtendedValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtendedValue::Finite(v) => write!(f, "{v:.16e}"),
            ExtendedValue::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for ExtendedValue {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ExtendedValue::Finite(v) => s.serialize_f64(*v),
            ExtendedValue::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for ExtendedValue {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(ExtendedValue::Finite(v)),
            Raw::Str(s) if s == "inf" => Ok(ExtendedValue::Infinite),
            Raw::Str(s) => Err(serde::de::Error::custom(format!("expected number or \"inf\", got {s:?}"))),
        }
    }
}

/// `Phi(q,p) = q ln(q/p) - (q - p)`, with `Phi(0,p) = p` and `Phi(q,0) = inf`
/// for `q > 0`.
pub fn phi(q: f64, p: f64) -> ExtendedValue {
    debug_assert!(q >= 0.0 && p >= 0.0);
    if q == 0.0 {
        return ExtendedValue::Finite(p);
    }
    if p == 0.0 {
        return ExtendedValue::Infinite;
    }
    let t = (q - p) / p;
    if t.abs() < 0.1 {
        // p [(1+t) ln(1+t) - t] = p sum_{k>=2} (-1)^k t^k / (k (k-1))
        let mut sum = 0.0;
        let mut pow = t * t;
        let mut k = 2.0;
        loop {
            let term = pow / (k * (k - 1.0));
            sum += term;
            if term.abs() <= 1e-18 * sum.abs() || k > 40.0 {
                break;
            }
            pow *= -t;
            k += 1.0;
        }
        ExtendedValue::Finite(p * sum)
    } else {
        ExtendedValue::Finite(q * (q / p).ln() - (q - p))
    }
}

/// `Upsilon(mu, J) = sum_{(x,y)} Phi(J(x,y), mu(x) R(x,y))` over the chain's
/// edges together with any edges carrying flow.
pub fn upsilon(chain: &ChainSpec, mu: &ProbabilityVector, j: &Flow) -> Result<ExtendedValue> {
    chain.check_len(mu.len(), "measure")?;
    chain.check_len(j.n_states(), "flow")?;
    let w = mu.weights();
    let mut total = ExtendedValue::Finite(0.0);
    for e in chain.edges() {
        total = total + phi(j.value(e.from, e.to), w[e.from] * e.rate);
    }
    for (a, b, v) in j.support() {
        if !chain.has_edge(a, b) {
            total = total + phi(v, 0.0);
        }
    }
    Ok(total)
}

/// The measure-current functional: `Upsilon(mu, J)` on divergence-free `J`,
/// `+inf` otherwise.
pub fn bfg_rate(chain: &ChainSpec, mu: &ProbabilityVector, j: &Flow) -> Result<ExtendedValue> {
    chain.check_len(j.n_states(), "flow")?;
    if !j.is_divergence_free(tolerances::DIVERGENCE_FREE) {
        return Ok(ExtendedValue::Infinite);
    }
    upsilon(chain, mu, j)
}

/// Solver settings for the DV functional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DvOptions {
    pub max_iterations: usize,
    /// Exit gradient of the tilt solver, relative to the current scale.
    pub gradient_tolerance: f64,
    /// Exit KKT residual of the projection solver.
    pub kkt_tolerance: f64,
}

impl Default for DvOptions {
    fn default() -> Self {
        DvOptions {
            max_iterations: tolerances::MAX_NEWTON_ITERATIONS,
            gradient_tolerance: tolerances::TILT_GRADIENT,
            kkt_tolerance: tolerances::PROJECTION_KKT,
        }
    }
}

/// A function on states normalized to vanish at the first state.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltField {
    values: Vec<f64>,
}

impl TiltField {
    /// Shift `values` so the first entry is zero.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("tilt must be finite and nonempty".into()));
        }
        let h0 = values[0];
        Ok(TiltField { values: values.into_iter().map(|v| v - h0).collect() })
    }

    pub fn zero(n: usize) -> Self {
        TiltField { values: vec![0.0; n] }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn sup_distance(&self, other: &TiltField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// `G(mu, H) = sum mu(x) R(x,y) (1 - exp(H(y) - H(x)))`.
pub fn tilt_objective(chain: &ChainSpec, mu: &ProbabilityVector, h: &[f64]) -> f64 {
    let w = mu.weights();
    chain
        .edges()
        .iter()
        .map(|e| -w[e.from] * e.rate * (h[e.to] - h[e.from]).exp_m1())
        .sum()
}

/// Hessian of `G(mu, .)` in `H`: minus the Laplacian weighted by the tilted
/// current.
pub fn tilt_hessian(chain: &ChainSpec, mu: &ProbabilityVector, h: &[f64]) -> DMatrix<f64> {
    let n = chain.n_states();
    let w = mu.weights();
    let mut m = DMatrix::zeros(n, n);
    for e in chain.edges() {
        let j = w[e.from] * e.rate * (h[e.to] - h[e.from]).exp();
        m[(e.from, e.from)] -= j;
        m[(e.to, e.to)] -= j;
        m[(e.from, e.to)] += j;
        m[(e.to, e.from)] += j;
    }
    m
}

/// Result of the tilt solver.
#[derive(Debug, Clone, PartialEq)]
pub struct TiltSolution {
    pub tilt: TiltField,
    /// `G(mu, H_mu)`, the DV functional at `mu`.
    pub value: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

fn require_positive(chain: &ChainSpec, mu: &ProbabilityVector) -> Result<()> {
    chain.check_len(mu.len(), "measure")?;
    if let Some(x) = mu.first_zero() {
        return Err(Error::NotStrictlyPositive(chain.states()[x].clone()));
    }
    Ok(())
}

fn require_irreducible(chain: &ChainSpec) -> Result<()> {
    let k = chain.strongly_connected_components().len();
    if k != 1 {
        return Err(Error::NotIrreducible(format!("{k} strongly connected components")));
    }
    Ok(())
}

/// Gradient of `G(mu, .)`: the divergence of the tilted current.
fn tilt_gradient(chain: &ChainSpec, w: &[f64], h: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; chain.n_states()];
    for e in chain.edges() {
        let j = w[e.from] * e.rate * (h[e.to] - h[e.from]).exp();
        g[e.from] += j;
        g[e.to] -= j;
    }
    g
}

/// Maximize `G(mu, .)` by damped Newton with `H(x0) = 0`.
pub fn tilt_solve(chain: &ChainSpec, mu: &ProbabilityVector, opts: &DvOptions) -> Result<TiltSolution> {
    require_positive(chain, mu)?;
    require_irreducible(chain)?;
    let n = chain.n_states();
    if n == 1 {
        return Ok(TiltSolution { tilt: TiltField::zero(1), value: 0.0, iterations: 0, gradient_norm: 0.0 });
    }
    let w = mu.weights();
    let scale = chain
        .edges()
        .iter()
        .map(|e| w[e.from] * e.rate)
        .fold(1.0_f64, f64::max);
    let tol = opts.gradient_tolerance * scale;
    let mut h = vec![0.0; n];
    let mut value = tilt_objective(chain, mu, &h);
    let mut grad = tilt_gradient(chain, w, &h);
    let mut gnorm = sup_norm(&grad[1..]);
    let mut iterations = 0;
    let mut polish = 0;
    loop {
        if gnorm <= tol {
            // A couple of extra full steps bring the gradient to the noise floor.
            if polish >= 2 {
                break;
            }
        }
        if iterations >= opts.max_iterations {
            if gnorm <= tol {
                break;
            }
            return Err(Error::NonConvergence { iterations, residual: gnorm / scale });
        }
        iterations += 1;
        let hess = tilt_hessian(chain, mu, &h);
        let a = -hess.view((1, 1), (n - 1, n - 1)).clone_owned();
        let b = DVector::from_column_slice(&grad[1..]);
        let d = lu_solve(a, &b)?;
        let slope: f64 = d.iter().zip(&grad[1..]).map(|(x, y)| x * y).sum();
        // Near the optimum the gain `slope/2` drops below the rounding of G;
        // there a step is judged by the gradient it leaves behind.
        let noise = 1e-14 * (value.abs() + scale);
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-14 {
            let mut trial = h.clone();
            for i in 1..n {
                trial[i] += t * d[i - 1];
            }
            let v = tilt_objective(chain, mu, &trial);
            if v.is_finite() {
                let g_new = tilt_gradient(chain, w, &trial);
                let gn = sup_norm(&g_new[1..]);
                let armijo = v >= value + 1e-4 * t * slope && slope * t > noise;
                let flat = v >= value - noise && gn < gnorm * (1.0 - 0.5 * t);
                if armijo || flat {
                    accepted = Some((trial, v, g_new, gn));
                    break;
                }
            }
            t *= 0.5;
        }
        let Some((trial, v, g_new, gn)) = accepted else {
            if gnorm <= tol {
                break;
            }
            return Err(Error::NonConvergence { iterations, residual: gnorm / scale });
        };
        if gnorm <= tol {
            polish += 1;
            if gn >= gnorm {
                break;
            }
        }
        h = trial;
        value = v;
        grad = g_new;
        gnorm = gn;
    }
    Ok(TiltSolution {
        tilt: TiltField::new(h)?,
        value: value.max(0.0),
        iterations,
        gradient_norm: gnorm,
    })
}

/// `H_mu`, the maximizing tilt.
pub fn tilt_solver(chain: &ChainSpec, mu: &ProbabilityVector) -> Result<TiltField> {
    Ok(tilt_solve(chain, mu, &DvOptions::default())?.tilt)
}

/// DV functional by the supremum over tilts; needs `mu > 0`.
pub fn dv_rate_variational(chain: &ChainSpec, mu: &ProbabilityVector) -> Result<f64> {
    Ok(tilt_solve(chain, mu, &DvOptions::default())?.value)
}

/// Result of the projection solver.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSolution {
    pub value: f64,
    /// The minimizing divergence-free current, on the chain's edges.
    pub current: Flow,
    pub kkt_residual: f64,
    pub iterations: usize,
}

/// DV functional as `inf_J Upsilon(mu, J)` over divergence-free `J`.
pub fn dv_rate_projection(chain: &ChainSpec, mu: &ProbabilityVector) -> Result<f64> {
    Ok(dv_projection_solve(chain, mu, &DvOptions::default())?.value)
}

/// The DV functional, valid for every probability vector.
pub fn dv_rate(chain: &ChainSpec, mu: &ProbabilityVector) -> Result<f64> {
    dv_rate_projection(chain, mu)
}

/// Projection solver. Any divergence-free current vanishes on edges out of
/// zero-mass states, on edges into them, and on edges joining different
/// strongly connected components of the remaining graph; those edges pay
/// `mu(x) R(x,y)` each. Inside each component the minimizer is interior and
/// is found by infeasible-start Newton on the KKT system.
pub fn dv_projection_solve(
    chain: &ChainSpec,
    mu: &ProbabilityVector,
    opts: &DvOptions,
) -> Result<ProjectionSolution> {
    chain.check_len(mu.len(), "measure")?;
    let w = mu.weights();
    let edges = chain.edges();
    let p: Vec<f64> = edges.iter().map(|e| w[e.from] * e.rate).collect();
    let inside: Vec<bool> = edges
        .iter()
        .zip(&p)
        .map(|(e, &pe)| pe > 0.0 && w[e.to] > 0.0)
        .collect();
    let comps = scc(
        chain.n_states(),
        edges.iter().zip(&inside).filter(|(_, &i)| i).map(|(e, _)| (e.from, e.to)),
    );
    let mut comp_of = vec![0; chain.n_states()];
    for (c, members) in comps.iter().enumerate() {
        for &x in members {
            comp_of[x] = c;
        }
    }
    let mut value = 0.0;
    let mut current = vec![0.0; edges.len()];
    let mut by_comp: Vec<Vec<usize>> = vec![Vec::new(); comps.len()];
    for (i, e) in edges.iter().enumerate() {
        if inside[i] && comp_of[e.from] == comp_of[e.to] {
            by_comp[comp_of[e.from]].push(i);
        } else {
            value += p[i];
        }
    }
    let mut iterations = 0;
    let mut kkt = 0.0_f64;
    for (c, members) in comps.iter().enumerate() {
        if by_comp[c].is_empty() {
            continue;
        }
        let sub = solve_component(chain, members, &by_comp[c], &p, opts)?;
        iterations += sub.iterations;
        kkt = kkt.max(sub.residual);
        for (k, &i) in by_comp[c].iter().enumerate() {
            current[i] = sub.current[k];
            value += phi(sub.current[k], p[i]).value();
        }
    }
    Ok(ProjectionSolution {
        value,
        current: Flow::on_chain(chain, current)?,
        kkt_residual: kkt,
        iterations,
    })
}

struct ComponentSolution {
    current: Vec<f64>,
    residual: f64,
    iterations: usize,
}

/// Minimize `sum Phi(J_e, p_e)` subject to `div J = 0` on one strongly
/// connected component.
fn solve_component(
    chain: &ChainSpec,
    members: &[usize],
    edge_ids: &[usize],
    p: &[f64],
    opts: &DvOptions,
) -> Result<ComponentSolution> {
    let edges = chain.edges();
    let k = members.len();
    let mut pos = vec![usize::MAX; chain.n_states()];
    for (i, &x) in members.iter().enumerate() {
        pos[x] = i;
    }
    let m = edge_ids.len();
    let ends: Vec<(usize, usize)> = edge_ids
        .iter()
        .map(|&i| (pos[edges[i].from], pos[edges[i].to]))
        .collect();
    let pe: Vec<f64> = edge_ids.iter().map(|&i| p[i]).collect();
    // Divergence residuals are measured against each state's throughput, so
    // states carrying tiny flux are resolved as accurately as busy ones.
    let mut weight = vec![0.0; k];
    for (e, &(a, b)) in ends.iter().enumerate() {
        weight[a] += pe[e];
        weight[b] += pe[e];
    }

    let mut j = pe.clone();
    let mut nu = vec![0.0; k];

    let residuals = |j: &[f64], nu: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let mut rd = vec![0.0; m];
        let mut rp = vec![0.0; k];
        for e in 0..m {
            let (a, b) = ends[e];
            rd[e] = (j[e] / pe[e]).ln() + nu[a] - nu[b];
            rp[a] += j[e];
            rp[b] -= j[e];
        }
        (rd, rp)
    };
    let norm = |rd: &[f64], rp: &[f64]| -> f64 {
        rp.iter().zip(&weight).fold(sup_norm(rd), |acc, (r, w)| acc.max(r.abs() / w))
    };
    // Newton directions descend any diagonally weighted squared residual.
    let merit = |rd: &[f64], rp: &[f64]| -> f64 {
        let a: f64 = rd.iter().map(|r| r * r).sum();
        let b: f64 = rp.iter().zip(&weight).map(|(r, w)| (r / w) * (r / w)).sum();
        (a + b).sqrt()
    };

    let (mut rd, mut rp) = residuals(&j, &nu);
    let mut res = norm(&rd, &rp);
    let mut iterations = 0;
    let mut polish = 0;
    loop {
        if res <= opts.kkt_tolerance {
            if res <= 1e-14 || polish >= 3 {
                break;
            }
        }
        if iterations >= opts.max_iterations {
            if res <= opts.kkt_tolerance {
                break;
            }
            return Err(Error::NonConvergence { iterations, residual: res });
        }
        iterations += 1;
        // (A diag(J) A^T) dnu = rp - A (J * rd), first state grounded.
        let mut lap = DMatrix::zeros(k - 1, k - 1);
        let mut rhs = DVector::zeros(k - 1);
        let mut a_jrd = vec![0.0; k];
        for e in 0..m {
            let (a, b) = ends[e];
            let je = j[e];
            a_jrd[a] += je * rd[e];
            a_jrd[b] -= je * rd[e];
            if a > 0 {
                lap[(a - 1, a - 1)] += je;
            }
            if b > 0 {
                lap[(b - 1, b - 1)] += je;
            }
            if a > 0 && b > 0 {
                lap[(a - 1, b - 1)] -= je;
                lap[(b - 1, a - 1)] -= je;
            }
        }
        for x in 1..k {
            rhs[x - 1] = rp[x] - a_jrd[x];
        }
        let sol = lu_solve(lap, &rhs)?;
        let mut dnu = vec![0.0; k];
        for x in 1..k {
            dnu[x] = sol[x - 1];
        }
        let dj: Vec<f64> = (0..m)
            .map(|e| {
                let (a, b) = ends[e];
                -j[e] * (rd[e] + dnu[a] - dnu[b])
            })
            .collect();
        // Fraction to the boundary keeps every current positive.
        let mut t = 1.0_f64;
        for e in 0..m {
            if dj[e] < 0.0 {
                t = t.min(0.99 * j[e] / -dj[e]);
            }
        }
        let base = merit(&rd, &rp);
        let (trial_j, trial_nu, trd, trp) = loop {
            let tj: Vec<f64> = (0..m).map(|e| j[e] + t * dj[e]).collect();
            let tn: Vec<f64> = (0..k).map(|x| nu[x] + t * dnu[x]).collect();
            let (a, b) = residuals(&tj, &tn);
            if merit(&a, &b) <= (1.0 - 0.01 * t) * base || t < 1e-12 || res <= opts.kkt_tolerance {
                break (tj, tn, a, b);
            }
            t *= 0.5;
        };
        let new_res = norm(&trd, &trp);
        if res <= opts.kkt_tolerance {
            polish += 1;
            if new_res >= res {
                break;
            }
        }
        j = trial_j;
        nu = trial_nu;
        rd = trd;
        rp = trp;
        res = new_res;
    }
    Ok(ComponentSolution { current: j, residual: res, iterations })
}

/// `R_H(x,y) = R(x,y) exp(H(y) - H(x))`.
pub fn tilted_chain(chain: &ChainSpec, h: &TiltField) -> Result<ChainSpec> {
    chain.tilted(h.values())
}

/// `J*_mu(x,y) = mu(x) R(x,y) exp(H_mu(y) - H_mu(x))`.
pub fn optimal_current(chain: &ChainSpec, mu: &ProbabilityVector) -> Result<Flow> {
    let h = tilt_solver(chain, mu)?;
    tilted_current(chain, mu, &h)
}

/// The current of `mu` under the tilted rates.
pub fn tilted_current(chain: &ChainSpec, mu: &ProbabilityVector, h: &TiltField) -> Result<Flow> {
    let w = mu.weights();
    let hv = h.values();
    Flow::on_chain(
        chain,
        chain
            .edges()
            .iter()
            .map(|e| w[e.from] * e.rate * (hv[e.to] - hv[e.from]).exp())
            .collect(),
    )
}

/// The measure whose maximizing tilt is `H`: the stationary distribution of
/// the tilted chain.
pub fn tilt_inverse(chain: &ChainSpec, h: &TiltField) -> Result<ProbabilityVector> {
    chain.check_len(h.len(), "tilt")?;
    tilted_chain(chain, h)?.stationary_distribution()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::flows::induced_current;
    use proptest::prelude::*;

    fn pv(w: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(w.to_vec()).unwrap()
    }

    fn c3_closed_form(m: &[f64]) -> f64 {
        1.0 - 3.0 * (m[0] * m[1] * m[2]).cbrt()
    }

    #[test]
    fn phi_examples() {
        assert_eq!(phi(0.0, 2.0), ExtendedValue::Finite(2.0));
        assert_eq!(phi(0.0, 0.0), ExtendedValue::Finite(0.0));
        assert_eq!(phi(3.0, 3.0), ExtendedValue::Finite(0.0));
        assert_eq!(phi(1.0, 0.0), ExtendedValue::Infinite);
        let v = phi(2.0, 1.0).value();
        assert!((v - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-15);
        assert!((v - 0.386294).abs() < 1e-6);
    }

    #[test]
    fn phi_series_branch_matches_direct_formula() {
        for &(q, p) in &[(1.05, 1.0), (0.95, 1.0), (1.0 + 1e-3, 1.0), (2.0, 1.9)] {
            let direct = q * (q / p as f64).ln() - (q - p);
            let v = phi(q, p).value();
            assert!((v - direct).abs() <= 1e-12 * direct.abs().max(1e-300), "{q} {p}");
        }
        // Deep in the cancellation regime the series keeps relative accuracy.
        let t = 1e-9;
        assert!((phi(1.0 + t, 1.0).value() - t * t / 2.0).abs() <= 1e-6 * t * t);
    }

    #[test]
    fn upsilon_examples() {
        let c3 = catalog::three_cycle();
        let mu = ProbabilityVector::dirac(3, 0);
        let j = induced_current(&mu, &c3).unwrap();
        assert_eq!(upsilon(&c3, &mu, &j).unwrap(), ExtendedValue::Finite(0.0));
        assert_eq!(upsilon(&c3, &mu, &Flow::zero(&c3)).unwrap(), ExtendedValue::Finite(1.0));
        let j = Flow::from_triples(&c3, &[(1, 2, 0.5)]).unwrap();
        assert_eq!(upsilon(&c3, &mu, &j).unwrap(), ExtendedValue::Infinite);
    }

    #[test]
    fn bfg_ex02_formula() {
        let (chain, _) = catalog::ex02_pair();
        let mu = pv(&[0.2, 0.5, 0.3]);
        let t = 0.7;
        let j = Flow::from_triples(&chain, &[(1, 2, t), (2, 1, t)]).unwrap();
        let expect = 2.0 * 0.2 + phi(t, 0.5).value() + phi(t, 0.3).value();
        assert!((bfg_rate(&chain, &mu, &j).unwrap().value() - expect).abs() < 1e-15);
        let bad = Flow::from_triples(&chain, &[(1, 2, t)]).unwrap();
        assert_eq!(bfg_rate(&chain, &mu, &bad).unwrap(), ExtendedValue::Infinite);
        let c3 = catalog::three_cycle();
        let pi = c3.stationary_distribution().unwrap();
        let j = induced_current(&pi, &c3).unwrap();
        assert_eq!(bfg_rate(&c3, &pi, &j).unwrap().value(), 0.0);
    }

    #[test]
    fn extended_value_serde() {
        let s = serde_json::to_string(&vec![ExtendedValue::Finite(1.5), ExtendedValue::Infinite]).unwrap();
        assert_eq!(s, "[1.5,\"inf\"]");
        let back: Vec<ExtendedValue> = serde_json::from_str(&s).unwrap();
        assert_eq!(back[1], ExtendedValue::Infinite);
        assert_eq!(ExtendedValue::Finite(1.0) + ExtendedValue::Infinite, ExtendedValue::Infinite);
    }

    #[test]
    fn dv_variational_examples() {
        let c3 = catalog::three_cycle();
        let v = dv_rate_variational(&c3, &pv(&[0.5, 0.25, 0.25])).unwrap();
        assert!((v - c3_closed_form(&[0.5, 0.25, 0.25])).abs() < 1e-12);
        assert!((v - 0.055060).abs() < 1e-6);
        assert!(dv_rate_variational(&c3, &ProbabilityVector::uniform(3)).unwrap().abs() < 1e-15);
        let two = catalog::two_state(1.0, 1.0);
        let v = dv_rate_variational(&two, &pv(&[0.25, 0.75])).unwrap();
        assert!((v - (1.0 - 2.0 * 0.1875f64.sqrt())).abs() < 1e-12);
        assert!((v - 0.133975).abs() < 1e-6);
    }

    #[test]
    fn dv_variational_rejects_boundary_and_reducible() {
        let c3 = catalog::three_cycle();
        assert!(matches!(
            dv_rate_variational(&c3, &ProbabilityVector::dirac(3, 0)),
            Err(Error::NotStrictlyPositive(_))
        ));
        let lim = catalog::rm5().limit_chain().unwrap();
        assert!(matches!(
            dv_rate_variational(&lim, &ProbabilityVector::uniform(7)),
            Err(Error::NotIrreducible(_))
        ));
    }

    #[test]
    fn dv_projection_examples() {
        let c3 = catalog::three_cycle();
        for z in 0..3 {
            let v = dv_rate_projection(&c3, &ProbabilityVector::dirac(3, z)).unwrap();
            assert_eq!(v, 1.0);
        }
        let rm5 = catalog::rm5().instantiate(10.0).unwrap();
        let lambda = rm5.holding_rates();
        for z in 0..7 {
            let v = dv_rate_projection(&rm5, &ProbabilityVector::dirac(7, z)).unwrap();
            assert!((v - lambda[z]).abs() <= 1e-15);
        }
        assert!(dv_rate_projection(&c3, &ProbabilityVector::uniform(3)).unwrap().abs() < 1e-14);
        let m = [0.5, 0.3, 0.2];
        let v = dv_rate_projection(&c3, &pv(&m)).unwrap();
        assert!((v - c3_closed_form(&m)).abs() < 1e-10);
        assert!((v - 0.067830).abs() < 1e-6);
        let pi = rm5.stationary_distribution().unwrap();
        assert!(dv_rate_projection(&rm5, &pi).unwrap().abs() < 1e-12);
    }

    #[test]
    fn tilt_two_state_closed_form() {
        let (r, s) = (2.0, 3.0);
        let two = catalog::two_state(r, s);
        let m = 0.3;
        let h = tilt_solver(&two, &pv(&[m, 1.0 - m])).unwrap();
        let expect = 0.5 * ((1.0 - m) * s / (m * r)).ln();
        assert_eq!(h.values()[0], 0.0);
        assert!((h.values()[1] - expect).abs() < 1e-12);
        let j = optimal_current(&two, &pv(&[m, 1.0 - m])).unwrap();
        let jstar = (m * r * (1.0 - m) * s).sqrt();
        assert!((j.value(0, 1) - jstar).abs() < 1e-12 && (j.value(1, 0) - jstar).abs() < 1e-12);
    }

    #[test]
    fn tilt_at_stationary_is_zero() {
        let two = catalog::two_state(2.0, 3.0);
        let pi = two.stationary_distribution().unwrap();
        let h = tilt_solver(&two, &pi).unwrap();
        assert!(h.values().iter().all(|v| v.abs() < 1e-14));
        let j = optimal_current(&two, &pi).unwrap();
        assert!(j.max_abs_diff(&induced_current(&pi, &two).unwrap()) < 1e-14);
    }

    #[test]
    fn tilt_c3_matches_closed_form() {
        let c3 = catalog::three_cycle();
        let mu = pv(&[0.5, 0.25, 0.25]);
        let h = tilt_solver(&c3, &mu).unwrap();
        let g = tilt_objective(&c3, &mu, h.values());
        assert!((g - c3_closed_form(mu.weights())).abs() < 1e-12);
    }

    #[test]
    fn tilted_chain_examples() {
        let two = catalog::two_state(2.0, 3.0);
        assert_eq!(tilted_chain(&two, &TiltField::zero(2)).unwrap(), two);
        let h = TiltField::new(vec![0.0, 2f64.ln()]).unwrap();
        let t = tilted_chain(&two, &h).unwrap();
        assert!((t.rate(0, 1) - 4.0).abs() < 1e-14 && (t.rate(1, 0) - 1.5).abs() < 1e-14);
        let g = TiltField::new(vec![0.0, -0.3]).unwrap();
        let hg = TiltField::new(vec![0.0, 2f64.ln() - 0.3]).unwrap();
        let a = tilted_chain(&tilted_chain(&two, &h).unwrap(), &g).unwrap();
        let b = tilted_chain(&two, &hg).unwrap();
        for (x, y) in a.edges().iter().zip(b.edges()) {
            assert!((x.rate - y.rate).abs() < 1e-14);
        }
    }

    #[test]
    fn tilt_inverse_two_state() {
        let (r, s) = (2.0, 3.0);
        let two = catalog::two_state(r, s);
        assert!(tilt_inverse(&two, &TiltField::zero(2))
            .unwrap()
            .sup_distance(&two.stationary_distribution().unwrap())
            < 1e-15);
        let hv = 0.7;
        let nu = tilt_inverse(&two, &TiltField::new(vec![0.0, hv]).unwrap()).unwrap();
        // Tilted rates r e^h and s e^-h; stationary weight of x is s e^-h / (r e^h + s e^-h).
        let (a, b) = (r * hv.exp(), s * (-hv).exp());
        assert!((nu.weights()[0] - b / (a + b)).abs() < 1e-15);
    }

    #[test]
    fn projection_handles_reducible_chains() {
        // a -> b, b <-> c: mass on a pays its exit rate, {b,c} is a two-state chain.
        let (chain, _) = catalog::ex02_pair();
        let mu = pv(&[0.2, 0.5, 0.3]);
        let v = dv_rate_projection(&chain, &mu).unwrap();
        let two = 0.5 + 0.3 - 2.0 * (0.5f64 * 0.3).sqrt();
        assert!((v - (0.4 + two)).abs() < 1e-12);
    }

    fn chain_and_measure() -> impl Strategy<Value = (ChainSpec, ProbabilityVector)> {
        (2usize..=6)
            .prop_flat_map(|n| {
                (
                    Just(n),
                    proptest::collection::vec(proptest::option::weighted(0.6, 0.1f64..3.0), n * n),
                    proptest::collection::vec(0.05f64..1.0, n),
                )
            })
            .prop_map(|(n, rates, w)| {
                let names: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
                let mut edges = Vec::new();
                for a in 0..n {
                    // A directed ring keeps every sample irreducible.
                    edges.push((a, (a + 1) % n, rates[a * n + a].unwrap_or(1.0)));
                    for b in 0..n {
                        if b != a && b != (a + 1) % n {
                            if let Some(r) = rates[a * n + b] {
                                edges.push((a, b, r));
                            }
                        }
                    }
                }
                let edges = if n == 2 {
                    vec![(0, 1, rates[0].unwrap_or(1.0)), (1, 0, rates[3].unwrap_or(2.0))]
                } else {
                    edges
                };
                (ChainSpec::new(names, edges).unwrap(), ProbabilityVector::normalized(w).unwrap())
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn duality_sup_equals_inf((chain, mu) in chain_and_measure()) {
            let a = dv_rate_variational(&chain, &mu).unwrap();
            let b = dv_rate_projection(&chain, &mu).unwrap();
            prop_assert!((a - b).abs() <= 1e-7 * (1.0 + a), "{a} vs {b}");
            prop_assert!(a >= 0.0);
        }

        #[test]
        fn optimal_current_is_divergence_free_and_attains((chain, mu) in chain_and_measure()) {
            let sol = tilt_solve(&chain, &mu, &DvOptions::default()).unwrap();
            let j = tilted_current(&chain, &mu, &sol.tilt).unwrap();
            let scale = j.values().iter().fold(1.0_f64, |m, v| m.max(*v));
            prop_assert!(j.is_divergence_free(1e-10 * scale));
            let bfg = upsilon(&chain, &mu, &j).unwrap().value();
            prop_assert!((bfg - sol.value).abs() <= 1e-8 * (1.0 + sol.value));
            // mu is stationary for the tilted chain
            let tilted = tilted_chain(&chain, &sol.tilt).unwrap();
            prop_assert!(sup_norm(&tilted.adjoint_apply(mu.weights())) <= 1e-10 * scale);
        }

        #[test]
        fn hessian_negative_semidefinite((chain, mu) in chain_and_measure()) {
            let h = tilt_solver(&chain, &mu).unwrap();
            let hess = tilt_hessian(&chain, &mu, h.values());
            let eig = nalgebra::SymmetricEigen::new(hess);
            let top = eig.eigenvalues.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            prop_assert!(top <= 1e-10);
        }

        #[test]
        fn tilt_round_trip((chain, _mu) in chain_and_measure(), seed in proptest::collection::vec(-1.5f64..1.5, 6)) {
            let n = chain.n_states();
            let h = TiltField::new(seed[..n].to_vec()).unwrap();
            let nu = tilt_inverse(&chain, &h).unwrap();
            let back = tilt_solver(&chain, &nu).unwrap();
            prop_assert!(back.sup_distance(&h) <= 1e-8);
        }

        #[test]
        fn two_point_mixture_identity((chain, _mu) in chain_and_measure(), theta in 0.0f64..=1.0) {
            let lambda = chain.holding_rates();
            let n = chain.n_states();
            for x in 0..n {
                for y in (x + 1)..n {
                    let mut w = vec![0.0; n];
                    w[x] = theta;
                    w[y] = 1.0 - theta;
                    let mu = ProbabilityVector::normalized(w).unwrap();
                    let v = dv_rate_projection(&chain, &mu).unwrap();
                    let expect = theta * lambda[x] + (1.0 - theta) * lambda[y]
                        - 2.0 * (chain.rate(x, y) * chain.rate(y, x)).sqrt() * (theta * (1.0 - theta)).sqrt();
                    prop_assert!((v - expect).abs() <= 1e-8, "{v} vs {expect}");
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        /// Mirror descent on the simplex, using the envelope gradient
        /// `dI/dmu(x) = -sum_y R(x,y) (e^{H(y)-H(x)} - 1)`, lands on the
        /// stationary distribution, the only zero of the functional.
        #[test]
        fn minimizer_is_stationary((chain, start) in chain_and_measure()) {
            let pi = chain.stationary_distribution().unwrap();
            let step = 0.5 / chain.holding_rates().iter().fold(0.0_f64, |m, v| m.max(*v));
            let mut mu = start;
            for _ in 0..20_000 {
                let h = tilt_solver(&chain, &mu).unwrap();
                let hv = h.values();
                let mut g = vec![0.0; chain.n_states()];
                for e in chain.edges() {
                    g[e.from] -= e.rate * ((hv[e.to] - hv[e.from]).exp() - 1.0);
                }
                let next: Vec<f64> = mu.weights().iter().zip(&g).map(|(m, gx)| m * (-step * gx).exp()).collect();
                let next = ProbabilityVector::normalized(next).unwrap();
                let moved = next.sup_distance(&mu);
                mu = next;
                if moved < 1e-12 {
                    break;
                }
            }
            prop_assert!(mu.sup_distance(&pi) <= 1e-6, "{:?} vs {:?}", mu, pi);
            prop_assert!(dv_rate(&chain, &pi).unwrap() <= 1e-10);
        }
    }
}
