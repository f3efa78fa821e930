//! Level functionals of the Γ-expansion and numeric probes of their limits.
//!
//! Level 0 is the measure-current functional of the limit chain restricted
//! to divergence-free currents supported on its edges. Level `p >= 1` is
//! finite only on mixtures of the level-`p` measures carrying the current
//! induced by the limit rates, where it equals the DV functional of the
//! level-`p` reduced chain at the mixture weights.

use crate::chain::{ChainSpec, ParamChainSpec, ProbabilityVector};
use crate::error::{Error, Result};
use crate::flows::{induced_current, Flow};
use crate::hierarchy::{HierarchyLevel, MetastableTree, NGrid};
use crate::rate::{bfg_rate, dv_rate, dv_rate_projection, ExtendedValue};
use crate::tolerances;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::Serialize;

/// Mixture weights over the wells of a level.
#[derive(Debug, Clone, PartialEq)]
pub struct WellMixture {
    pub level: usize,
    pub weights: ProbabilityVector,
}

impl WellMixture {
    pub fn new(tree: &MetastableTree, level: usize, weights: ProbabilityVector) -> Result<Self> {
        let l = tree.level(level)?;
        if weights.len() != l.wells.len() {
            return Err(Error::InvalidArgument(format!(
                "level {level} has {} wells, got {} weights",
                l.wells.len(),
                weights.len()
            )));
        }
        Ok(WellMixture { level, weights })
    }

    /// `sum_j omega_j pi^(p)_j`.
    pub fn measure(&self, tree: &MetastableTree) -> Result<ProbabilityVector> {
        mixture_measure(tree.level(self.level)?, self.weights.weights())
    }
}

fn mixture_measure(level: &HierarchyLevel, omega: &[f64]) -> Result<ProbabilityVector> {
    let n = level.level_measures[0].len();
    let mut w = vec![0.0; n];
    for (m, &o) in level.level_measures.iter().zip(omega) {
        for (acc, &v) in w.iter_mut().zip(m.weights()) {
            *acc += o * v;
        }
    }
    ProbabilityVector::normalized(w)
}

/// Level-0 functional: `Upsilon` of the limit chain on divergence-free
/// currents supported on its edges, `+inf` otherwise.
pub fn rate0(limit: &ChainSpec, mu: &ProbabilityVector, j: &Flow) -> Result<ExtendedValue> {
    // Flow on an edge the limit chain lacks has reference intensity 0 and
    // costs +inf inside Upsilon.
    bfg_rate(limit, mu, j)
}

/// Mixture weights `omega_j = mu(V_j)` and the sup-norm residual of
/// `mu - sum_j omega_j pi_j`.
pub fn mixture_weights(level: &HierarchyLevel, mu: &ProbabilityVector) -> (Vec<f64>, f64) {
    let omega: Vec<f64> = level.wells.iter().map(|w| mu.mass(w)).collect();
    let mut residual = 0.0_f64;
    for x in 0..mu.len() {
        let fit: f64 = level.level_measures.iter().zip(&omega).map(|(m, o)| o * m.weights()[x]).sum();
        residual = residual.max((mu.weights()[x] - fit).abs());
    }
    (omega, residual)
}

/// True iff `mu` is a mixture of the level-1 measures and `J` is its
/// current under the limit rates, both within `1e-10`.
pub fn zero_set_check_level0(limit: &ChainSpec, mu: &ProbabilityVector, j: &Flow, level1: &HierarchyLevel) -> Result<bool> {
    is_level_zero(limit, mu, j, level1, tolerances::MIXTURE_LEVEL0)
}

fn is_level_zero(limit: &ChainSpec, mu: &ProbabilityVector, j: &Flow, level: &HierarchyLevel, tol: f64) -> Result<bool> {
    let (_, residual) = mixture_weights(level, mu);
    if residual > tol {
        return Ok(false);
    }
    Ok(induced_current(mu, limit)?.max_abs_diff(j) <= tol)
}

/// DV functional of a reduced chain at `omega`.
pub fn dv_reduced(reduced: &ChainSpec, omega: &ProbabilityVector) -> Result<f64> {
    dv_rate_projection(reduced, omega)
}

/// Level-`p` functional for `1 <= p <= depth`.
pub fn rate_p(tree: &MetastableTree, p: usize, mu: &ProbabilityVector, j: &Flow) -> Result<ExtendedValue> {
    if p == 0 || p > tree.depth() {
        return Err(Error::InvalidArgument(format!("level {p} outside 1..={}", tree.depth())));
    }
    let level = tree.level(p)?;
    let (omega, residual) = mixture_weights(level, mu);
    if residual > tolerances::MIXTURE || mu.mass(&level.transient) > tolerances::MIXTURE {
        return Ok(ExtendedValue::Infinite);
    }
    if induced_current(mu, &tree.limit_chain)?.max_abs_diff(j) > tolerances::MIXTURE {
        return Ok(ExtendedValue::Infinite);
    }
    let reduced = level.reduced_chain.as_ref().expect("nonterminal level has a reduced chain");
    let omega = ProbabilityVector::normalized(omega)?;
    Ok(ExtendedValue::Finite(dv_reduced(reduced, &omega)?))
}

/// `rate0` for `p = 0`, [`rate_p`] otherwise.
pub fn rate_level(tree: &MetastableTree, p: usize, mu: &ProbabilityVector, j: &Flow) -> Result<ExtendedValue> {
    if p == 0 {
        rate0(&tree.limit_chain, mu, j)
    } else {
        rate_p(tree, p, mu, j)
    }
}

fn is_zero(v: ExtendedValue) -> bool {
    matches!(v, ExtendedValue::Finite(x) if x <= tolerances::ZERO_VALUE)
}

/// Outcome of an equivalence check over a sample set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub level: usize,
    pub checked: usize,
    /// Samples on which the two sides matched and were true.
    pub positives: usize,
    /// Indices of samples where the two sides disagreed.
    pub violations: Vec<usize>,
}

impl EquivalenceReport {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// `rate0(mu,J) = 0` iff [`zero_set_check_level0`], over `samples`.
pub fn level0_zero_set_check(tree: &MetastableTree, samples: &[(ProbabilityVector, Flow)]) -> Result<EquivalenceReport> {
    let level1 = tree.level(1)?;
    let mut report = EquivalenceReport { level: 0, checked: samples.len(), positives: 0, violations: Vec::new() };
    for (i, (mu, j)) in samples.iter().enumerate() {
        let a = is_zero(rate0(&tree.limit_chain, mu, j)?);
        let b = zero_set_check_level0(&tree.limit_chain, mu, j, level1)?;
        if a != b {
            report.violations.push(i);
        } else if a {
            report.positives += 1;
        }
    }
    Ok(report)
}

/// `rate_p < inf` iff `rate_{p-1} = 0`, over `samples`.
pub fn hierarchy_of_zeros_check(
    tree: &MetastableTree,
    p: usize,
    samples: &[(ProbabilityVector, Flow)],
) -> Result<EquivalenceReport> {
    let mut report = EquivalenceReport { level: p, checked: samples.len(), positives: 0, violations: Vec::new() };
    for (i, (mu, j)) in samples.iter().enumerate() {
        let finite = rate_p(tree, p, mu, j)?.is_finite();
        let zero_below = is_zero(rate_level(tree, p - 1, mu, j)?);
        if finite != zero_below {
            report.violations.push(i);
        } else if finite {
            report.positives += 1;
        }
    }
    Ok(report)
}

fn dirichlet(rng: &mut impl Rng, k: usize) -> Vec<f64> {
    let g = Gamma::new(1.0, 1.0).expect("valid shape");
    let mut w: Vec<f64> = (0..k).map(|_| g.sample(rng) + 1e-3).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    w
}

/// Test pairs `(mu, J)` for the equivalence checks: mixtures of the level
/// measures of every level with their limit currents, boundary mixtures,
/// perturbed measures, rescaled or non-divergence-free currents, Diracs,
/// random interior pairs and currents of the finite-`n` chain.
///
/// Perturbations are kept well above the zero thresholds so that every
/// sample sits clearly on one side of each test.
pub fn sample_pairs(
    family: &ParamChainSpec,
    tree: &MetastableTree,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(ProbabilityVector, Flow)>> {
    let limit = &tree.limit_chain;
    let n = limit.n_states();
    let universe = family.instantiate(1.0)?;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let level = &tree.levels[rng.gen_range(0..tree.levels.len())];
        let k = level.wells.len();
        let mut omega = dirichlet(rng, k);
        let kind = rng.gen_range(0..9);
        if kind == 1 && k > 1 {
            let keep = rng.gen_range(1..k);
            let mut idx: Vec<usize> = (0..k).collect();
            idx.shuffle(rng);
            for &i in &idx[keep..] {
                omega[i] = 0.0;
            }
        }
        let mix = mixture_measure(level, &omega)?;
        let pair = match kind {
            0 | 1 => {
                let j = induced_current(&mix, limit)?;
                (mix, j)
            }
            2 => {
                let x = rng.gen_range(0..n);
                let eps = 10f64.powf(rng.gen_range(-3.0..-1.0));
                let mut w = mix.weights().to_vec();
                w[x] += eps;
                let mu = ProbabilityVector::normalized(w)?;
                let j = induced_current(&mu, limit)?;
                (mu, j)
            }
            3 => {
                let j = induced_current(&mix, limit)?.scaled(1.0 + rng.gen_range(0.05..0.5))?;
                (mix, j)
            }
            4 => {
                let j = induced_current(&mix, limit)?;
                let e = rng.gen_range(0..universe.edges().len());
                let edge = &universe.edges()[e];
                let bump = Flow::from_triples(&universe, &[(edge.from, edge.to, rng.gen_range(0.01..1.0))])?;
                (mix, j.plus(&bump)?)
            }
            5 => {
                let mu = ProbabilityVector::dirac(n, rng.gen_range(0..n));
                let j = induced_current(&mu, limit)?;
                (mu, j)
            }
            6 => {
                let mu = ProbabilityVector::new(dirichlet(rng, n))?;
                let vals = (0..universe.edges().len()).map(|_| rng.gen_range(0.0..1.0)).collect();
                (mu, Flow::on_chain(&universe, vals)?)
            }
            7 => {
                let top = tree.levels.last().expect("nonempty tree");
                let mu = top.level_measures[0].clone();
                let j = induced_current(&mu, limit)?;
                (mu, j)
            }
            _ => {
                let chain = family.instantiate(rng.gen_range(2.0..100.0))?;
                let j = induced_current(&mix, &chain)?;
                (mix, j)
            }
        };
        out.push(pair);
    }
    Ok(out)
}

/// `I_n(mu,J)` along a grid against the level-0 target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointwiseReport {
    pub target: ExtendedValue,
    /// `(n, I_n(mu,J))` in grid order.
    pub values: Vec<(f64, ExtendedValue)>,
    /// Whether `|I_n - target|` is non-increasing along the grid (finite
    /// target) or `I_n` is non-decreasing (infinite target).
    pub monotone: bool,
    /// Gap at the largest `n` for finite targets, value there otherwise.
    pub final_gap: ExtendedValue,
    pub converged: bool,
}

/// Evaluate `I_n(mu,J)` on the grid and compare with `rate0(mu,J)`.
pub fn pointwise_limit_probe(
    family: &ParamChainSpec,
    mu: &ProbabilityVector,
    j: &Flow,
    grid: &NGrid,
) -> Result<PointwiseReport> {
    let target = rate0(&family.limit_chain()?, mu, j)?;
    let values: Vec<(f64, ExtendedValue)> = grid
        .points()
        .into_par_iter()
        .map(|n| Ok((n, bfg_rate(&family.instantiate(n)?, mu, j)?)))
        .collect::<Result<_>>()?;
    let last = values.last().expect("grid has points").1;
    let (monotone, final_gap, converged) = match target {
        ExtendedValue::Finite(t) => {
            let gaps: Vec<f64> = values.iter().map(|(_, v)| (v.value() - t).abs()).collect();
            let monotone = gaps.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-15);
            let g = (last.value() - t).abs();
            (monotone, ExtendedValue::from_f64(g), g < tolerances::POINTWISE_GAP)
        }
        ExtendedValue::Infinite => {
            let monotone = values.windows(2).all(|w| w[1].1.value() >= w[0].1.value());
            (monotone, last, last.value() > tolerances::DIVERGENCE_THRESHOLD)
        }
    };
    Ok(PointwiseReport { target, values, monotone, final_gap, converged })
}

/// Candidate recovery sequence for the level-`p` probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Candidate {
    /// `sum_j omega_j pi_n(. | V_j)`.
    ConditionedMixture,
    /// `(sum_j sqrt(omega_j / pi_n(V_j)) h_j)^2 pi_n`, normalized, with
    /// `h_j` the probability of reaching `V_j` before the other wells.
    Harmonic,
}

/// One grid row of a Γ-probe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProbeRow {
    pub n: f64,
    pub theta: f64,
    /// `theta_n * I_n(nu_n)`.
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaProbeReport {
    pub level: usize,
    pub candidate: Candidate,
    pub omega: Vec<f64>,
    /// `I^(p)(omega)`.
    pub target: f64,
    pub rows: Vec<ProbeRow>,
    /// `value - target` at the largest `n`.
    pub final_gap: f64,
    /// `value >= target - 1e-2` at the largest `n`.
    pub liminf_holds: bool,
}

impl GammaProbeReport {
    /// `|value - target| / max(target, floor)` at the largest `n`.
    pub fn relative_gap(&self, floor: f64) -> f64 {
        self.final_gap.abs() / self.target.abs().max(floor)
    }
}

fn candidate_measure(
    chain: &ChainSpec,
    pi: &ProbabilityVector,
    wells: &[Vec<usize>],
    omega: &[f64],
    candidate: Candidate,
) -> Result<ProbabilityVector> {
    let n = chain.n_states();
    let mut w = vec![0.0; n];
    match candidate {
        Candidate::ConditionedMixture => {
            for (well, &o) in wells.iter().zip(omega) {
                let mass = pi.mass(well);
                for &x in well {
                    w[x] += o * pi.weights()[x] / mass;
                }
            }
        }
        Candidate::Harmonic => {
            let mut root = vec![0.0; n];
            for (k, (well, &o)) in wells.iter().zip(omega).enumerate() {
                if o == 0.0 {
                    continue;
                }
                let others: Vec<usize> =
                    wells.iter().enumerate().filter(|(i, _)| *i != k).flat_map(|(_, v)| v.iter().copied()).collect();
                let h = chain.hitting_probability(well, &others)?;
                let c = (o / pi.mass(well)).sqrt();
                for (r, hx) in root.iter_mut().zip(&h) {
                    *r += c * hx;
                }
            }
            for x in 0..n {
                w[x] = root[x] * root[x] * pi.weights()[x];
            }
        }
    }
    ProbabilityVector::normalized(w)
}

/// Evaluate `theta_n * I_n(nu_n, J*_n)` along the grid for a candidate
/// sequence aimed at `sum_j omega_j pi^(p)_j`. With the optimal current the
/// measure-current functional reduces to the DV functional of `nu_n`;
/// `theta_n` is the fitted level time-scale.
pub fn gamma_probe_level_p(
    family: &ParamChainSpec,
    tree: &MetastableTree,
    p: usize,
    omega: &ProbabilityVector,
    grid: &NGrid,
    candidate: Candidate,
) -> Result<GammaProbeReport> {
    if p == 0 || p > tree.depth() {
        return Err(Error::InvalidArgument(format!("level {p} outside 1..={}", tree.depth())));
    }
    let level = tree.level(p)?;
    if omega.len() != level.wells.len() {
        return Err(Error::InvalidArgument(format!(
            "level {p} has {} wells, got {} weights",
            level.wells.len(),
            omega.len()
        )));
    }
    let scale = level.timescale.expect("nonterminal level has a time-scale");
    let reduced = level.reduced_chain.as_ref().expect("nonterminal level has a reduced chain");
    let target = dv_reduced(reduced, omega)?;
    let rows: Vec<ProbeRow> = grid
        .points()
        .into_par_iter()
        .map(|n| {
            let chain = family.instantiate(n)?;
            let pi = chain.stationary_distribution()?;
            let nu = candidate_measure(&chain, &pi, &level.wells, omega.weights(), candidate)?;
            let theta = scale.at(n);
            Ok(ProbeRow { n, theta, value: theta * dv_rate(&chain, &nu)? })
        })
        .collect::<Result<_>>()?;
    let last = rows.last().expect("grid has points").value;
    Ok(GammaProbeReport {
        level: p,
        candidate,
        omega: omega.weights().to_vec(),
        target,
        rows,
        final_gap: last - target,
        liminf_holds: last >= target - 1e-2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use crate::hierarchy::{build_tree, HierarchyOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rm5_tree() -> (ParamChainSpec, MetastableTree) {
        let fam = catalog::rm5();
        let tree = build_tree(&fam, &HierarchyOptions::default()).unwrap();
        (fam, tree)
    }

    fn pv(w: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(w.to_vec()).unwrap()
    }

    #[test]
    fn rate0_examples() {
        let (_, tree) = rm5_tree();
        let limit = &tree.limit_chain;
        let dirac = ProbabilityVector::dirac(7, 2);
        let zero = Flow::zero(limit);
        assert_eq!(rate0(limit, &dirac, &zero).unwrap(), ExtendedValue::Finite(1.0));

        let mix = mixture_measure(&tree.levels[0], &[0.3, 0.7]).unwrap();
        let j = induced_current(&mix, limit).unwrap();
        assert!(rate0(limit, &mix, &j).unwrap().value() < 1e-14);

        let fam = catalog::rm5();
        let universe = fam.instantiate(1.0).unwrap();
        // Unit circulation across the slow edge -2 <-> -1.
        let cross = Flow::from_triples(&universe, &[(1, 2, 1.0), (2, 1, 1.0)]).unwrap();
        assert!(rate0(limit, &mix, &cross).unwrap().is_infinite());
    }

    #[test]
    fn zero_set_examples() {
        let (_, tree) = rm5_tree();
        let limit = &tree.limit_chain;
        let l1 = &tree.levels[0];
        let m = &l1.level_measures[0];
        assert!(zero_set_check_level0(limit, m, &induced_current(m, limit).unwrap(), l1).unwrap());
        let on_delta = ProbabilityVector::dirac(7, 3);
        assert!(!zero_set_check_level0(limit, &on_delta, &induced_current(&on_delta, limit).unwrap(), l1).unwrap());
        let perturbed = induced_current(m, limit).unwrap().scaled(1.1).unwrap();
        assert!(!zero_set_check_level0(limit, m, &perturbed, l1).unwrap());
    }

    #[test]
    fn dv_reduced_examples() {
        let (a, b) = (0.7, 0.2);
        let two = catalog::two_state(a, b);
        let stat = two.stationary_distribution().unwrap();
        assert!(dv_reduced(&two, &stat).unwrap() < 1e-12);
        for t in [0.1, 0.5, 0.8] {
            let closed = t * a + (1.0 - t) * b - 2.0 * (a * b).sqrt() * (t * (1.0 - t)).sqrt();
            assert!((dv_reduced(&two, &pv(&[t, 1.0 - t])).unwrap() - closed).abs() < 1e-10);
        }
        assert!((dv_reduced(&two, &pv(&[1.0, 0.0])).unwrap() - a).abs() < 1e-12);
    }

    #[test]
    fn rate_p_examples() {
        let (_, tree) = rm5_tree();
        let limit = &tree.limit_chain;
        let r = tree.levels[0].reduced_chain.clone().unwrap();
        let mix = mixture_measure(&tree.levels[0], &[0.5, 0.5]).unwrap();
        let j = induced_current(&mix, limit).unwrap();
        let v = rate_p(&tree, 1, &mix, &j).unwrap().value();
        let (a, b) = (r.rate(0, 1), r.rate(1, 0));
        assert!((v - (0.5 * a + 0.5 * b - (a * b).sqrt())).abs() < 1e-10);
        assert!(rate_p(&tree, 1, &mix, &j.scaled(2.0).unwrap()).unwrap().is_infinite());
        let delta = ProbabilityVector::dirac(7, 3);
        assert!(rate_p(&tree, 1, &delta, &induced_current(&delta, limit).unwrap()).unwrap().is_infinite());
        assert!(rate_p(&tree, 2, &mix, &j).is_err());
    }

    #[test]
    fn rm5_equivalences() {
        let (fam, tree) = rm5_tree();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let samples = sample_pairs(&fam, &tree, 400, &mut rng).unwrap();
        let r0 = level0_zero_set_check(&tree, &samples).unwrap();
        assert!(r0.holds() && r0.positives > 0, "{r0:?}");
        let r1 = hierarchy_of_zeros_check(&tree, 1, &samples).unwrap();
        assert!(r1.holds() && r1.positives > 0, "{r1:?}");
    }

    #[test]
    fn hierarchy_examples() {
        let (_, tree) = rm5_tree();
        let limit = &tree.limit_chain;
        // Dirac in a well interior: infinite at level 1, positive at level 0.
        let d = ProbabilityVector::dirac(7, 0);
        let jd = induced_current(&d, limit).unwrap();
        assert!(rate_p(&tree, 1, &d, &jd).unwrap().is_infinite());
        assert!(rate0(limit, &d, &jd).unwrap().is_infinite() || rate0(limit, &d, &jd).unwrap().value() > 0.0);
        // Global limit measure: zero at every level.
        let top = &tree.levels[1].level_measures[0];
        let jt = induced_current(top, limit).unwrap();
        assert!(rate0(limit, top, &jt).unwrap().value() < 1e-12);
        assert!(rate_p(&tree, 1, top, &jt).unwrap().value() < 1e-12);
    }

    #[test]
    fn pointwise_probe_cases() {
        let fam = catalog::rm5();
        let grid = NGrid::default();
        let limit = fam.limit_chain().unwrap();
        let mu = pv(&[0.2, 0.1, 0.1, 0.1, 0.2, 0.2, 0.1]);
        let j = induced_current(&pv(&[0.25, 0.25, 0.0, 0.0, 0.0, 0.25, 0.25]), &limit).unwrap();
        let r = pointwise_limit_probe(&fam, &mu, &j, &grid).unwrap();
        assert!(r.target.is_finite() && r.converged && r.monotone, "{r:?}");

        let universe = fam.instantiate(1.0).unwrap();
        let bad = Flow::from_triples(&universe, &[(0, 1, 1.0)]).unwrap();
        let r = pointwise_limit_probe(&fam, &mu, &bad, &grid).unwrap();
        assert!(r.values.iter().all(|v| v.1.is_infinite()) && r.converged);
    }

    #[test]
    fn probe_targets_and_candidates() {
        let (fam, tree) = rm5_tree();
        let grid = NGrid::new(2.0, 8, 14).unwrap();
        let omega = pv(&[0.9, 0.1]);
        let h = gamma_probe_level_p(&fam, &tree, 1, &omega, &grid, Candidate::Harmonic).unwrap();
        assert!((h.target - (0.5 - 0.3)).abs() < 0.01);
        assert!(h.relative_gap(1e-6) < 0.05, "{h:?}");
        let c = gamma_probe_level_p(&fam, &tree, 1, &omega, &grid, Candidate::ConditionedMixture).unwrap();
        assert!(c.liminf_holds);
        // The conditioned mixture pays the exits out of each well on the fast clock.
        assert!(c.rows.last().unwrap().value > c.rows[0].value);
    }
}
