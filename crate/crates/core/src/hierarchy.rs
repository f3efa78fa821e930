//! Metastable hierarchy of a monomial-rate family.
//!
//! Starting from the closed classes of the limit chain, each level finds the
//! time-scale `theta_n` at which its wells communicate, the reduced chain on
//! well labels at that scale, and the coarser partition formed by the
//! recurrent classes of the reduced chain. Asymptotics are extracted by
//! evaluating exact finite-`n` quantities on a geometric grid of `n` and
//! fitting monomials in log-log coordinates.
//!
//! The reduced rate from well `j` to well `k` is built by tracing the chain
//! on the union of the wells, averaging the trace rates out of `V_j` into
//! `V_k` with the conditioned stationary weights, and multiplying by
//! `theta_n`.

use crate::chain::{ChainSpec, ParamChainSpec, ProbabilityVector};
use crate::error::{Error, Result};
use crate::numeric::Precision;
use crate::tolerances;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

/// Geometric grid `base^start, ..., base^end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NGrid {
    pub base: f64,
    pub start: i32,
    pub end: i32,
}

impl Default for NGrid {
    fn default() -> Self {
        NGrid { base: 2.0, start: 6, end: 16 }
    }
}

impl NGrid {
    pub fn new(base: f64, start: i32, end: i32) -> Result<Self> {
        if !(base > 1.0) || !base.is_finite() {
            return Err(Error::InvalidArgument(format!("grid base {base} must exceed 1")));
        }
        if end - start + 1 < 4 {
            return Err(Error::InvalidArgument("the n-grid needs at least 4 points".into()));
        }
        if (start as f64) * base.ln() < 0.0 {
            return Err(Error::InvalidArgument("grid points must be >= 1".into()));
        }
        Ok(NGrid { base, start, end })
    }

    /// Parse `START:END` or `START:END:BASE`.
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::InvalidArgument(format!("bad n-grid `{s}`, expected START:END[:BASE]"));
        if parts.len() < 2 || parts.len() > 3 {
            return Err(bad());
        }
        let start = parts[0].trim().parse().map_err(|_| bad())?;
        let end = parts[1].trim().parse().map_err(|_| bad())?;
        let base = match parts.get(2) {
            Some(b) => b.trim().parse().map_err(|_| bad())?,
            None => 2.0,
        };
        NGrid::new(base, start, end)
    }

    pub fn points(&self) -> Vec<f64> {
        (self.start..=self.end).map(|k| self.base.powi(k)).collect()
    }

    pub fn largest(&self) -> f64 {
        self.base.powi(self.end)
    }
}

/// `value ~ coefficient * n^exponent`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AsymptoticScale {
    pub coefficient: f64,
    pub exponent: f64,
    /// Largest absolute residual of the log-log fit.
    pub residual: f64,
}

impl AsymptoticScale {
    pub fn at(&self, n: f64) -> f64 {
        self.coefficient * n.powf(self.exponent)
    }
}

/// Least-squares fit of `ln v = ln c + e ln n`.
pub fn fit_scale(samples: &[(f64, f64)]) -> Result<AsymptoticScale> {
    fit_scale_with(samples, tolerances::FIT_RESIDUAL)
}

/// [`fit_scale`] with an explicit residual threshold.
pub fn fit_scale_with(samples: &[(f64, f64)], max_residual: f64) -> Result<AsymptoticScale> {
    let fit = raw_fit(samples)?;
    if fit.residual > max_residual {
        return Err(Error::DegenerateFit(fit.residual));
    }
    Ok(fit)
}

fn raw_fit(samples: &[(f64, f64)]) -> Result<AsymptoticScale> {
    if samples.len() < 4 {
        return Err(Error::InvalidArgument("a scale fit needs at least 4 samples".into()));
    }
    if samples.iter().any(|&(n, v)| !(n > 0.0) || !(v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidArgument("scale fit needs positive samples".into()));
    }
    let xs: Vec<f64> = samples.iter().map(|s| s.0.ln()).collect();
    let ys: Vec<f64> = samples.iter().map(|s| s.1.ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("scale fit needs distinct n".into()));
    }
    let exponent = sxy / sxx;
    let intercept = my - exponent * mx;
    let residual = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - exponent * x).abs())
        .fold(0.0_f64, f64::max);
    Ok(AsymptoticScale { coefficient: intercept.exp(), exponent, residual })
}

/// Settings for the tree construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HierarchyOptions {
    pub grid: NGrid,
    pub precision: Precision,
    pub fit_residual: f64,
    pub vanishing_exponent: f64,
    pub exponent_margin: f64,
}

impl Default for HierarchyOptions {
    fn default() -> Self {
        HierarchyOptions {
            grid: NGrid::default(),
            precision: Precision::Double,
            fit_residual: tolerances::FIT_RESIDUAL,
            vanishing_exponent: tolerances::VANISHING_EXPONENT,
            exponent_margin: tolerances::EXPONENT_MARGIN,
        }
    }
}

/// Exact finite-`n` data of one level along the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelScan {
    pub n: Vec<f64>,
    pub theta: Vec<f64>,
    /// `rates[i][j][k]`: reduced rate from well `j` to well `k` at `n[i]`,
    /// already multiplied by `theta[i]`.
    pub rates: Vec<Vec<Vec<f64>>>,
}

fn check_wells(n_states: usize, wells: &[Vec<usize>]) -> Result<()> {
    if wells.len() < 2 {
        return Err(Error::InvalidArgument("a time-scale needs at least two wells".into()));
    }
    let mut seen = vec![false; n_states];
    for w in wells {
        if w.is_empty() {
            return Err(Error::InvalidArgument("empty well".into()));
        }
        for &x in w {
            if x >= n_states || seen[x] {
                return Err(Error::InvalidArgument("wells must be disjoint sets of states".into()));
            }
            seen[x] = true;
        }
    }
    Ok(())
}

/// Evaluate `theta_n` and the lumped trace rates at every grid point.
///
/// `1/theta_n = sum_j Cap_n(V_j, union of the other wells) / pi_n(V_j)`, and
/// the capacity is the stationary flux of the trace chain on the union of
/// all wells, so one elimination per `n` serves every well.
pub fn scan_level(family: &ParamChainSpec, wells: &[Vec<usize>], opts: &HierarchyOptions) -> Result<LevelScan> {
    check_wells(family.n_states(), wells)?;
    let points = opts.grid.points();
    let per_n: Vec<Result<(f64, Vec<Vec<f64>>)>> = points
        .par_iter()
        .map(|&n| {
            let chain = family.instantiate(n)?;
            let pi = chain.stationary_distribution_with(opts.precision)?;
            let mut keep = vec![false; chain.n_states()];
            for w in wells {
                for &x in w {
                    keep[x] = true;
                }
            }
            let tr = chain.trace_rates(&keep, opts.precision)?;
            let p = pi.weights();
            let m = wells.len();
            let mut flux = vec![vec![0.0; m]; m];
            let mut mass = vec![0.0; m];
            for (j, wj) in wells.iter().enumerate() {
                mass[j] = pi.mass(wj);
                for (k, wk) in wells.iter().enumerate() {
                    if k == j {
                        continue;
                    }
                    flux[j][k] = wj
                        .iter()
                        .map(|&x| p[x] * wk.iter().map(|&z| tr[x][z]).sum::<f64>())
                        .sum();
                }
            }
            let inv_theta: f64 = (0..m).map(|j| flux[j].iter().sum::<f64>() / mass[j]).sum();
            if !(inv_theta > 0.0) {
                return Err(Error::AllRatesVanish);
            }
            let theta = 1.0 / inv_theta;
            let rates = (0..m)
                .map(|j| (0..m).map(|k| theta * flux[j][k] / mass[j]).collect())
                .collect();
            Ok((theta, rates))
        })
        .collect();
    let mut theta = Vec::with_capacity(points.len());
    let mut rates = Vec::with_capacity(points.len());
    for r in per_n {
        let (t, m) = r?;
        theta.push(t);
        rates.push(m);
    }
    Ok(LevelScan { n: points, theta, rates })
}

/// Fitted `theta_n` for a partition into wells.
pub fn level_timescale(family: &ParamChainSpec, wells: &[Vec<usize>], opts: &HierarchyOptions) -> Result<AsymptoticScale> {
    let scan = scan_level(family, wells, opts)?;
    timescale_from_scan(&scan, opts)
}

fn timescale_from_scan(scan: &LevelScan, opts: &HierarchyOptions) -> Result<AsymptoticScale> {
    let samples: Vec<(f64, f64)> = scan.n.iter().copied().zip(scan.theta.iter().copied()).collect();
    fit_scale_with(&samples, opts.fit_residual)
}

/// Asymptotics of one reduced rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairFit {
    pub from: usize,
    pub to: usize,
    pub exponent: f64,
    pub residual: f64,
    /// Limit value; zero when the rate vanishes.
    pub limit: f64,
}

/// A reduced chain with the fits behind its rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedChainFit {
    pub chain: ChainSpec,
    pub pairs: Vec<PairFit>,
}

fn well_labels(m: usize) -> Vec<String> {
    (1..=m).map(|j| j.to_string()).collect()
}

/// Reduced chain on the labels `"1".."m"` of the given wells.
pub fn reduced_chain(family: &ParamChainSpec, wells: &[Vec<usize>], opts: &HierarchyOptions) -> Result<ReducedChainFit> {
    let scan = scan_level(family, wells, opts)?;
    reduced_from_scan(&scan, wells.len(), opts)
}

fn reduced_from_scan(scan: &LevelScan, m: usize, opts: &HierarchyOptions) -> Result<ReducedChainFit> {
    let mut pairs = Vec::new();
    let mut edges = Vec::new();
    for j in 0..m {
        for k in 0..m {
            if j == k {
                continue;
            }
            let samples: Vec<(f64, f64)> =
                scan.n.iter().zip(&scan.rates).map(|(&n, r)| (n, r[j][k])).collect();
            if samples.iter().all(|s| s.1 == 0.0) {
                continue;
            }
            if samples.iter().any(|s| !(s.1 > 0.0)) {
                return Err(Error::DegenerateFit(f64::INFINITY));
            }
            let fit = raw_fit(&samples)?;
            let limit = if fit.exponent < -opts.vanishing_exponent {
                0.0
            } else if fit.exponent <= opts.vanishing_exponent {
                if fit.residual > opts.fit_residual {
                    return Err(Error::DegenerateFit(fit.residual));
                }
                samples.last().map(|s| s.1).unwrap_or(0.0)
            } else {
                return Err(Error::DivergingRate { from: j + 1, to: k + 1, exponent: fit.exponent });
            };
            pairs.push(PairFit { from: j, to: k, exponent: fit.exponent, residual: fit.residual, limit });
            if limit > 0.0 {
                edges.push((j, k, limit));
            }
        }
    }
    if edges.is_empty() {
        return Err(Error::AllRatesVanish);
    }
    Ok(ReducedChainFit { chain: ChainSpec::new(well_labels(m), edges)?, pairs })
}

/// Next-level partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Coarsening {
    pub wells: Vec<Vec<usize>>,
    pub transient: Vec<usize>,
    /// Recurrent classes of the reduced chain, as lists of well labels (0-based).
    pub classes: Vec<Vec<usize>>,
}

/// Merge the wells of each recurrent class of the reduced chain; wells of
/// transient labels join the transient set.
pub fn coarsen(reduced: &ChainSpec, wells: &[Vec<usize>], transient: &[usize]) -> Result<Coarsening> {
    if reduced.n_states() != wells.len() {
        return Err(Error::InvalidArgument("reduced chain and wells disagree in size".into()));
    }
    let dec = reduced.class_decomposition();
    let mut new_transient = transient.to_vec();
    for &label in &dec.transient {
        new_transient.extend_from_slice(&wells[label]);
    }
    new_transient.sort_unstable();
    let new_wells: Vec<Vec<usize>> = dec
        .closed_classes
        .iter()
        .map(|class| {
            let mut w: Vec<usize> = class.iter().flat_map(|&l| wells[l].iter().copied()).collect();
            w.sort_unstable();
            w
        })
        .collect();
    if new_wells.len() >= wells.len() {
        return Err(Error::NotCoarser);
    }
    Ok(Coarsening { wells: new_wells, transient: new_transient, classes: dec.closed_classes })
}

/// `pi^(p+1)_m = sum_{j in class m} M_m(j) pi^(p)_j`, with `M_m` the
/// stationary distribution of the reduced chain restricted to the class.
pub fn level_measures(
    previous: &[ProbabilityVector],
    reduced: &ChainSpec,
    classes: &[Vec<usize>],
) -> Result<Vec<ProbabilityVector>> {
    let n = previous
        .first()
        .map(|p| p.len())
        .ok_or_else(|| Error::InvalidArgument("no level measures".into()))?;
    classes
        .iter()
        .map(|class| {
            let m = reduced.restrict(class)?.stationary_distribution()?;
            let mut w = vec![0.0; n];
            for (&label, &mj) in class.iter().zip(m.weights()) {
                for (acc, &v) in w.iter_mut().zip(previous[label].weights()) {
                    *acc += mj * v;
                }
            }
            ProbabilityVector::normalized(w)
        })
        .collect()
}

/// One generation of the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct HierarchyLevel {
    /// 1-based level index.
    pub index: usize,
    pub wells: Vec<Vec<usize>>,
    pub transient: Vec<usize>,
    /// Scale at which these wells communicate; absent on the terminal level.
    pub timescale: Option<AsymptoticScale>,
    pub reduced_chain: Option<ChainSpec>,
    pub reduced_pairs: Vec<PairFit>,
    pub level_measures: Vec<ProbabilityVector>,
}

/// The full tree; the last level has a single well.
#[derive(Debug, Clone, PartialEq)]
pub struct MetastableTree {
    pub states: Vec<String>,
    pub limit_chain: ChainSpec,
    pub levels: Vec<HierarchyLevel>,
    pub terminal: bool,
    pub grid: NGrid,
}

impl MetastableTree {
    /// Number of nontrivial levels (levels with a time-scale).
    pub fn depth(&self) -> usize {
        self.levels.iter().filter(|l| l.timescale.is_some()).count()
    }

    /// Level `p`, 1-based.
    pub fn level(&self, p: usize) -> Result<&HierarchyLevel> {
        if p == 0 || p > self.levels.len() {
            return Err(Error::InvalidArgument(format!("level {p} outside 1..={}", self.levels.len())));
        }
        Ok(&self.levels[p - 1])
    }

    /// Machine-readable form with state names.
    pub fn to_json(&self) -> Value {
        let names = |set: &[usize]| -> Vec<String> { set.iter().map(|&x| self.states[x].clone()).collect() };
        let levels: Vec<Value> = self
            .levels
            .iter()
            .map(|l| {
                let measures: Vec<Value> = l
                    .level_measures
                    .iter()
                    .map(|m| {
                        let mut obj = serde_json::Map::new();
                        for (x, &w) in m.weights().iter().enumerate() {
                            if w > 0.0 {
                                obj.insert(self.states[x].clone(), json!(w));
                            }
                        }
                        Value::Object(obj)
                    })
                    .collect();
                let reduced = l.reduced_chain.as_ref().map(|c| {
                    c.edges()
                        .iter()
                        .map(|e| json!({"from": c.states()[e.from], "to": c.states()[e.to], "rate": e.rate}))
                        .collect::<Vec<_>>()
                });
                json!({
                    "level": l.index,
                    "wells": l.wells.iter().map(|w| names(w)).collect::<Vec<_>>(),
                    "transient": names(&l.transient),
                    "timescale": l.timescale,
                    "reduced_chain": reduced,
                    "reduced_rate_fits": l.reduced_pairs,
                    "level_measures": measures,
                })
            })
            .collect();
        json!({
            "states": self.states,
            "depth": self.depth(),
            "terminal": self.terminal,
            "n_grid": self.grid,
            "levels": levels,
        })
    }
}

/// Stationary distributions of the limit chain on its closed classes.
pub fn first_level_measures(limit: &ChainSpec, classes: &[Vec<usize>]) -> Result<Vec<ProbabilityVector>> {
    classes
        .iter()
        .map(|class| {
            let local = limit.restrict(class)?.stationary_distribution()?;
            let mut w = vec![0.0; limit.n_states()];
            for (&x, &v) in class.iter().zip(local.weights()) {
                w[x] = v;
            }
            ProbabilityVector::normalized(w)
        })
        .collect()
}

/// Build the metastable tree of a family.
pub fn build_tree(family: &ParamChainSpec, opts: &HierarchyOptions) -> Result<MetastableTree> {
    let limit = family.limit_chain()?;
    let dec = limit.class_decomposition();
    let mut wells = dec.closed_classes;
    let mut transient = dec.transient;
    let mut measures = first_level_measures(&limit, &wells)?;
    let mut levels: Vec<HierarchyLevel> = Vec::new();
    let mut previous_exponent: Option<f64> = None;
    loop {
        let index = levels.len() + 1;
        if wells.len() == 1 {
            levels.push(HierarchyLevel {
                index,
                wells,
                transient,
                timescale: None,
                reduced_chain: None,
                reduced_pairs: Vec::new(),
                level_measures: measures,
            });
            break;
        }
        if index > family.n_states() {
            return Err(Error::IterationBound(family.n_states()));
        }
        let scan = scan_level(family, &wells, opts)?;
        let scale = timescale_from_scan(&scan, opts)?;
        if let Some(prev) = previous_exponent {
            if scale.exponent < prev + opts.exponent_margin {
                return Err(Error::NonIncreasingScale { previous: prev, current: scale.exponent });
            }
        }
        previous_exponent = Some(scale.exponent);
        let reduced = reduced_from_scan(&scan, wells.len(), opts)?;
        let next = coarsen(&reduced.chain, &wells, &transient)?;
        let next_measures = level_measures(&measures, &reduced.chain, &next.classes)?;
        levels.push(HierarchyLevel {
            index,
            wells,
            transient,
            timescale: Some(scale),
            reduced_chain: Some(reduced.chain),
            reduced_pairs: reduced.pairs,
            level_measures: measures,
        });
        wells = next.wells;
        transient = next.transient;
        measures = next_measures;
    }
    Ok(MetastableTree {
        states: family.states().to_vec(),
        limit_chain: limit,
        levels,
        terminal: true,
        grid: opts.grid,
    })
}

/// `max_z |pi_n(z)/pi_n(V_j) - pi^(p)_j(z)|` over the wells of a level, at
/// each grid point.
pub fn conditioned_measure_errors(
    family: &ParamChainSpec,
    level: &HierarchyLevel,
    grid: &NGrid,
) -> Result<Vec<(f64, f64)>> {
    grid.points()
        .into_iter()
        .map(|n| {
            let pi = family.instantiate(n)?.stationary_distribution()?;
            let mut err = 0.0_f64;
            for (well, target) in level.wells.iter().zip(&level.level_measures) {
                let mass = pi.mass(well);
                for &z in well {
                    err = err.max((pi.weights()[z] / mass - target.weights()[z]).abs());
                }
            }
            Ok((n, err))
        })
        .collect()
}

/// Fit of `pi_n(Delta)` for the transient set of the terminal level.
pub fn transient_mass_scale(family: &ParamChainSpec, tree: &MetastableTree) -> Result<Option<AsymptoticScale>> {
    let last = tree.levels.last().ok_or_else(|| Error::InvalidArgument("empty tree".into()))?;
    if last.transient.is_empty() {
        return Ok(None);
    }
    let samples: Vec<(f64, f64)> = tree
        .grid
        .points()
        .into_iter()
        .map(|n| Ok((n, family.instantiate(n)?.stationary_distribution()?.mass(&last.transient))))
        .collect::<Result<_>>()?;
    raw_fit(&samples).map(Some)
}
