//! Exact simulation of trajectories and Monte Carlo estimates.
//!
//! Paths use competing exponentials: an exponential holding time with the
//! state's total rate, then a jump target drawn proportionally to the
//! rates. Randomness comes from ChaCha8 seeded with a 64-bit seed; replica
//! `k` of a batch uses stream `k` of the same seed, so every replica is
//! reproducible on its own and independent of scheduling.

use crate::chain::{ChainSpec, ProbabilityVector};
use crate::error::{Error, Result};
use crate::flows::Flow;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::HashMap;

/// A path on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trajectory {
    pub n_states: usize,
    pub initial: usize,
    /// `(time, destination)` with strictly increasing times below `horizon`.
    pub jumps: Vec<(f64, usize)>,
    pub horizon: f64,
}

impl Trajectory {
    pub fn new(n_states: usize, initial: usize, jumps: Vec<(f64, usize)>, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidArgument(format!("horizon {horizon} must be positive")));
        }
        if initial >= n_states {
            return Err(Error::InvalidArgument("initial state out of range".into()));
        }
        let mut prev_t = 0.0;
        let mut prev_x = initial;
        for &(t, x) in &jumps {
            if !(t > prev_t) || t >= horizon {
                return Err(Error::InvalidArgument(format!("jump time {t} out of order")));
            }
            if x >= n_states || x == prev_x {
                return Err(Error::InvalidArgument(format!("bad jump destination {x}")));
            }
            prev_t = t;
            prev_x = x;
        }
        Ok(Trajectory { n_states, initial, jumps, horizon })
    }

    /// Time-ordered `(state, entry time, exit time)` segments.
    pub fn segments(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let starts = std::iter::once((0.0, self.initial)).chain(self.jumps.iter().copied());
        let ends = self.jumps.iter().map(|j| j.0).chain(std::iter::once(self.horizon));
        starts.zip(ends).map(|((t0, x), t1)| (x, t0, t1))
    }

    /// `int_0^T f(X_s) ds`.
    pub fn integral(&self, f: &[f64]) -> f64 {
        self.segments().map(|(x, a, b)| f[x] * (b - a)).sum()
    }

    pub fn state_at(&self, t: f64) -> usize {
        match self.jumps.partition_point(|j| j.0 <= t) {
            0 => self.initial,
            k => self.jumps[k - 1].1,
        }
    }
}

/// Jump tables of a chain: holding rate and cumulative targets per state.
struct Sampler {
    holding: Vec<f64>,
    targets: Vec<Vec<(f64, usize)>>,
}

impl Sampler {
    fn new(chain: &ChainSpec) -> Self {
        let mut targets: Vec<Vec<(f64, usize)>> = vec![Vec::new(); chain.n_states()];
        for e in chain.edges() {
            if e.rate > 0.0 {
                let acc = targets[e.from].last().map_or(0.0, |t| t.0);
                targets[e.from].push((acc + e.rate, e.to));
            }
        }
        let holding = targets.iter().map(|t| t.last().map_or(0.0, |l| l.0)).collect();
        Sampler { holding, targets }
    }

    fn run(&self, chain: &ChainSpec, x0: usize, horizon: f64, rng: &mut ChaCha8Rng) -> Result<Trajectory> {
        let mut t = 0.0;
        let mut x = x0;
        let mut jumps = Vec::new();
        loop {
            let lambda = self.holding[x];
            if lambda == 0.0 {
                return Err(Error::AbsorbingState(chain.states()[x].clone()));
            }
            t += Exp::new(lambda).expect("positive rate").sample(rng);
            if t >= horizon {
                break;
            }
            let u = rng.gen::<f64>() * lambda;
            let table = &self.targets[x];
            let k = table.partition_point(|c| c.0 <= u).min(table.len() - 1);
            x = table[k].1;
            jumps.push((t, x));
        }
        Ok(Trajectory { n_states: chain.n_states(), initial: x0, jumps, horizon })
    }
}

fn replica_rng(seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(replica);
    rng
}

/// Simulate from `x0` up to time `horizon`.
pub fn sample_path(chain: &ChainSpec, x0: usize, horizon: f64, seed: u64) -> Result<Trajectory> {
    check(chain, x0, horizon)?;
    Sampler::new(chain).run(chain, x0, horizon, &mut replica_rng(seed, 0))
}

fn check(chain: &ChainSpec, x0: usize, horizon: f64) -> Result<()> {
    if x0 >= chain.n_states() {
        return Err(Error::InvalidArgument(format!("initial state {x0} out of range")));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidArgument(format!("horizon {horizon} must be positive")));
    }
    Ok(())
}

/// Empirical measure `L_T` and current `Q_T` (jump counts over `T`); the
/// current lives on the edges that were traversed, in order of first use.
pub fn empirical_pair(traj: &Trajectory) -> Result<(ProbabilityVector, Flow)> {
    let mut occupation = vec![0.0; traj.n_states];
    for (x, a, b) in traj.segments() {
        occupation[x] += b - a;
    }
    let measure = ProbabilityVector::normalized(occupation)?;
    let mut order = Vec::new();
    let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
    let mut prev = traj.initial;
    for &(_, x) in &traj.jumps {
        let c = counts.entry((prev, x)).or_insert(0);
        if *c == 0 {
            order.push((prev, x));
        }
        *c += 1;
        prev = x;
    }
    let values = order.iter().map(|e| counts[e] as f64 / traj.horizon).collect();
    Ok((measure, Flow::new(traj.n_states, order, values)?))
}

/// An estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub standard_error: f64,
}

impl Estimate {
    /// `|value - target|` in units of the standard error.
    pub fn z_score(&self, target: f64) -> f64 {
        let d = (self.value - target).abs();
        if d == 0.0 {
            0.0
        } else {
            d / self.standard_error
        }
    }
}

/// `Q_T(from, to)` with a batch-means standard error over `batches` equal
/// time windows.
pub fn current_estimate(traj: &Trajectory, from: usize, to: usize, batches: usize) -> Result<Estimate> {
    if batches < 2 {
        return Err(Error::InvalidArgument("batch means need at least 2 batches".into()));
    }
    let width = traj.horizon / batches as f64;
    let mut counts = vec![0.0; batches];
    let mut prev = traj.initial;
    for &(t, x) in &traj.jumps {
        if prev == from && x == to {
            counts[((t / width) as usize).min(batches - 1)] += 1.0;
        }
        prev = x;
    }
    let rates: Vec<f64> = counts.iter().map(|c| c / width).collect();
    Ok(mean_and_error(&rates))
}

/// Time fraction in `state`, with a batch-means standard error.
pub fn occupation_estimate(traj: &Trajectory, state: usize, batches: usize) -> Result<Estimate> {
    if batches < 2 {
        return Err(Error::InvalidArgument("batch means need at least 2 batches".into()));
    }
    let width = traj.horizon / batches as f64;
    let mut time = vec![0.0; batches];
    for (x, a, b) in traj.segments() {
        if x != state {
            continue;
        }
        let (mut s, end) = (a, b);
        while s < end {
            let k = ((s / width) as usize).min(batches - 1);
            let edge = if k + 1 == batches { end } else { ((k + 1) as f64 * width).min(end) };
            time[k] += edge - s;
            s = edge;
        }
    }
    let fractions: Vec<f64> = time.iter().map(|t| t / width).collect();
    Ok(mean_and_error(&fractions))
}

fn mean_and_error(xs: &[f64]) -> Estimate {
    let k = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / k;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (k - 1.0);
    Estimate { value: mean, standard_error: (var / k).sqrt() }
}

/// Sample `replicas` paths of length `horizon`, replica `k` on stream `k`.
/// Paths start from `start`, or from a stationary draw when `start` is `None`.
pub fn sample_replicas(
    chain: &ChainSpec,
    start: Option<usize>,
    horizon: f64,
    replicas: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if let Some(x0) = start {
        check(chain, x0, horizon)?;
    } else {
        check(chain, 0, horizon)?;
    }
    let pi = if start.is_none() { Some(chain.stationary_distribution()?) } else { None };
    let sampler = Sampler::new(chain);
    (0..replicas as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = replica_rng(seed, k);
            let x0 = match (&pi, start) {
                (_, Some(x)) => x,
                (Some(pi), None) => draw(pi, &mut rng),
                (None, None) => unreachable!(),
            };
            sampler.run(chain, x0, horizon, &mut rng)
        })
        .collect()
}

fn draw(pi: &ProbabilityVector, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (x, &w) in pi.weights().iter().enumerate() {
        acc += w;
        if u < acc {
            return x;
        }
    }
    pi.len() - 1
}

/// Monte Carlo asymptotic variance: the replica variance of
/// `T^{-1/2} int_0^T f(X_s) ds` from stationary starts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceEstimate {
    pub estimate: f64,
    pub standard_error: f64,
    pub replicas: usize,
    /// Per-replica `T^{-1/2} int_0^T f`.
    pub samples: Vec<f64>,
}

pub fn variance_estimate(chain: &ChainSpec, f: &[f64], horizon: f64, replicas: usize, seed: u64) -> Result<VarianceEstimate> {
    chain.check_len(f.len(), "function")?;
    if replicas < 2 {
        return Err(Error::InvalidArgument("variance estimate needs at least 2 replicas".into()));
    }
    let paths = sample_replicas(chain, None, horizon, replicas, seed)?;
    let samples: Vec<f64> = paths.iter().map(|p| p.integral(f) / horizon.sqrt()).collect();
    let r = replicas as f64;
    let mean = samples.iter().sum::<f64>() / r;
    let centered: Vec<f64> = samples.iter().map(|s| (s - mean).powi(2)).collect();
    let estimate = centered.iter().sum::<f64>() / (r - 1.0);
    // Standard error of a sample variance from the fourth central moment.
    let m4 = centered.iter().map(|c| c * c).sum::<f64>() / r;
    let standard_error = ((m4 - estimate * estimate).max(0.0) / r).sqrt();
    Ok(VarianceEstimate { estimate, standard_error, replicas, samples })
}
