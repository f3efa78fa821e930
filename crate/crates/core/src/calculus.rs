//! Derivatives of the DV functional and the asymptotic variance.
//!
//! All operators live in `L^2(mu)` at a strictly positive base measure `mu`
//! and act through the tilted generator `L_H` with `H = H_mu`, for which
//! `mu` is stationary. The symmetric part is inverted on functions that
//! vanish at the first state, which removes the constants from its kernel.

use crate::chain::{ChainSpec, ProbabilityVector};
use crate::error::{Error, Result};
use crate::numeric::{lu_solve, spd_solve};
use crate::rate::{dv_rate_variational, tilt_inverse, tilt_solver, TiltField};
use crate::tolerances;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

/// A zero-sum function on states.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedMeasure {
    values: Vec<f64>,
}

impl SignedMeasure {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMeasure("signed measure must be finite".into()));
        }
        let total: f64 = values.iter().sum();
        let l1: f64 = values.iter().map(|v| v.abs()).sum();
        if total.abs() > tolerances::MEASURE_SUM * (1.0 + l1) {
            return Err(Error::InvalidMeasure(format!("signed measure sums to {total:e}, not 0")));
        }
        Ok(SignedMeasure { values })
    }

    /// `mu - nu` for two probability vectors.
    pub fn difference(mu: &ProbabilityVector, nu: &ProbabilityVector) -> Result<Self> {
        if mu.len() != nu.len() {
            return Err(Error::InvalidArgument("measures differ in length".into()));
        }
        SignedMeasure::new(mu.weights().iter().zip(nu.weights()).map(|(a, b)| a - b).collect())
    }

    pub fn zero(n: usize) -> Self {
        SignedMeasure { values: vec![0.0; n] }
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

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, c: f64) -> SignedMeasure {
        SignedMeasure { values: self.values.iter().map(|v| c * v).collect() }
    }

    /// `mu + eps * self`, which must stay a probability vector.
    pub fn shift(&self, mu: &ProbabilityVector, eps: f64) -> Result<ProbabilityVector> {
        ProbabilityVector::normalized(mu.weights().iter().zip(&self.values).map(|(m, v)| m + eps * v).collect())
    }
}

/// Tilted generator at `(chain, mu)` with its `L^2(mu)` adjoint and
/// symmetric part.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorBundle {
    pub mu: Vec<f64>,
    pub tilt: TiltField,
    /// `L_H` as a matrix acting on column vectors of function values.
    pub generator: DMatrix<f64>,
}

impl OperatorBundle {
    /// Bundle at `mu`, tilting by `H_mu`.
    pub fn at(chain: &ChainSpec, mu: &ProbabilityVector) -> Result<Self> {
        let tilt = tilt_solver(chain, mu)?;
        Self::with_tilt(chain, mu, tilt)
    }

    /// Bundle for an explicit tilt.
    pub fn with_tilt(chain: &ChainSpec, mu: &ProbabilityVector, tilt: TiltField) -> Result<Self> {
        require_positive(chain, mu)?;
        let generator = chain.tilted(tilt.values())?.generator_matrix();
        Ok(OperatorBundle { mu: mu.weights().to_vec(), tilt, generator })
    }

    pub fn n(&self) -> usize {
        self.mu.len()
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        (&self.generator * DVector::from_column_slice(f)).iter().copied().collect()
    }

    /// `L* f = M^{-1} L^T M f`.
    pub fn adjoint_apply(&self, f: &[f64]) -> Vec<f64> {
        let mf = DVector::from_iterator(self.n(), f.iter().zip(&self.mu).map(|(a, m)| a * m));
        (self.generator.transpose() * mf).iter().zip(&self.mu).map(|(v, m)| v / m).collect()
    }

    pub fn symmetric_apply(&self, f: &[f64]) -> Vec<f64> {
        self.apply(f).iter().zip(self.adjoint_apply(f)).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    /// `<f, g>_mu`.
    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        f.iter().zip(g).zip(&self.mu).map(|((a, b), m)| a * b * m).sum()
    }

    /// Matrix of `M (-L^s)`: symmetric, positive semidefinite, constants in
    /// the kernel.
    pub fn dirichlet_matrix(&self) -> DMatrix<f64> {
        let m = DMatrix::from_diagonal(&DVector::from_column_slice(&self.mu));
        let ml = &m * &self.generator;
        -(&ml + ml.transpose()) * 0.5
    }

    /// Solve `(-L^s) g = f` for `g` vanishing at the first state; `f` must be
    /// `mu`-mean-zero.
    pub fn solve_symmetric(&self, f: &[f64]) -> Result<Vec<f64>> {
        let n = self.n();
        let d = self.dirichlet_matrix();
        let a = d.view((1, 1), (n - 1, n - 1)).clone_owned();
        let b = DVector::from_iterator(n - 1, (1..n).map(|x| self.mu[x] * f[x]));
        let sol = spd_solve(a, &b).map_err(|_| Error::SingularSymmetricPart)?;
        let mut g = vec![0.0; n];
        g[1..].copy_from_slice(sol.as_slice());
        Ok(g)
    }
}

fn require_positive(chain: &ChainSpec, mu: &ProbabilityVector) -> Result<()> {
    chain.check_len(mu.len(), "measure")?;
    if let Some(x) = mu.first_zero() {
        return Err(Error::NotStrictlyPositive(chain.states()[x].clone()));
    }
    Ok(())
}

fn density(mu: &[f64], nu: &SignedMeasure) -> Vec<f64> {
    nu.values().iter().zip(mu).map(|(v, m)| v / m).collect()
}

/// `sum_x nu(x) sum_y R(x,y) (1 - exp(H_mu(y) - H_mu(x)))`.
pub fn first_derivative(chain: &ChainSpec, mu: &ProbabilityVector, nu: &SignedMeasure) -> Result<f64> {
    require_positive(chain, mu)?;
    chain.check_len(nu.len(), "direction")?;
    let h = tilt_solver(chain, mu)?;
    Ok(first_derivative_at(chain, &h, nu))
}

fn first_derivative_at(chain: &ChainSpec, h: &TiltField, nu: &SignedMeasure) -> f64 {
    let hv = h.values();
    chain
        .edges()
        .iter()
        .map(|e| -nu.values()[e.from] * e.rate * (hv[e.to] - hv[e.from]).exp_m1())
        .sum()
}

/// Derivative of `H_mu` along `nu`: `(1/2) (L^s)^{-1} L* f` with `f = d nu / d mu`.
pub fn tilt_derivative(chain: &ChainSpec, mu: &ProbabilityVector, nu: &SignedMeasure) -> Result<TiltField> {
    chain.check_len(nu.len(), "direction")?;
    let ops = OperatorBundle::at(chain, mu)?;
    TiltField::new(tilt_derivative_with(&ops, nu)?)
}

fn tilt_derivative_with(ops: &OperatorBundle, nu: &SignedMeasure) -> Result<Vec<f64>> {
    let f = density(&ops.mu, nu);
    let rhs: Vec<f64> = ops.adjoint_apply(&f).iter().map(|v| -0.5 * v).collect();
    ops.solve_symmetric(&rhs)
}

/// `(1/2) <f1, L_H (-L^s)^{-1} L* f2>_mu`.
pub fn second_derivative(
    chain: &ChainSpec,
    mu: &ProbabilityVector,
    nu1: &SignedMeasure,
    nu2: &SignedMeasure,
) -> Result<f64> {
    chain.check_len(nu1.len(), "direction")?;
    chain.check_len(nu2.len(), "direction")?;
    let ops = OperatorBundle::at(chain, mu)?;
    second_derivative_with(&ops, nu1, nu2)
}

fn second_derivative_with(ops: &OperatorBundle, nu1: &SignedMeasure, nu2: &SignedMeasure) -> Result<f64> {
    let g2 = tilt_derivative_with(ops, nu2)?;
    let lg = ops.apply(&g2);
    Ok(-nu1.values().iter().zip(&lg).map(|(a, b)| a * b).sum::<f64>())
}

/// `sigma^2(f) = 2 <g, (-L^s) g>_pi` with `L g = f`, for `pi`-mean-zero `f`.
pub fn asymptotic_variance(chain: &ChainSpec, f: &[f64]) -> Result<f64> {
    chain.check_len(f.len(), "function")?;
    let pi = chain.stationary_distribution()?;
    let mean: f64 = pi.weights().iter().zip(f).map(|(p, v)| p * v).sum();
    let scale = f.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if mean.abs() > tolerances::MEAN_ZERO * (1.0 + scale) {
        return Err(Error::NotMeanZero(mean));
    }
    let g = poisson_solve(chain, &pi, f)?;
    // 2 <g, (-L^s) g>_pi = sum_(x,y) pi(x) R(x,y) (g(y) - g(x))^2
    Ok(chain
        .edges()
        .iter()
        .map(|e| pi.weights()[e.from] * e.rate * (g[e.to] - g[e.from]).powi(2))
        .sum())
}

/// `pi`-mean-zero solution of `L g = f` through `(L + 1 pi^T) g = f`.
pub fn poisson_solve(chain: &ChainSpec, pi: &ProbabilityVector, f: &[f64]) -> Result<Vec<f64>> {
    let n = chain.n_states();
    let mut a = chain.generator_matrix();
    for x in 0..n {
        for y in 0..n {
            a[(x, y)] += pi.weights()[y];
        }
    }
    Ok(lu_solve(a, &DVector::from_column_slice(f))?.iter().copied().collect())
}

/// Matrix of the quadratic form `h -> sigma^2(h - pi(h))`.
pub fn variance_form(chain: &ChainSpec) -> Result<DMatrix<f64>> {
    let n = chain.n_states();
    let pi = chain.stationary_distribution()?;
    let p = pi.weights();
    let mut a = chain.generator_matrix();
    for x in 0..n {
        for y in 0..n {
            a[(x, y)] += p[y];
        }
    }
    // Centering then solving: columns of (L + 1 pi^T)^{-1} (I - 1 pi^T).
    let mut center = DMatrix::identity(n, n);
    for x in 0..n {
        for y in 0..n {
            center[(x, y)] -= p[y];
        }
    }
    let lu = a.lu();
    let solve = lu.solve(&center).ok_or_else(|| Error::SingularSystem("Poisson operator".into()))?;
    let pim = DMatrix::from_diagonal(&DVector::from_column_slice(p));
    let l = chain.generator_matrix();
    let ml = &pim * &l;
    let dirichlet = -(&ml + ml.transpose());
    Ok(solve.transpose() * dirichlet * solve)
}

/// Small-tilt limit of `eps^-2 I(pi_eps)` with `pi_eps` the measure whose
/// maximizing tilt is `eps H`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadraticLimitReport {
    /// `(eps, eps^-2 I(pi_eps))`, largest step first.
    pub samples: Vec<(f64, f64)>,
    pub extrapolated: f64,
    /// `<(-L^s) H, H>_pi`.
    pub target: f64,
    pub relative_error: f64,
}

pub const TILT_STEPS: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

pub fn quadratic_tilt_limit(chain: &ChainSpec, h: &TiltField) -> Result<QuadraticLimitReport> {
    chain.check_len(h.len(), "tilt")?;
    let pi = chain.stationary_distribution()?;
    let hv = h.values();
    let lh = chain.apply_generator(hv)?;
    let target = -pi.weights().iter().zip(hv).zip(&lh).map(|((p, a), b)| p * a * b).sum::<f64>();
    let samples: Vec<(f64, f64)> = TILT_STEPS
        .iter()
        .map(|&eps| {
            let scaled = TiltField::new(hv.iter().map(|v| eps * v).collect())?;
            let pe = tilt_inverse(chain, &scaled)?;
            Ok((eps, dv_rate_variational(chain, &pe)? / (eps * eps)))
        })
        .collect::<Result<_>>()?;
    let extrapolated = richardson(&samples.iter().map(|s| s.1).collect::<Vec<_>>(), 10.0);
    let relative_error = (extrapolated - target).abs() / target.abs().max(f64::MIN_POSITIVE);
    let relative_error = if target == 0.0 && extrapolated.abs() < 1e-12 { 0.0 } else { relative_error };
    Ok(QuadraticLimitReport { samples, extrapolated, target, relative_error })
}

/// Extrapolate `g(eps_k)` with `eps_{k+1} = eps_k / ratio` to `eps = 0`,
/// assuming an expansion in integer powers of `eps`.
pub fn richardson(values: &[f64], ratio: f64) -> f64 {
    let mut table = values.to_vec();
    let mut factor = 1.0;
    for level in 1..values.len() {
        factor *= ratio;
        for i in (level..values.len()).rev() {
            table[i] = table[i] + (table[i] - table[i - 1]) / (factor - 1.0);
        }
    }
    *table.last().unwrap_or(&f64::NAN)
}

/// The two sides of the Legendre identity at `pi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LegendreReport {
    /// `sup_h 2 <f,h>_pi - sigma^2(h)`.
    pub dual: f64,
    /// `second_derivative(pi; nu, nu)`.
    pub second_derivative: f64,
    pub relative_error: f64,
}

/// Compare the Hessian of the DV functional at `pi` with the Legendre
/// transform of half the asymptotic variance.
pub fn legendre_check(chain: &ChainSpec, nu: &SignedMeasure) -> Result<LegendreReport> {
    chain.check_len(nu.len(), "direction")?;
    let s = variance_form(chain)?;
    let v = DVector::from_column_slice(nu.values());
    // 2 <f,h>_pi = 2 nu^T h, so the supremum is nu^T S^+ nu. S is symmetric,
    // so the pseudo-inverse comes from its eigendecomposition.
    let eig = SymmetricEigen::new(s);
    let tol = eig.eigenvalues.amax() * 1e-12;
    let coords = eig.eigenvectors.transpose() * &v;
    let dual: f64 = coords
        .iter()
        .zip(eig.eigenvalues.iter())
        .filter(|(_, &l)| l > tol)
        .map(|(c, &l)| c * c / l)
        .sum();
    let pi = chain.stationary_distribution()?;
    let second = second_derivative(chain, &pi, nu, nu)?;
    let denom = dual.abs().max(second.abs());
    let relative_error = if denom == 0.0 { 0.0 } else { (dual - second).abs() / denom };
    Ok(LegendreReport { dual, second_derivative: second, relative_error })
}

/// A closed-form value next to its finite-difference estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FiniteDifferenceCheck {
    pub value: f64,
    pub finite_difference: f64,
    /// `|value - fd| / (1 + |value|)`.
    pub relative_error: f64,
}

impl FiniteDifferenceCheck {
    fn new(value: f64, finite_difference: f64) -> Self {
        FiniteDifferenceCheck { value, finite_difference, relative_error: (value - finite_difference).abs() / (1.0 + value.abs()) }
    }
}

/// Default finite-difference step: `1e-4` per unit of `|nu|_inf`.
pub fn default_step(nu: &SignedMeasure) -> f64 {
    1e-4 / nu.sup_norm().max(f64::MIN_POSITIVE)
}

/// Central difference of `g` at step `eps` and `eps/2`, Richardson combined.
fn central<F: Fn(f64) -> Result<f64>>(g: F, eps: f64) -> Result<f64> {
    let d1 = (g(eps)? - g(-eps)?) / (2.0 * eps);
    let d2 = (g(eps / 2.0)? - g(-eps / 2.0)?) / eps;
    Ok((4.0 * d2 - d1) / 3.0)
}

/// [`first_derivative`] against central differences of the DV functional.
pub fn check_first_derivative(chain: &ChainSpec, mu: &ProbabilityVector, nu: &SignedMeasure) -> Result<FiniteDifferenceCheck> {
    let value = first_derivative(chain, mu, nu)?;
    if nu.sup_norm() == 0.0 {
        return Ok(FiniteDifferenceCheck::new(value, 0.0));
    }
    let fd = central(|e| dv_rate_variational(chain, &nu.shift(mu, e)?), default_step(nu))?;
    Ok(FiniteDifferenceCheck::new(value, fd))
}

/// [`second_derivative`] against central differences of [`first_derivative`]
/// in the second direction.
pub fn check_second_derivative(
    chain: &ChainSpec,
    mu: &ProbabilityVector,
    nu1: &SignedMeasure,
    nu2: &SignedMeasure,
) -> Result<FiniteDifferenceCheck> {
    let value = second_derivative(chain, mu, nu1, nu2)?;
    if nu2.sup_norm() == 0.0 {
        return Ok(FiniteDifferenceCheck::new(value, 0.0));
    }
    let fd = central(|e| first_derivative(chain, &nu2.shift(mu, e)?, nu1), default_step(nu2))?;
    Ok(FiniteDifferenceCheck::new(value, fd))
}

/// Sup-norm distance between [`tilt_derivative`] and central differences of
/// `H_mu`.
pub fn check_tilt_derivative(chain: &ChainSpec, mu: &ProbabilityVector, nu: &SignedMeasure) -> Result<f64> {
    let dh = tilt_derivative(chain, mu, nu)?;
    if nu.sup_norm() == 0.0 {
        return Ok(dh.values().iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    }
    let eps = default_step(nu);
    let n = mu.len();
    let tilt_at = |e: f64| -> Result<Vec<f64>> { Ok(tilt_solver(chain, &nu.shift(mu, e)?)?.values().to_vec()) };
    let (p1, m1, p2, m2) = (tilt_at(eps)?, tilt_at(-eps)?, tilt_at(eps / 2.0)?, tilt_at(-eps / 2.0)?);
    let mut worst = 0.0_f64;
    for x in 0..n {
        let d1 = (p1[x] - m1[x]) / (2.0 * eps);
        let d2 = (p2[x] - m2[x]) / eps;
        worst = worst.max(((4.0 * d2 - d1) / 3.0 - dh.values()[x]).abs());
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog;
    use proptest::prelude::*;

    fn pv(w: &[f64]) -> ProbabilityVector {
        ProbabilityVector::new(w.to_vec()).unwrap()
    }

    fn sm(w: &[f64]) -> SignedMeasure {
        SignedMeasure::new(w.to_vec()).unwrap()
    }

    #[test]
    fn signed_measure_validation() {
        assert!(SignedMeasure::new(vec![0.1, -0.05]).is_err());
        assert!(SignedMeasure::new(vec![0.1, -0.1]).is_ok());
    }

    #[test]
    fn first_derivative_examples() {
        let c = catalog::three_cycle();
        let pi = c.stationary_distribution().unwrap();
        assert!(first_derivative(&c, &pi, &sm(&[0.2, -0.1, -0.1])).unwrap().abs() < 1e-12);

        let (r, s) = (2.0, 3.0);
        let two = catalog::two_state(r, s);
        let mu = pv(&[0.3, 0.7]);
        let nu = sm(&[0.1, -0.1]);
        let d = first_derivative(&two, &mu, &nu).unwrap();
        // d/dt of the closed form at t = 0.3, times 0.1.
        let oracle = |t: f64| r - s - (r * s).sqrt() * (1.0 - 2.0 * t) / (t * (1.0 - t)).sqrt();
        assert!((d - 0.1 * oracle(0.3)).abs() < 1e-10);
        let d2 = first_derivative(&two, &mu, &nu.scaled(2.0)).unwrap();
        assert!((d2 - 2.0 * d).abs() < 1e-12);
    }

    #[test]
    fn tilt_derivative_two_state_closed_form() {
        let (r, s) = (2.0, 3.0);
        let two = catalog::two_state(r, s);
        let m = 0.3;
        let dh = tilt_derivative(&two, &pv(&[m, 1.0 - m]), &sm(&[1.0, -1.0])).unwrap();
        // H(y) = (1/2) ln((1-m) s / (m r)), so dH(y)/dm = -1/(2 m (1-m)).
        assert!((dh.values()[1] + 0.5 / (m * (1.0 - m))).abs() < 1e-10);
        assert!(tilt_derivative(&two, &pv(&[m, 1.0 - m]), &SignedMeasure::zero(2)).unwrap().values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn second_derivative_two_state_closed_form() {
        let (r, s) = (2.0, 3.0);
        let two = catalog::two_state(r, s);
        let t = 0.35;
        let v = second_derivative(&two, &pv(&[t, 1.0 - t]), &sm(&[1.0, -1.0]), &sm(&[1.0, -1.0])).unwrap();
        // d^2/dt^2 of -2 sqrt(rs) sqrt(t(1-t)) = sqrt(rs) / (2 (t(1-t))^{3/2}).
        let oracle = (r * s).sqrt() / (2.0 * (t * (1.0 - t)).powf(1.5));
        assert!((v - oracle).abs() < 1e-9 * oracle, "{v} {oracle}");
    }

    #[test]
    fn asymptotic_variance_two_state() {
        let (r, s) = (2.0, 3.0);
        let two = catalog::two_state(r, s);
        // pi = (s, r)/(r+s); f = (r, -s) is mean-zero.
        let f = [r, -s];
        let v = asymptotic_variance(&two, &f).unwrap();
        let oracle = 2.0 * (f[0] - f[1]).powi(2) * r * s / (r + s).powi(3);
        assert!((v - oracle).abs() < 1e-12 * oracle);
        assert_eq!(asymptotic_variance(&two, &[0.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(asymptotic_variance(&two, &[1.0, 1.0]), Err(Error::NotMeanZero(_))));
        let v3 = asymptotic_variance(&two, &[3.0 * r, -3.0 * s]).unwrap();
        assert!((v3 - 9.0 * v).abs() < 1e-10 * v3);
    }

    #[test]
    fn quadratic_limit_reversible_dirichlet_form() {
        let two = catalog::two_state(2.0, 3.0);
        let h = TiltField::new(vec![0.0, 1.0]).unwrap();
        let rep = quadratic_tilt_limit(&two, &h).unwrap();
        let pi = two.stationary_distribution().unwrap();
        // Dirichlet form (1/2) sum_(x,y) pi(x) R(x,y) (H(y) - H(x))^2
        let dirichlet = 0.5 * (pi.weights()[0] * 2.0 + pi.weights()[1] * 3.0);
        assert!((rep.target - dirichlet).abs() < 1e-12);
        assert!(rep.relative_error < 1e-4, "{rep:?}");

        let c3 = catalog::three_cycle();
        let rep = quadratic_tilt_limit(&c3, &TiltField::new(vec![0.0, 1.0, 0.0]).unwrap()).unwrap();
        assert!(rep.relative_error < 1e-4, "{rep:?}");
        let zero = quadratic_tilt_limit(&c3, &TiltField::zero(3)).unwrap();
        assert_eq!(zero.target, 0.0);
        assert!(zero.extrapolated.abs() < 1e-12);
    }

    #[test]
    fn legendre_examples() {
        let two = catalog::two_state(2.0, 3.0);
        let rep = legendre_check(&two, &sm(&[0.3, -0.3])).unwrap();
        assert!(rep.relative_error < 1e-6, "{rep:?}");
        let rep = legendre_check(&two, &SignedMeasure::zero(2)).unwrap();
        assert_eq!((rep.dual, rep.second_derivative), (0.0, 0.0));
        let four = ChainSpec::named(
            &["a", "b", "c", "d"],
            &[("a", "b", 1.0), ("b", "c", 2.0), ("c", "d", 0.5), ("d", "a", 1.5), ("a", "c", 0.3), ("c", "a", 0.7)],
        )
        .unwrap();
        let rep = legendre_check(&four, &sm(&[0.1, -0.3, 0.05, 0.15])).unwrap();
        assert!(rep.relative_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn operator_bundle_adjointness() {
        let c3 = catalog::three_cycle();
        let ops = OperatorBundle::at(&c3, &pv(&[0.5, 0.3, 0.2])).unwrap();
        let (f, g) = ([0.3, -1.0, 2.0], [1.0, 0.5, -0.7]);
        let lhs = ops.inner(&f, &ops.apply(&g));
        let rhs = ops.inner(&ops.adjoint_apply(&f), &g);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    fn instance() -> impl Strategy<Value = (ChainSpec, ProbabilityVector, SignedMeasure, SignedMeasure)> {
        (2usize..=5).prop_flat_map(|n| {
            (
                proptest::collection::vec(0.2f64..3.0, n * n),
                proptest::collection::vec(0.05f64..1.0, n),
                proptest::collection::vec(-1.0f64..1.0, n),
                proptest::collection::vec(-1.0f64..1.0, n),
            )
                .prop_map(move |(rates, w, a, b)| {
                    let mut edges = Vec::new();
                    for x in 0..n {
                        for y in 0..n {
                            // Ring edges keep the chain irreducible; others appear at random.
                            if x != y && ((y == (x + 1) % n) || rates[x * n + y] > 1.5) {
                                edges.push((x, y, rates[x * n + y]));
                            }
                        }
                    }
                    let names = (0..n).map(|i| i.to_string()).collect();
                    let chain = ChainSpec::new(names, edges).unwrap();
                    let mu = ProbabilityVector::normalized(w).unwrap();
                    let center = |v: Vec<f64>| {
                        let m = v.iter().sum::<f64>() / n as f64;
                        SignedMeasure::new(v.iter().map(|x| x - m).collect()).unwrap()
                    };
                    (chain, mu, center(a), center(b))
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(60))]

        #[test]
        fn derivatives_match_finite_differences((chain, mu, nu1, nu2) in instance()) {
            let c = check_first_derivative(&chain, &mu, &nu1).unwrap();
            prop_assert!(c.relative_error <= 1e-5, "{:?}", c);
            let c = check_second_derivative(&chain, &mu, &nu1, &nu2).unwrap();
            prop_assert!(c.relative_error <= 1e-4, "{:?}", c);
            prop_assert!(check_tilt_derivative(&chain, &mu, &nu1).unwrap() <= 1e-4);
        }

        #[test]
        fn second_derivative_symmetric((chain, mu, nu1, nu2) in instance()) {
            let a = second_derivative(&chain, &mu, &nu1, &nu2).unwrap();
            let b = second_derivative(&chain, &mu, &nu2, &nu1).unwrap();
            prop_assert!((a - b).abs() <= 1e-10 * (1.0 + a.abs()));
        }

        #[test]
        fn variance_is_nonnegative_quadratic((chain, _mu, a, b) in instance()) {
            let pi = chain.stationary_distribution().unwrap();
            let center = |v: &[f64]| -> Vec<f64> {
                let m: f64 = v.iter().zip(pi.weights()).map(|(x, p)| x * p).sum();
                v.iter().map(|x| x - m).collect()
            };
            let (f, g) = (center(a.values()), center(b.values()));
            let plus: Vec<f64> = f.iter().zip(&g).map(|(x, y)| x + y).collect();
            let minus: Vec<f64> = f.iter().zip(&g).map(|(x, y)| x - y).collect();
            let (vf, vg) = (asymptotic_variance(&chain, &f).unwrap(), asymptotic_variance(&chain, &g).unwrap());
            let (vp, vm) = (asymptotic_variance(&chain, &plus).unwrap(), asymptotic_variance(&chain, &minus).unwrap());
            prop_assert!(vf >= 0.0 && vg >= 0.0);
            prop_assert!((vp + vm - 2.0 * (vf + vg)).abs() <= 1e-10 * (1.0 + vp + vm));
        }

        #[test]
        fn legendre_identity((chain, _mu, nu, _b) in instance()) {
            let rep = legendre_check(&chain, &nu).unwrap();
            prop_assert!(rep.relative_error <= 1e-6, "{:?}", rep);
        }
    }
}
