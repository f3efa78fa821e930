//! Dense linear algebra helpers and subtraction-free state elimination.
//!
//! Elimination (the Grassmann–Taksar–Heyman scheme) only ever adds,
//! multiplies and divides nonnegative numbers, so every entry keeps full
//! relative accuracy even when rates span many orders of magnitude. It is
//! generic over [`Real`] so the same code runs in double or double-double
//! arithmetic.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::ops::{Add, Div, Mul};
use twofloat::TwoFloat;

/// Floating-point working precision for elimination-based computations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    /// IEEE double, 53 significand bits.
    #[default]
    Double,
    /// Double-double, about 106 significand bits.
    DoubleDouble,
}

impl Precision {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            53 => Ok(Precision::Double),
            106 => Ok(Precision::DoubleDouble),
            other => Err(Error::InvalidArgument(format!(
                "precision must be 53 or 106 bits, got {other}"
            ))),
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Precision::Double => 53,
            Precision::DoubleDouble => 106,
        }
    }
}

/// Minimal field operations needed by elimination.
pub trait Real:
    Copy + Add<Output = Self> + Mul<Output = Self> + Div<Output = Self> + PartialOrd
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl Real for TwoFloat {
    fn from_f64(x: f64) -> Self {
        TwoFloat::from(x)
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

/// Solve `a x = b` by LU with partial pivoting.
pub fn lu_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    let lu = a.clone().lu();
    let u = lu.u();
    let min_pivot = (0..n).map(|i| u[(i, i)].abs()).fold(f64::INFINITY, f64::min);
    if !(min_pivot > scale * 1e-300) {
        return Err(Error::SingularSystem(format!("pivot {min_pivot:e}")));
    }
    let x = lu
        .solve(b)
        .ok_or_else(|| Error::SingularSystem("LU solve failed".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem("non-finite solution".into()));
    }
    Ok(x)
}

/// Solve a symmetric positive definite system, falling back to LU.
pub fn spd_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    match a.clone().cholesky() {
        Some(ch) => {
            let x = ch.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return Ok(x);
            }
            lu_solve(a, b)
        }
        None => lu_solve(a, b),
    }
}

/// Dense rate matrix in working precision; diagonal entries are ignored.
pub(crate) fn to_working<T: Real>(rates: &[Vec<f64>]) -> Vec<Vec<T>> {
    rates
        .iter()
        .map(|row| row.iter().map(|&r| T::from_f64(r)).collect())
        .collect()
}

/// Stationary distribution of an irreducible rate matrix by GTH elimination.
///
/// Returns `None` if elimination meets a state with no exit to the states
/// still present, which happens exactly when the chain is not irreducible.
pub fn gth_stationary<T: Real>(rates: &[Vec<f64>]) -> Option<Vec<f64>> {
    let n = rates.len();
    if n == 0 {
        return None;
    }
    let mut r: Vec<Vec<T>> = to_working(rates);
    let mut exit = vec![T::zero(); n];
    for k in (1..n).rev() {
        let mut s = T::zero();
        for j in 0..k {
            s = s + r[k][j];
        }
        if !(s > T::zero()) {
            return None;
        }
        exit[k] = s;
        for i in 0..k {
            let rik = r[i][k];
            if !(rik > T::zero()) {
                continue;
            }
            let f = rik / s;
            for j in 0..k {
                if j != i {
                    let rkj = r[k][j];
                    if rkj > T::zero() {
                        r[i][j] = r[i][j] + f * rkj;
                    }
                }
            }
        }
    }
    let mut pi = vec![T::zero(); n];
    pi[0] = T::from_f64(1.0);
    for k in 1..n {
        let mut acc = T::zero();
        for i in 0..k {
            acc = acc + pi[i] * r[i][k];
        }
        pi[k] = acc / exit[k];
    }
    let mut total = T::zero();
    for &p in &pi {
        total = total + p;
    }
    let out: Vec<f64> = pi.into_iter().map(|p| (p / total).to_f64()).collect();
    if out.iter().all(|p| p.is_finite() && *p > 0.0) {
        Some(out)
    } else {
        None
    }
}

/// Eliminate every state not flagged in `keep`, returning the rate matrix of
/// the trace process on the kept states (indexed like the input; rows and
/// columns of eliminated states are zero). Self-loops produced by excursions
/// are dropped.
///
/// `Err(i)` names a state that cannot leave the eliminated set.
pub fn eliminate<T: Real>(rates: &[Vec<f64>], keep: &[bool]) -> std::result::Result<Vec<Vec<f64>>, usize> {
    let n = rates.len();
    let mut r: Vec<Vec<T>> = to_working(rates);
    let mut alive: Vec<bool> = vec![true; n];
    // Eliminate in reverse declared order for determinism.
    for y in (0..n).rev() {
        if keep[y] {
            continue;
        }
        let mut s = T::zero();
        for w in 0..n {
            if w != y && alive[w] {
                s = s + r[y][w];
            }
        }
        if !(s > T::zero()) {
            return Err(y);
        }
        for x in 0..n {
            if x == y || !alive[x] {
                continue;
            }
            let rxy = r[x][y];
            if !(rxy > T::zero()) {
                continue;
            }
            let f = rxy / s;
            for z in 0..n {
                if z == y || z == x || !alive[z] {
                    continue;
                }
                let ryz = r[y][z];
                if ryz > T::zero() {
                    r[x][z] = r[x][z] + f * ryz;
                }
            }
        }
        alive[y] = false;
    }
    let mut out = vec![vec![0.0; n]; n];
    for x in 0..n {
        if !keep[x] {
            continue;
        }
        for z in 0..n {
            if z != x && keep[z] {
                out[x][z] = r[x][z].to_f64();
            }
        }
    }
    Ok(out)
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gth_two_state() {
        let r = vec![vec![0.0, 2.0], vec![3.0, 0.0]];
        let pi = gth_stationary::<f64>(&r).unwrap();
        assert!((pi[0] - 0.6).abs() < 1e-15);
        assert!((pi[1] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn gth_detects_reducible() {
        let r = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
        assert!(gth_stationary::<f64>(&r).is_none());
    }

    #[test]
    fn double_double_agrees_with_double() {
        let r = vec![
            vec![0.0, 1.0, 0.0],
            vec![1e-9, 0.0, 1.0],
            vec![0.0, 1e-12, 0.0],
        ];
        let a = gth_stationary::<f64>(&r).unwrap();
        let b = gth_stationary::<TwoFloat>(&r).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-14 * y.abs());
        }
    }

    #[test]
    fn eliminate_path_middle() {
        // a <-> b <-> c, eliminate b.
        let r = vec![
            vec![0.0, 2.0, 0.0],
            vec![1.0, 0.0, 3.0],
            vec![0.0, 5.0, 0.0],
        ];
        let t = eliminate::<f64>(&r, &[true, false, true]).unwrap();
        assert!((t[0][2] - 2.0 * 3.0 / 4.0).abs() < 1e-15);
        assert!((t[2][0] - 5.0 * 1.0 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn eliminate_reports_trap() {
        let r = vec![vec![0.0, 1.0], vec![0.0, 0.0]];
        assert_eq!(eliminate::<f64>(&r, &[true, false]), Err(1));
    }

    #[test]
    fn precision_bits_round_trip() {
        assert_eq!(Precision::from_bits(106).unwrap().bits(), 106);
        assert!(Precision::from_bits(64).is_err());
    }
}
