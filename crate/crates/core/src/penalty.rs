//! One-sided Huber penalty for a single linear inequality `<a, x> - b <= 0`.
//!
//! The scalar kernel is
//!
//! ```text
//!            | s                    s > δ
//! p_δ(s) =   | (s + δ)² / (4δ)      -δ <= s <= δ
//!            | 0                    s < -δ
//! ```
//!
//! and the vector penalty is `h_δ(x; a, b) = p_δ(<a, x> - b) / |a|`. With
//! `δ = 0` the penalty collapses to the Euclidean distance to the halfspace.
//! The middle branch owns both breakpoints `s = ±δ`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// A linear constraint `<a, x> - b <= 0` with the norm of `a` cached.
#[derive(Debug, Clone, PartialEq)]
pub struct Halfspace {
    a: DVector<f64>,
    b: f64,
    norm_a: f64,
}

impl Halfspace {
    pub fn new(a: DVector<f64>, b: f64) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::Domain("constraint normal has dimension 0".into()));
        }
        if !b.is_finite() || a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("constraint data must be finite".into()));
        }
        let norm_a = a.norm();
        if norm_a <= 0.0 {
            return Err(Error::Domain("constraint normal must be nonzero".into()));
        }
        Ok(Self { a, b, norm_a })
    }

    pub fn from_slice(a: &[f64], b: f64) -> Result<Self> {
        Self::new(DVector::from_column_slice(a), b)
    }

    pub fn a(&self) -> &DVector<f64> {
        &self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn norm_a(&self) -> f64 {
        self.norm_a
    }

    pub fn dim(&self) -> usize {
        self.a.len()
    }

    /// Signed constraint value `<a, x> - b`. Panics on dimension mismatch.
    #[inline]
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        self.a.dot(x) - self.b
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.residual(x) <= 0.0
    }

    /// Euclidean projection onto the halfspace.
    pub fn project(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        let violation = self.residual(x).max(0.0);
        Ok(x - &self.a * (violation / (self.norm_a * self.norm_a)))
    }

    /// Lipschitz constant `|a| / (2δ)` of `x -> ∇h_δ(x; a, b)`.
    pub fn gradient_lipschitz(&self, delta: f64) -> f64 {
        self.norm_a / (2.0 * delta)
    }
}

/// Smoothing width and penalty weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyParams {
    pub delta: f64,
    pub gamma: f64,
}

impl PenaltyParams {
    pub fn new(gamma: f64, delta: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::Domain(format!("gamma must be positive, got {gamma}")));
        }
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(Error::Domain(format!("delta must be nonnegative, got {delta}")));
        }
        Ok(Self { delta, gamma })
    }

    /// Returns an error unless `delta > 0`, which the gradient operations need.
    pub fn require_smooth(&self) -> Result<()> {
        if self.delta > 0.0 {
            Ok(())
        } else {
            Err(Error::Domain("gradient requires delta > 0".into()))
        }
    }
}

fn check_kernel_args(s: f64, delta: f64) -> Result<()> {
    if !s.is_finite() {
        return Err(Error::Domain(format!("kernel argument must be finite, got {s}")));
    }
    if !(delta.is_finite() && delta > 0.0) {
        return Err(Error::Domain(format!("kernel width must be positive, got {delta}")));
    }
    Ok(())
}

#[inline]
pub(crate) fn huber(s: f64, delta: f64) -> f64 {
    if s > delta {
        s
    } else if s >= -delta {
        let t = s + delta;
        t * t / (4.0 * delta)
    } else {
        0.0
    }
}

#[inline]
pub(crate) fn huber_slope(s: f64, delta: f64) -> f64 {
    if s > delta {
        1.0
    } else if s >= -delta {
        (s + delta) / (2.0 * delta)
    } else {
        0.0
    }
}

/// Scalar kernel `p_δ(s)`.
pub fn p_delta(s: f64, delta: f64) -> Result<f64> {
    check_kernel_args(s, delta)?;
    Ok(huber(s, delta))
}

/// Derivative `p'_δ(s)`, always in `[0, 1]`.
pub fn p_delta_prime(s: f64, delta: f64) -> Result<f64> {
    check_kernel_args(s, delta)?;
    Ok(huber_slope(s, delta))
}

/// Penalty `h_δ(x; a, b)`. `delta = 0` gives the distance to the halfspace.
pub fn h_delta(x: &DVector<f64>, hs: &Halfspace, delta: f64) -> Result<f64> {
    check_dim(hs.dim(), x.len())?;
    if !(delta.is_finite() && delta >= 0.0) {
        return Err(Error::Domain(format!("delta must be nonnegative, got {delta}")));
    }
    let s = hs.residual(x);
    if !s.is_finite() {
        return Err(Error::Domain("non-finite constraint residual".into()));
    }
    if delta == 0.0 {
        return Ok(s.max(0.0) / hs.norm_a);
    }
    Ok(huber(s, delta) / hs.norm_a)
}

/// Gradient `p'_δ(<a, x> - b) a / |a|`; its norm never exceeds one.
pub fn grad_h_delta(x: &DVector<f64>, hs: &Halfspace, delta: f64) -> Result<DVector<f64>> {
    check_dim(hs.dim(), x.len())?;
    let s = hs.residual(x);
    check_kernel_args(s, delta)?;
    Ok(&hs.a * (huber_slope(s, delta) / hs.norm_a))
}

/// Uniform bound `(δ₁ - δ₂) / (2δ₁)` on `|∇h_δ₁(x) - ∇h_δ₂(x)|`.
pub fn grad_delta_perturbation_bound(delta1: f64, delta2: f64) -> Result<f64> {
    if !(delta2.is_finite() && delta2 > 0.0 && delta1.is_finite()) {
        return Err(Error::Domain(format!(
            "widths must be positive and finite, got ({delta1}, {delta2})"
        )));
    }
    if delta1 < delta2 {
        return Err(Error::Domain(format!(
            "perturbation bound needs delta1 >= delta2, got ({delta1}, {delta2})"
        )));
    }
    Ok((delta1 - delta2) / (2.0 * delta1))
}

/// Euclidean distance from `x` to `{y : <a, y> <= b}`.
pub fn dist_halfspace(x: &DVector<f64>, hs: &Halfspace) -> Result<f64> {
    check_dim(hs.dim(), x.len())?;
    Ok(hs.residual(x).max(0.0) / hs.norm_a)
}

/// A scalar penalty kernel and its derivative.
///
/// The invariant suite in [`crate::harness`] is written against this trait so
/// that deliberately broken kernels can be fed through it.
pub trait PenaltyKernel: Sync {
    fn value(&self, s: f64, delta: f64) -> f64;
    fn slope(&self, s: f64, delta: f64) -> f64;

    fn penalty(&self, x: &DVector<f64>, hs: &Halfspace, delta: f64) -> f64 {
        self.value(hs.residual(x), delta) / hs.norm_a()
    }

    fn gradient(&self, x: &DVector<f64>, hs: &Halfspace, delta: f64) -> DVector<f64> {
        hs.a() * (self.slope(hs.residual(x), delta) / hs.norm_a())
    }
}

/// The one-sided Huber kernel.
#[derive(Debug, Clone, Copy, Default)]
pub struct HuberKernel;

impl PenaltyKernel for HuberKernel {
    fn value(&self, s: f64, delta: f64) -> f64 {
        if delta == 0.0 {
            s.max(0.0)
        } else {
            huber(s, delta)
        }
    }

    fn slope(&self, s: f64, delta: f64) -> f64 {
        huber_slope(s, delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    #[test]
    fn kernel_values() {
        assert_eq!(p_delta(-2.0, 1.0).unwrap(), 0.0);
        assert_eq!(p_delta(0.0, 1.0).unwrap(), 0.25);
        assert_eq!(p_delta(1.0, 1.0).unwrap(), 1.0);
        let eps = 1e-9;
        assert_eq!(p_delta(1.0 + eps, 1.0).unwrap(), 1.0 + eps);
    }

    #[test]
    fn kernel_derivative_values() {
        assert_eq!(p_delta_prime(0.0, 0.5).unwrap(), 0.5);
        assert_eq!(p_delta_prime(10.0, 1.0).unwrap(), 1.0);
        assert_eq!(p_delta_prime(-0.25, 0.25).unwrap(), 0.0);
    }

    #[test]
    fn kernel_rejects_bad_arguments() {
        assert!(p_delta(f64::NAN, 1.0).is_err());
        assert!(p_delta(0.0, 0.0).is_err());
        assert!(p_delta(0.0, -1.0).is_err());
        assert!(p_delta_prime(f64::INFINITY, 1.0).is_err());
        assert!(p_delta_prime(0.0, 0.0).is_err());
    }

    #[test]
    fn branches_agree_at_breakpoints() {
        for &delta in &[1e-6, 0.25, 1.0, 37.0] {
            // Middle branch evaluated at ±δ against the outer branches.
            assert_eq!(huber(delta, delta), delta);
            assert_eq!(huber(-delta, delta), 0.0);
            assert_eq!(huber_slope(delta, delta), 1.0);
            assert_eq!(huber_slope(-delta, delta), 0.0);
        }
    }

    #[test]
    fn halfspace_rejects_zero_normal() {
        assert!(Halfspace::from_slice(&[0.0, 0.0], 1.0).is_err());
        assert!(Halfspace::from_slice(&[], 1.0).is_err());
        assert!(Halfspace::from_slice(&[1.0], f64::NAN).is_err());
        let hs = Halfspace::from_slice(&[3.0, 4.0], 0.0).unwrap();
        assert_eq!(hs.norm_a(), 5.0);
    }

    #[test]
    fn figure_curve_at_boundary() {
        let hs = Halfspace::from_slice(&[1.0], 1.0).unwrap();
        assert_eq!(h_delta(&v(&[1.0]), &hs, 1.0).unwrap(), 0.25);
    }

    #[test]
    fn penalty_examples() {
        let hs = Halfspace::from_slice(&[3.0, 4.0], 0.0).unwrap();
        assert_relative_eq!(h_delta(&v(&[3.0, 4.0]), &hs, 0.1).unwrap(), 5.0, epsilon = 1e-15);
        // <a, x> - b = -5δ
        let delta = 0.2;
        let x = v(&[-3.0, -4.0]) * (5.0 * delta / 25.0);
        assert_eq!(h_delta(&x, &hs, delta).unwrap(), 0.0);
        assert!(h_delta(&v(&[1.0]), &hs, 0.1).is_err());
        assert!(h_delta(&v(&[1.0, 1.0]), &hs, -0.1).is_err());
    }

    #[test]
    fn zero_width_is_distance() {
        let hs = Halfspace::from_slice(&[1.0], 1.0).unwrap();
        assert_eq!(h_delta(&v(&[2.0]), &hs, 0.0).unwrap(), 1.0);
        assert_eq!(dist_halfspace(&v(&[2.0]), &hs).unwrap(), 1.0);
        assert_eq!(dist_halfspace(&v(&[0.5]), &hs).unwrap(), 0.0);
    }

    #[test]
    fn gradient_examples() {
        let hs = Halfspace::from_slice(&[1.0, 0.0], 0.0).unwrap();
        let g = grad_h_delta(&v(&[0.0, 7.0]), &hs, 2.0).unwrap();
        assert_eq!(g, v(&[0.5, 0.0]));
        let g = grad_h_delta(&v(&[-3.0, 1.0]), &hs, 2.0).unwrap();
        assert_eq!(g, v(&[0.0, 0.0]));
        let hs = Halfspace::from_slice(&[3.0, 4.0], 0.0).unwrap();
        let g = grad_h_delta(&v(&[3.0, 4.0]), &hs, 1.0).unwrap();
        assert_relative_eq!(g.norm(), 1.0, epsilon = 1e-15);
        assert!(grad_h_delta(&v(&[3.0, 4.0]), &hs, 0.0).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let hs = Halfspace::from_slice(&[1.0, 0.0], 0.0).unwrap();
        let x = v(&[0.0, 7.0]);
        let delta = 2.0;
        let h = f64::EPSILON.cbrt() * (1.0 + x.norm());
        let g = grad_h_delta(&x, &hs, delta).unwrap();
        for j in 0..2 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (h_delta(&xp, &hs, delta).unwrap() - h_delta(&xm, &hs, delta).unwrap()) / (2.0 * h);
            assert!((fd - g[j]).abs() <= 1e-9, "component {j}: fd {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn perturbation_bound() {
        assert_eq!(grad_delta_perturbation_bound(1.0, 1.0).unwrap(), 0.0);
        assert_eq!(grad_delta_perturbation_bound(1.0, 0.5).unwrap(), 0.25);
        assert_eq!(grad_delta_perturbation_bound(2.0, 1.0).unwrap(), 0.25);
        assert!(grad_delta_perturbation_bound(0.5, 1.0).is_err());
        assert!(grad_delta_perturbation_bound(1.0, 0.0).is_err());
    }

    #[test]
    fn perturbation_bound_attained_on_scalar_grid() {
        let (d1, d2) = (2.0, 1.0);
        let bound = grad_delta_perturbation_bound(d1, d2).unwrap();
        let mut sup: f64 = 0.0;
        for i in 0..=6000 {
            let s = -3.0 + i as f64 / 1000.0;
            sup = sup.max((huber_slope(s, d1) - huber_slope(s, d2)).abs());
        }
        assert!(sup <= bound + 1e-12);
        // s = ±δ₂ lies on the grid
        assert!(sup >= bound - 1e-12);
    }

    #[test]
    fn distance_matches_projection() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(11);
        for _ in 0..1000 {
            let n = rng.random_range(1..6);
            let a = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
            if a.norm() < 1e-3 {
                continue;
            }
            let hs = Halfspace::new(a, rng.random_range(-1.0..1.0)).unwrap();
            let x = DVector::from_fn(n, |_, _| rng.random_range(-3.0..3.0));
            let proj = hs.project(&x).unwrap();
            assert_relative_eq!(
                dist_halfspace(&x, &hs).unwrap(),
                (&x - &proj).norm(),
                epsilon = 1e-12
            );
            assert!(hs.residual(&proj) <= 1e-12);
        }
    }

    #[test]
    fn kernel_is_convex_on_random_triples() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(3);
        for _ in 0..10_000 {
            let delta = rng.random_range(0.01..3.0);
            let mut s = [
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
                rng.random_range(-5.0..5.0),
            ];
            s.sort_by(f64::total_cmp);
            if s[2] - s[0] < 1e-9 {
                continue;
            }
            let t = (s[1] - s[0]) / (s[2] - s[0]);
            let chord = (1.0 - t) * huber(s[0], delta) + t * huber(s[2], delta);
            assert!(huber(s[1], delta) <= chord + 1e-12);
        }
    }
}
