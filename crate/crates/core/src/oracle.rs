//! Desk-scale reference solvers.
//!
//! Everything here trades speed for certainty: the constrained optimum and the
//! Euclidean projection onto the feasible polyhedron come from exhaustive
//! active-set enumeration with a KKT certificate, and penalized minimizers come
//! from a globalized Newton iteration on the piecewise-quadratic objective.
//! These are the ground truth the solver and the inequality checks are
//! measured against.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::penalty::{Halfspace, PenaltyParams};
use crate::problem::ConstrainedProblem;
use crate::schedule::Schedule;

/// Largest constraint count accepted by the enumeration oracles.
pub const MAX_ORACLE_CONSTRAINTS: usize = 20;

/// Subsets beyond this count are factored on the fly instead of cached.
const SUBSET_CACHE_LIMIT: usize = 1 << 16;

const RANK_TOL: f64 = 1e-10;

/// Certified solution of the constrained problem.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleSolution {
    pub x_star: DVector<f64>,
    pub f_star: f64,
    /// Indices (0-based) of the constraints held with equality.
    pub active_set: Vec<usize>,
    /// One multiplier per constraint; zero off the active set.
    pub multipliers: DVector<f64>,
    pub tolerance: f64,
}

/// Residuals of the four KKT conditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KktResiduals {
    /// `|Qx + c + Σ λ_i a_i|`
    pub stationarity: f64,
    /// `max_i max(0, <a_i, x> - b_i)`
    pub primal: f64,
    /// `max_i max(0, -λ_i)`
    pub dual: f64,
    /// `max_i |λ_i (<a_i, x> - b_i)|`
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal)
            .max(self.dual)
            .max(self.complementarity)
    }
}

impl OracleSolution {
    pub fn kkt_residuals(&self, p: &ConstrainedProblem) -> KktResiduals {
        let mut stat = p.objective().q() * &self.x_star + p.objective().linear_term();
        let mut primal: f64 = 0.0;
        let mut dual: f64 = 0.0;
        let mut comp: f64 = 0.0;
        for (c, &lambda) in p.constraints().iter().zip(self.multipliers.iter()) {
            stat.axpy(lambda, c.a(), 1.0);
            let r = c.residual(&self.x_star);
            primal = primal.max(r);
            dual = dual.max(-lambda);
            comp = comp.max((lambda * r).abs());
        }
        KktResiduals {
            stationarity: stat.norm(),
            primal,
            dual,
            complementarity: comp,
        }
    }

    pub fn to_file_format(&self) -> OracleFile {
        OracleFile {
            x_star: self.x_star.iter().copied().collect(),
            f_star: self.f_star,
            active_set: self.active_set.clone(),
            multipliers: self.multipliers.iter().copied().collect(),
            tolerance: self.tolerance,
        }
    }

    pub fn from_file_format(file: &OracleFile) -> Result<Self> {
        if file.x_star.is_empty() {
            return Err(Error::InvalidProblem("oracle file has empty x_star".into()));
        }
        Ok(Self {
            x_star: DVector::from_column_slice(&file.x_star),
            f_star: file.f_star,
            active_set: file.active_set.clone(),
            multipliers: DVector::from_column_slice(&file.multipliers),
            tolerance: file.tolerance,
        })
    }
}

/// On-disk oracle solution (UTF-8 JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleFile {
    pub x_star: Vec<f64>,
    pub f_star: f64,
    pub active_set: Vec<usize>,
    pub multipliers: Vec<f64>,
    pub tolerance: f64,
}

/// Factorization of one candidate active set under the metric `Q`.
#[derive(Debug, Clone)]
struct SubsetFactor {
    indices: Vec<usize>,
    a_s: DMatrix<f64>,
    b_s: DVector<f64>,
    /// `Q⁻¹ A_Sᵀ`
    w: DMatrix<f64>,
    /// Cholesky of `A_S Q⁻¹ A_Sᵀ`
    gram: Cholesky<f64, Dyn>,
}

fn factor_subset(
    chol: &Cholesky<f64, Dyn>,
    constraints: &[Halfspace],
    mask: u32,
) -> Option<SubsetFactor> {
    let indices: Vec<usize> = (0..constraints.len())
        .filter(|i| mask & (1 << i) != 0)
        .collect();
    let n = constraints[0].dim();
    let k = indices.len();
    let a_s = DMatrix::from_fn(k, n, |r, j| constraints[indices[r]].a()[j]);
    let sv = a_s.singular_values();
    let (lo, hi) = (sv.min(), sv.max());
    if !(lo > RANK_TOL * hi) {
        return None;
    }
    let b_s = DVector::from_fn(k, |r, _| constraints[indices[r]].b());
    let w = chol.solve(&a_s.transpose());
    let gram = Cholesky::new(&a_s * &w)?;
    Some(SubsetFactor {
        indices,
        a_s,
        b_s,
        w,
        gram,
    })
}

/// Exhaustive active-set solver for `min ½xᵀQx + cᵀx s.t. <a_i, x> <= b_i`.
///
/// Candidate subsets have at most `n` members with linearly independent
/// normals. Among KKT-consistent candidates the lowest objective wins, ties
/// broken by the lexicographically smaller active set.
#[derive(Debug, Clone)]
pub struct KktEnumerator {
    q: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    constraints: Vec<Halfspace>,
    masks: Vec<u32>,
    cache: Option<Vec<SubsetFactor>>,
}

struct Candidate {
    x: DVector<f64>,
    value: f64,
    indices: Vec<usize>,
    lambda: DVector<f64>,
}

impl KktEnumerator {
    pub fn new(q: DMatrix<f64>, constraints: Vec<Halfspace>) -> Result<Self> {
        let m = constraints.len();
        if m > MAX_ORACLE_CONSTRAINTS {
            return Err(Error::TooManyConstraints {
                m,
                limit: MAX_ORACLE_CONSTRAINTS,
            });
        }
        let n = q.nrows();
        if let Some(c) = constraints.iter().find(|c| c.dim() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: c.dim(),
            });
        }
        let chol = Cholesky::new(q.clone())
            .ok_or_else(|| Error::Numerical("metric matrix is not positive definite".into()))?;
        let masks: Vec<u32> = (1u32..(1u32 << m))
            .filter(|mask| mask.count_ones() as usize <= n)
            .collect();
        let cache = (masks.len() <= SUBSET_CACHE_LIMIT).then(|| {
            masks
                .iter()
                .filter_map(|&mask| factor_subset(&chol, &constraints, mask))
                .collect()
        });
        Ok(Self {
            q,
            chol,
            constraints,
            masks,
            cache,
        })
    }

    /// Enumerator for the Euclidean projection onto the polyhedron.
    pub fn projector(p: &ConstrainedProblem) -> Result<Self> {
        Self::new(DMatrix::identity(p.n(), p.n()), p.constraints().to_vec())
    }

    fn for_problem(p: &ConstrainedProblem) -> Result<Self> {
        Self::new(p.objective().q().clone(), p.constraints().to_vec())
    }

    fn value(&self, x: &DVector<f64>, c: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + c.dot(x)
    }

    fn feasible(&self, x: &DVector<f64>, tol: f64) -> bool {
        let xn = x.norm();
        self.constraints
            .iter()
            .all(|h| h.residual(x) <= tol * (1.0 + h.b().abs() + h.norm_a() * xn))
    }

    fn consider(&self, best: &mut Option<Candidate>, cand: Candidate) {
        let better = match best {
            None => true,
            Some(b) => cand.value < b.value || (cand.value == b.value && cand.indices < b.indices),
        };
        if better {
            *best = Some(cand);
        }
    }

    fn try_subset(
        &self,
        f: &SubsetFactor,
        x_unc: &DVector<f64>,
        c: &DVector<f64>,
        tol: f64,
    ) -> Option<Candidate> {
        let rhs = &f.a_s * x_unc - &f.b_s;
        let lambda = f.gram.solve(&rhs);
        let lscale = 1.0 + lambda.amax();
        if lambda.iter().any(|&l| !(l >= -tol * lscale)) {
            return None;
        }
        let x = x_unc - &f.w * &lambda;
        if !self.feasible(&x, tol) {
            return None;
        }
        let value = self.value(&x, c);
        Some(Candidate {
            x,
            value,
            indices: f.indices.clone(),
            lambda,
        })
    }

    /// Minimizes `½xᵀQx + cᵀx` over the polyhedron.
    pub fn solve(&self, c: &DVector<f64>, tol: f64) -> Result<OracleSolution> {
        check_dim(self.q.nrows(), c.len())?;
        if !(tol > 0.0) {
            return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
        }
        let x_unc = -self.chol.solve(c);
        let mut best: Option<Candidate> = None;
        if self.feasible(&x_unc, tol) {
            let value = self.value(&x_unc, c);
            best = Some(Candidate {
                x: x_unc.clone(),
                value,
                indices: Vec::new(),
                lambda: DVector::zeros(0),
            });
        }
        match &self.cache {
            Some(factors) => {
                for f in factors {
                    if let Some(cand) = self.try_subset(f, &x_unc, c, tol) {
                        self.consider(&mut best, cand);
                    }
                }
            }
            None => {
                for &mask in &self.masks {
                    if let Some(f) = factor_subset(&self.chol, &self.constraints, mask) {
                        if let Some(cand) = self.try_subset(&f, &x_unc, c, tol) {
                            self.consider(&mut best, cand);
                        }
                    }
                }
            }
        }
        let best = best.ok_or_else(|| {
            Error::Numerical(
                "no KKT-consistent active set found (infeasible problem or rank failure)".into(),
            )
        })?;
        let mut multipliers = DVector::zeros(self.constraints.len());
        for (&i, &l) in best.indices.iter().zip(best.lambda.iter()) {
            multipliers[i] = l.max(0.0);
        }
        Ok(OracleSolution {
            x_star: best.x,
            f_star: best.value,
            active_set: best.indices,
            multipliers,
            tolerance: tol,
        })
    }

    /// Euclidean projection of `x`, valid when the metric is the identity.
    pub fn project(&self, x: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
        check_dim(self.q.nrows(), x.len())?;
        if self.constraints.iter().all(|h| h.residual(x) <= 0.0) {
            return Ok(x.clone());
        }
        Ok(self.solve(&(-x), tol)?.x_star)
    }
}

/// Exact constrained optimum by active-set enumeration (`m <= 20`).
pub fn solve_constrained_exact(p: &ConstrainedProblem, tol: f64) -> Result<OracleSolution> {
    KktEnumerator::for_problem(p)?.solve(p.objective().linear_term(), tol)
}

/// `Π_X[x]`, the Euclidean projection onto the feasible polyhedron.
pub fn project_polyhedron(p: &ConstrainedProblem, x: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    check_dim(p.n(), x.len())?;
    if p.is_feasible(x) {
        return Ok(x.clone());
    }
    KktEnumerator::projector(p)?.project(x, tol)
}

/// Iterations allowed to [`minimize_penalized`].
const NEWTON_MAX_ITER: usize = 500;

/// Minimizer of `F_{γδ}` certified by `|∇F(x)| <= tol * μ`, so `|x - x_k*| <= tol`.
///
/// Damped Newton on the piecewise-quadratic objective: the generalized Hessian
/// `Q + (γ/m) Σ_{|s_i| <= δ} a_i a_iᵀ / (2δ|a_i|)` is bounded below by `μI`, so
/// the Newton direction is a descent direction and the Armijo search makes the
/// iteration globally convergent.
pub fn minimize_penalized(
    p: &ConstrainedProblem,
    gamma: f64,
    delta: f64,
    tol: f64,
) -> Result<DVector<f64>> {
    let start = p.objective().unconstrained_minimizer();
    minimize_penalized_from(p, gamma, delta, tol, start)
}

pub fn minimize_penalized_from(
    p: &ConstrainedProblem,
    gamma: f64,
    delta: f64,
    tol: f64,
    start: DVector<f64>,
) -> Result<DVector<f64>> {
    check_dim(p.n(), start.len())?;
    let params = PenaltyParams::new(gamma, delta)?;
    params.require_smooth()?;
    if !(tol > 0.0) {
        return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
    }
    let n = p.n();
    let target = tol * p.mu();
    let w = gamma / p.m() as f64;
    let mut x = start;
    let mut g = DVector::zeros(n);
    p.penalized_gradient_into(&x, params, &mut g);
    let mut fx = p.penalized_value(&x, params)?;

    for _ in 0..NEWTON_MAX_ITER {
        let gnorm = g.norm();
        if gnorm <= target {
            return Ok(x);
        }
        let mut hess = p.objective().q().clone();
        for c in p.constraints() {
            let s = c.residual(&x);
            if s.abs() <= delta {
                let coef = w / (2.0 * delta * c.norm_a());
                hess.ger(coef, c.a(), c.a(), 1.0);
            }
        }
        let dir = match Cholesky::new(hess) {
            Some(ch) => -ch.solve(&g),
            None => -&g,
        };
        let slope = g.dot(&dir);

        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-14 {
            let trial = &x + &dir * t;
            let ft = p.penalized_value(&trial, params)?;
            if ft <= fx + 1e-4 * t * slope {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let (next, fnext) = match accepted {
            Some(v) => v,
            None => {
                // Objective differences below round-off: fall back to
                // progress in the gradient norm.
                let trial = &x + &dir;
                let mut gt = DVector::zeros(n);
                p.penalized_gradient_into(&trial, params, &mut gt);
                if gt.norm() < 0.5 * gnorm {
                    let ft = p.penalized_value(&trial, params)?;
                    (trial, ft)
                } else {
                    return Err(Error::Numerical(format!(
                        "penalized minimization stalled at |grad F| = {gnorm:e} (target {target:e})"
                    )));
                }
            }
        };
        x = next;
        fx = fnext;
        p.penalized_gradient_into(&x, params, &mut g);
    }
    Err(Error::Numerical(format!(
        "penalized minimization hit the iteration cap with |grad F| = {:e} (target {target:e})",
        g.norm()
    )))
}

/// Round-off floor of `|∇F(x)|` near the penalized minimizer.
///
/// Evaluating the gradient perturbs each residual by about
/// `ε (|a_i| |x| + |b_i|)`, which the band curvature `γ/(2mδ)` amplifies; no
/// certificate below this level can be expected.
pub fn penalized_gradient_floor(p: &ConstrainedProblem, gamma: f64, delta: f64) -> f64 {
    let x = 1.0 + p.objective().unconstrained_minimizer().norm();
    let w = gamma / (p.m() as f64 * 2.0 * delta);
    let band: f64 = p
        .constraints()
        .iter()
        .map(|c| c.norm_a() * x + c.b().abs())
        .sum();
    f64::EPSILON * (p.l_f() * x + p.objective().linear_term().norm() + w * band)
}

/// `L_f R + |c|`, an upper bound on `|∇f(x)|` over the ball `|x| <= R`.
pub fn subgradient_bound(p: &ConstrainedProblem, radius: f64) -> Result<f64> {
    if !(radius >= 0.0 && radius.is_finite()) {
        return Err(Error::Domain(format!("radius must be nonnegative, got {radius}")));
    }
    Ok(p.l_f() * radius + p.objective().linear_term().norm())
}

/// Radius `R = 2(|x*| + r)` of a ball containing every penalized minimizer with
/// `γδ <= gd_bound` and its projection, where `r` is the radius of the level
/// set `{f <= f(x*) + gd_bound / (4 α_min)}` about the unconstrained minimizer.
pub fn bounding_radius(p: &ConstrainedProblem, sol: &OracleSolution, gd_bound: f64) -> f64 {
    let xu = p.objective().unconstrained_minimizer();
    let f_min = p.objective().value_unchecked(&xu);
    let level = sol.f_star + gd_bound / (4.0 * p.alpha_min());
    let r = (2.0 * (level - f_min).max(0.0) / p.mu()).sqrt();
    2.0 * (sol.x_star.norm() + r)
}

/// Least-squares fit of `log(mse)` against `log(k)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Standard error of the slope estimate.
    pub slope_stderr: f64,
    pub points_used: usize,
    /// Points in range dropped because the error was not positive.
    pub points_excluded: usize,
}

/// Fits `log(mse_k) = intercept + slope * log(k)` over `k_min <= k <= k_max`.
pub fn rate_fit(ks: &[u64], mse: &[f64], k_min: u64, k_max: u64) -> Result<RateFit> {
    if ks.len() != mse.len() {
        return Err(Error::DimensionMismatch {
            expected: ks.len(),
            found: mse.len(),
        });
    }
    let mut excluded = 0;
    let pts: Vec<(f64, f64)> = ks
        .iter()
        .zip(mse)
        .filter(|(&k, _)| k >= k_min && k <= k_max && k > 0)
        .filter_map(|(&k, &e)| {
            if e > 0.0 && e.is_finite() {
                Some(((k as f64).ln(), e.ln()))
            } else {
                excluded += 1;
                None
            }
        })
        .collect();
    if excluded > 0 {
        log::warn!("rate_fit: excluded {excluded} non-positive error entries");
    }
    if pts.len() < 10 {
        return Err(Error::Domain(format!(
            "rate fit needs at least 10 positive points in [{k_min}, {k_max}], got {}",
            pts.len()
        )));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::Domain("rate fit needs at least two distinct k".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = pts
        .iter()
        .map(|p| (p.1 - intercept - slope * p.0).powi(2))
        .sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_stderr = (sse / (n - 2.0) / sxx).sqrt();
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        slope_stderr,
        points_used: pts.len(),
        points_excluded: excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEntry {
    pub k: u64,
    pub gamma_k: f64,
    pub delta_k: f64,
    /// `μ |x_k* - x_{k+1}*|`
    pub lhs: f64,
    /// `(γ_{k+1} - γ_k) + γ_k (δ_k - δ_{k+1}) / (2δ_k)`
    pub bound: f64,
    pub margin: f64,
    pub holds: bool,
    /// `f(x_k*)`, kept for the level-set check.
    pub f_at_minimizer: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub entries: Vec<DriftEntry>,
    pub tolerance: f64,
}

impl DriftReport {
    pub fn all_hold(&self) -> bool {
        self.entries.iter().all(|e| e.holds)
    }
}

/// Checks `μ|x_k* - x_{k+1}*| <= (γ_{k+1} - γ_k) + γ_k(δ_k - δ_{k+1})/(2δ_k) + tol`
/// with minimizers computed to `tol / 10`.
pub fn check_drift_lemma(
    p: &ConstrainedProblem,
    sch: &Schedule,
    k_list: &[u64],
    tol: f64,
) -> Result<DriftReport> {
    check_drift_lemma_with(p, sch, k_list, tol, tol / 10.0)
}

/// As [`check_drift_lemma`] with the minimizer tolerance chosen separately.
pub fn check_drift_lemma_with(
    p: &ConstrainedProblem,
    sch: &Schedule,
    k_list: &[u64],
    tol: f64,
    oracle_tol: f64,
) -> Result<DriftReport> {
    sch.ensure_valid()?;
    let inner = oracle_tol;
    let mu = p.mu();
    let mut entries = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let (g0, d0) = (sch.gamma_at(k)?, sch.delta_at(k)?);
        let (g1, d1) = (sch.gamma_at(k + 1)?, sch.delta_at(k + 1)?);
        let xk = minimize_penalized(p, g0, d0, inner)?;
        let xk1 = minimize_penalized_from(p, g1, d1, inner, xk.clone())?;
        let lhs = mu * (&xk - &xk1).norm();
        let bound = mu * sch.drift_bound(mu, k)?;
        entries.push(DriftEntry {
            k,
            gamma_k: g0,
            delta_k: d0,
            lhs,
            bound,
            margin: bound - lhs,
            holds: lhs <= bound + tol,
            f_at_minimizer: p.f_value(&xk)?,
        });
    }
    Ok(DriftReport {
        entries,
        tolerance: tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSetEntry {
    pub k: u64,
    pub f_at_minimizer: f64,
    /// `f(x*) + γ_k δ_k / (4 α_min)`
    pub level: f64,
    /// `f(x*) + c / (4 α_min)` with `c` the schedule's product bound
    pub uniform_level: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSetReport {
    pub f_star: f64,
    pub entries: Vec<LevelSetEntry>,
    pub tolerance: f64,
}

impl LevelSetReport {
    pub fn all_hold(&self) -> bool {
        self.entries.iter().all(|e| e.holds)
    }
}

/// Checks that every penalized minimizer on the schedule satisfies
/// `f(x_k*) <= f(x*) + γ_k δ_k / (4 α_min) + tol`.
pub fn check_level_set(
    p: &ConstrainedProblem,
    sol: &OracleSolution,
    sch: &Schedule,
    k_list: &[u64],
    tol: f64,
) -> Result<LevelSetReport> {
    sch.ensure_valid()?;
    let uniform_level = sol.f_star + sch.gd_bound() / (4.0 * p.alpha_min());
    let mut entries = Vec::with_capacity(k_list.len());
    for &k in k_list {
        let (g, d) = (sch.gamma_at(k)?, sch.delta_at(k)?);
        let xk = minimize_penalized(p, g, d, tol)?;
        let fk = p.f_value(&xk)?;
        let level = sol.f_star + g * d / (4.0 * p.alpha_min());
        entries.push(LevelSetEntry {
            k,
            f_at_minimizer: fk,
            level,
            uniform_level,
            holds: fk <= level + tol && fk <= uniform_level + tol,
        });
    }
    Ok(LevelSetReport {
        f_star: sol.f_star,
        entries,
        tolerance: tol,
    })
}

/// Empirical lower estimate of the Hoffman constant:
/// `max_x dist(x, X) / Σ_i dist(x, X_i)` over random infeasible samples
/// around the constrained optimum.
pub fn estimate_hoffman_beta(
    p: &ConstrainedProblem,
    center: &DVector<f64>,
    samples: usize,
    seed: u64,
    tol: f64,
) -> Result<f64> {
    check_dim(p.n(), center.len())?;
    let projector = KktEnumerator::projector(p)?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let scale = 1.0 + center.norm();
    let mut beta: f64 = 0.0;
    for _ in 0..samples {
        let radius = scale * 10f64.powf(rng.random_range(-3.0..0.0));
        let x = center + DVector::from_fn(p.n(), |_, _| rng.sample::<f64, _>(StandardNormal)) * radius;
        let sum: f64 = p
            .constraints()
            .iter()
            .map(|c| c.residual(&x).max(0.0) / c.norm_a())
            .sum();
        if sum <= 0.0 {
            continue;
        }
        let d = (&x - projector.project(&x, tol)?).norm();
        beta = beta.max(d / sum);
    }
    Ok(beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GapCheck {
    /// Single halfspace (`β = 1`): the full inequality
    /// `μ/2|x* - x_k*|² + μ/2|x* - p_k|² + (γ/(4mβ) - L) dist(x_k*, X) <= γδ/(4α_min)`.
    Full {
        lhs: f64,
        rhs: f64,
        /// `γ/(4mβ) - L`
        coefficient: f64,
        holds: bool,
    },
    /// `|x* - x_k*|² <= γδ/(2μα_min)`, the large-`γ` consequence.
    Consequence {
        lhs: f64,
        rhs: f64,
        beta_estimate: f64,
        holds: bool,
    },
    /// `γ/(4mβ) <= L`: the inequality gives nothing useful yet.
    NotAsymptotic { coefficient: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub gamma: f64,
    pub delta: f64,
    pub dist_to_feasible: f64,
    pub sq_dist_to_opt: f64,
    pub subgradient_bound: f64,
    pub radius: f64,
    pub check: GapCheck,
}

impl GapReport {
    /// `false` only when an asserted inequality failed.
    pub fn holds(&self) -> bool {
        match self.check {
            GapCheck::Full { holds, .. } | GapCheck::Consequence { holds, .. } => holds,
            GapCheck::NotAsymptotic { .. } => true,
        }
    }
}

/// Checks the optimality-gap inequality for one `(γ, δ)` pair.
///
/// With `m = 1` the Hoffman constant is exactly one and the full inequality is
/// asserted; with `m > 1` only the `β`-free consequence is asserted and an
/// empirical `β` estimate is reported.
pub fn check_gap_lemma(p: &ConstrainedProblem, gamma: f64, delta: f64, tol: f64) -> Result<GapReport> {
    let params = PenaltyParams::new(gamma, delta)?;
    params.require_smooth()?;
    let inner = (tol * 1e-2).max(1e-13);
    let sol = solve_constrained_exact(p, inner)?;
    let newton_tol = inner.max(10.0 * penalized_gradient_floor(p, gamma, delta) / p.mu());
    let xk = minimize_penalized(p, gamma, delta, newton_tol)?;
    let pk = project_polyhedron(p, &xk, inner)?;
    let dist = (&xk - &pk).norm();
    let sq_opt = (&sol.x_star - &xk).norm_squared();
    let radius = bounding_radius(p, &sol, gamma * delta);
    let l = subgradient_bound(p, radius)?;
    let mu = p.mu();
    let m = p.m() as f64;

    let check = if p.m() == 1 {
        let coefficient = gamma / (4.0 * m) - l;
        if coefficient <= 0.0 {
            GapCheck::NotAsymptotic { coefficient }
        } else {
            let lhs = 0.5 * mu * sq_opt + 0.5 * mu * (&sol.x_star - &pk).norm_squared()
                + coefficient * dist;
            let rhs = gamma * delta / (4.0 * p.alpha_min());
            GapCheck::Full {
                lhs,
                rhs,
                coefficient,
                holds: lhs <= rhs + tol,
            }
        }
    } else {
        let beta_estimate = estimate_hoffman_beta(p, &sol.x_star, 256, 0x5eed, inner)?;
        let rhs = gamma * delta / (2.0 * mu * p.alpha_min());
        GapCheck::Consequence {
            lhs: sq_opt,
            rhs,
            beta_estimate,
            holds: sq_opt <= rhs + tol,
        }
    };
    Ok(GapReport {
        gamma,
        delta,
        dist_to_feasible: dist,
        sq_dist_to_opt: sq_opt,
        subgradient_bound: l,
        radius,
        check,
    })
}
