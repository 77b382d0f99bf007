//! Strongly convex quadratic programs with linear inequality constraints.
//!
//! ```text
//! minimize    f(x) = ½ xᵀQx + cᵀx
//! subject to  <a_i, x> - b_i <= 0,   i = 1..m
//! ```
//!
//! together with the penalized objective
//! `F_{γδ}(x) = f(x) + (γ/m) Σ_i h_δ(x; a_i, b_i)`.

use std::fs;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::penalty::{huber, huber_slope, Halfspace, PenaltyParams};

/// `f(x) = ½ xᵀQx + cᵀx` with `Q` symmetric positive definite.
#[derive(Debug, Clone)]
pub struct QuadraticObjective {
    q: DMatrix<f64>,
    linear_term: DVector<f64>,
    mu: f64,
    l_f: f64,
    chol: Cholesky<f64, Dyn>,
}

impl QuadraticObjective {
    /// Checks symmetry to `1e-12` relative tolerance, symmetrizes, and computes
    /// the extreme eigenvalues.
    pub fn new(q: DMatrix<f64>, linear_term: DVector<f64>) -> Result<Self> {
        let n = linear_term.len();
        if n == 0 {
            return Err(Error::InvalidProblem("objective has dimension 0".into()));
        }
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::InvalidProblem(format!(
                "Q is {}x{}, linear term has length {n}",
                q.nrows(),
                q.ncols()
            )));
        }
        if q.iter().chain(linear_term.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidProblem("objective data must be finite".into()));
        }
        let scale = q.amax();
        let asym = (&q - q.transpose()).amax();
        if asym > 1e-12 * scale {
            return Err(Error::InvalidProblem(format!(
                "Q is not symmetric (max asymmetry {asym:e})"
            )));
        }
        let q = (&q + q.transpose()) * 0.5;
        let eig = SymmetricEigen::new(q.clone());
        let mu = eig.eigenvalues.min();
        let l_f = eig.eigenvalues.max();
        if !(mu > 0.0) {
            return Err(Error::InvalidProblem(format!(
                "Q is not positive definite (smallest eigenvalue {mu:e})"
            )));
        }
        let chol = Cholesky::new(q.clone())
            .ok_or_else(|| Error::InvalidProblem("Cholesky factorization of Q failed".into()))?;
        Ok(Self {
            q,
            linear_term,
            mu,
            l_f,
            chol,
        })
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn linear_term(&self) -> &DVector<f64> {
        &self.linear_term
    }

    /// Strong convexity modulus (smallest eigenvalue of `Q`).
    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// Gradient Lipschitz constant (largest eigenvalue of `Q`).
    pub fn l_f(&self) -> f64 {
        self.l_f
    }

    pub fn dim(&self) -> usize {
        self.linear_term.len()
    }

    pub(crate) fn value_unchecked(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.linear_term.dot(x)
    }

    /// `out = Qx + c`
    pub(crate) fn gradient_into(&self, x: &DVector<f64>, out: &mut DVector<f64>) {
        out.gemv(1.0, &self.q, x, 0.0);
        *out += &self.linear_term;
    }

    /// `-Q⁻¹c`
    pub fn unconstrained_minimizer(&self) -> DVector<f64> {
        -self.chol.solve(&self.linear_term)
    }
}

/// Provenance of a generated problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemMeta {
    pub seed: u64,
    pub generator: String,
}

#[derive(Debug, Clone)]
pub struct ConstrainedProblem {
    objective: QuadraticObjective,
    constraints: Vec<Halfspace>,
    alpha_min: f64,
    witness: Option<DVector<f64>>,
    meta: Option<ProblemMeta>,
}

impl ConstrainedProblem {
    pub fn new(objective: QuadraticObjective, constraints: Vec<Halfspace>) -> Result<Self> {
        if constraints.is_empty() {
            return Err(Error::InvalidProblem("need at least one constraint".into()));
        }
        let n = objective.dim();
        if let Some((i, c)) = constraints.iter().enumerate().find(|(_, c)| c.dim() != n) {
            return Err(Error::InvalidProblem(format!(
                "constraint {i} has dimension {}, objective has {n}",
                c.dim()
            )));
        }
        let alpha_min = constraints
            .iter()
            .map(Halfspace::norm_a)
            .fold(f64::INFINITY, f64::min);
        Ok(Self {
            objective,
            constraints,
            alpha_min,
            witness: None,
            meta: None,
        })
    }

    /// Attaches a feasible point. Errors if it violates any constraint.
    pub fn with_witness(mut self, witness: DVector<f64>) -> Result<Self> {
        check_dim(self.n(), witness.len())?;
        if let Some(i) = self.constraints.iter().position(|c| c.residual(&witness) > 0.0) {
            return Err(Error::InvalidProblem(format!(
                "witness violates constraint {i}"
            )));
        }
        self.witness = Some(witness);
        Ok(self)
    }

    pub fn with_meta(mut self, meta: ProblemMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn n(&self) -> usize {
        self.objective.dim()
    }

    pub fn m(&self) -> usize {
        self.constraints.len()
    }

    pub fn objective(&self) -> &QuadraticObjective {
        &self.objective
    }

    pub fn constraints(&self) -> &[Halfspace] {
        &self.constraints
    }

    /// `min_i |a_i|`
    pub fn alpha_min(&self) -> f64 {
        self.alpha_min
    }

    pub fn mu(&self) -> f64 {
        self.objective.mu
    }

    pub fn l_f(&self) -> f64 {
        self.objective.l_f
    }

    pub fn witness(&self) -> Option<&DVector<f64>> {
        self.witness.as_ref()
    }

    pub fn meta(&self) -> Option<&ProblemMeta> {
        self.meta.as_ref()
    }

    pub fn f_value(&self, x: &DVector<f64>) -> Result<f64> {
        check_dim(self.n(), x.len())?;
        Ok(self.objective.value_unchecked(x))
    }

    pub fn grad_f(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.n(), x.len())?;
        let mut out = DVector::zeros(self.n());
        self.objective.gradient_into(x, &mut out);
        Ok(out)
    }

    /// `F_{γδ}(x)`; `delta = 0` is allowed and uses the distance penalty.
    pub fn penalized_value(&self, x: &DVector<f64>, params: PenaltyParams) -> Result<f64> {
        check_dim(self.n(), x.len())?;
        let PenaltyParams { gamma, delta } = PenaltyParams::new(params.gamma, params.delta)?;
        let penalty: f64 = self
            .constraints
            .iter()
            .map(|c| {
                let s = c.residual(x);
                let p = if delta == 0.0 { s.max(0.0) } else { huber(s, delta) };
                p / c.norm_a()
            })
            .sum();
        Ok(self.objective.value_unchecked(x) + gamma / self.m() as f64 * penalty)
    }

    /// `∇F_{γδ}(x) = ∇f(x) + (γ/m) Σ_i ∇h_δ(x; a_i, b_i)`; requires `delta > 0`.
    pub fn penalized_gradient(&self, x: &DVector<f64>, params: PenaltyParams) -> Result<DVector<f64>> {
        check_dim(self.n(), x.len())?;
        let params = PenaltyParams::new(params.gamma, params.delta)?;
        params.require_smooth()?;
        let mut out = DVector::zeros(self.n());
        self.penalized_gradient_into(x, params, &mut out);
        Ok(out)
    }

    pub(crate) fn penalized_gradient_into(
        &self,
        x: &DVector<f64>,
        params: PenaltyParams,
        out: &mut DVector<f64>,
    ) {
        self.objective.gradient_into(x, out);
        let w = params.gamma / self.m() as f64;
        for c in &self.constraints {
            let slope = huber_slope(c.residual(x), params.delta);
            if slope != 0.0 {
                out.axpy(w * slope / c.norm_a(), c.a(), 1.0);
            }
        }
    }

    /// One sample of the incremental direction: `∇f(x) + γ ∇h_δ(x; a_i, b_i)`.
    /// Its mean over `i` equals [`Self::penalized_gradient`].
    pub fn stochastic_gradient(
        &self,
        x: &DVector<f64>,
        index: usize,
        params: PenaltyParams,
    ) -> Result<DVector<f64>> {
        check_dim(self.n(), x.len())?;
        let params = PenaltyParams::new(params.gamma, params.delta)?;
        params.require_smooth()?;
        let c = self.constraints.get(index).ok_or_else(|| {
            Error::Domain(format!("constraint index {index} out of range 0..{}", self.m()))
        })?;
        let mut out = DVector::zeros(self.n());
        self.objective.gradient_into(x, &mut out);
        let slope = huber_slope(c.residual(x), params.delta);
        out.axpy(params.gamma * slope / c.norm_a(), c.a(), 1.0);
        Ok(out)
    }

    pub fn is_feasible(&self, x: &DVector<f64>) -> bool {
        self.constraints.iter().all(|c| c.residual(x) <= 0.0)
    }

    /// `max_i dist(x, X_i)`, a lower bound on `dist(x, X)`.
    pub fn max_halfspace_distance(&self, x: &DVector<f64>) -> f64 {
        self.constraints
            .iter()
            .map(|c| c.residual(x).max(0.0) / c.norm_a())
            .fold(0.0, f64::max)
    }

    /// Euclidean distance to the feasible polyhedron, via the exact projector.
    pub fn dist_feasible_set(&self, x: &DVector<f64>, tol: f64) -> Result<f64> {
        check_dim(self.n(), x.len())?;
        if !(tol > 0.0) {
            return Err(Error::Domain(format!("tolerance must be positive, got {tol}")));
        }
        if self.is_feasible(x) {
            return Ok(0.0);
        }
        let p = crate::oracle::project_polyhedron(self, x, tol)?;
        Ok((x - p).norm())
    }

    pub fn to_file_format(&self) -> ProblemFile {
        let q = self.objective.q();
        ProblemFile {
            n: self.n(),
            m: self.m(),
            q: (0..self.n())
                .map(|i| q.row(i).iter().copied().collect())
                .collect(),
            linear_term: self.objective.linear_term().iter().copied().collect(),
            constraints: self
                .constraints
                .iter()
                .map(|c| ConstraintRecord {
                    a: c.a().iter().copied().collect(),
                    b: c.b(),
                })
                .collect(),
            witness: self.witness.as_ref().map(|w| w.iter().copied().collect()),
            meta: self.meta.clone(),
        }
    }

    pub fn from_file_format(file: &ProblemFile) -> Result<Self> {
        let n = file.n;
        if file.q.len() != n || file.q.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidProblem(format!("Q must be {n}x{n}")));
        }
        if file.linear_term.len() != n {
            return Err(Error::InvalidProblem(format!(
                "linear_term has length {}, expected {n}",
                file.linear_term.len()
            )));
        }
        if file.constraints.len() != file.m {
            return Err(Error::InvalidProblem(format!(
                "m = {} but {} constraints listed",
                file.m,
                file.constraints.len()
            )));
        }
        let q = DMatrix::from_fn(n, n, |i, j| file.q[i][j]);
        let objective =
            QuadraticObjective::new(q, DVector::from_column_slice(&file.linear_term))?;
        let constraints = file
            .constraints
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if c.a.len() != n {
                    return Err(Error::InvalidProblem(format!(
                        "constraint {i} has dimension {}, expected {n}",
                        c.a.len()
                    )));
                }
                Halfspace::from_slice(&c.a, c.b)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut p = Self::new(objective, constraints)?;
        if let Some(w) = &file.witness {
            p = p.with_witness(DVector::from_column_slice(w))?;
        }
        if let Some(meta) = &file.meta {
            p = p.with_meta(meta.clone());
        }
        Ok(p)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_file_format())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_file_format(&serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

/// On-disk problem description (UTF-8 JSON).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemFile {
    pub n: usize,
    pub m: usize,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub linear_term: Vec<f64>,
    pub constraints: Vec<ConstraintRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<ProblemMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintRecord {
    pub a: Vec<f64>,
    pub b: f64,
}

/// Eigenvalue layout of the generated `Q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spectrum {
    /// Uniform in `[mu_min, l_max]` with both ends attained.
    #[default]
    Uniform,
    /// `mu_min` with multiplicity `n - 1`, plus one `l_max`.
    Clustered,
}

/// Knobs for [`generate_problem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    /// Smallest eigenvalue of `Q`.
    pub mu_min: f64,
    /// Largest eigenvalue of `Q`.
    pub l_max: f64,
    #[serde(default)]
    pub spectrum: Spectrum,
    /// Constraint normals have norms drawn uniformly from this range.
    pub normal_norm_range: (f64, f64),
    /// Every constraint holds at the witness with slack at least `margin * |a_i|`.
    pub margin: f64,
    /// Extra slack, uniform in `[0, slack_spread * |a_i|]`.
    pub slack_spread: f64,
    /// Standard deviation of the witness coordinates.
    pub witness_scale: f64,
    /// Place the unconstrained minimizer outside the feasible set.
    pub active_optimum: bool,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            mu_min: 1.0,
            l_max: 2.0,
            spectrum: Spectrum::Uniform,
            normal_norm_range: (0.5, 2.0),
            margin: 1e-2,
            slack_spread: 1.0,
            witness_scale: 0.5,
            active_optimum: false,
        }
    }
}

impl GeneratorSpec {
    pub fn clustered(mut self) -> Self {
        self.spectrum = Spectrum::Clustered;
        self
    }

    pub fn active(mut self) -> Self {
        self.active_optimum = true;
        self
    }

    fn validate(&self) -> Result<()> {
        let (lo, hi) = self.normal_norm_range;
        let ok = self.mu_min > 0.0
            && self.l_max >= self.mu_min
            && self.l_max.is_finite()
            && lo > 0.0
            && hi >= lo
            && hi.is_finite()
            && self.margin > 0.0
            && self.slack_spread >= 0.0
            && self.slack_spread.is_finite()
            && self.witness_scale >= 0.0
            && self.witness_scale.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidProblem(format!("inconsistent generator spec {self:?}")))
        }
    }

    fn descriptor(&self) -> String {
        format!(
            "huberpen-gen/{} eig=[{},{}] {:?} norms=[{},{}] margin={} spread={} active={}",
            env!("CARGO_PKG_VERSION"),
            self.mu_min,
            self.l_max,
            self.spectrum,
            self.normal_norm_range.0,
            self.normal_norm_range.1,
            self.margin,
            self.slack_spread,
            self.active_optimum
        )
    }
}

fn gaussian_vector(rng: &mut Xoshiro256PlusPlus, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn nonzero_gaussian(rng: &mut Xoshiro256PlusPlus, n: usize) -> DVector<f64> {
    loop {
        let v = gaussian_vector(rng, n);
        if v.norm() > 1e-8 {
            return v;
        }
    }
}

/// Generates a feasible problem deterministically from `seed`.
///
/// `Q = U diag(λ) Uᵀ` with `U` a random orthogonal matrix, `λ₁ = mu_min`,
/// `λ_n = l_max` and the rest uniform in between. Constraint offsets are set
/// so a random witness point is strictly feasible with the configured slack.
pub fn generate_problem(
    n: usize,
    m: usize,
    seed: u64,
    spec: &GeneratorSpec,
) -> Result<ConstrainedProblem> {
    if n == 0 || m == 0 {
        return Err(Error::InvalidProblem(format!("need n >= 1 and m >= 1, got n={n} m={m}")));
    }
    spec.validate()?;
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);

    let gauss = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let u = gauss.qr().q();
    let mut eig: Vec<f64> = (0..n)
        .map(|_| rng.random_range(spec.mu_min..=spec.l_max))
        .collect();
    if spec.spectrum == Spectrum::Clustered {
        eig.fill(spec.mu_min);
    }
    eig[0] = spec.mu_min;
    if n > 1 {
        eig[n - 1] = spec.l_max;
    }
    let q = &u * DMatrix::from_diagonal(&DVector::from_vec(eig)) * u.transpose();
    let q = (&q + q.transpose()) * 0.5;

    let witness = gaussian_vector(&mut rng, n) * spec.witness_scale;
    let (lo, hi) = spec.normal_norm_range;
    let mut constraints = Vec::with_capacity(m);
    let mut slacks = Vec::with_capacity(m);
    for _ in 0..m {
        let dir = nonzero_gaussian(&mut rng, n).normalize();
        let a = dir * rng.random_range(lo..=hi);
        let norm = a.norm();
        let slack = norm * (spec.margin + spec.slack_spread * rng.random::<f64>());
        let b = a.dot(&witness) + slack;
        slacks.push(slack);
        constraints.push(Halfspace::new(a, b)?);
    }

    let linear_term = if spec.active_optimum {
        // Walk from the witness along a direction that leaves the polyhedron,
        // twice as far as the first boundary crossing.
        let a0 = constraints[0].a().normalize();
        let dir = loop {
            let d = (&a0 + nonzero_gaussian(&mut rng, n) * 0.5).normalize();
            if constraints[0].a().dot(&d) > 0.0 {
                break d;
            }
        };
        let first_crossing = constraints
            .iter()
            .zip(&slacks)
            .filter_map(|(c, &slack)| {
                let rate = c.a().dot(&dir);
                (rate > 0.0).then(|| slack / rate)
            })
            .fold(f64::INFINITY, f64::min);
        let x_unc = &witness + dir * (2.0 * first_crossing);
        -(&q * x_unc)
    } else {
        gaussian_vector(&mut rng, n)
    };

    let objective = QuadraticObjective::new(q, linear_term)?;
    let problem = ConstrainedProblem::new(objective, constraints)?
        .with_witness(witness)?
        .with_meta(ProblemMeta {
            seed,
            generator: spec.descriptor(),
        });
    Ok(problem)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn identity_problem(c: &[f64], constraints: Vec<Halfspace>) -> ConstrainedProblem {
        let n = c.len();
        let obj = QuadraticObjective::new(DMatrix::identity(n, n), v(c)).unwrap();
        ConstrainedProblem::new(obj, constraints).unwrap()
    }

    #[test]
    fn objective_validation() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(QuadraticObjective::new(bad, v(&[0.0, 0.0])).is_err());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(QuadraticObjective::new(indefinite, v(&[0.0, 0.0])).is_err());
        assert!(QuadraticObjective::new(DMatrix::identity(2, 2), v(&[0.0])).is_err());
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let obj = QuadraticObjective::new(q, v(&[0.0, 0.0])).unwrap();
        assert_relative_eq!(obj.mu(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(obj.l_f(), 3.0, epsilon = 1e-14);
    }

    #[test]
    fn problem_validation() {
        let obj = QuadraticObjective::new(DMatrix::identity(2, 2), v(&[0.0, 0.0])).unwrap();
        assert!(ConstrainedProblem::new(obj.clone(), vec![]).is_err());
        let wrong = Halfspace::from_slice(&[1.0], 0.0).unwrap();
        assert!(ConstrainedProblem::new(obj.clone(), vec![wrong]).is_err());
        let hs = Halfspace::from_slice(&[1.0, 0.0], 0.0).unwrap();
        let p = ConstrainedProblem::new(obj, vec![hs]).unwrap();
        assert!(p.clone().with_witness(v(&[1.0, 0.0])).is_err());
        assert!(p.with_witness(v(&[-1.0, 0.0])).is_ok());
    }

    #[test]
    fn objective_values() {
        let hs = Halfspace::from_slice(&[1.0, 1.0], 10.0).unwrap();
        let p = identity_problem(&[0.0, 0.0], vec![hs.clone()]);
        assert_eq!(p.f_value(&v(&[0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(p.f_value(&v(&[3.0, 4.0])).unwrap(), 12.5);
        assert_eq!(p.grad_f(&v(&[3.0, 4.0])).unwrap(), v(&[3.0, 4.0]));
        let p = identity_problem(&[1.5, -2.0], vec![hs]);
        assert_eq!(p.f_value(&v(&[0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(p.grad_f(&v(&[0.0, 0.0])).unwrap(), v(&[1.5, -2.0]));
        assert!(p.f_value(&v(&[0.0])).is_err());
    }

    #[test]
    fn objective_matches_double_loop() {
        let p = generate_problem(4, 3, 5, &GeneratorSpec::default()).unwrap();
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
        let q = p.objective().q();
        let c = p.objective().linear_term();
        for _ in 0..50 {
            let x = gaussian_vector(&mut rng, 4);
            let mut naive = 0.0;
            for i in 0..4 {
                for j in 0..4 {
                    naive += 0.5 * x[i] * q[(i, j)] * x[j];
                }
                naive += c[i] * x[i];
            }
            assert_relative_eq!(p.f_value(&x).unwrap(), naive, max_relative = 1e-12);
        }
    }

    #[test]
    fn penalized_value_reductions() {
        let p = generate_problem(3, 4, 17, &GeneratorSpec::default()).unwrap();
        let w = p.witness().unwrap().clone();
        let params = PenaltyParams::new(2.0, 0.0).unwrap();
        assert_eq!(p.penalized_value(&w, params).unwrap(), p.f_value(&w).unwrap());
        let params = PenaltyParams::new(2.0, 0.3).unwrap();
        let bound = p.f_value(&w).unwrap() + 2.0 * 0.3 / (4.0 * p.alpha_min());
        assert!(p.penalized_value(&w, params).unwrap() <= bound + 1e-12);

        let hs = Halfspace::from_slice(&[1.0, 2.0], 0.5).unwrap();
        let single = identity_problem(&[0.3, -0.1], vec![hs.clone()]);
        let x = v(&[1.0, 0.7]);
        let expected =
            single.f_value(&x).unwrap() + 3.0 * crate::penalty::h_delta(&x, &hs, 0.2).unwrap();
        let got = single
            .penalized_value(&x, PenaltyParams::new(3.0, 0.2).unwrap())
            .unwrap();
        assert_relative_eq!(got, expected, max_relative = 1e-15);
    }

    #[test]
    fn gradient_rejects_zero_width() {
        let p = generate_problem(2, 2, 1, &GeneratorSpec::default()).unwrap();
        let params = PenaltyParams::new(1.0, 0.0).unwrap();
        assert!(p.penalized_gradient(&v(&[0.0, 0.0]), params).is_err());
        assert!(p.stochastic_gradient(&v(&[0.0, 0.0]), 0, params).is_err());
        let params = PenaltyParams::new(1.0, 0.1).unwrap();
        assert!(p.stochastic_gradient(&v(&[0.0, 0.0]), 2, params).is_err());
    }

    #[test]
    fn deep_feasible_gradient_is_objective_gradient() {
        let p = generate_problem(3, 5, 2, &GeneratorSpec::default()).unwrap();
        // Deep inside: residuals well below -δ at the witness with a tiny δ.
        let w = p.witness().unwrap().clone();
        let min_slack = p
            .constraints()
            .iter()
            .map(|c| -c.residual(&w))
            .fold(f64::INFINITY, f64::min);
        let params = PenaltyParams::new(5.0, 0.5 * min_slack).unwrap();
        assert_eq!(p.penalized_gradient(&w, params).unwrap(), p.grad_f(&w).unwrap());
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = GeneratorSpec::default();
        let a = generate_problem(2, 1, 7, &spec).unwrap();
        let b = generate_problem(2, 1, 7, &spec).unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        let c = generate_problem(2, 1, 8, &spec).unwrap();
        assert_ne!(a.to_json().unwrap(), c.to_json().unwrap());
    }

    #[test]
    fn generator_witness_is_strictly_feasible() {
        for seed in 0..20 {
            let spec = GeneratorSpec::default();
            let p = generate_problem(1 + seed as usize % 6, 1 + seed as usize % 9, seed, &spec).unwrap();
            let w = p.witness().unwrap();
            for c in p.constraints() {
                assert!(c.residual(w) <= -spec.margin * c.norm_a() * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn active_optimum_makes_unconstrained_minimizer_infeasible() {
        for seed in 0..20 {
            let p = generate_problem(5, 8, seed, &GeneratorSpec::default().active()).unwrap();
            let xu = p.objective().unconstrained_minimizer();
            let worst = p
                .constraints()
                .iter()
                .map(|c| c.residual(&xu))
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(worst > 0.0, "seed {seed}: unconstrained minimizer feasible");
        }
    }

    #[test]
    fn generator_rejects_bad_input() {
        let spec = GeneratorSpec::default();
        assert!(generate_problem(0, 1, 0, &spec).is_err());
        assert!(generate_problem(1, 0, 0, &spec).is_err());
        let bad = GeneratorSpec {
            l_max: 0.5,
            ..spec
        };
        assert!(generate_problem(2, 2, 0, &bad).is_err());
    }

    #[test]
    fn eigenvalue_range_respected() {
        let spec = GeneratorSpec {
            mu_min: 0.5,
            l_max: 4.0,
            ..GeneratorSpec::default()
        };
        let p = generate_problem(6, 2, 3, &spec).unwrap();
        assert_relative_eq!(p.mu(), 0.5, max_relative = 1e-10);
        assert_relative_eq!(p.l_f(), 4.0, max_relative = 1e-10);
    }

    #[test]
    fn json_round_trip_is_exact() {
        let p = generate_problem(4, 6, 99, &GeneratorSpec::default().active()).unwrap();
        let text = p.to_json().unwrap();
        let back = ConstrainedProblem::from_json(&text).unwrap();
        assert_eq!(back.to_json().unwrap(), text);
        assert_eq!(back.objective().q(), p.objective().q());
        assert_eq!(back.witness(), p.witness());
        let value: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["n", "m", "Q", "linear_term", "constraints", "witness", "meta"] {
            assert!(value.get(key).is_some(), "missing {key}");
        }
        assert_eq!(value["meta"]["seed"], 99);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let p = generate_problem(2, 2, 1, &GeneratorSpec::default()).unwrap();
        let mut f = p.to_file_format();
        f.m = 3;
        assert!(ConstrainedProblem::from_file_format(&f).is_err());
        let mut f = p.to_file_format();
        f.constraints[0].a = vec![0.0, 0.0];
        assert!(ConstrainedProblem::from_file_format(&f).is_err());
        let mut f = p.to_file_format();
        f.q[0].pop();
        assert!(ConstrainedProblem::from_file_format(&f).is_err());
    }
}
