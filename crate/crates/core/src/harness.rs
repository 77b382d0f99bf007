//! Command-line front end and the invariant check suite.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or validation error,
//! 3 numerical failure (divergence, uncertifiable oracle).

use std::ffi::OsString;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_xoshiro::Xoshiro256PlusPlus;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::oracle::{
    bounding_radius, check_drift_lemma_with, check_gap_lemma, check_level_set, rate_fit,
    solve_constrained_exact, subgradient_bound, GapCheck, OracleFile, OracleSolution, RateFit,
};
use crate::penalty::{dist_halfspace, h_delta, Halfspace, HuberKernel, PenaltyKernel};
use crate::problem::{generate_problem, ConstrainedProblem, GeneratorSpec, Spectrum};
use crate::schedule::{Schedule, Severity};
use crate::solver::{run, run_ensemble, InitialPoint, Outcome, RecordGrid, SolverConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Divergence { .. } | Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

// ---------------------------------------------------------------------------
// Check suite

/// Outcome of one sampled inequality. `worst_slack` is the smallest
/// `bound - value` seen; the check passes when it stays above `-tolerance`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub name: String,
    pub samples: usize,
    pub worst_slack: f64,
    pub tolerance: f64,
    pub passed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offending: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

struct Tracker {
    name: &'static str,
    tolerance: f64,
    samples: usize,
    worst: f64,
    offending: Option<serde_json::Value>,
}

impl Tracker {
    fn new(name: &'static str, tolerance: f64) -> Self {
        Self {
            name,
            tolerance,
            samples: 0,
            worst: f64::INFINITY,
            offending: None,
        }
    }

    fn record(&mut self, slack: f64, instance: impl FnOnce() -> serde_json::Value) {
        self.samples += 1;
        let slack = if slack.is_nan() { f64::NEG_INFINITY } else { slack };
        if slack < self.worst {
            self.worst = slack;
            if slack < -self.tolerance {
                self.offending = Some(instance());
            }
        }
    }

    fn finish(self) -> CheckOutcome {
        CheckOutcome {
            name: self.name.into(),
            samples: self.samples,
            worst_slack: self.worst,
            tolerance: self.tolerance,
            passed: self.worst >= -self.tolerance,
            offending: self.offending,
            note: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum CheckGroup {
    Penalty,
    Drift,
    LevelSet,
    Gap,
}

impl CheckGroup {
    pub const ALL: [CheckGroup; 4] = [
        CheckGroup::Penalty,
        CheckGroup::Drift,
        CheckGroup::LevelSet,
        CheckGroup::Gap,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: CheckGroup,
    pub checks: Vec<CheckOutcome>,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub passed: bool,
    pub groups: Vec<GroupReport>,
}

fn sample_json(x: &DVector<f64>, hs: &Halfspace, delta: f64) -> serde_json::Value {
    serde_json::json!({
        "x": x.as_slice(),
        "a": hs.a().as_slice(),
        "b": hs.b(),
        "delta": delta,
    })
}

fn log_uniform(rng: &mut Xoshiro256PlusPlus, lo: f64, hi: f64) -> f64 {
    10f64.powf(rng.random_range(lo.log10()..hi.log10()))
}

fn gaussian(rng: &mut Xoshiro256PlusPlus, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Point with residual close to `s` against `hs`.
fn point_with_residual(rng: &mut Xoshiro256PlusPlus, hs: &Halfspace, s: f64) -> DVector<f64> {
    let x0 = gaussian(rng, hs.dim());
    let shift = (s - hs.residual(&x0)) / hs.norm_a().powi(2);
    x0 + hs.a() * shift
}

/// One random `(x, a, b, δ)` with `n <= 8`, residuals concentrated near the kinks.
fn penalty_sample(rng: &mut Xoshiro256PlusPlus) -> (DVector<f64>, Halfspace, f64) {
    let n = rng.random_range(1..=8);
    let hs = loop {
        let a = gaussian(rng, n) * log_uniform(rng, 0.1, 10.0);
        if let Ok(h) = Halfspace::new(a, rng.sample(StandardNormal)) {
            break h;
        }
    };
    let delta = log_uniform(rng, 1e-2, 10.0);
    let s = if rng.random_bool(0.7) {
        delta * rng.random_range(-3.0..3.0)
    } else {
        rng.random_range(-20.0..20.0)
    };
    (point_with_residual(rng, &hs, s), hs, delta)
}

const SUITE_TOL: f64 = 1e-12;

/// Sampled penalty invariants for an arbitrary kernel.
///
/// Covers non-negativity and the feasible/infeasible level bounds, width
/// monotonicity, `h_0 = dist` and `h_δ >= dist`, the unit gradient bound, the
/// `|a|/(2δ)` Lipschitz bound, central finite differences, kernel convexity
/// and continuity at `s = ±δ`.
pub fn penalty_suite<K: PenaltyKernel>(kernel: &K, samples: usize, seed: u64) -> Vec<CheckOutcome> {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut nonneg = Tracker::new("nonnegative", SUITE_TOL);
    let mut cap = Tracker::new("feasible_level_cap", SUITE_TOL);
    let mut floor = Tracker::new("infeasible_level_floor", SUITE_TOL);
    let mut mono = Tracker::new("monotone_in_delta", SUITE_TOL);
    let mut zero = Tracker::new("zero_width_is_distance", SUITE_TOL);
    let mut dominates = Tracker::new("dominates_distance", SUITE_TOL);
    let mut unit = Tracker::new("gradient_norm_at_most_one", SUITE_TOL);
    let mut lip = Tracker::new("gradient_lipschitz", SUITE_TOL);
    let mut fd = Tracker::new("finite_difference_gradient", 1e-6);
    let mut convex = Tracker::new("kernel_convexity", SUITE_TOL);
    let mut cont = Tracker::new("kernel_continuity_at_kinks", SUITE_TOL);

    for _ in 0..samples {
        let (x, hs, delta) = penalty_sample(&mut rng);
        let inst = || sample_json(&x, &hs, delta);
        let s = hs.residual(&x);
        let h = kernel.penalty(&x, &hs, delta);
        let level = delta / (4.0 * hs.norm_a());

        nonneg.record(h, inst);
        if s <= 0.0 {
            cap.record(level - h, inst);
        } else {
            // strict inequality: a zero gap counts as a violation
            let gap = h - level;
            floor.record(if gap > 0.0 { gap } else { f64::NEG_INFINITY }, inst);
        }

        let wider = delta * (1.0 + rng.random_range(0.0..3.0));
        mono.record(kernel.penalty(&x, &hs, wider) - h, inst);
        let dist = dist_halfspace(&x, &hs).expect("dimensions agree");
        zero.record(-(kernel.penalty(&x, &hs, 0.0) - dist).abs(), inst);
        dominates.record(h - dist, inst);

        let g = kernel.gradient(&x, &hs, delta);
        unit.record(1.0 - g.norm(), inst);

        let y = &x + gaussian(&mut rng, x.len()) * (delta / hs.norm_a() * rng.random_range(0.0..2.0));
        let gy = kernel.gradient(&y, &hs, delta);
        let lbound = hs.gradient_lipschitz(delta) * (&x - &y).norm();
        lip.record(lbound - (&g - &gy).norm(), inst);

        let t = f64::EPSILON.cbrt() * (1.0 + x.norm());
        let clearance = 10.0 * t * hs.norm_a();
        if (s - delta).abs() > clearance && (s + delta).abs() > clearance {
            let fdg = DVector::from_fn(x.len(), |j, _| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += t;
                xm[j] -= t;
                (kernel.penalty(&xp, &hs, delta) - kernel.penalty(&xm, &hs, delta)) / (2.0 * t)
            });
            let err = (&fdg - &g).norm();
            let rel = if g.norm() > 0.0 { err / g.norm() } else { err };
            fd.record(-rel, inst);
        }

        let mut ss = [
            delta * rng.random_range(-3.0..3.0),
            delta * rng.random_range(-3.0..3.0),
            delta * rng.random_range(-3.0..3.0),
        ];
        ss.sort_by(f64::total_cmp);
        if ss[0] < ss[1] && ss[1] < ss[2] {
            let w = (ss[1] - ss[0]) / (ss[2] - ss[0]);
            let chord = (1.0 - w) * kernel.value(ss[0], delta) + w * kernel.value(ss[2], delta);
            let scale = 1.0 + chord.abs();
            convex.record((chord - kernel.value(ss[1], delta)) / scale, || {
                serde_json::json!({ "s": ss, "delta": delta })
            });
        }

        let eps = 1e-9 * delta;
        for kink in [delta, -delta] {
            let jump = (kernel.value(kink + eps, delta) - kernel.value(kink - eps, delta)).abs();
            cont.record(3.0 * eps - jump, || serde_json::json!({ "s": kink, "delta": delta }));
        }
    }
    vec![
        nonneg.finish(),
        cap.finish(),
        floor.finish(),
        mono.finish(),
        zero.finish(),
        dominates.finish(),
        unit.finish(),
        lip.finish(),
        fd.finish(),
        convex.finish(),
        cont.finish(),
    ]
}

/// Width-perturbation bound on gradients.
///
/// For each random pair `δ₁ > δ₂` the sampled sup of `|∇h_δ₁ - ∇h_δ₂|` over
/// `points` inputs must stay below `(δ₁ - δ₂)/(2δ₁)`; the residual grid always
/// contains `±δ₂`, where the sup is attained, so `attainment` reports the
/// smallest ratio of sampled sup to bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationOutcome {
    pub check: CheckOutcome,
    pub min_attainment: f64,
}

pub fn perturbation_suite<K: PenaltyKernel>(
    kernel: &K,
    pairs: usize,
    points: usize,
    seed: u64,
) -> PerturbationOutcome {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut t = Tracker::new("gradient_width_perturbation", SUITE_TOL);
    let mut min_attainment = f64::INFINITY;
    for _ in 0..pairs {
        let d1 = log_uniform(&mut rng, 1e-2, 10.0);
        let d2 = d1 * rng.random_range(0.01..0.99);
        let bound = (d1 - d2) / (2.0 * d1);
        let n = rng.random_range(1..=8);
        let hs = loop {
            let a = gaussian(&mut rng, n);
            if let Ok(h) = Halfspace::new(a, rng.sample(StandardNormal)) {
                break h;
            }
        };
        let mut sup: f64 = 0.0;
        for j in 0..points {
            let s = match j {
                0 => d2,
                1 => -d2,
                _ => -2.0 * d1 + 4.0 * d1 * (j - 2) as f64 / (points - 2).max(1) as f64,
            };
            let x = point_with_residual(&mut rng, &hs, s);
            let diff = (kernel.gradient(&x, &hs, d1) - kernel.gradient(&x, &hs, d2)).norm();
            sup = sup.max(diff);
            t.record(bound - diff, || {
                serde_json::json!({ "x": x.as_slice(), "a": hs.a().as_slice(), "b": hs.b(), "delta1": d1, "delta2": d2 })
            });
        }
        min_attainment = min_attainment.min(sup / bound);
    }
    PerturbationOutcome {
        check: t.finish(),
        min_attainment,
    }
}

/// Seeds of the instances the lemma checks generate.
pub const CHECK_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

pub fn drift_k_list() -> Vec<u64> {
    (0..=8).map(|j| 1u64 << j).collect()
}

fn lemma_instance(seed: u64) -> Result<ConstrainedProblem> {
    let n = 2 + (seed as usize % 5);
    let m = 3 + (seed as usize % 6);
    generate_problem(n, m, seed, &GeneratorSpec::default().active())
}

fn problem_json(p: &ConstrainedProblem) -> serde_json::Value {
    serde_json::to_value(p.to_file_format()).unwrap_or(serde_json::Value::Null)
}

/// Drift and level-set checks on the standard lemma instances.
pub fn drift_and_level_checks(
    sch: &Schedule,
    drift_slack: f64,
    level_tol: f64,
    oracle_tol: f64,
) -> Result<(CheckOutcome, CheckOutcome)> {
    let ks = drift_k_list();
    let mut drift = Tracker::new("drift_lemma", drift_slack);
    let mut level = Tracker::new("level_set", level_tol);
    for seed in CHECK_SEEDS {
        let p = lemma_instance(seed)?;
        let sol = solve_constrained_exact(&p, 1e-12)?;
        let rep = check_drift_lemma_with(&p, sch, &ks, drift_slack, oracle_tol)?;
        let lv = check_level_set(&p, &sol, sch, &ks, oracle_tol)?;
        for e in &rep.entries {
            drift.record(e.margin, || serde_json::json!({ "k": e.k, "problem": problem_json(&p) }));
        }
        for e in &lv.entries {
            let slack = (e.level - e.f_at_minimizer).min(e.uniform_level - e.f_at_minimizer);
            level.record(slack, || serde_json::json!({ "k": e.k, "problem": problem_json(&p) }));
        }
    }
    Ok((drift.finish(), level.finish()))
}

/// `γ` with `γ/4 = 2L` and `δ = product / γ` for a single-constraint instance.
pub fn asymptotic_pair(p: &ConstrainedProblem, product: f64) -> Result<(f64, f64)> {
    let sol = solve_constrained_exact(p, 1e-12)?;
    let l = subgradient_bound(p, bounding_radius(p, &sol, product))?;
    let gamma = 8.0 * l.max(1.0);
    Ok((gamma, product / gamma))
}

/// Gap inequality: full form on single-constraint instances, consequence on
/// general ones.
pub fn gap_checks(tol: f64) -> Result<(CheckOutcome, CheckOutcome)> {
    let mut full = Tracker::new("gap_lemma_single_constraint", tol);
    let mut cons = Tracker::new("gap_lemma_consequence", tol);
    let mut betas = Vec::new();
    for seed in CHECK_SEEDS {
        let p = generate_problem(1 + seed as usize % 4, 1, seed, &GeneratorSpec::default().active())?;
        let (gamma, delta) = asymptotic_pair(&p, 1e-2)?;
        let rep = check_gap_lemma(&p, gamma, delta, tol)?;
        let inst = || serde_json::json!({ "gamma": gamma, "delta": delta, "problem": problem_json(&p) });
        match rep.check {
            GapCheck::Full { lhs, rhs, .. } => full.record(rhs - lhs, inst),
            _ => full.record(f64::NEG_INFINITY, inst),
        }

        let p = generate_problem(4, 6, seed, &GeneratorSpec::default().active())?;
        let rep = check_gap_lemma(&p, 1e3, 1e-4, tol)?;
        if let GapCheck::Consequence { lhs, rhs, beta_estimate, .. } = rep.check {
            betas.push(beta_estimate);
            cons.record(rhs - lhs, || serde_json::json!({ "gamma": 1e3, "delta": 1e-4, "problem": problem_json(&p) }));
        }
    }
    let mut cons = cons.finish();
    cons.note = Some(format!("empirical Hoffman beta estimates: {betas:?}"));
    Ok((full.finish(), cons))
}

/// Runs the selected groups; the penalty group exercises `kernel`.
pub fn run_check_suite<K: PenaltyKernel>(kernel: &K, only: &[CheckGroup]) -> Result<CheckReport> {
    let selected: Vec<CheckGroup> = if only.is_empty() {
        CheckGroup::ALL.to_vec()
    } else {
        CheckGroup::ALL.iter().copied().filter(|g| only.contains(g)).collect()
    };
    let sch = Schedule::recommended();
    let needs_drift = selected.contains(&CheckGroup::Drift) || selected.contains(&CheckGroup::LevelSet);
    let drift_level = if needs_drift {
        Some(drift_and_level_checks(&sch, 1e-6, 1e-8, 1e-9)?)
    } else {
        None
    };
    let mut groups = Vec::new();
    for g in selected {
        let checks = match g {
            CheckGroup::Penalty => {
                let mut c = penalty_suite(kernel, 10_000, 0xC0FFEE);
                let pert = perturbation_suite(kernel, 100, 10_000, 0xBEEF);
                c.push(pert.check);
                let mut att = Tracker::new("perturbation_bound_attained", 0.0);
                att.record(pert.min_attainment - 0.99, || serde_json::Value::Null);
                c.push(att.finish());
                c
            }
            CheckGroup::Drift => vec![drift_level.as_ref().expect("computed").0.clone()],
            CheckGroup::LevelSet => vec![drift_level.as_ref().expect("computed").1.clone()],
            CheckGroup::Gap => {
                let (a, b) = gap_checks(1e-8)?;
                vec![a, b]
            }
        };
        groups.push(GroupReport { group: g, checks });
    }
    Ok(CheckReport {
        passed: groups.iter().all(|g| g.passed()),
        groups,
    })
}

// ---------------------------------------------------------------------------
// Manifests

/// Provenance of a `solve` or `sweep` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    pub tool_version: String,
    pub problem_path: String,
    pub problem_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_path: Option<String>,
    pub schedule: Schedule,
    pub seeds: Vec<u64>,
    pub solver: SolverConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSettings>,
    pub duration_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub num_seeds: u64,
    pub k_min: u64,
    pub k_max: u64,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Problem plus the hash of the exact bytes it was parsed from.
fn read_problem(path: &Path) -> Result<(ConstrainedProblem, String)> {
    let bytes = fs::read(path)?;
    let text = String::from_utf8(bytes.clone())
        .map_err(|e| Error::InvalidProblem(format!("{}: not UTF-8: {e}", path.display())))?;
    Ok((ConstrainedProblem::from_json(&text)?, sha256_hex(&bytes)))
}

fn read_oracle(path: &Path) -> Result<OracleSolution> {
    let file: OracleFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    OracleSolution::from_file_format(&file)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

// ---------------------------------------------------------------------------
// CLI

#[derive(Debug, Parser)]
#[command(name = "huberpen", version, about = "Incremental Huber-penalty solver and verification harness")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a random problem, or the penalty-curve samples with --figure1.
    Gen(GenArgs),
    /// Run the incremental method and write a trace CSV plus manifest.
    Solve(SolveArgs),
    /// Solve the constrained problem exactly by active-set enumeration.
    Oracle(OracleArgs),
    /// Seed ensemble, aggregate errors and fit the convergence rate.
    Sweep(SweepArgs),
    /// Run the invariant and lemma check suite.
    Check(CheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SpectrumArg {
    Uniform,
    Clustered,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, required_unless_present = "figure1")]
    pub n: Option<usize>,
    #[arg(long, required_unless_present = "figure1")]
    pub m: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Make the unconstrained minimizer infeasible.
    #[arg(long)]
    pub active_optimum: bool,
    #[arg(long, default_value_t = 1.0)]
    pub mu_min: f64,
    #[arg(long, default_value_t = 2.0)]
    pub l_max: f64,
    #[arg(long, value_enum, default_value_t = SpectrumArg::Uniform)]
    pub spectrum: SpectrumArg,
    /// Emit x, h_δ(x; 1, 1) for δ in {1/4, 1/2, 1} over x in [-0.5, 2] as CSV.
    #[arg(long)]
    pub figure1: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ScheduleArgs {
    #[arg(long, default_value_t = 0.25)]
    pub g: f64,
    #[arg(long, default_value_t = 0.75)]
    pub d: f64,
    #[arg(long, default_value_t = 1.0)]
    pub s: f64,
    #[arg(long, default_value_t = 1.0)]
    pub gamma0: f64,
    #[arg(long, default_value_t = 1.0)]
    pub delta0: f64,
    /// Initial step size; defaults to 1/(2 L_f).
    #[arg(long)]
    pub step0: Option<f64>,
}

impl ScheduleArgs {
    fn schedule(&self, p: &ConstrainedProblem) -> Schedule {
        Schedule {
            g: self.g,
            d: self.d,
            s: self.s,
            gamma0: self.gamma0,
            delta0: self.delta0,
            step0: self.step0.unwrap_or(1.0 / (2.0 * p.l_f())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Witness,
    Zero,
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[arg(long, default_value_t = 100_000)]
    pub iters: u64,
    /// Snapshot every N iterations instead of on the geometric grid.
    #[arg(long)]
    pub record_every: Option<u64>,
    /// Ratio of the geometric snapshot grid.
    #[arg(long, default_value_t = 1.2)]
    pub grid_ratio: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Witness)]
    pub init: InitArg,
}

impl RunArgs {
    fn config(&self, p: &ConstrainedProblem, seed: u64, store_iterates: bool) -> SolverConfig {
        SolverConfig {
            schedule: self.schedule.schedule(p),
            iterations: self.iters,
            seed,
            grid: match self.record_every {
                Some(every) => RecordGrid::Arithmetic { every },
                None => RecordGrid::Geometric { ratio: self.grid_ratio },
            },
            initial_point: match self.init {
                InitArg::Witness => InitialPoint::Witness,
                InitArg::Zero => InitialPoint::Zero,
            },
            store_iterates,
        }
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long, required_unless_present = "replay")]
    pub problem: Option<PathBuf>,
    /// Trace CSV path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Oracle JSON supplying x* for the sq_err_to_opt column.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Manifest path; defaults to `<out>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Also write `<out>.iterates.csv` with every snapshot iterate.
    #[arg(long)]
    pub store_iterates: bool,
    /// Rerun exactly the configuration recorded in a manifest.
    #[arg(long, conflicts_with_all = ["problem", "oracle"])]
    pub replay: Option<PathBuf>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub problem: PathBuf,
    /// Output path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-10)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub problem: PathBuf,
    /// Oracle JSON with x*; computed on the fly when omitted.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Aggregate CSV path.
    #[arg(long)]
    pub out: PathBuf,
    /// First seed; runs use seed, seed+1, ...
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub seeds: u64,
    #[arg(long, default_value_t = 1000)]
    pub k_min: u64,
    /// Defaults to --iters.
    #[arg(long)]
    pub k_max: Option<u64>,
    /// Repeat the sweep for each listed d (comma separated); outputs get a `.d<value>` suffix.
    #[arg(long, value_delimiter = ',')]
    pub d_list: Vec<f64>,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Restrict to these groups.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub only: Vec<CheckGroup>,
    /// JSON report path; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let echo: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let result = with_thread_pool(|| dispatch(cli.command, &echo));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn with_thread_pool<T: Send>(f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match std::env::var("HUBER_THREADS") {
        Ok(v) => {
            let threads: usize = v
                .parse()
                .ok()
                .filter(|&t| t > 0)
                .ok_or_else(|| Error::Domain(format!("HUBER_THREADS must be a positive integer, got {v:?}")))?;
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Numerical(format!("thread pool: {e}")))?
                .install(f)
        }
        Err(_) => f(),
    }
}

fn dispatch(cmd: Command, echo: &[String]) -> Result<i32> {
    match cmd {
        Command::Gen(a) => cmd_gen(&a),
        Command::Solve(a) => cmd_solve(&a, echo),
        Command::Oracle(a) => cmd_oracle(&a),
        Command::Sweep(a) => cmd_sweep(&a, echo),
        Command::Check(a) => cmd_check(&a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

/// CSV of `x, h_δ(x; 1, 1)` for the three widths of the penalty figure.
pub fn figure1_csv() -> Result<String> {
    let hs = Halfspace::from_slice(&[1.0], 1.0)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["x", "delta_0.25", "delta_0.5", "delta_1"])?;
    for j in 0..=250 {
        let x = -0.5 + j as f64 / 100.0;
        let xv = DVector::from_element(1, x);
        let mut row = vec![x.to_string()];
        for delta in [0.25, 0.5, 1.0] {
            row.push(h_delta(&xv, &hs, delta)?.to_string());
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("CSV output is UTF-8"))
}

pub fn cmd_gen(a: &GenArgs) -> Result<i32> {
    if a.figure1 {
        emit(a.out.as_deref(), &figure1_csv()?)?;
        return Ok(EXIT_OK);
    }
    let (n, m) = (a.n.unwrap_or(0), a.m.unwrap_or(0));
    let spec = GeneratorSpec {
        mu_min: a.mu_min,
        l_max: a.l_max,
        spectrum: match a.spectrum {
            SpectrumArg::Uniform => Spectrum::Uniform,
            SpectrumArg::Clustered => Spectrum::Clustered,
        },
        active_optimum: a.active_optimum,
        ..GeneratorSpec::default()
    };
    let p = generate_problem(n, m, a.seed, &spec)?;
    let mut text = p.to_json()?;
    text.push('\n');
    emit(a.out.as_deref(), &text)?;
    Ok(EXIT_OK)
}

pub fn cmd_oracle(a: &OracleArgs) -> Result<i32> {
    let (p, _) = read_problem(&a.problem)?;
    let sol = solve_constrained_exact(&p, a.tol)?;
    let kkt = sol.kkt_residuals(&p);
    log::info!("KKT residuals {kkt:?}");
    let mut text = serde_json::to_string_pretty(&sol.to_file_format())?;
    text.push('\n');
    emit(a.out.as_deref(), &text)?;
    Ok(EXIT_OK)
}

fn report_schedule(sch: &Schedule) -> Result<()> {
    for d in sch.validate() {
        match d.severity {
            Severity::Info => log::info!("{d}"),
            Severity::Warning => eprintln!("{d}"),
            // reported through the returned error
            Severity::Error => {}
        }
    }
    sch.ensure_valid()
}

pub fn cmd_solve(a: &SolveArgs, echo: &[String]) -> Result<i32> {
    let started = Instant::now();
    let (problem_path, oracle_path, cfg, p, hash) = match &a.replay {
        Some(mpath) => {
            let man: RunManifest = serde_json::from_str(&fs::read_to_string(mpath)?)?;
            let path = PathBuf::from(&man.problem_path);
            let (p, hash) = read_problem(&path)?;
            if hash != man.problem_sha256 {
                return Err(Error::InvalidProblem(format!(
                    "{} has hash {hash}, manifest recorded {}",
                    path.display(),
                    man.problem_sha256
                )));
            }
            (path, man.oracle_path.map(PathBuf::from), man.solver, p, hash)
        }
        None => {
            let path = a.problem.clone().expect("clap requires --problem without --replay");
            let (p, hash) = read_problem(&path)?;
            let cfg = a.run.config(&p, a.seed, a.store_iterates);
            (path, a.oracle.clone(), cfg, p, hash)
        }
    };
    report_schedule(&cfg.schedule)?;
    let x_star = oracle_path.as_deref().map(read_oracle).transpose()?.map(|s| s.x_star);
    let trace = run(&p, &cfg, x_star.as_ref())?;

    let mut csv = Vec::new();
    trace.write_csv(&mut csv)?;
    fs::write(&a.out, csv)?;
    if cfg.store_iterates {
        let mut it = Vec::new();
        trace.write_iterates_csv(&mut it)?;
        fs::write(sibling(&a.out, ".iterates.csv"), it)?;
    }
    let manifest = RunManifest {
        command: echo.to_vec(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        problem_path: problem_path.to_string_lossy().into_owned(),
        problem_sha256: hash,
        oracle_path: oracle_path.map(|p| p.to_string_lossy().into_owned()),
        schedule: cfg.schedule,
        seeds: vec![cfg.seed],
        solver: cfg,
        sweep: None,
        duration_secs: started.elapsed().as_secs_f64(),
    };
    let mpath = a.manifest.clone().unwrap_or_else(|| sibling(&a.out, ".manifest.json"));
    write_json(&mpath, &manifest)?;

    match trace.outcome {
        Outcome::Completed => {
            if let Some(last) = trace.snapshots.last() {
                println!(
                    "k={} f={} dist_feasible={} (initial {})",
                    last.k, last.f_value, last.dist_feasible, trace.initial.dist_feasible
                );
            }
            Ok(EXIT_OK)
        }
        Outcome::Diverged { k, iterate_norm, direction_norm } => Err(Error::Divergence {
            k,
            iterate_norm,
            direction_norm,
        }),
    }
}

/// Rate report written next to the aggregate CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schedule: Schedule,
    pub predicted_rate_exponent: f64,
    pub fit: RateFit,
    pub k_min: u64,
    pub k_max: u64,
    pub num_seeds: u64,
    pub failed_seeds: Vec<u64>,
}

pub fn cmd_sweep(a: &SweepArgs, echo: &[String]) -> Result<i32> {
    if a.seeds == 0 {
        return Err(Error::Domain("--seeds must be at least 1".into()));
    }
    let (p, hash) = read_problem(&a.problem)?;
    let sol = match &a.oracle {
        Some(path) => read_oracle(path)?,
        None => solve_constrained_exact(&p, 1e-12)?,
    };
    let k_max = a.k_max.unwrap_or(a.run.iters);
    let d_values: Vec<Option<f64>> = if a.d_list.is_empty() {
        vec![None]
    } else {
        a.d_list.iter().map(|&d| Some(d)).collect()
    };
    for d in d_values {
        let started = Instant::now();
        let mut cfg = a.run.config(&p, a.seed, false);
        let out = match d {
            Some(d) => {
                cfg.schedule.d = d;
                sibling(&a.out, &format!(".d{d}"))
            }
            None => a.out.clone(),
        };
        report_schedule(&cfg.schedule)?;
        let ens = run_ensemble(&p, &cfg, a.seeds, &sol.x_star)?;
        if !ens.failed_seeds.is_empty() {
            eprintln!(
                "warning: {} seed(s) diverged and were excluded: {:?}",
                ens.failed_seeds.len(),
                ens.failed_seeds
            );
        }
        let mut csv = Vec::new();
        ens.write_aggregate_csv(&mut csv)?;
        fs::write(&out, csv)?;
        let fit = rate_fit(&ens.ks(), &ens.mean_sq_err(), a.k_min, k_max)?;
        println!(
            "d={} slope {:.4} ± {:.4} (r^2 {:.4}, predicted -{})",
            cfg.schedule.d,
            fit.slope,
            fit.slope_stderr,
            fit.r_squared,
            cfg.schedule.predicted_rate_exponent()
        );
        write_json(
            &sibling(&out, ".rate.json"),
            &SweepReport {
                schedule: cfg.schedule,
                predicted_rate_exponent: cfg.schedule.predicted_rate_exponent(),
                fit,
                k_min: a.k_min,
                k_max,
                num_seeds: a.seeds,
                failed_seeds: ens.failed_seeds.clone(),
            },
        )?;
        write_json(
            &sibling(&out, ".manifest.json"),
            &RunManifest {
                command: echo.to_vec(),
                tool_version: env!("CARGO_PKG_VERSION").into(),
                problem_path: a.problem.to_string_lossy().into_owned(),
                problem_sha256: hash.clone(),
                oracle_path: a.oracle.as_ref().map(|p| p.to_string_lossy().into_owned()),
                schedule: cfg.schedule,
                seeds: (0..a.seeds).map(|j| a.seed.wrapping_add(j)).collect(),
                solver: cfg.clone(),
                sweep: Some(SweepSettings {
                    num_seeds: a.seeds,
                    k_min: a.k_min,
                    k_max,
                }),
                duration_secs: started.elapsed().as_secs_f64(),
            },
        )?;
    }
    Ok(EXIT_OK)
}

pub fn cmd_check(a: &CheckArgs) -> Result<i32> {
    cmd_check_with(&HuberKernel, a)
}

/// `check` against an arbitrary kernel.
pub fn cmd_check_with<K: PenaltyKernel>(kernel: &K, a: &CheckArgs) -> Result<i32> {
    let report = run_check_suite(kernel, &a.only)?;
    for g in &report.groups {
        for c in &g.checks {
            eprintln!(
                "{:<9} {:<32} {} worst slack {:e} over {} samples",
                format!("{:?}", g.group).to_lowercase(),
                c.name,
                if c.passed { "PASS" } else { "FAIL" },
                c.worst_slack,
                c.samples
            );
        }
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    emit(a.out.as_deref(), &text)?;
    Ok(if report.passed { EXIT_OK } else { EXIT_CHECK_FAILED })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct SignFlipped;

    impl PenaltyKernel for SignFlipped {
        fn value(&self, s: f64, delta: f64) -> f64 {
            HuberKernel.value(s, delta)
        }
        fn slope(&self, s: f64, delta: f64) -> f64 {
            -HuberKernel.slope(s, delta)
        }
    }

    struct Mirrored;

    impl PenaltyKernel for Mirrored {
        fn value(&self, s: f64, delta: f64) -> f64 {
            HuberKernel.value(-s, delta)
        }
        fn slope(&self, s: f64, delta: f64) -> f64 {
            -HuberKernel.slope(-s, delta)
        }
    }

    #[test]
    fn penalty_suite_passes_for_huber() {
        for c in penalty_suite(&HuberKernel, 10_000, 1) {
            assert!(c.passed, "{c:?}");
            assert!(c.samples > 0, "{c:?}");
        }
        let pert = perturbation_suite(&HuberKernel, 20, 1000, 2);
        assert!(pert.check.passed);
        assert!(pert.min_attainment >= 0.99);
    }

    #[test]
    fn sign_flipped_gradient_is_caught() {
        let failed: Vec<String> = penalty_suite(&SignFlipped, 2000, 1)
            .into_iter()
            .filter(|c| !c.passed)
            .map(|c| c.name)
            .collect();
        assert!(failed.contains(&"finite_difference_gradient".to_string()), "{failed:?}");
        let report = run_check_suite(&SignFlipped, &[CheckGroup::Penalty]).unwrap();
        assert!(!report.passed);
        let a = CheckArgs {
            only: vec![CheckGroup::Penalty],
            out: Some(tempfile::NamedTempFile::new().unwrap().path().to_path_buf()),
        };
        assert_eq!(cmd_check_with(&SignFlipped, &a).unwrap(), EXIT_CHECK_FAILED);
    }

    #[test]
    fn mirrored_kernel_is_caught() {
        let failed: Vec<String> = penalty_suite(&Mirrored, 2000, 1)
            .into_iter()
            .filter(|c| !c.passed)
            .map(|c| c.name)
            .collect();
        assert!(failed.contains(&"feasible_level_cap".to_string()), "{failed:?}");
        assert!(failed.contains(&"zero_width_is_distance".to_string()), "{failed:?}");
    }

    #[test]
    fn offending_instance_is_recorded() {
        let c = penalty_suite(&SignFlipped, 500, 3)
            .into_iter()
            .find(|c| c.name == "finite_difference_gradient")
            .unwrap();
        let inst = c.offending.expect("offending sample");
        assert!(inst.get("delta").is_some() && inst.get("x").is_some());
    }

    #[test]
    fn figure1_samples() {
        let text = figure1_csv().unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x,delta_0.25,delta_0.5,delta_1");
        assert_eq!(lines.len(), 252);
        // x = 1 sits on the constraint boundary: h_δ = δ/4
        let row: Vec<f64> = lines[151].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row, vec![1.0, 0.0625, 0.125, 0.25]);
        assert_eq!(lines[1], "-0.5,0,0,0");
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(sibling(Path::new("/tmp/a.csv"), ".manifest.json"), PathBuf::from("/tmp/a.csv.manifest.json"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Numerical("x".into())), EXIT_NUMERICAL);
        assert_eq!(exit_code(&Error::InvalidSchedule("x".into())), EXIT_USAGE);
        assert_eq!(
            exit_code(&Error::Divergence { k: 1, iterate_norm: 0.0, direction_norm: 0.0 }),
            EXIT_NUMERICAL
        );
    }
}
