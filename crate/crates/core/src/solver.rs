//! The randomized incremental penalty iteration
//!
//! ```text
//! x_{k+1} = x_k - s_k [∇f(x_k) + γ_k ∇h_δk(x_k; a_ik, b_ik)],   k = 1, 2, ...
//! ```
//!
//! with `i_k` drawn uniformly from the constraint indices. Constraint indices
//! are 0-based throughout the crate.
//!
//! Randomness comes from a single `Xoshiro256PlusPlus` stream seeded with
//! `seed_from_u64(seed)`; each iteration consumes exactly one draw, mapped to
//! `0..m` by `Rng::random_range` (Lemire's unbiased widening multiply with
//! rejection). Identical problem, config and seed give bit-identical traces.

use std::io::Write;

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::oracle::KktEnumerator;
use crate::penalty::{huber_slope, Halfspace};
use crate::problem::ConstrainedProblem;
use crate::schedule::Schedule;

/// Problems with more constraints than this report `max_i dist(x, X_i)` in
/// place of the exact distance to the polyhedron.
pub const EXACT_DISTANCE_MAX_M: usize = 16;

/// Tolerance of the projections behind `dist_feasible`.
const PROJECTION_TOL: f64 = 1e-10;

pub type SolverRng = Xoshiro256PlusPlus;

pub fn solver_rng(seed: u64) -> SolverRng {
    Xoshiro256PlusPlus::seed_from_u64(seed)
}

/// Uniform index in `0..m`.
pub fn sample_index<R: Rng + ?Sized>(rng: &mut R, m: usize) -> Result<usize> {
    if m == 0 {
        return Err(Error::Domain("cannot sample from zero constraints".into()));
    }
    Ok(rng.random_range(0..m))
}

/// One update at iteration `k` using constraint `i`.
pub fn step(
    x: &DVector<f64>,
    k: u64,
    i: usize,
    p: &ConstrainedProblem,
    sch: &Schedule,
) -> Result<DVector<f64>> {
    check_dim(p.n(), x.len())?;
    let c = p.constraints().get(i).ok_or_else(|| {
        Error::Domain(format!("constraint index {i} out of range 0..{}", p.m()))
    })?;
    let (gamma, delta, s) = (sch.gamma_at(k)?, sch.delta_at(k)?, sch.step_at(k)?);
    if !(delta > 0.0) {
        return Err(Error::Domain(format!("delta_k must be positive, got {delta}")));
    }
    let mut out = x.clone();
    let mut dir = DVector::zeros(p.n());
    let dnorm = apply_step(&mut out, &mut dir, p, c, gamma, delta, s);
    if out.iter().all(|v| v.is_finite()) {
        Ok(out)
    } else {
        Err(Error::Divergence {
            k,
            iterate_norm: out.norm(),
            direction_norm: dnorm,
        })
    }
}

/// In-place update; returns the norm of the direction.
fn apply_step(
    x: &mut DVector<f64>,
    dir: &mut DVector<f64>,
    p: &ConstrainedProblem,
    c: &Halfspace,
    gamma: f64,
    delta: f64,
    s: f64,
) -> f64 {
    p.objective().gradient_into(x, dir);
    let slope = huber_slope(c.residual(x), delta);
    if slope != 0.0 {
        dir.axpy(gamma * slope / c.norm_a(), c.a(), 1.0);
    }
    x.axpy(-s, dir, 1.0);
    dir.norm()
}

/// Which iterations get a snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RecordGrid {
    /// `k = ⌈ratio^j⌉` plus every power of ten.
    Geometric { ratio: f64 },
    /// Every `every`-th iteration.
    Arithmetic { every: u64 },
}

impl Default for RecordGrid {
    fn default() -> Self {
        RecordGrid::Geometric { ratio: 1.2 }
    }
}

impl RecordGrid {
    /// Snapshot iterations up to `iterations`, strictly increasing and ending at it.
    pub fn points(&self, iterations: u64) -> Result<Vec<u64>> {
        if iterations == 0 {
            return Err(Error::Domain("iterations must be at least 1".into()));
        }
        let mut ks = Vec::new();
        match *self {
            RecordGrid::Geometric { ratio } => {
                if !(ratio > 1.0 && ratio.is_finite()) {
                    return Err(Error::Domain(format!("geometric ratio must exceed 1, got {ratio}")));
                }
                let mut j = 0;
                loop {
                    let k = ratio.powi(j).ceil();
                    if k > iterations as f64 {
                        break;
                    }
                    ks.push(k as u64);
                    j += 1;
                }
                let mut t = 1u64;
                while t <= iterations {
                    ks.push(t);
                    t = match t.checked_mul(10) {
                        Some(v) => v,
                        None => break,
                    };
                }
            }
            RecordGrid::Arithmetic { every } => {
                if every == 0 {
                    return Err(Error::Domain("record_every must be at least 1".into()));
                }
                ks.extend((1..=iterations / every).map(|j| j * every));
            }
        }
        ks.push(iterations);
        ks.sort_unstable();
        ks.dedup();
        Ok(ks)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialPoint {
    /// The problem's stored feasible witness.
    Witness,
    Zero,
    Point(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub schedule: Schedule,
    pub iterations: u64,
    pub seed: u64,
    #[serde(default)]
    pub grid: RecordGrid,
    pub initial_point: InitialPoint,
    /// Keep a copy of the iterate in every snapshot.
    #[serde(default)]
    pub store_iterates: bool,
}

impl SolverConfig {
    pub fn new(schedule: Schedule, iterations: u64, seed: u64) -> Self {
        Self {
            schedule,
            iterations,
            seed,
            grid: RecordGrid::default(),
            initial_point: InitialPoint::Witness,
            store_iterates: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.ensure_valid()?;
        self.grid.points(self.iterations)?;
        Ok(())
    }

    fn initial(&self, p: &ConstrainedProblem) -> Result<DVector<f64>> {
        match &self.initial_point {
            InitialPoint::Witness => p.witness().cloned().ok_or_else(|| {
                Error::InvalidProblem("initial point 'witness' requested but the problem has none".into())
            }),
            InitialPoint::Zero => Ok(DVector::zeros(p.n())),
            InitialPoint::Point(v) => {
                check_dim(p.n(), v.len())?;
                if v.iter().all(|x| x.is_finite()) {
                    Ok(DVector::from_column_slice(v))
                } else {
                    Err(Error::Domain("initial point must be finite".into()))
                }
            }
        }
    }
}

/// Metrics at the iterate after `k` updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub k: u64,
    pub f_value: f64,
    pub dist_feasible: f64,
    pub sq_err_to_opt: Option<f64>,
    /// Parameters and index used by update `k`.
    pub gamma: f64,
    pub delta: f64,
    pub step: f64,
    pub index_sampled: usize,
    pub iterate: Option<Vec<f64>>,
}

/// Metrics at the starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitialMetrics {
    pub f_value: f64,
    pub dist_feasible: f64,
    pub sq_err_to_opt: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum Outcome {
    Completed,
    Diverged {
        k: u64,
        iterate_norm: f64,
        direction_norm: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverTrace {
    pub config: SolverConfig,
    pub initial: InitialMetrics,
    pub snapshots: Vec<Snapshot>,
    /// Last finite iterate.
    pub final_point: Vec<f64>,
    /// Whether `dist_feasible` is the exact polyhedral distance.
    pub dist_exact: bool,
    pub outcome: Outcome,
}

pub const TRACE_CSV_HEADER: [&str; 8] = [
    "k",
    "f_value",
    "dist_feasible",
    "sq_err_to_opt",
    "gamma",
    "delta",
    "step",
    "index_sampled",
];

impl SolverTrace {
    pub fn completed(&self) -> bool {
        self.outcome == Outcome::Completed
    }

    /// The trace on completion, the divergence error otherwise.
    pub fn into_result(self) -> Result<Self> {
        match self.outcome {
            Outcome::Completed => Ok(self),
            Outcome::Diverged {
                k,
                iterate_norm,
                direction_norm,
            } => Err(Error::Divergence {
                k,
                iterate_norm,
                direction_norm,
            }),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(TRACE_CSV_HEADER)?;
        for s in &self.snapshots {
            w.write_record([
                s.k.to_string(),
                s.f_value.to_string(),
                s.dist_feasible.to_string(),
                s.sq_err_to_opt.map(|v| v.to_string()).unwrap_or_default(),
                s.gamma.to_string(),
                s.delta.to_string(),
                s.step.to_string(),
                s.index_sampled.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `k,x_0,...,x_{n-1}` rows for snapshots that kept their iterate.
    pub fn write_iterates_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let n = self.final_point.len();
        let mut header = vec!["k".to_string()];
        header.extend((0..n).map(|j| format!("x_{j}")));
        w.write_record(&header)?;
        for s in &self.snapshots {
            if let Some(x) = &s.iterate {
                let mut row = vec![s.k.to_string()];
                row.extend(x.iter().map(|v| v.to_string()));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

struct Metrics<'a> {
    p: &'a ConstrainedProblem,
    projector: Option<KktEnumerator>,
    x_star: Option<&'a DVector<f64>>,
}

impl<'a> Metrics<'a> {
    fn new(p: &'a ConstrainedProblem, x_star: Option<&'a DVector<f64>>) -> Result<Self> {
        let projector = if p.m() <= EXACT_DISTANCE_MAX_M {
            Some(KktEnumerator::projector(p)?)
        } else {
            None
        };
        Ok(Self { p, projector, x_star })
    }

    fn dist(&self, x: &DVector<f64>) -> Result<f64> {
        if self.p.is_feasible(x) {
            return Ok(0.0);
        }
        match &self.projector {
            Some(proj) => Ok((x - proj.project(x, PROJECTION_TOL)?).norm()),
            None => Ok(self.p.max_halfspace_distance(x)),
        }
    }

    fn sq_err(&self, x: &DVector<f64>) -> Option<f64> {
        self.x_star.map(|xs| (x - xs).norm_squared())
    }
}

/// Runs the incremental method for `cfg.iterations` updates.
///
/// A non-finite iterate stops the run; the partial trace is returned with a
/// [`Outcome::Diverged`] outcome.
pub fn run(
    p: &ConstrainedProblem,
    cfg: &SolverConfig,
    x_star: Option<&DVector<f64>>,
) -> Result<SolverTrace> {
    cfg.validate()?;
    if let Some(xs) = x_star {
        check_dim(p.n(), xs.len())?;
    }
    let metrics = Metrics::new(p, x_star)?;
    let grid = cfg.grid.points(cfg.iterations)?;
    let sch = &cfg.schedule;
    let mut x = cfg.initial(p)?;
    let initial = InitialMetrics {
        f_value: p.objective().value_unchecked(&x),
        dist_feasible: metrics.dist(&x)?,
        sq_err_to_opt: metrics.sq_err(&x),
    };

    let mut rng = solver_rng(cfg.seed);
    let mut dir = DVector::zeros(p.n());
    let mut prev = x.clone();
    let mut snapshots = Vec::with_capacity(grid.len());
    let mut next = grid.iter().copied().peekable();
    let mut outcome = Outcome::Completed;
    let m = p.m();

    for k in 1..=cfg.iterations {
        let kf = k as f64;
        let gamma = sch.gamma0 * kf.powf(sch.g);
        let delta = sch.delta0 * kf.powf(-sch.d);
        let s = sch.step0 * kf.powf(-sch.s);
        let i = sample_index(&mut rng, m)?;
        prev.copy_from(&x);
        let dnorm = apply_step(&mut x, &mut dir, p, &p.constraints()[i], gamma, delta, s);
        if !x.iter().all(|v| v.is_finite()) {
            outcome = Outcome::Diverged {
                k,
                iterate_norm: x.norm(),
                direction_norm: dnorm,
            };
            x.copy_from(&prev);
            break;
        }
        if next.peek() == Some(&k) {
            next.next();
            snapshots.push(Snapshot {
                k,
                f_value: p.objective().value_unchecked(&x),
                dist_feasible: metrics.dist(&x)?,
                sq_err_to_opt: metrics.sq_err(&x),
                gamma,
                delta,
                step: s,
                index_sampled: i,
                iterate: cfg.store_iterates.then(|| x.iter().copied().collect()),
            });
        }
    }

    Ok(SolverTrace {
        config: cfg.clone(),
        initial,
        snapshots,
        final_point: x.iter().copied().collect(),
        dist_exact: metrics.projector.is_some(),
        outcome,
    })
}

/// Seed-averaged metrics at one snapshot iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub k: u64,
    pub mean_sq_err: f64,
    /// Standard error of `mean_sq_err` across seeds.
    pub stderr: f64,
    pub mean_dist_feasible: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub traces: Vec<SolverTrace>,
    pub aggregate: Vec<AggregateRow>,
    pub failed_seeds: Vec<u64>,
}

pub const AGGREGATE_CSV_HEADER: [&str; 4] = ["k", "mean_sq_err", "stderr", "mean_dist_feasible"];

impl Ensemble {
    pub fn ks(&self) -> Vec<u64> {
        self.aggregate.iter().map(|r| r.k).collect()
    }

    pub fn mean_sq_err(&self) -> Vec<f64> {
        self.aggregate.iter().map(|r| r.mean_sq_err).collect()
    }

    pub fn row_at(&self, k: u64) -> Option<&AggregateRow> {
        self.aggregate.iter().find(|r| r.k == k)
    }

    pub fn write_aggregate_csv<W: Write>(&self, out: W) -> Result<()> {
        write_aggregate_csv(&self.aggregate, out)
    }
}

pub fn write_aggregate_csv<W: Write>(rows: &[AggregateRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(AGGREGATE_CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.k.to_string(),
            r.mean_sq_err.to_string(),
            r.stderr.to_string(),
            r.mean_dist_feasible.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Averages completed traces on their shared snapshot grid.
///
/// Every trace must carry `sq_err_to_opt`. Diverged traces are skipped.
pub fn aggregate_traces(traces: &[SolverTrace]) -> Result<Vec<AggregateRow>> {
    let done: Vec<&SolverTrace> = traces.iter().filter(|t| t.completed()).collect();
    let first = done
        .first()
        .ok_or_else(|| Error::Numerical("no completed runs to aggregate".into()))?;
    let n = done.len() as f64;
    let mut rows = Vec::with_capacity(first.snapshots.len());
    for (j, snap) in first.snapshots.iter().enumerate() {
        let mut errs = Vec::with_capacity(done.len());
        let mut dist = 0.0;
        for t in &done {
            let s = t.snapshots.get(j).filter(|s| s.k == snap.k).ok_or_else(|| {
                Error::Domain("traces do not share a snapshot grid".into())
            })?;
            errs.push(s.sq_err_to_opt.ok_or_else(|| {
                Error::Domain("aggregation needs sq_err_to_opt in every snapshot".into())
            })?);
            dist += s.dist_feasible;
        }
        let mean = errs.iter().sum::<f64>() / n;
        let stderr = if done.len() > 1 {
            let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        rows.push(AggregateRow {
            k: snap.k,
            mean_sq_err: mean,
            stderr,
            mean_dist_feasible: dist / n,
        });
    }
    Ok(rows)
}

/// Independent runs with seeds `cfg.seed + j` for `j in 0..num_seeds`, in
/// parallel on the current rayon pool.
pub fn run_ensemble(
    p: &ConstrainedProblem,
    cfg: &SolverConfig,
    num_seeds: u64,
    x_star: &DVector<f64>,
) -> Result<Ensemble> {
    if num_seeds == 0 {
        return Err(Error::Domain("num_seeds must be at least 1".into()));
    }
    cfg.validate()?;
    let traces: Vec<SolverTrace> = (0..num_seeds)
        .into_par_iter()
        .map(|j| {
            let cfg = SolverConfig {
                seed: cfg.seed.wrapping_add(j),
                ..cfg.clone()
            };
            run(p, &cfg, Some(x_star))
        })
        .collect::<Result<_>>()?;
    let failed_seeds: Vec<u64> = traces
        .iter()
        .filter(|t| !t.completed())
        .map(|t| t.config.seed)
        .collect();
    if !failed_seeds.is_empty() {
        log::warn!("{} of {num_seeds} seeds diverged: {failed_seeds:?}", failed_seeds.len());
    }
    let aggregate = aggregate_traces(&traces)?;
    Ok(Ensemble {
        traces,
        aggregate,
        failed_seeds,
    })
}
