use nalgebra::DVector;

use huberpen::oracle::{
    minimize_penalized, penalized_gradient_floor, rate_fit, solve_constrained_exact,
};
use huberpen::problem::{generate_problem, GeneratorSpec};
use huberpen::schedule::Schedule;
use huberpen::solver::{
    aggregate_traces, run, sample_index, solver_rng, step, InitialMetrics, InitialPoint, Outcome,
    RecordGrid, Snapshot, SolverConfig, SolverTrace,
};

#[test]
fn iterates_stay_bounded() {
    for seed in 0..4 {
        let p = generate_problem(5, 8, seed, &GeneratorSpec::default().active()).unwrap();
        let x_star = solve_constrained_exact(&p, 1e-12).unwrap().x_star;
        let sch = Schedule::recommended().with_step0(1.0 / (2.0 * p.l_f()));
        let x1 = p.witness().unwrap().clone();
        let limit = 10.0 * (x1.norm() + x_star.norm() + 1.0);
        let mut rng = solver_rng(seed);
        let mut x = x1.clone();
        let mut worst: f64 = 0.0;
        for k in 1..=100_000u64 {
            let i = sample_index(&mut rng, p.m()).unwrap();
            x = step(&x, k, i, &p, &sch).unwrap();
            worst = worst.max(x.norm());
        }
        assert!(worst <= limit, "seed {seed}: {worst} > {limit}");
        // hand-rolled loop consumes the same stream as the solver
        let t = run(&p, &SolverConfig::new(sch, 100_000, seed), None).unwrap();
        assert_eq!(t.final_point, x.as_slice());
    }
}

#[test]
fn distance_drops_from_infeasible_start() {
    let p = generate_problem(5, 8, 42, &GeneratorSpec::default().active()).unwrap();
    let start = p.objective().unconstrained_minimizer();
    assert!(!p.is_feasible(&start));
    let mut cfg = SolverConfig::new(Schedule::recommended().with_step0(1.0 / (2.0 * p.l_f())), 100_000, 3);
    cfg.initial_point = InitialPoint::Point(start.iter().copied().collect());
    let t = run(&p, &cfg, None).unwrap();
    let last = t.snapshots.last().unwrap();
    assert!(t.initial.dist_feasible > 0.0);
    assert!(last.dist_feasible * 100.0 <= t.initial.dist_feasible);
    assert!(last.f_value <= t.snapshots[0].f_value);
}

#[test]
fn penalized_minimizers_approach_optimum() {
    for seed in 0..4 {
        let p = generate_problem(4, 6, seed, &GeneratorSpec::default().active()).unwrap();
        let sol = solve_constrained_exact(&p, 1e-12).unwrap();
        let sch = Schedule::recommended();
        let mut gaps = Vec::new();
        for j in 0..=24 {
            let k = 1u64 << j;
            let (g, d) = (sch.gamma_at(k).unwrap(), sch.delta_at(k).unwrap());
            let tol = 1e-10f64.max(10.0 * penalized_gradient_floor(&p, g, d));
            let xk = minimize_penalized(&p, g, d, tol).unwrap();
            let gap = (&xk - &sol.x_star).norm();
            let bound = (g * d / (2.0 * p.mu() * p.alpha_min())).sqrt();
            if g / (4.0 * p.m() as f64) > 1.0 {
                assert!(gap <= bound + tol / p.mu(), "seed {seed} k {k}: {gap} > {bound}");
            }
            gaps.push(gap);
        }
        // monotone once the penalty dominates
        let tail = &gaps[16..];
        assert!(tail.windows(2).all(|w| w[1] <= w[0] + 1e-8), "{tail:?}");
        assert!(gaps.last().unwrap() < &1e-4);
    }
}

fn synthetic_trace(seed: u64, ks: &[u64], scale: f64) -> SolverTrace {
    let cfg = SolverConfig::new(Schedule::recommended(), *ks.last().unwrap(), seed);
    SolverTrace {
        config: cfg,
        initial: InitialMetrics {
            f_value: 0.0,
            dist_feasible: 0.0,
            sq_err_to_opt: None,
        },
        snapshots: ks
            .iter()
            .map(|&k| Snapshot {
                k,
                f_value: 0.0,
                dist_feasible: 1.0 / k as f64,
                sq_err_to_opt: Some(scale * (k as f64).powf(-0.5)),
                gamma: 1.0,
                delta: 1.0,
                step: 1.0,
                index_sampled: 0,
                iterate: None,
            })
            .collect(),
        final_point: vec![0.0],
        dist_exact: true,
        outcome: Outcome::Completed,
    }
}

#[test]
fn aggregate_of_synthetic_power_law() {
    let ks = RecordGrid::default().points(100_000).unwrap();
    let traces: Vec<SolverTrace> = (0..5).map(|s| synthetic_trace(s, &ks, 0.5 + s as f64 * 0.25)).collect();
    let rows = aggregate_traces(&traces).unwrap();
    let mse: Vec<f64> = rows.iter().map(|r| r.mean_sq_err).collect();
    let fit = rate_fit(&ks, &mse, 1000, 100_000).unwrap();
    assert!((fit.slope + 0.5).abs() < 1e-10);
    assert!((rows[0].mean_dist_feasible - 1.0).abs() < 1e-15);
    assert!(rows[0].stderr > 0.0);

    let mut with_failure = traces.clone();
    with_failure[2].outcome = Outcome::Diverged {
        k: 5,
        iterate_norm: f64::INFINITY,
        direction_norm: f64::INFINITY,
    };
    with_failure[2].snapshots.truncate(3);
    let rows = aggregate_traces(&with_failure).unwrap();
    assert_eq!(rows.len(), ks.len());

    let mut mismatched = traces;
    mismatched[1].snapshots[4].k += 1;
    assert!(aggregate_traces(&mismatched).is_err());
}

#[test]
fn snapshots_follow_grid() {
    let p = generate_problem(3, 4, 1, &GeneratorSpec::default().active()).unwrap();
    let mut cfg = SolverConfig::new(Schedule::recommended().with_step0(0.2), 1234, 5);
    cfg.grid = RecordGrid::Arithmetic { every: 100 };
    cfg.store_iterates = true;
    let t = run(&p, &cfg, Some(&DVector::zeros(3))).unwrap();
    let ks: Vec<u64> = t.snapshots.iter().map(|s| s.k).collect();
    assert_eq!(ks.len(), 13);
    assert_eq!(*ks.last().unwrap(), 1234);
    for s in &t.snapshots {
        let x = DVector::from_column_slice(s.iterate.as_ref().unwrap());
        assert_eq!(s.sq_err_to_opt, Some(x.norm_squared()));
        assert_eq!(s.f_value, p.f_value(&x).unwrap());
        assert_eq!(s.gamma, cfg.schedule.gamma_at(s.k).unwrap());
    }
}
