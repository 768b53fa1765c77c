//! Acceptance checks, one line per criterion.
//!
//! Failures are reported but only change the exit status when
//! `ACCEPTANCE_STRICT=1` is set.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use sparse_lqr::estimator::{kkt_check, lasso_row};
use sparse_lqr::harness::{
    concentration_experiment, estimation_experiment, resolve, run_and_emit, ExperimentConfig, OutputPaths,
    RegretReport, ResolvedExperiment,
};
use sparse_lqr::identifiability::{certify, subset_metrics};
use sparse_lqr::model::{generate_sparse_system, rollout, CostMatrices, FeedbackGain, InteractionMatrix};
use sparse_lqr::noise::{aux_rng, GaussianNoise};
use sparse_lqr::ofu::Mode;
use sparse_lqr::riccati::{riccati_residual, solve_lyapunov, solve_riccati, DEFAULT_MAX_ITER};

const SEED: u64 = 20240601;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {:>2} {}: {}", o.id, o.name, o.detail);
}

fn config_path(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

/// Random sparse systems with a gain certified over all singletons.
///
/// The optimal gain is tried first, then random gains.
fn certified_systems(count: usize, stream: u64) -> Vec<(InteractionMatrix, FeedbackGain)> {
    let mut out = Vec::with_capacity(count);
    let mut draw = 0u64;
    while out.len() < count {
        let mut rng = aux_rng(SEED, stream + draw);
        draw += 1;
        let p = 2 + (draw as usize % 3);
        let r = 1 + (draw as usize % 2);
        let Ok(sys) = generate_sparse_system(p, r, 2, rng.random_range(0.3..0.8), &mut rng) else { continue };
        let cost = CostMatrices::identity(p, r);
        let mut candidates: Vec<FeedbackGain> = solve_riccati(&sys, &cost, 1e-12, DEFAULT_MAX_ITER)
            .map(|s| vec![s.gain])
            .unwrap_or_default();
        candidates.extend((0..40).map(|_| FeedbackGain::new(DMatrix::from_fn(r, p, |_, _| rng.random_range(-1.0..1.0)))));
        if let Some(g) = candidates.into_iter().find(|g| certify(&sys, g, 1).is_ok_and(|c| c.is_valid())) {
            out.push((sys, g));
        }
    }
    out
}

fn scalar_root(a: f64, b: f64, q: f64, r: f64) -> f64 {
    let lin = r * (1.0 - a * a) - q * b * b;
    (-lin + (lin * lin + 4.0 * b * b * q * r).sqrt()) / (2.0 * b * b)
}

fn riccati_correctness(systems: &[(InteractionMatrix, FeedbackGain)]) -> Outcome {
    let start = Instant::now();
    let mut worst_residual = 0.0f64;
    let mut failures = 0;
    for (sys, _) in systems {
        let cost = CostMatrices::identity(sys.p(), sys.r());
        match solve_riccati(sys, &cost, 1e-12, DEFAULT_MAX_ITER).and_then(|s| riccati_residual(sys, &cost, &s.k_mat)) {
            Ok(res) => worst_residual = worst_residual.max(res),
            Err(_) => failures += 1,
        }
    }
    let mut worst_scalar = 0.0f64;
    for &(a, b, q, r) in &[(0.5, 1.0, 1.0, 1.0), (2.0, 1.0, 1.0, 1.0), (1.2, 0.4, 2.0, 0.5), (-0.9, 3.0, 0.3, 4.0), (0.0, 1.0, 1.0, 1.0)] {
        let sys = InteractionMatrix::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b)).unwrap();
        let cost = CostMatrices::new(DMatrix::from_element(1, 1, q), DMatrix::from_element(1, 1, r)).unwrap();
        let k = solve_riccati(&sys, &cost, 1e-13, DEFAULT_MAX_ITER).map_or(f64::NAN, |s| s.k_mat[(0, 0)]);
        let exact = scalar_root(a, b, q, r);
        worst_scalar = worst_scalar.max(((k - exact) / exact).abs());
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        name: "riccati",
        pass: failures == 0 && worst_residual <= 1e-9 && worst_scalar <= 1e-9 && secs < 1.0,
        detail: format!(
            "{} systems, {failures} failures, max residual {worst_residual:.2e} (tol 1e-9), scalar rel err {worst_scalar:.2e} (tol 1e-9), {secs:.3}s (< 1s)",
            systems.len()
        ),
    }
}

fn lyapunov_stationarity(systems: &[(InteractionMatrix, FeedbackGain)]) -> Outcome {
    let start = Instant::now();
    let steps = 1_000_000;
    let mut worst = 0.0f64;
    let mut ok = true;
    for (i, (sys, gain)) in systems.iter().enumerate() {
        let lam = solve_lyapunov(sys, gain, 1e-13, DEFAULT_MAX_ITER).unwrap().lambda_mat;
        let cost = CostMatrices::identity(sys.p(), sys.r());
        let mut noise = GaussianNoise::with_stream(SEED, 100 + i as u64);
        let traj = rollout(sys, gain, &cost, steps, &mut noise, &vec![0.0; sys.p()]).unwrap();
        let p = sys.p();
        let mut emp = DMatrix::zeros(p, p);
        for t in 1..=steps {
            let x = nalgebra::DVector::from_column_slice(traj.state(t));
            emp += &x * x.transpose();
        }
        emp /= steps as f64;
        for a in 0..p {
            for b in 0..p {
                let tol = (0.05 * lam[(a, b)].abs()).max(0.05);
                let err = (emp[(a, b)] - lam[(a, b)]).abs();
                worst = worst.max(err / tol);
                ok &= err <= tol;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 2,
        name: "lyapunov",
        pass: ok && secs < 30.0,
        detail: format!(
            "{} systems x 1e6 steps, worst error/tolerance {worst:.3} (tol 5%, floor 0.05), {secs:.1}s (< 30s)",
            systems.len()
        ),
    }
}

fn average_cost_identity(systems: &[(InteractionMatrix, FeedbackGain)]) -> Outcome {
    let steps = 1_000_000;
    let mut worst = 0.0f64;
    for (i, (sys, _)) in systems.iter().enumerate() {
        let cost = CostMatrices::identity(sys.p(), sys.r());
        let sol = solve_riccati(sys, &cost, 1e-12, DEFAULT_MAX_ITER).unwrap();
        let mut noise = GaussianNoise::with_stream(SEED, 200 + i as u64);
        let traj = rollout(sys, &sol.gain, &cost, steps, &mut noise, &vec![0.0; sys.p()]).unwrap();
        let mean = traj.costs().iter().sum::<f64>() / steps as f64;
        worst = worst.max((mean / sol.average_cost() - 1.0).abs());
    }
    Outcome {
        id: 3,
        name: "average cost",
        pass: worst <= 0.02,
        detail: format!("{} systems x 1e6 steps, max relative gap {:.3}% (tol 2%)", systems.len(), 100.0 * worst),
    }
}

fn lasso_oracle() -> Outcome {
    let mut worst_ratio = 0.0f64;
    let mut kkt_failures = 0;
    let instances = 200;
    for i in 0..instances {
        let mut rng = aux_rng(SEED, 300 + i);
        let q = rng.random_range(1..=8);
        let n = rng.random_range(q.max(2)..=12);
        let pr = common::random_problem(&mut rng, q, n);
        let g = pr.gram();
        let c = g.c.column(0).into_owned();
        let fit = lasso_row(&pr, 0).unwrap();
        let (best, _) = common::exhaustive_lasso(&g.h, &c, g.yy[0], pr.lambda);
        let f = common::lasso_objective(&g.h, &c, g.yy[0], pr.lambda, &fit);
        worst_ratio = worst_ratio.max(f / best);
        kkt_failures += usize::from(!kkt_check(&g.h, &c, pr.lambda, &fit, 1e-8).passed);
    }
    Outcome {
        id: 4,
        name: "lasso oracle",
        pass: worst_ratio <= 1.0 + 1e-8 && kkt_failures == 0,
        detail: format!(
            "{instances} instances, max objective ratio 1 + {:.2e} (tol 1e-8), {kkt_failures} KKT failures",
            worst_ratio - 1.0
        ),
    }
}

fn theorem_one(resolved: &ResolvedExperiment) -> Outcome {
    let start = Instant::now();
    let rep = estimation_experiment(resolved, None).unwrap();
    let need = 1.0 - resolved.config.algorithm.delta;
    let max_d = rep.distances.iter().copied().fold(0.0, f64::max);
    Outcome {
        id: 5,
        name: "estimation accuracy",
        pass: rep.trials == 500 && rep.success_frequency >= need && start.elapsed().as_secs_f64() < 600.0,
        detail: format!(
            "n {} lambda {:.4e}: {}/{} trials with d <= eps {} (need >= {need}), max d {max_d:.4}, {:.0}s (< 600s)",
            rep.n,
            rep.lambda,
            rep.successes,
            rep.trials,
            rep.eps,
            start.elapsed().as_secs_f64()
        ),
    }
}

fn concentration(resolved: &ResolvedExperiment) -> Outcome {
    let cert = &resolved.certificate;
    let episodes = 1000;
    let se = |b: f64| 3.0 * (b * (1.0 - b) / episodes as f64).sqrt();
    let mut ok = true;
    let mut parts = Vec::new();
    for (i, &(n, eps)) in [(100usize, 0.6f64), (2000, 1.0), (5000, 0.5)].iter().enumerate() {
        let rep = concentration_experiment(
            &resolved.theta0,
            &resolved.initial_gain,
            &cert.h_mat,
            cert.rho,
            n,
            eps,
            episodes,
            SEED + i as u64,
        )
        .unwrap();
        let g_slack = rep
            .gradient_tail
            .iter()
            .zip(&rep.gradient_bound)
            .map(|(f, b)| f - b - se(*b))
            .fold(f64::NEG_INFINITY, f64::max);
        let h_slack = rep
            .hessian_tail
            .iter()
            .map(|f| f - rep.hessian_bound - se(rep.hessian_bound))
            .fold(f64::NEG_INFINITY, f64::max);
        ok &= g_slack <= 0.0 && h_slack <= 0.0;
        let g_max = rep.gradient_tail.iter().copied().fold(0.0, f64::max);
        let g_bound = rep.gradient_bound.iter().copied().fold(f64::INFINITY, f64::min);
        let h_max = rep.hessian_tail.iter().copied().fold(0.0, f64::max);
        parts.push(format!(
            "(n {n}, eps {eps}) grad {g_max:.3}/{g_bound:.3} hess {h_max:.3}/{:.3}",
            rep.hessian_bound
        ));
    }
    Outcome {
        id: 6,
        name: "concentration",
        pass: ok,
        detail: format!("{episodes} episodes, max tail/bound: {}", parts.join(", ")),
    }
}

struct RegretRuns {
    adaptive: RegretReport,
    oracle: RegretReport,
    j_star: f64,
    horizons: Vec<u64>,
    delta: f64,
    determinism: Outcome,
}

fn regret_runs() -> RegretRuns {
    let cfg = ExperimentConfig::load(&config_path("regret_p3.toml")).unwrap();
    let resolved = resolve(&cfg).unwrap();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let adaptive = run_and_emit(&resolved, dirs[0].path()).unwrap();
    run_and_emit(&resolved, dirs[1].path()).unwrap();
    let (a, b) = (OutputPaths::in_dir(dirs[0].path()), OutputPaths::in_dir(dirs[1].path()));
    let mut identical = true;
    let mut bytes = 0;
    for (x, y) in [(&a.regret_curves, &b.regret_curves), (&a.estimation, &b.estimation), (&a.plot_mean, &b.plot_mean)] {
        let (bx, by) = (fs::read(x).unwrap(), fs::read(y).unwrap());
        bytes += bx.len();
        identical &= bx == by;
    }
    let determinism = Outcome {
        id: 9,
        name: "determinism",
        pass: identical,
        detail: format!("two runs with master seed {}: 3 CSV files, {bytes} bytes, identical {identical}", cfg.run.seed),
    };
    let mut oracle_cfg = cfg.clone();
    oracle_cfg.run.mode = Mode::Oracle;
    let oracle = sparse_lqr::harness::run_experiment(&resolve(&oracle_cfg).unwrap()).unwrap();
    RegretRuns {
        adaptive,
        oracle,
        j_star: resolved.j_star,
        horizons: cfg.run.horizons.clone(),
        delta: cfg.algorithm.delta,
        determinism,
    }
}

fn regret_trend(runs: &RegretRuns) -> Outcome {
    let stats: Vec<_> = runs.horizons.iter().map(|&h| runs.adaptive.horizon_stat(h).unwrap()).collect();
    let positive = stats.iter().all(|s| s.mean_regret > 0.0);
    let slope = runs.adaptive.fitted_exponent(&runs.horizons).unwrap_or(f64::NAN);
    let last = stats.last().unwrap();
    let t_max = last.horizon;
    let per_step = last.mean_regret_per_step;
    let oracle = runs.oracle.horizon_stat(t_max).unwrap();
    let a = positive && slope <= 0.75;
    let b = per_step < 0.25 * runs.j_star;
    let c = oracle.mean_regret_per_step.abs() <= 3.0 * oracle.stderr_regret_per_step;
    let trials_ok = runs.adaptive.trials.len() == 50 && runs.oracle.trials.len() == 50;
    Outcome {
        id: 7,
        name: "regret trend",
        pass: a && b && c && trials_ok,
        detail: format!(
            "(a) R(T) {} slope {slope:.3} (<= 0.75) {}; (b) R/T {per_step:.4} vs 0.25 J* {:.4} {}; (c) oracle R/T {:.5} +- {:.5} {}; trials {}+{}",
            stats.iter().map(|s| format!("{:.1}", s.mean_regret)).collect::<Vec<_>>().join("/"),
            verdict(a),
            0.25 * runs.j_star,
            verdict(b),
            oracle.mean_regret_per_step,
            oracle.stderr_regret_per_step,
            verdict(c),
            runs.adaptive.trials.len(),
            runs.oracle.trials.len(),
        ),
    }
}

fn verdict(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "fail"
    }
}

fn good_events(runs: &RegretRuns) -> Outcome {
    let need = 1.0 - runs.delta;
    let e1 = runs.adaptive.e1_frequency();
    let e2 = runs.adaptive.e2_frequency();
    Outcome {
        id: 8,
        name: "good events",
        pass: e1 >= need && e2 >= need,
        detail: format!("E1 {e1:.3}, E2 {e2:.3} over {} adaptive runs (need >= {need})", runs.adaptive.trials.len()),
    }
}

fn brute_force_identifiability() -> Outcome {
    let mut systems = 0;
    let mut mismatches = 0;
    let mut worst_independent = 0.0f64;
    for p in 1..=5usize {
        for r in 1..=(6 - p) {
            for draw in 0..4u64 {
                let mut rng = aux_rng(SEED, 1000 + 100 * (p * 7 + r) as u64 + draw);
                let Ok(sys) = generate_sparse_system(p, r, 2.min(p + r), 0.6, &mut rng) else { continue };
                let gain = FeedbackGain::new(DMatrix::from_fn(r, p, |_, _| rng.random_range(-0.6..0.6)));
                if sparse_lqr::identifiability::closed_loop_radius(&sys, &gain) >= 0.97 {
                    continue;
                }
                for k in 1..=3.min(p + r) {
                    let Ok(cert) = certify(&sys, &gain, k) else {
                        mismatches += 1;
                        continue;
                    };
                    systems += 1;
                    let brute = common::brute_force_with(&cert.h_mat, k, |h, s| {
                        let m = subset_metrics(h, s);
                        (m.lambda_min, m.cross_norm)
                    });
                    let same = cert.c_min == brute.c_min
                        && cert.alpha == brute.alpha
                        && cert.worst_c_min_subset == brute.c_min_subset
                        && cert.worst_alpha_subset == brute.alpha_subset
                        && cert.subsets_checked as usize == brute.subsets;
                    mismatches += usize::from(!same);
                    if !cert.pseudo_inverse_used {
                        let indep = common::brute_force_certificate(&cert.h_mat, k);
                        let scale = cert.h_mat.amax().max(1.0);
                        worst_independent = worst_independent
                            .max((indep.c_min - cert.c_min).abs() / scale)
                            .max((indep.alpha - cert.alpha).abs() / (1.0 - indep.alpha).abs().max(1.0));
                    }
                }
            }
        }
    }
    Outcome {
        id: 10,
        name: "identifiability brute force",
        pass: mismatches == 0 && systems > 0 && worst_independent <= 1e-8,
        detail: format!(
            "{systems} (system, k) pairs with q <= 6, k <= 3: {mismatches} mismatches under exact equality; explicit-inverse cross-check max rel gap {worst_independent:.1e}"
        ),
    }
}

fn main() {
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let start = Instant::now();
    let mut outcomes = Vec::new();

    let systems = certified_systems(50, 0);
    outcomes.push(riccati_correctness(&systems));
    report(outcomes.last().unwrap());
    outcomes.push(lyapunov_stationarity(&systems[..5]));
    report(outcomes.last().unwrap());
    outcomes.push(average_cost_identity(&systems[..10]));
    report(outcomes.last().unwrap());
    outcomes.push(lasso_oracle());
    report(outcomes.last().unwrap());

    let est = resolve(&ExperimentConfig::load(&config_path("estimate_p4.toml")).unwrap()).unwrap();
    outcomes.push(theorem_one(&est));
    report(outcomes.last().unwrap());
    outcomes.push(concentration(&est));
    report(outcomes.last().unwrap());

    let runs = regret_runs();
    outcomes.push(regret_trend(&runs));
    report(outcomes.last().unwrap());
    outcomes.push(good_events(&runs));
    report(outcomes.last().unwrap());
    report(&runs.determinism);
    outcomes.push(runs.determinism);
    outcomes.push(brute_force_identifiability());
    report(outcomes.last().unwrap());

    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.0}s",
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if strict && passed < outcomes.len() {
        std::process::exit(1);
    }
}
