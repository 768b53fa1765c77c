use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;
use sparse_lqr::linalg::{max_abs, sym_min_eig};
use sparse_lqr::model::{generate_sparse_system, CostMatrices, FeedbackGain, InteractionMatrix};
use sparse_lqr::noise::aux_rng;
use sparse_lqr::riccati::{
    average_cost_gradient, gain_average_cost, lyapunov_doubling, riccati_map, riccati_residual, solve_lyapunov,
    solve_riccati, solve_riccati_from, DEFAULT_MAX_ITER, DEFAULT_TOL,
};
use sparse_lqr::Error;

fn scalar(a: f64, b: f64) -> InteractionMatrix {
    InteractionMatrix::new(DMatrix::from_element(1, 1, a), DMatrix::from_element(1, 1, b)).unwrap()
}

/// Positive root of `b²K² + (r(1 − a²) − qb²)K − qr = 0`.
fn scalar_root(a: f64, b: f64, q: f64, r: f64) -> f64 {
    let lin = r * (1.0 - a * a) - q * b * b;
    (-lin + (lin * lin + 4.0 * b * b * q * r).sqrt()) / (2.0 * b * b)
}

#[test]
fn scalar_cases_match_quadratic_root() {
    for &(a, b, q, r) in &[(0.5, 1.0, 1.0, 1.0), (2.0, 1.0, 1.0, 1.0), (1.2, 0.4, 2.0, 0.5), (-0.9, 3.0, 0.3, 4.0)] {
        let sys = scalar(a, b);
        let cost = CostMatrices::new(DMatrix::from_element(1, 1, q), DMatrix::from_element(1, 1, r)).unwrap();
        let sol = solve_riccati(&sys, &cost, 1e-13, DEFAULT_MAX_ITER).unwrap();
        let k = scalar_root(a, b, q, r);
        assert_relative_eq!(sol.k_mat[(0, 0)], k, max_relative = 1e-9);
        assert_relative_eq!(sol.gain.matrix()[(0, 0)], a * b * k / (r + b * b * k), max_relative = 1e-9);
    }
}

#[test]
fn unstable_scalar_root_is_two_plus_sqrt_five() {
    let sol = solve_riccati(&scalar(2.0, 1.0), &CostMatrices::identity(1, 1), 1e-13, DEFAULT_MAX_ITER).unwrap();
    assert_relative_eq!(sol.average_cost(), 2.0 + 5f64.sqrt(), max_relative = 1e-10);
}

#[test]
fn uncontrollable_unstable_mode_fails() {
    let err = solve_riccati(&scalar(1.5, 0.0), &CostMatrices::identity(1, 1), DEFAULT_TOL, DEFAULT_MAX_ITER);
    assert!(matches!(err, Err(Error::Convergence { .. }) | Err(Error::Unstable { .. })));
}

#[test]
fn iteration_cap_is_a_convergence_error() {
    let err = solve_riccati(&scalar(0.99, 0.01), &CostMatrices::identity(1, 1), 1e-15, 3);
    assert!(matches!(err, Err(Error::Convergence { iterations: 3, .. })));
}

#[test]
fn warm_start_at_solution_stops_immediately() {
    let sys = scalar(0.8, 1.0);
    let cost = CostMatrices::identity(1, 1);
    let sol = solve_riccati(&sys, &cost, 1e-13, DEFAULT_MAX_ITER).unwrap();
    let again = solve_riccati_from(&sys, &cost, sol.k_mat.clone(), 1e-13, DEFAULT_MAX_ITER).unwrap();
    assert!(again.iterations <= 2);
}

#[test]
fn lyapunov_scalar_closed_form() {
    // Λ = m²Λ + 1.
    let sys = scalar(0.5, 1.0);
    let lam = solve_lyapunov(&sys, &FeedbackGain::zeros(1, 1), 1e-14, DEFAULT_MAX_ITER).unwrap();
    assert_relative_eq!(lam.lambda_mat[(0, 0)], 4.0 / 3.0, max_relative = 1e-12);
}

#[test]
fn lyapunov_requires_contraction() {
    let sys = scalar(1.1, 1.0);
    assert!(matches!(
        solve_lyapunov(&sys, &FeedbackGain::zeros(1, 1), 1e-12, 100),
        Err(Error::Unstable { .. })
    ));
}

#[test]
fn random_systems_have_small_residual() {
    for seed in 0..30 {
        let mut rng = aux_rng(seed, 2);
        let sys = generate_sparse_system(4, 2, 2, 0.95, &mut rng).unwrap();
        let cost = CostMatrices::identity(4, 2);
        let sol = solve_riccati(&sys, &cost, 1e-12, DEFAULT_MAX_ITER).unwrap();
        assert!(riccati_residual(&sys, &cost, &sol.k_mat).unwrap() <= 1e-9);
        assert!(sparse_lqr::linalg::spectral_radius(&sys.closed_loop(&sol.gain)) < 1.0);
        assert_relative_eq!(
            gain_average_cost(&sys, &cost, &sol.gain).unwrap(),
            sol.average_cost(),
            max_relative = 1e-8
        );
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = aux_rng(5, 5);
    let sys = generate_sparse_system(3, 2, 2, 0.8, &mut rng).unwrap();
    let cost = CostMatrices::identity(3, 2);
    let sol = solve_riccati(&sys, &cost, 1e-14, DEFAULT_MAX_ITER).unwrap();
    let grad = average_cost_gradient(&sys, &sol).unwrap();
    let theta = sys.theta();
    let h = 1e-6;
    for i in 0..theta.nrows() {
        for j in 0..theta.ncols() {
            let mut plus = theta.clone();
            plus[(i, j)] += h;
            let mut minus = theta.clone();
            minus[(i, j)] -= h;
            let jp = solve_riccati(&InteractionMatrix::from_theta(&plus, 3).unwrap(), &cost, 1e-14, DEFAULT_MAX_ITER)
                .unwrap()
                .average_cost();
            let jm = solve_riccati(&InteractionMatrix::from_theta(&minus, 3).unwrap(), &cost, 1e-14, DEFAULT_MAX_ITER)
                .unwrap()
                .average_cost();
            assert!((grad[(i, j)] - (jp - jm) / (2.0 * h)).abs() < 1e-5 * (1.0 + grad[(i, j)].abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn value_iteration_is_monotone(seed in 0u64..10_000) {
        let mut rng = aux_rng(seed, 3);
        let sys = generate_sparse_system(3, 1, 2, 0.9, &mut rng).unwrap();
        let cost = CostMatrices::identity(3, 1);
        let mut k = cost.q_mat().clone();
        for _ in 0..30 {
            let next = riccati_map(&sys, &cost, &k).unwrap();
            prop_assert!(sym_min_eig(&(&next - &k)) >= -1e-9 * (1.0 + max_abs(&next)));
            k = next;
        }
    }

    #[test]
    fn optimal_gain_beats_perturbed_gains(seed in 0u64..10_000, scale in 0.01f64..0.3) {
        let mut rng = aux_rng(seed, 4);
        let sys = generate_sparse_system(3, 2, 2, 0.7, &mut rng).unwrap();
        let cost = CostMatrices::identity(3, 2);
        let sol = solve_riccati(&sys, &cost, 1e-13, DEFAULT_MAX_ITER).unwrap();
        let bump = DMatrix::from_fn(2, 3, |i, j| scale * (((i * 3 + j) as f64 + seed as f64).sin()));
        let other = FeedbackGain::new(sol.gain.matrix() + bump);
        if let Ok(j) = gain_average_cost(&sys, &cost, &other) {
            prop_assert!(j >= sol.average_cost() - 1e-9);
        }
    }

    #[test]
    fn fixed_point_and_doubling_agree(seed in 0u64..10_000) {
        let mut rng = aux_rng(seed, 6);
        let sys = generate_sparse_system(4, 1, 2, 0.6, &mut rng).unwrap();
        let gain = FeedbackGain::zeros(1, 4);
        let it = solve_lyapunov(&sys, &gain, 1e-14, DEFAULT_MAX_ITER).unwrap();
        let db = lyapunov_doubling(&sys.closed_loop(&gain), 1e-15).unwrap();
        prop_assert!(max_abs(&(it.lambda_mat - db)) < 1e-10);
    }
}
