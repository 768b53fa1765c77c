//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use sparse_lqr::estimator::RegressionProblem;

/// `½θᵀHθ − cᵀθ + ½yy + λ|θ|₁`.
pub fn lasso_objective(h: &DMatrix<f64>, c: &DVector<f64>, yy: f64, lambda: f64, theta: &DVector<f64>) -> f64 {
    0.5 * theta.dot(&(h * theta)) - c.dot(theta) + 0.5 * yy + lambda * theta.lp_norm(1)
}

/// Exact LASSO minimum by enumerating every sign pattern `s ∈ {−1, 0, 1}^q`.
///
/// On each pattern the stationarity equations `H_SS θ_S = c_S − λ s_S` are
/// solved exactly; sign-consistent solutions are candidates and the smallest
/// objective wins. The minimizer satisfies these equations for its own
/// pattern, so the search is exact whenever every `H_SS` is invertible.
pub fn exhaustive_lasso(h: &DMatrix<f64>, c: &DVector<f64>, yy: f64, lambda: f64) -> (f64, DVector<f64>) {
    let q = h.nrows();
    let mut best_theta = DVector::zeros(q);
    let mut best = lasso_objective(h, c, yy, lambda, &best_theta);
    let total = 3usize.pow(q as u32);
    for code in 1..total {
        let mut signs = vec![0i8; q];
        let mut v = code;
        for s in signs.iter_mut() {
            *s = (v % 3) as i8 - 1;
            v /= 3;
        }
        let support: Vec<usize> = (0..q).filter(|&j| signs[j] != 0).collect();
        if support.is_empty() {
            continue;
        }
        let m = support.len();
        let h_ss = DMatrix::from_fn(m, m, |a, b| h[(support[a], support[b])]);
        let rhs = DVector::from_fn(m, |a, _| c[support[a]] - lambda * signs[support[a]] as f64);
        let Some(sol) = h_ss.lu().solve(&rhs) else { continue };
        if support.iter().zip(sol.iter()).any(|(&j, v)| (signs[j] as f64) * v < 0.0) {
            continue;
        }
        let mut theta = DVector::zeros(q);
        for (a, &j) in support.iter().enumerate() {
            theta[j] = sol[a];
        }
        let f = lasso_objective(h, c, yy, lambda, &theta);
        if f < best {
            best = f;
            best_theta = theta;
        }
    }
    (best, best_theta)
}

/// Random single-target regression with `n` Gaussian rows and a sparse truth.
pub fn random_problem<R: Rng>(rng: &mut R, q: usize, n: usize) -> RegressionProblem {
    let design = DMatrix::from_fn(n, q, |_, _| rng.sample::<f64, _>(StandardNormal));
    let truth = DVector::from_fn(q, |_, _| if rng.random::<f64>() < 0.4 { rng.random_range(-2.0..2.0) } else { 0.0 });
    let noise = DVector::from_fn(n, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
    let y = &design * truth + noise;
    let c = design.transpose() * &y / n as f64;
    let lambda = rng.random_range(0.01..1.0) * c.amax();
    RegressionProblem {
        design,
        targets: DMatrix::from_column_slice(n, 1, y.as_slice()),
        lambda,
    }
}

/// Brute-force identifiability metrics over all subsets of size `1..=k`.
pub struct BruteCertificate {
    pub c_min: f64,
    pub alpha: f64,
    pub c_min_subset: Vec<usize>,
    pub alpha_subset: Vec<usize>,
    pub subsets: usize,
}

/// `(λ_min(H_SS), |H_{S^c S} H_SS⁻¹|_∞)` from an explicit eigen-decomposition and inverse.
pub fn explicit_metrics(h: &DMatrix<f64>, s: &[usize]) -> (f64, f64) {
    let q = h.nrows();
    let comp: Vec<usize> = (0..q).filter(|j| !s.contains(j)).collect();
    let h_ss = DMatrix::from_fn(s.len(), s.len(), |a, b| h[(s[a], s[b])]);
    let lmin = h_ss.clone().symmetric_eigen().eigenvalues.min();
    if comp.is_empty() {
        return (lmin, 0.0);
    }
    let inv = h_ss.try_inverse().expect("invertible block");
    let h_cs = DMatrix::from_fn(comp.len(), s.len(), |a, b| h[(comp[a], s[b])]);
    let x = h_cs * inv;
    let cross = x.row_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    (lmin, cross)
}

/// Enumerates subsets by bitmask, orders them by size then lexicographically,
/// and folds `metric` with strict improvements so ties keep the first subset.
pub fn brute_force_with<F>(h: &DMatrix<f64>, k: usize, metric: F) -> BruteCertificate
where
    F: Fn(&DMatrix<f64>, &[usize]) -> (f64, f64),
{
    let q = h.nrows();
    let mut subsets: Vec<Vec<usize>> = (1u32..(1 << q))
        .filter(|m| (m.count_ones() as usize) <= k)
        .map(|m| (0..q).filter(|j| m & (1 << j) != 0).collect())
        .collect();
    subsets.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    let mut out = BruteCertificate {
        c_min: f64::INFINITY,
        alpha: f64::INFINITY,
        c_min_subset: Vec::new(),
        alpha_subset: Vec::new(),
        subsets: subsets.len(),
    };
    let mut worst_cross = f64::NEG_INFINITY;
    for s in subsets {
        let (lmin, cross) = metric(h, &s);
        if lmin < out.c_min {
            out.c_min = lmin;
            out.c_min_subset = s.clone();
        }
        if cross > worst_cross {
            worst_cross = cross;
            out.alpha_subset = s;
        }
    }
    out.alpha = 1.0 - worst_cross;
    out
}

pub fn brute_force_certificate(h: &DMatrix<f64>, k: usize) -> BruteCertificate {
    brute_force_with(h, k, explicit_metrics)
}
