//! Identifiability certificates, sample-complexity formulas, the episode
//! schedule and sampled neighborhood profiles.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{inf_norm, op_norm2, spectral_radius, submatrix, sym_min_eig};
use crate::model::{CostMatrices, FeedbackGain, InteractionMatrix};
use crate::riccati::{lyapunov_doubling, solve_lyapunov, solve_riccati, DEFAULT_MAX_ITER, DEFAULT_TOL};

/// Default cap on the number of subsets visited by [`certify`].
pub const DEFAULT_SUBSET_BUDGET: u128 = 2_000_000;

/// Which subsets a certificate ranges over.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CertificateScope {
    /// Every `S ⊆ [q]` with `1 ≤ |S| ≤ k`.
    AllSubsets { k: usize },
    /// The distinct nonempty row supports of the true parameter.
    RowSupports,
}

/// `(ρ, C_min, α)` for a gain on a system.
#[derive(Debug, Clone, Serialize)]
pub struct IdentifiabilityCertificate {
    /// `|A − BL|₂`.
    pub rho: f64,
    /// `min_S λ_min(H_SS)`.
    pub c_min: f64,
    /// `1 − max_S |H_{S^c S} H_SS⁻¹|_∞`.
    pub alpha: f64,
    pub k: usize,
    pub scope: CertificateScope,
    /// `H = L̃ΛL̃ᵀ`.
    #[serde(serialize_with = "crate::harness::serialize_matrix")]
    pub h_mat: DMatrix<f64>,
    pub worst_c_min_subset: Vec<usize>,
    pub worst_alpha_subset: Vec<usize>,
    pub subsets_checked: u64,
    /// Some `H_SS` was singular and a pseudo-inverse was used.
    pub pseudo_inverse_used: bool,
}

impl IdentifiabilityCertificate {
    pub fn is_valid(&self) -> bool {
        self.rho < 1.0 && self.c_min > 0.0 && self.alpha > 0.0
    }
}

/// Per-subset quantities entering a certificate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetMetrics {
    /// `λ_min(H_SS)`.
    pub lambda_min: f64,
    /// `|H_{S^c S} H_SS⁻¹|_∞` as the largest absolute row sum; 0 when `S = [q]`.
    pub cross_norm: f64,
    pub pseudo_inverse: bool,
}

/// Metrics of one subset `S` (indices ascending).
pub fn subset_metrics(h: &DMatrix<f64>, subset: &[usize]) -> SubsetMetrics {
    let q = h.nrows();
    let complement: Vec<usize> = (0..q).filter(|j| !subset.contains(j)).collect();
    let h_ss = submatrix(h, subset, subset);
    let lambda_min = sym_min_eig(&h_ss);
    if complement.is_empty() {
        return SubsetMetrics {
            lambda_min,
            cross_norm: 0.0,
            pseudo_inverse: false,
        };
    }
    // Xᵀ = H_SS⁻¹ H_{S S^c}, so X = H_{S^c S} H_SS⁻¹ without forming the inverse.
    let h_s_sc = submatrix(h, subset, &complement);
    let scale = crate::linalg::max_abs(&h_ss).max(f64::MIN_POSITIVE);
    let (xt, pseudo_inverse) = match h_ss.clone().cholesky() {
        Some(ch) if lambda_min > 1e-12 * scale => (ch.solve(&h_s_sc), false),
        _ => {
            let cap = crate::linalg::ITER_CAP_PER_DIM * subset.len();
            let pinv = h_ss
                .try_svd(true, true, f64::EPSILON, cap)
                .and_then(|svd| svd.pseudo_inverse(1e-12 * scale).ok())
                .unwrap_or_else(|| DMatrix::from_element(subset.len(), subset.len(), f64::NAN));
            (pinv * h_s_sc, true)
        }
    };
    SubsetMetrics {
        lambda_min,
        cross_norm: inf_norm(&xt.transpose()),
        pseudo_inverse,
    }
}

/// Number of subsets of `[q]` with size `1..=k`.
pub fn subset_count(q: usize, k: usize) -> u128 {
    (1..=k.min(q)).map(|s| binomial(q, s)).sum()
}

fn binomial(n: usize, k: usize) -> u128 {
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc
}

/// Stationary covariance `H = L̃ΛL̃ᵀ` of `[x; u]` under `u = −Lx`.
pub fn extended_covariance(theta: &InteractionMatrix, gain: &FeedbackGain) -> Result<DMatrix<f64>> {
    let m = theta.closed_loop(gain);
    let lam = if op_norm2(&m) < 1.0 {
        solve_lyapunov(theta, gain, 1e-13, DEFAULT_MAX_ITER)?.lambda_mat
    } else {
        lyapunov_doubling(&m, 1e-15)?
    };
    let lt = gain.extended();
    let h = &lt * lam * lt.transpose();
    Ok((&h + h.transpose()) * 0.5)
}

/// Fold of subset metrics into a certificate; ties keep the first subset seen.
struct Tracker {
    c_min: f64,
    c_min_subset: Vec<usize>,
    cross: f64,
    cross_subset: Vec<usize>,
    count: u64,
    pinv: bool,
}

impl Tracker {
    fn new() -> Self {
        Tracker {
            c_min: f64::INFINITY,
            c_min_subset: Vec::new(),
            cross: f64::NEG_INFINITY,
            cross_subset: Vec::new(),
            count: 0,
            pinv: false,
        }
    }

    fn visit(&mut self, h: &DMatrix<f64>, subset: &[usize]) {
        let m = subset_metrics(h, subset);
        self.count += 1;
        self.pinv |= m.pseudo_inverse;
        if m.lambda_min < self.c_min {
            self.c_min = m.lambda_min;
            self.c_min_subset = subset.to_vec();
        }
        if m.cross_norm > self.cross {
            self.cross = m.cross_norm;
            self.cross_subset = subset.to_vec();
        }
    }

    fn finish(self, rho: f64, k: usize, scope: CertificateScope, h: DMatrix<f64>) -> IdentifiabilityCertificate {
        IdentifiabilityCertificate {
            rho,
            c_min: self.c_min,
            alpha: 1.0 - self.cross,
            k,
            scope,
            h_mat: h,
            worst_c_min_subset: self.c_min_subset,
            worst_alpha_subset: self.cross_subset,
            subsets_checked: self.count,
            pseudo_inverse_used: self.pinv,
        }
    }
}

fn check_gain(theta: &InteractionMatrix, gain: &FeedbackGain) -> Result<()> {
    if gain.p() != theta.p() || gain.r() != theta.r() {
        return Err(Error::invalid("gain does not match the system"));
    }
    Ok(())
}

/// Exhaustive certificate over all subsets of size `1..=k`, visited by size
/// and then lexicographically.
pub fn certify(theta: &InteractionMatrix, gain: &FeedbackGain, k: usize) -> Result<IdentifiabilityCertificate> {
    certify_with_budget(theta, gain, k, DEFAULT_SUBSET_BUDGET)
}

pub fn certify_with_budget(
    theta: &InteractionMatrix,
    gain: &FeedbackGain,
    k: usize,
    budget: u128,
) -> Result<IdentifiabilityCertificate> {
    check_gain(theta, gain)?;
    let q = theta.q();
    if k == 0 || k > q {
        return Err(Error::invalid(format!("need 1 <= k <= q = {q}")));
    }
    let needed = subset_count(q, k);
    if needed > budget {
        return Err(Error::Budget { needed, budget });
    }
    let rho = op_norm2(&theta.closed_loop(gain));
    let h = extended_covariance(theta, gain)?;
    let mut tracker = Tracker::new();
    let mut subset = Vec::with_capacity(k);
    for size in 1..=k {
        for_each_combination(q, size, &mut subset, &mut |s| tracker.visit(&h, s));
    }
    Ok(tracker.finish(rho, k, CertificateScope::AllSubsets { k }, h))
}

/// Certificate over the row supports of `theta` only: the subsets on which
/// the row-wise LASSO analysis is actually carried out.
pub fn certify_supports(theta: &InteractionMatrix, gain: &FeedbackGain) -> Result<IdentifiabilityCertificate> {
    check_gain(theta, gain)?;
    let mut supports: Vec<Vec<usize>> = (0..theta.p())
        .map(|u| theta.row_support(u))
        .filter(|s| !s.is_empty())
        .collect();
    supports.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    supports.dedup();
    if supports.is_empty() {
        return Err(Error::invalid("every row of theta is zero"));
    }
    let k = supports.iter().map(Vec::len).max().unwrap_or(0);
    let rho = op_norm2(&theta.closed_loop(gain));
    let h = extended_covariance(theta, gain)?;
    let mut tracker = Tracker::new();
    for s in &supports {
        tracker.visit(&h, s);
    }
    Ok(tracker.finish(rho, k, CertificateScope::RowSupports, h))
}

/// Certificate under either scope.
pub fn certify_scoped(
    theta: &InteractionMatrix,
    gain: &FeedbackGain,
    scope: &CertificateScope,
) -> Result<IdentifiabilityCertificate> {
    match scope {
        CertificateScope::AllSubsets { k } => certify(theta, gain, *k),
        CertificateScope::RowSupports => certify_supports(theta, gain),
    }
}

fn for_each_combination(n: usize, size: usize, buf: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
    fn rec(start: usize, n: usize, size: usize, buf: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if buf.len() == size {
            f(buf);
            return;
        }
        let remaining = size - buf.len();
        for j in start..=n - remaining {
            buf.push(j);
            rec(j + 1, n, size, buf, f);
            buf.pop();
        }
    }
    buf.clear();
    rec(0, n, size, buf, f);
}

fn common_factor(k: usize, rho: f64, c_min: f64, eps: f64, delta: f64, q: usize) -> Result<f64> {
    if k == 0 || q == 0 {
        return Err(Error::invalid("k and q must be positive"));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::invalid("rho must lie in [0, 1)"));
    }
    if !(c_min > 0.0) || !(eps > 0.0) {
        return Err(Error::invalid("c_min and eps must be positive"));
    }
    let log_term = (4.0 * k as f64 * q as f64 / delta).ln();
    if !(delta > 0.0) || !(log_term > 0.0) {
        return Err(Error::invalid("need delta > 0 and log(4kq/delta) > 0"));
    }
    let kf = k as f64;
    let one_m = 1.0 - rho;
    Ok(4e3 * kf * kf / (one_m * c_min * c_min) * (1.0 / (eps * eps) + kf / (one_m * one_m)) * log_term)
}

fn check_ell_alpha(ell: f64, alpha: Option<f64>) -> Result<()> {
    if !(ell > 0.0) {
        return Err(Error::invalid("ell must be positive"));
    }
    if let Some(a) = alpha {
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::invalid("alpha must lie in (0, 1]"));
        }
    }
    Ok(())
}

/// Ceiling that ignores rounding noise just above an integer.
fn ceil_count(v: f64) -> u64 {
    (v * (1.0 - 1e-12)).ceil() as u64
}

/// `n = ⌈4·10³k²ℓ²/(α²(1−ρ)C_min²) (1/ε² + k/(1−ρ)²) log(4kq/δ)⌉`.
#[allow(clippy::too_many_arguments)]
pub fn sample_complexity(
    k: usize,
    ell: f64,
    alpha: f64,
    rho: f64,
    c_min: f64,
    eps: f64,
    delta: f64,
    q: usize,
) -> Result<u64> {
    check_ell_alpha(ell, Some(alpha))?;
    Ok(ceil_count(common_factor(k, rho, c_min, eps, delta, q)? * ell * ell / (alpha * alpha)))
}

/// Initial episode length `n₀`, carrying `ℓ₀` and a single power of `α`.
#[allow(clippy::too_many_arguments)]
pub fn initial_episode_length(
    k: usize,
    ell0: f64,
    alpha: f64,
    rho: f64,
    c_min: f64,
    eps: f64,
    delta: f64,
    q: usize,
) -> Result<u64> {
    check_ell_alpha(ell0, Some(alpha))?;
    Ok(ceil_count(common_factor(k, rho, c_min, eps, delta, q)? * ell0 * ell0 / alpha))
}

/// Base episode length `n₁`, carrying `ℓ(Θ⁰, ε)` and no `α`.
pub fn base_episode_length(k: usize, ell: f64, rho: f64, c_min: f64, eps: f64, delta: f64, q: usize) -> Result<u64> {
    check_ell_alpha(ell, None)?;
    Ok(ceil_count(common_factor(k, rho, c_min, eps, delta, q)? * ell * ell))
}

/// Warning when `ε ≥ min(Θ_min, ℓ/2, 3/(1−ρ))`.
pub fn eps_warning(eps: f64, theta_min: f64, ell: f64, rho: f64) -> Option<String> {
    let bound = theta_min.min(ell / 2.0).min(3.0 / (1.0 - rho));
    (eps >= bound).then(|| {
        format!("eps = {eps} is not below min(theta_min, ell/2, 3/(1-rho)) = {bound}; the accuracy guarantee does not apply")
    })
}

/// Episode lengths `Δτᵢ` and cumulative ends `τᵢ`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeSchedule {
    pub n0: u64,
    pub n1: u64,
    /// `Δτ₀ = n₀`, `Δτᵢ = ⌈4ⁱ(1 + i/log(q/δ)) n₁⌉`.
    pub lengths: Vec<u64>,
    /// `τᵢ = Σ_{j≤i} Δτⱼ`; the last one is the first to reach the horizon.
    pub boundaries: Vec<u64>,
}

impl EpisodeSchedule {
    /// Start of episode `i`.
    pub fn start(&self, i: usize) -> u64 {
        if i == 0 {
            0
        } else {
            self.boundaries[i - 1]
        }
    }

    pub fn episodes(&self) -> usize {
        self.lengths.len()
    }
}

/// Length of episode `i ≥ 1`.
pub fn episode_length(i: u32, n1: u64, q: usize, delta: f64) -> u64 {
    let c = (q as f64 / delta).ln();
    ceil_count(4f64.powi(i as i32) * (1.0 + i as f64 / c) * n1 as f64)
}

/// Schedule truncated at the first `τᵢ ≥ horizon`.
pub fn episode_lengths(n0: u64, n1: u64, q: usize, delta: f64, horizon: u64) -> Result<EpisodeSchedule> {
    if n0 == 0 || n1 == 0 {
        return Err(Error::invalid("n0 and n1 must be positive"));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid("delta must lie in (0, 1)"));
    }
    if q < 2 || !((q as f64 / delta).ln() > 0.0) {
        return Err(Error::invalid("need q >= 2 and log(q/delta) > 0"));
    }
    let mut lengths = vec![n0];
    let mut boundaries = vec![n0];
    let mut i = 1;
    while *boundaries.last().unwrap() < horizon {
        let len = episode_length(i, n1, q, delta);
        lengths.push(len);
        boundaries.push(boundaries.last().unwrap().saturating_add(len));
        i += 1;
    }
    Ok(EpisodeSchedule {
        n0,
        n1,
        lengths,
        boundaries,
    })
}

/// Sampled suprema over a neighborhood of `Θ⁰`.
#[derive(Debug, Clone, Serialize)]
pub struct AssumptionProfile {
    /// `sup |L(Θ)|₂`.
    pub sigma_l: f64,
    /// `sup |K(Θ)|₂`.
    pub sigma_k: f64,
    /// `sup max(1, max_j |L_j(Θ)|₂)`.
    pub ell_theta_eps: f64,
    pub eps: f64,
    /// Points evaluated, including `Θ⁰`.
    pub samples: usize,
    /// Sample indices where the Riccati solve failed.
    pub riccati_failures: Vec<usize>,
    /// Sample indices whose optimal gain failed certification.
    pub uncertified: Vec<usize>,
}

/// Uniform draw from the `d(·, Θ⁰) ≤ eps` ball, kept `k`-sparse per row.
pub fn sample_neighbor<R: Rng + ?Sized>(theta0: &InteractionMatrix, eps: f64, k: usize, rng: &mut R) -> InteractionMatrix {
    let q = theta0.q();
    let mut t = theta0.theta();
    for u in 0..theta0.p() {
        let mut coords = theta0.row_support(u);
        let room = k.saturating_sub(coords.len());
        let extra = if room > 0 { rng.random_range(0..=room) } else { 0 };
        if extra > 0 {
            let free: Vec<usize> = (0..q).filter(|j| !coords.contains(j)).collect();
            for idx in sample(rng, free.len(), extra.min(free.len())).iter() {
                coords.push(free[idx]);
            }
        }
        if coords.is_empty() {
            continue;
        }
        let d = coords.len();
        let dir = DVector::<f64>::from_fn(d, |_, _| rng.sample(StandardNormal));
        let norm = dir.norm();
        if norm == 0.0 {
            continue;
        }
        let radius = eps * rng.random::<f64>().powf(1.0 / d as f64);
        for (i, &j) in coords.iter().enumerate() {
            t[(u, j)] += radius * dir[i] / norm;
        }
    }
    InteractionMatrix::from_theta(&t, theta0.p()).expect("shape preserved")
}

/// Profile over explicit points; `points[0]` is conventionally `Θ⁰`.
pub fn profile_points(
    theta0: &InteractionMatrix,
    cost: &CostMatrices,
    eps: f64,
    points: &[InteractionMatrix],
    scope: &CertificateScope,
) -> AssumptionProfile {
    let mut prof = AssumptionProfile {
        sigma_l: 0.0,
        sigma_k: 0.0,
        ell_theta_eps: 1.0,
        eps,
        samples: points.len(),
        riccati_failures: Vec::new(),
        uncertified: Vec::new(),
    };
    for (i, th) in points.iter().enumerate() {
        let sol = match solve_riccati(th, cost, DEFAULT_TOL, DEFAULT_MAX_ITER) {
            Ok(s) => s,
            Err(_) => {
                prof.riccati_failures.push(i);
                continue;
            }
        };
        prof.sigma_l = prof.sigma_l.max(op_norm2(sol.gain.matrix()));
        prof.sigma_k = prof.sigma_k.max(op_norm2(&sol.k_mat));
        prof.ell_theta_eps = prof.ell_theta_eps.max(sol.gain.ell());
        // The gain acts on the true system; supports are those of Θ⁰.
        let ok = match scope {
            CertificateScope::AllSubsets { k } => certify(theta0, &sol.gain, *k),
            CertificateScope::RowSupports => certify_supports(theta0, &sol.gain),
        }
        .map(|c| c.is_valid())
        .unwrap_or(false);
        if !ok {
            prof.uncertified.push(i);
        }
    }
    prof
}

/// Samples `n_samples` neighbors plus `Θ⁰` itself and profiles them.
pub fn profile_assumption<R: Rng + ?Sized>(
    theta0: &InteractionMatrix,
    cost: &CostMatrices,
    eps: f64,
    n_samples: usize,
    scope: &CertificateScope,
    rng: &mut R,
) -> Result<AssumptionProfile> {
    if !(eps >= 0.0) {
        return Err(Error::invalid("eps must be nonnegative"));
    }
    let k = match scope {
        CertificateScope::AllSubsets { k } => *k,
        CertificateScope::RowSupports => theta0.max_row_support(),
    };
    let mut points = Vec::with_capacity(n_samples + 1);
    points.push(theta0.clone());
    for _ in 0..n_samples {
        points.push(sample_neighbor(theta0, eps, k, rng));
    }
    Ok(profile_points(theta0, cost, eps, &points, scope))
}

/// Spectral radius of the closed loop, for callers that only need stability.
pub fn closed_loop_radius(theta: &InteractionMatrix, gain: &FeedbackGain) -> f64 {
    spectral_radius(&theta.closed_loop(gain))
}
