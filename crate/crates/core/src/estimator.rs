//! Row-wise ℓ1-regularized least squares on closed-loop data.
//!
//! Row `u` of `Θ` is estimated from the regression of `x_u(t+1)` on
//! `z(t) = L̃ x(t) = [x(t); u(t)]`. All solvers work on the Gram form
//! `½θᵀĤθ − ĉᵀθ + ½ŷ + λ|θ|₁`, which equals `(1/2n)Σ(y − zᵀθ)² + λ|θ|₁`.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{inf_norm, max_abs, submatrix, sym_min_eig};
use crate::model::{apply_gain, FeedbackGain, InteractionMatrix, Trajectory, DIVERGENCE_CAP};
use crate::noise::NoiseSource;

/// Coordinate-descent settings.
#[derive(Debug, Clone, Copy)]
pub struct LassoOptions {
    /// Stop once the largest coordinate change in a pass is at most this.
    pub tol: f64,
    pub max_passes: usize,
}

impl Default for LassoOptions {
    fn default() -> Self {
        LassoOptions {
            tol: 1e-10,
            max_passes: 100_000,
        }
    }
}

/// Explicit regression data for one episode.
#[derive(Debug, Clone)]
pub struct RegressionProblem {
    /// `n × q`, row `t` is `(L̃ x(t))ᵀ`.
    pub design: DMatrix<f64>,
    /// `n × p`, column `u` holds `x_u(t+1)`.
    pub targets: DMatrix<f64>,
    pub lambda: f64,
}

impl RegressionProblem {
    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    pub fn gram(&self) -> Gram {
        let n = self.n() as f64;
        let yy = DVector::from_fn(self.targets.ncols(), |u, _| {
            self.targets.column(u).norm_squared() / n
        });
        Gram {
            n: self.n(),
            h: self.design.transpose() * &self.design / n,
            c: self.design.transpose() * &self.targets / n,
            yy,
        }
    }
}

/// Normalized second moments of a regression problem.
#[derive(Debug, Clone)]
pub struct Gram {
    pub n: usize,
    /// `Ĥ = (1/n) Σ z zᵀ`, `q × q`.
    pub h: DMatrix<f64>,
    /// `(1/n) Σ z yᵀ`, `q × p`.
    pub c: DMatrix<f64>,
    /// `(1/n) Σ y_u²` per row.
    pub yy: DVector<f64>,
}

impl Gram {
    /// LASSO objective of row `u` at `theta`.
    pub fn objective(&self, u: usize, theta: &DVector<f64>, lambda: f64) -> f64 {
        let c = self.c.column(u);
        0.5 * theta.dot(&(&self.h * theta)) - c.dot(theta) + 0.5 * self.yy[u] + lambda * theta.lp_norm(1)
    }
}

/// Output of one coordinate-descent solve.
#[derive(Debug, Clone)]
pub struct LassoFit {
    pub theta: DVector<f64>,
    pub passes: usize,
}

/// Builds the regression for transitions `range` of `traj` under `gain`.
pub fn build_problem(
    traj: &Trajectory,
    range: Range<usize>,
    gain: &FeedbackGain,
    lambda: f64,
) -> Result<RegressionProblem> {
    if range.start >= range.end || range.end > traj.len() {
        return Err(Error::invalid(format!(
            "transition range {range:?} must be nonempty and within 0..{}",
            traj.len()
        )));
    }
    let (p, r) = (traj.p(), traj.r());
    if gain.p() != p || gain.r() != r {
        return Err(Error::invalid("gain does not match the trajectory dimensions"));
    }
    let n = range.len();
    let mut design = DMatrix::zeros(n, p + r);
    let mut targets = DMatrix::zeros(n, p);
    let mut u = vec![0.0; r];
    for (row, t) in range.enumerate() {
        let x = traj.state(t);
        apply_gain(gain.matrix(), x, &mut u);
        for j in 0..p {
            design[(row, j)] = x[j];
            targets[(row, j)] = traj.state(t + 1)[j];
        }
        for j in 0..r {
            design[(row, p + j)] = u[j];
        }
    }
    Ok(RegressionProblem {
        design,
        targets,
        lambda,
    })
}

#[inline]
fn soft_threshold(v: f64, lambda: f64) -> f64 {
    if v > lambda {
        v - lambda
    } else if v < -lambda {
        v + lambda
    } else {
        0.0
    }
}

/// Cyclic coordinate descent for `½θᵀHθ − cᵀθ + λ|θ|₁`.
pub fn lasso_gram(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    lambda: f64,
    warm: Option<&DVector<f64>>,
    opts: LassoOptions,
) -> Result<LassoFit> {
    let q = h.nrows();
    if !(lambda >= 0.0) {
        return Err(Error::invalid("lambda must be nonnegative"));
    }
    if h.ncols() != q || c.len() != q {
        return Err(Error::invalid("Gram matrix and correlation vector disagree in size"));
    }
    let mut theta = match warm {
        Some(w) if w.len() == q => w.clone(),
        Some(_) => return Err(Error::invalid("warm start has the wrong length")),
        None => DVector::zeros(q),
    };
    // grad = Hθ − c, kept current as coordinates move.
    let mut grad = h * &theta - c;
    let mut change = f64::INFINITY;
    for pass in 1..=opts.max_passes {
        change = 0.0_f64;
        for j in 0..q {
            let hjj = h[(j, j)];
            let old = theta[j];
            let new = if hjj > 0.0 {
                soft_threshold(hjj * old - grad[j], lambda) / hjj
            } else {
                0.0
            };
            let delta = new - old;
            if delta != 0.0 {
                theta[j] = new;
                grad.axpy(delta, &h.column(j), 1.0);
                change = change.max(delta.abs());
            }
        }
        if change <= opts.tol {
            return Ok(LassoFit { theta, passes: pass });
        }
    }
    Err(Error::Convergence {
        what: "LASSO coordinate descent",
        iterations: opts.max_passes,
        residual: change,
    })
}

/// Estimates row `row` of `Θ` from `problem`.
pub fn lasso_row(problem: &RegressionProblem, row: usize) -> Result<DVector<f64>> {
    if row >= problem.targets.ncols() {
        return Err(Error::invalid(format!("row {row} out of range")));
    }
    let g = problem.gram();
    let c = g.c.column(row).into_owned();
    Ok(lasso_gram(&g.h, &c, problem.lambda, None, LassoOptions::default())?.theta)
}

/// Row-wise estimate `Θ̂` from Gram statistics, optionally warm-started.
pub fn estimate_from_gram(
    gram: &Gram,
    p: usize,
    lambda: f64,
    warm: Option<&InteractionMatrix>,
    opts: LassoOptions,
) -> Result<InteractionMatrix> {
    let q = gram.h.nrows();
    let mut theta = DMatrix::zeros(p, q);
    for u in 0..p {
        let start = warm.map(|w| w.row(u));
        let c = gram.c.column(u).into_owned();
        let fit = lasso_gram(&gram.h, &c, lambda, start.as_ref(), opts)?;
        theta.row_mut(u).copy_from(&fit.theta.transpose());
    }
    InteractionMatrix::from_theta(&theta, p)
}

/// Row-wise estimate `Θ̂` from transitions `range` of `traj`.
pub fn estimate_theta(
    traj: &Trajectory,
    range: Range<usize>,
    gain: &FeedbackGain,
    lambda: f64,
    warm: Option<&InteractionMatrix>,
) -> Result<InteractionMatrix> {
    let problem = build_problem(traj, range, gain, lambda)?;
    estimate_from_gram(&problem.gram(), traj.p(), lambda, warm, LassoOptions::default())
}

/// Subgradient optimality report for a LASSO solution.
#[derive(Debug, Clone, Copy)]
pub struct KktReport {
    /// Largest violation of the optimality conditions.
    pub max_violation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Checks `|∇_j| ≤ λ` off the support and `∇_j = −λ sign(θ_j)` on it, where
/// `∇ = Hθ − c`; the tolerance is `kkt_tol · max(1, λ)`.
pub fn kkt_check(h: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, theta: &DVector<f64>, kkt_tol: f64) -> KktReport {
    let grad = h * theta - c;
    let mut worst = 0.0_f64;
    for j in 0..theta.len() {
        let v = if theta[j] != 0.0 {
            (grad[j] + lambda * theta[j].signum()).abs()
        } else {
            (grad[j].abs() - lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    let tolerance = kkt_tol * lambda.max(1.0);
    KktReport {
        max_violation: worst,
        tolerance,
        passed: worst <= tolerance,
    }
}

/// `λ = 6ℓ √(log(4q/δ) / (n α² (1 − ρ)))`.
pub fn regularization_weight(ell: f64, q: usize, delta: f64, n: usize, alpha: f64, rho: f64) -> Result<f64> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::invalid("delta must lie in (0, 1)"));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid("alpha must lie in (0, 1]"));
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::invalid("rho must lie in [0, 1)"));
    }
    if n == 0 {
        return Err(Error::invalid("n must be positive"));
    }
    if !(ell >= 1.0) {
        return Err(Error::invalid("ell must be at least 1"));
    }
    let log_term = (4.0 * q as f64 / delta).ln();
    Ok(6.0 * ell * (log_term / (n as f64 * alpha * alpha * (1.0 - rho))).sqrt())
}

fn check_tail_args(n: usize, rho: f64, eps: f64, ell: f64) -> Result<()> {
    if n == 0 || !(0.0..1.0).contains(&rho) || !(eps > 0.0) || !(ell >= 1.0) {
        return Err(Error::invalid("tail bound needs n >= 1, 0 <= rho < 1, eps > 0, ell >= 1"));
    }
    Ok(())
}

/// Tail bound `P(|Ĝ_S|∞ > ε) ≤ 2|S| exp(−n(1−ρ)ε²/(4ℓ²))`, capped at 1.
pub fn gradient_tail_bound(support_size: usize, n: usize, rho: f64, eps: f64, ell: f64) -> Result<f64> {
    check_tail_args(n, rho, eps, ell)?;
    let e = -(n as f64) * (1.0 - rho) * eps * eps / (4.0 * ell * ell);
    Ok((2.0 * support_size as f64 * e.exp()).min(1.0))
}

/// Tail bound `P(|Ĥ_ij − H_ij| > ε) ≤ 2 exp(−n(1−ρ)³ε²/(24ℓ²))`, capped at 1.
pub fn hessian_tail_bound(n: usize, rho: f64, eps: f64, ell: f64) -> Result<f64> {
    check_tail_args(n, rho, eps, ell)?;
    let e = -(n as f64) * (1.0 - rho).powi(3) * eps * eps / (24.0 * ell * ell);
    Ok((2.0 * e.exp()).min(1.0))
}

/// `d(Θ¹, Θ²) = max_u |Θ¹_u − Θ²_u|₂`.
pub fn distance(t1: &InteractionMatrix, t2: &InteractionMatrix) -> Result<f64> {
    if t1.p() != t2.p() || t1.r() != t2.r() {
        return Err(Error::invalid("distance needs equally shaped matrices"));
    }
    Ok(row_distance(&t1.theta(), &t2.theta()))
}

pub(crate) fn row_distance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).row_iter().map(|r| r.norm()).fold(0.0, f64::max)
}

/// Empirical gradient and Hessian of the row loss at the true parameter.
#[derive(Debug, Clone)]
pub struct GradientHessian {
    /// `Ĝ = (1/n) Σ z(t) w_u(t+1)`.
    pub g_hat: DVector<f64>,
    /// `Ĥ = (1/n) Σ z(t) z(t)ᵀ`.
    pub h_hat: DMatrix<f64>,
}

/// `Ĝ` and `Ĥ` for row `u`, given the true row and its noise sequence.
///
/// The noise must equal the regression residual at `theta_row`.
pub fn gradient_hessian(
    problem: &RegressionProblem,
    theta_row: &DVector<f64>,
    row: usize,
    noises: &[f64],
) -> Result<GradientHessian> {
    let n = problem.n();
    if noises.len() != n || theta_row.len() != problem.design.ncols() || row >= problem.targets.ncols() {
        return Err(Error::invalid("noise, row or parameter length does not match the problem"));
    }
    let w = DVector::from_column_slice(noises);
    let resid = problem.targets.column(row) - &problem.design * theta_row;
    let scale = 1.0 + max_abs(&problem.targets);
    if (resid - &w).amax() > 1e-8 * scale {
        return Err(Error::invalid("noise sequence is inconsistent with the trajectory"));
    }
    let nf = n as f64;
    Ok(GradientHessian {
        g_hat: problem.design.transpose() * w / nf,
        h_hat: problem.design.transpose() * &problem.design / nf,
    })
}

/// Sums collected from a closed-loop rollout without storing it.
#[derive(Debug, Clone)]
pub struct ClosedLoopMoments {
    pub n: usize,
    /// `Σ x(t) x(t)ᵀ`.
    pub sxx: DMatrix<f64>,
    /// `Σ x(t) x(t+1)ᵀ`.
    pub sxy: DMatrix<f64>,
    /// `Σ x(t) w(t+1)ᵀ`.
    pub sxw: DMatrix<f64>,
    /// `Σ x_u(t+1)²`.
    pub syy: DVector<f64>,
    /// `x(n)`.
    pub last: DVector<f64>,
}

impl ClosedLoopMoments {
    /// Gram statistics of the regression under `gain`.
    pub fn gram(&self, gain: &FeedbackGain) -> Gram {
        let lt = gain.extended();
        let n = self.n as f64;
        Gram {
            n: self.n,
            h: &lt * &self.sxx * lt.transpose() / n,
            c: &lt * &self.sxy / n,
            yy: &self.syy / n,
        }
    }

    /// `Ĝ` and `Ĥ` of row `u`.
    pub fn gradient_hessian(&self, gain: &FeedbackGain, u: usize) -> GradientHessian {
        let lt = gain.extended();
        let n = self.n as f64;
        GradientHessian {
            g_hat: &lt * self.sxw.column(u) / n,
            h_hat: &lt * &self.sxx * lt.transpose() / n,
        }
    }
}

/// Simulates `n` steps of `x(t+1) = (A − BL)x(t) + w(t+1)` and returns its moments.
pub fn closed_loop_moments<N: NoiseSource + ?Sized>(
    theta: &InteractionMatrix,
    gain: &FeedbackGain,
    n: usize,
    noise: &mut N,
    x0: &[f64],
) -> Result<ClosedLoopMoments> {
    if n == 0 || x0.len() != theta.p() || gain.p() != theta.p() || gain.r() != theta.r() {
        return Err(Error::invalid("closed_loop_moments needs n >= 1 and matching shapes"));
    }
    let m = theta.closed_loop(gain);
    macro_rules! fixed {
        ($($p:literal),*) => {
            match theta.p() {
                $($p => moments_fixed::<$p, N>(&m, n, noise, x0),)*
                _ => moments_dyn(&m, n, noise, x0),
            }
        };
    }
    fixed!(1, 2, 3, 4, 5, 6, 7, 8)
}

fn moments_fixed<const P: usize, N: NoiseSource + ?Sized>(
    m: &DMatrix<f64>,
    n: usize,
    noise: &mut N,
    x0: &[f64],
) -> Result<ClosedLoopMoments> {
    let mut mm = [[0.0; P]; P];
    for (i, row) in mm.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    let mut x = [0.0; P];
    x.copy_from_slice(x0);
    let mut w = [0.0; P];
    let mut sxx = [[0.0; P]; P];
    let mut sxy = [[0.0; P]; P];
    let mut sxw = [[0.0; P]; P];
    let mut syy = [0.0; P];
    for t in 0..n {
        noise.fill(&mut w);
        let mut y = w;
        for i in 0..P {
            let mut acc = 0.0;
            for j in 0..P {
                acc += mm[i][j] * x[j];
            }
            y[i] += acc;
        }
        for i in 0..P {
            let xi = x[i];
            for j in 0..P {
                sxx[i][j] += xi * x[j];
                sxy[i][j] += xi * y[j];
                sxw[i][j] += xi * w[j];
            }
            syy[i] += y[i] * y[i];
        }
        let norm = y.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
        if !(norm <= DIVERGENCE_CAP) {
            return Err(Error::Divergence { step: t, norm });
        }
        x = y;
    }
    let to_mat = |s: &[[f64; P]; P]| DMatrix::from_fn(P, P, |i, j| s[i][j]);
    Ok(ClosedLoopMoments {
        n,
        sxx: to_mat(&sxx),
        sxy: to_mat(&sxy),
        sxw: to_mat(&sxw),
        syy: DVector::from_column_slice(&syy),
        last: DVector::from_column_slice(&x),
    })
}

fn moments_dyn<N: NoiseSource + ?Sized>(
    m: &DMatrix<f64>,
    n: usize,
    noise: &mut N,
    x0: &[f64],
) -> Result<ClosedLoopMoments> {
    let p = m.nrows();
    let mut x = DVector::from_column_slice(x0);
    let mut w = DVector::zeros(p);
    let mut out = ClosedLoopMoments {
        n,
        sxx: DMatrix::zeros(p, p),
        sxy: DMatrix::zeros(p, p),
        sxw: DMatrix::zeros(p, p),
        syy: DVector::zeros(p),
        last: DVector::zeros(p),
    };
    for t in 0..n {
        noise.fill(w.as_mut_slice());
        let y = m * &x + &w;
        out.sxx += &x * x.transpose();
        out.sxy += &x * y.transpose();
        out.sxw += &x * w.transpose();
        out.syy += y.component_mul(&y);
        let norm = y.amax();
        if !(norm <= DIVERGENCE_CAP) {
            return Err(Error::Divergence { step: t, norm });
        }
        x = y;
    }
    out.last = x;
    Ok(out)
}

/// Which matrix ∞-norm a Proposition-1 matrix condition uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NormConvention {
    /// Largest absolute entry (vector conditions).
    Entrywise,
    /// Largest absolute row sum.
    RowSum,
    /// Largest absolute entry times `|S|`.
    EntrywiseScaled,
    /// Population condition on `H`.
    Population,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Condition {
    pub name: &'static str,
    pub convention: NormConvention,
    pub value: f64,
    pub bound: f64,
    /// `bound − value` for upper bounds, `value − bound` for lower bounds.
    pub margin: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Prop1Report {
    pub conditions: Vec<Condition>,
    /// `λα/3 > εC_min/(4k) − λ`: the two gradient conditions cannot both be tight.
    pub gradient_bounds_inconsistent: bool,
}

impl Prop1Report {
    /// Whether every sample condition holds under the given matrix convention.
    pub fn sample_conditions_hold(&self, matrix: NormConvention) -> bool {
        self.conditions
            .iter()
            .filter(|c| c.convention == NormConvention::Entrywise || c.convention == matrix)
            .all(|c| c.passed)
    }

    pub fn population_conditions_hold(&self) -> bool {
        self.conditions
            .iter()
            .filter(|c| c.convention == NormConvention::Population)
            .all(|c| c.passed)
    }
}

fn upper(name: &'static str, convention: NormConvention, value: f64, bound: f64) -> Condition {
    Condition {
        name,
        convention,
        value,
        bound,
        margin: bound - value,
        passed: value <= bound,
    }
}

/// Evaluates the sufficient conditions for `d(Θ̂_u, Θ⁰_u) ≤ ε` on support `S`.
#[allow(clippy::too_many_arguments)]
pub fn check_prop1_conditions(
    gh: &GradientHessian,
    h_pop: &DMatrix<f64>,
    support: &[usize],
    alpha: f64,
    c_min: f64,
    eps: f64,
    lambda: f64,
    k: usize,
) -> Result<Prop1Report> {
    let q = h_pop.nrows();
    if support.is_empty() || support.len() > k || support.iter().any(|&j| j >= q) {
        return Err(Error::invalid("support must be nonempty, at most k, and within 0..q"));
    }
    let complement: Vec<usize> = (0..q).filter(|j| !support.contains(j)).collect();
    let s_len = support.len() as f64;
    let kf = k as f64;
    let mut conditions = Vec::with_capacity(8);

    let g_all = gh.g_hat.amax();
    let g_s = support.iter().map(|&j| gh.g_hat[j].abs()).fold(0.0, f64::max);
    conditions.push(upper("gradient", NormConvention::Entrywise, g_all, lambda * alpha / 3.0));
    let g_s_bound = eps * c_min / (4.0 * kf) - lambda;
    conditions.push(upper("gradient_support", NormConvention::Entrywise, g_s, g_s_bound));

    let h_bound = alpha / 12.0 * c_min / kf.sqrt();
    let d_ss = submatrix(&gh.h_hat, support, support) - submatrix(h_pop, support, support);
    let d_cs = submatrix(&gh.h_hat, &complement, support) - submatrix(h_pop, &complement, support);
    for (conv, f) in [
        (NormConvention::RowSum, inf_norm as fn(&DMatrix<f64>) -> f64),
        (NormConvention::EntrywiseScaled, max_abs),
    ] {
        let scale = if conv == NormConvention::EntrywiseScaled { s_len } else { 1.0 };
        let cs = if complement.is_empty() { 0.0 } else { scale * f(&d_cs) };
        conditions.push(upper("hessian_cross", conv, cs, h_bound));
        conditions.push(upper("hessian_support", conv, scale * f(&d_ss), h_bound));
    }

    let h_ss = submatrix(h_pop, support, support);
    let lam_min = sym_min_eig(&h_ss);
    conditions.push(Condition {
        name: "population_min_eigenvalue",
        convention: NormConvention::Population,
        value: lam_min,
        bound: c_min,
        margin: lam_min - c_min,
        passed: lam_min >= c_min,
    });
    let cross = crate::identifiability::subset_metrics(h_pop, support).cross_norm;
    conditions.push(upper("population_irrepresentability", NormConvention::Population, cross, 1.0 - alpha));

    Ok(Prop1Report {
        conditions,
        gradient_bounds_inconsistent: lambda * alpha / 3.0 > g_s_bound,
    })
}
