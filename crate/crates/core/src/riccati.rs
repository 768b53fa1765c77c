//! Discrete algebraic Riccati equation, optimal gain, average cost and the
//! closed-loop Lyapunov equation.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{inf_norm, op_norm2, spectral_radius};
use crate::model::{CostMatrices, FeedbackGain, InteractionMatrix};

/// Default fixed-point tolerance.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Default iteration cap.
pub const DEFAULT_MAX_ITER: usize = 100_000;

/// Iterates whose entries grow past this are treated as divergent.
const BLOWUP: f64 = 1e15;

#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    /// Cost-to-go matrix `K(Θ)`.
    pub k_mat: DMatrix<f64>,
    /// Optimal gain `L(Θ) = (BᵀKB + R)⁻¹BᵀKA`.
    pub gain: FeedbackGain,
    pub iterations: usize,
    /// `|K - Ric(K)|_inf` at the returned `K`.
    pub residual: f64,
}

impl RiccatiSolution {
    /// Average cost `J(Θ) = trace(K(Θ))`.
    pub fn average_cost(&self) -> f64 {
        self.k_mat.trace()
    }
}

#[derive(Debug, Clone)]
pub struct LyapunovSolution {
    /// Stationary covariance `Λ`.
    pub lambda_mat: DMatrix<f64>,
    pub iterations: usize,
    /// `|Λ - MΛMᵀ - I|_inf` with `M = A - BL`.
    pub residual: f64,
}

fn check_shapes(theta: &InteractionMatrix, cost: &CostMatrices) -> Result<()> {
    if cost.q_mat().nrows() != theta.p() || cost.r_mat().nrows() != theta.r() {
        return Err(Error::invalid("cost matrices do not match the system dimensions"));
    }
    Ok(())
}

/// `(BᵀKB + R)⁻¹ BᵀKA`.
pub fn gain_from(theta: &InteractionMatrix, cost: &CostMatrices, k: &DMatrix<f64>) -> Result<FeedbackGain> {
    let (a, b) = (theta.a(), theta.b());
    let btk = b.transpose() * k;
    let s = &btk * b + cost.r_mat();
    let rhs = &btk * a;
    let sol = match s.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => s
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Numerical("BᵀKB + R is singular".into()))?,
    };
    Ok(FeedbackGain::new(sol))
}

/// One step of the Riccati map `K ↦ Q + AᵀKA - AᵀKB(BᵀKB+R)⁻¹BᵀKA`.
pub fn riccati_map(theta: &InteractionMatrix, cost: &CostMatrices, k: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gain = gain_from(theta, cost, k)?;
    let a = theta.a();
    let atk = a.transpose() * k;
    let next = cost.q_mat() + &atk * a - &atk * theta.b() * gain.matrix();
    Ok((&next + next.transpose()) * 0.5)
}

/// `|K - Ric(K)|_inf`.
pub fn riccati_residual(theta: &InteractionMatrix, cost: &CostMatrices, k: &DMatrix<f64>) -> Result<f64> {
    Ok(inf_norm(&(k - riccati_map(theta, cost, k)?)))
}

/// Value iteration from `K₀ = Q` until successive iterates differ by at most
/// `tol` in the operator ∞-norm.
pub fn solve_riccati(
    theta: &InteractionMatrix,
    cost: &CostMatrices,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution> {
    check_shapes(theta, cost)?;
    solve_riccati_from(theta, cost, cost.q_mat().clone(), tol, max_iter)
}

/// Value iteration from a caller-supplied PSD starting point.
pub fn solve_riccati_from(
    theta: &InteractionMatrix,
    cost: &CostMatrices,
    k0: DMatrix<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<RiccatiSolution> {
    check_shapes(theta, cost)?;
    let mut k = k0;
    let mut diff = f64::INFINITY;
    for it in 1..=max_iter {
        let next = riccati_map(theta, cost, &k)?;
        diff = inf_norm(&(&next - &k));
        k = next;
        if !diff.is_finite() || crate::linalg::max_abs(&k) > BLOWUP {
            return Err(Error::Convergence {
                what: "Riccati iteration",
                iterations: it,
                residual: diff,
            });
        }
        if diff <= tol {
            let gain = gain_from(theta, cost, &k)?;
            let residual = riccati_residual(theta, cost, &k)?;
            let radius = spectral_radius(&theta.closed_loop(&gain));
            if radius >= 1.0 {
                return Err(Error::Unstable { norm: radius });
            }
            return Ok(RiccatiSolution {
                k_mat: k,
                gain,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::Convergence {
        what: "Riccati iteration",
        iterations: max_iter,
        residual: diff,
    })
}

/// Optimal gain `L(Θ)`.
pub fn optimal_gain(theta: &InteractionMatrix, cost: &CostMatrices) -> Result<FeedbackGain> {
    Ok(solve_riccati(theta, cost, DEFAULT_TOL, DEFAULT_MAX_ITER)?.gain)
}

/// `J(Θ) = trace(K(Θ))`.
pub fn optimal_average_cost(
    theta: &InteractionMatrix,
    cost: &CostMatrices,
    tol: f64,
    max_iter: usize,
) -> Result<f64> {
    Ok(solve_riccati(theta, cost, tol, max_iter)?.average_cost())
}

/// Operator 2-norm of `A - BL`.
pub fn closed_loop_norm(theta: &InteractionMatrix, gain: &FeedbackGain) -> f64 {
    op_norm2(&theta.closed_loop(gain))
}

/// Average cost `trace((Q + LᵀRL)Λ)` of a fixed stabilizing gain.
pub fn gain_average_cost(theta: &InteractionMatrix, cost: &CostMatrices, gain: &FeedbackGain) -> Result<f64> {
    let lambda = lyapunov_doubling(&theta.closed_loop(gain), 1e-14)?;
    let l = gain.matrix();
    let weight = cost.q_mat() + l.transpose() * cost.r_mat() * l;
    Ok((weight * lambda).trace())
}

/// Solves `Λ = MΛMᵀ + I` with `M = A - BL` by fixed-point iteration.
///
/// Requires `|M|_2 < 1`.
pub fn solve_lyapunov(
    theta: &InteractionMatrix,
    gain: &FeedbackGain,
    tol: f64,
    max_iter: usize,
) -> Result<LyapunovSolution> {
    let m = theta.closed_loop(gain);
    let norm = op_norm2(&m);
    if norm >= 1.0 {
        return Err(Error::Unstable { norm });
    }
    let p = m.nrows();
    let eye = DMatrix::<f64>::identity(p, p);
    let mt = m.transpose();
    let mut lam = eye.clone();
    let mut diff = f64::INFINITY;
    for it in 1..=max_iter {
        let next = &m * &lam * &mt + &eye;
        diff = inf_norm(&(&next - &lam));
        lam = (&next + next.transpose()) * 0.5;
        if diff <= tol {
            let residual = inf_norm(&(&lam - &m * &lam * &mt - &eye));
            return Ok(LyapunovSolution {
                lambda_mat: lam,
                iterations: it,
                residual,
            });
        }
    }
    Err(Error::Convergence {
        what: "Lyapunov iteration",
        iterations: max_iter,
        residual: diff,
    })
}

/// Solves `Λ = MΛMᵀ + I` by squaring, needing only spectral radius below one.
pub fn lyapunov_doubling(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let radius = spectral_radius(m);
    if radius >= 1.0 {
        return Err(Error::Unstable { norm: radius });
    }
    let p = m.nrows();
    let mut x = DMatrix::<f64>::identity(p, p);
    let mut a = m.clone();
    for it in 1..=64 {
        let add = &a * &x * a.transpose();
        x += &add;
        a = &a * &a;
        if crate::linalg::max_abs(&add) <= tol * crate::linalg::max_abs(&x) {
            return Ok((&x + x.transpose()) * 0.5);
        }
        if it == 64 {
            break;
        }
    }
    Err(Error::Convergence {
        what: "Lyapunov doubling",
        iterations: 64,
        residual: f64::NAN,
    })
}

/// Gradient of `J(Θ) = trace K(Θ)` with respect to `Θ`, equal to
/// `2 K (A - BL) Λ L̃ᵀ` where `Λ` is the closed-loop covariance of `Θ` itself.
pub fn average_cost_gradient(theta: &InteractionMatrix, sol: &RiccatiSolution) -> Result<DMatrix<f64>> {
    let m = theta.closed_loop(&sol.gain);
    let lam = lyapunov_doubling(&m, 1e-14)?;
    Ok(2.0 * &sol.k_mat * m * lam * sol.gain.extended().transpose())
}
