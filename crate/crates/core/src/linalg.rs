//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

const POWER_TOL: f64 = 1e-13;
const POWER_MAX_ITER: usize = 10_000;
/// Iteration cap per dimension for the QR-type decompositions, which
/// otherwise loop until convergence.
pub(crate) const ITER_CAP_PER_DIM: usize = 1000;

/// Operator 2-norm (largest singular value) by power iteration on `MᵀM`.
///
/// Two deterministic starting vectors are tried and the larger estimate kept,
/// which guards against a start orthogonal to the top singular vector.
pub fn op_norm2(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let gram = m.transpose() * m;
    let n = gram.nrows();
    let ones = DVector::from_element(n, 1.0);
    // Fixed irrational-ish pattern, deterministic and generic.
    let mixed = DVector::from_fn(n, |i, _| ((i as f64 + 1.0) * 0.618_033_988_749_895).fract() - 0.5);
    let a = power_top_eig(&gram, ones);
    let b = power_top_eig(&gram, mixed);
    a.max(b).max(0.0).sqrt()
}

fn power_top_eig(gram: &DMatrix<f64>, start: DVector<f64>) -> f64 {
    let norm = start.norm();
    if norm == 0.0 {
        return 0.0;
    }
    let mut v = start / norm;
    let mut rq = v.dot(&(gram * &v));
    for _ in 0..POWER_MAX_ITER {
        let w = gram * &v;
        let wn = w.norm();
        if wn == 0.0 {
            return 0.0;
        }
        v = w / wn;
        let next = v.dot(&(gram * &v));
        let done = (next - rq).abs() <= POWER_TOL * next.abs();
        rq = next;
        if done {
            break;
        }
    }
    rq
}

/// Maximum absolute row sum.
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Maximum absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_min_eig(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let sym = (m + m.transpose()) * 0.5;
    let cap = ITER_CAP_PER_DIM * m.nrows();
    nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, cap).map_or(f64::NAN, |e| e.eigenvalues.min())
}

/// Largest eigenvalue modulus.
///
/// Uses the real Schur form with an iteration cap; when it does not converge,
/// falls back to Gelfand's formula `lim |M^(2^j)|^(1/2^j)` with rescaled squaring.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let cap = ITER_CAP_PER_DIM * m.nrows();
    if let Some(schur) = nalgebra::Schur::try_new(m.clone(), f64::EPSILON, cap) {
        return schur.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
    }
    gelfand_radius(m)
}

fn gelfand_radius(m: &DMatrix<f64>) -> f64 {
    let mut a = m.clone();
    let mut log_scale = 0.0;
    let mut power = 1.0;
    for _ in 0..64 {
        let c = a.norm();
        if c == 0.0 {
            return 0.0;
        }
        a /= c;
        log_scale += c.ln() / power;
        a = &a * &a;
        power *= 2.0;
    }
    let c = a.norm();
    if c == 0.0 {
        return 0.0;
    }
    (log_scale + c.ln() / power).exp()
}

/// Extract the submatrix with the given row and column indices.
pub fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Largest asymmetry `max |M - Mᵀ|`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    max_abs(&(m - m.transpose()))
}
