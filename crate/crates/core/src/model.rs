//! The LQ system: interaction matrix, costs, feedback gains and simulation.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::noise::NoiseSource;

/// Default cap on `|x(t)|_inf` before a rollout is declared divergent.
pub const DIVERGENCE_CAP: f64 = 1e8;

/// `Θ = [A, B]`, the `p × q` matrix with `q = p + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionMatrix {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl InteractionMatrix {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 || a.nrows() != a.ncols() {
            return Err(Error::invalid(format!(
                "A must be square and nonempty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != a.nrows() || b.ncols() == 0 {
            return Err(Error::invalid(format!(
                "B must be {}xr with r >= 1, got {}x{}",
                a.nrows(),
                b.nrows(),
                b.ncols()
            )));
        }
        Ok(InteractionMatrix { a, b })
    }

    /// Splits a `p × q` matrix into `[A, B]`.
    pub fn from_theta(theta: &DMatrix<f64>, p: usize) -> Result<Self> {
        if theta.nrows() != p || theta.ncols() <= p {
            return Err(Error::invalid(format!(
                "theta must be {p}xq with q > {p}, got {}x{}",
                theta.nrows(),
                theta.ncols()
            )));
        }
        let r = theta.ncols() - p;
        Self::new(
            theta.columns(0, p).into_owned(),
            theta.columns(p, r).into_owned(),
        )
    }

    /// Builds from row-major nested vectors.
    pub fn from_rows(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Self> {
        Self::new(matrix_from_rows(a)?, matrix_from_rows(b)?)
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn p(&self) -> usize {
        self.a.nrows()
    }

    pub fn r(&self) -> usize {
        self.b.ncols()
    }

    pub fn q(&self) -> usize {
        self.p() + self.r()
    }

    /// The full `p × q` matrix.
    pub fn theta(&self) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(self.p(), self.q());
        t.columns_mut(0, self.p()).copy_from(&self.a);
        t.columns_mut(self.p(), self.r()).copy_from(&self.b);
        t
    }

    /// Row `u` of `Θ` as a `q`-vector.
    pub fn row(&self, u: usize) -> DVector<f64> {
        let p = self.p();
        DVector::from_fn(self.q(), |j, _| {
            if j < p {
                self.a[(u, j)]
            } else {
                self.b[(u, j - p)]
            }
        })
    }

    /// Column indices of the nonzero entries of row `u`.
    pub fn row_support(&self, u: usize) -> Vec<usize> {
        self.row(u)
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(j, _)| j)
            .collect()
    }

    pub fn max_row_support(&self) -> usize {
        (0..self.p())
            .map(|u| self.row_support(u).len())
            .max()
            .unwrap_or(0)
    }

    pub fn is_k_sparse(&self, k: usize) -> bool {
        self.max_row_support() <= k
    }

    /// Smallest nonzero absolute entry, `Θ_min`.
    pub fn theta_min(&self) -> f64 {
        self.a
            .iter()
            .chain(self.b.iter())
            .filter(|v| **v != 0.0)
            .fold(f64::INFINITY, |acc, v| acc.min(v.abs()))
    }

    /// `A - B L`.
    pub fn closed_loop(&self, gain: &FeedbackGain) -> DMatrix<f64> {
        &self.a - &self.b * gain.matrix()
    }

    pub fn to_rows(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        (matrix_to_rows(&self.a), matrix_to_rows(&self.b))
    }

    fn check_gain(&self, gain: &FeedbackGain) -> Result<()> {
        if gain.r() != self.r() || gain.p() != self.p() {
            return Err(Error::invalid(format!(
                "gain is {}x{}, system needs {}x{}",
                gain.r(),
                gain.p(),
                self.r(),
                self.p()
            )));
        }
        Ok(())
    }
}

/// Stage-cost weights `Q` (`p × p`) and `R` (`r × r`).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrices {
    q_mat: DMatrix<f64>,
    r_mat: DMatrix<f64>,
}

impl CostMatrices {
    pub fn new(q_mat: DMatrix<f64>, r_mat: DMatrix<f64>) -> Result<Self> {
        for (name, m) in [("Q", &q_mat), ("R", &r_mat)] {
            if m.nrows() == 0 || !m.is_square() {
                return Err(Error::invalid(format!("{name} must be square and nonempty")));
            }
            if crate::linalg::asymmetry(m) > 1e-12 {
                return Err(Error::invalid(format!("{name} is not symmetric")));
            }
            let min_eig = crate::linalg::sym_min_eig(m);
            if min_eig < -1e-10 {
                return Err(Error::invalid(format!(
                    "{name} is not positive semi-definite (min eigenvalue {min_eig:e})"
                )));
            }
        }
        Ok(CostMatrices { q_mat, r_mat })
    }

    /// `Q = I_p`, `R = I_r`.
    pub fn identity(p: usize, r: usize) -> Self {
        CostMatrices {
            q_mat: DMatrix::identity(p, p),
            r_mat: DMatrix::identity(r, r),
        }
    }

    pub fn q_mat(&self) -> &DMatrix<f64> {
        &self.q_mat
    }

    pub fn r_mat(&self) -> &DMatrix<f64> {
        &self.r_mat
    }

    fn check(&self, p: usize, r: usize) -> Result<()> {
        if self.q_mat.nrows() != p || self.r_mat.nrows() != r {
            return Err(Error::invalid(format!(
                "cost is ({0}x{0}, {1}x{1}), system needs ({p}x{p}, {r}x{r})",
                self.q_mat.nrows(),
                self.r_mat.nrows()
            )));
        }
        Ok(())
    }
}

/// The `r × p` gain `L` of the law `u = -L x`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackGain {
    l: DMatrix<f64>,
}

impl FeedbackGain {
    pub fn new(l: DMatrix<f64>) -> Self {
        FeedbackGain { l }
    }

    pub fn zeros(r: usize, p: usize) -> Self {
        FeedbackGain {
            l: DMatrix::zeros(r, p),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Ok(FeedbackGain::new(matrix_from_rows(rows)?))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn r(&self) -> usize {
        self.l.nrows()
    }

    pub fn p(&self) -> usize {
        self.l.ncols()
    }

    /// `L̃ = [I; -L]`, shape `q × p`.
    pub fn extended(&self) -> DMatrix<f64> {
        let (r, p) = self.l.shape();
        let mut e = DMatrix::zeros(p + r, p);
        e.rows_mut(0, p).fill_with_identity();
        e.rows_mut(p, r).copy_from(&(-&self.l));
        e
    }

    /// `max(1, max_j |L_j|_2)` over the rows of `L`.
    pub fn ell(&self) -> f64 {
        self.l.row_iter().map(|row| row.norm()).fold(1.0, f64::max)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.l)
    }
}

/// States `x(0..=n)`, controls `u(0..n)`, noises `w(1..=n)` and costs `c(0..n)`,
/// stored flat in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    p: usize,
    r: usize,
    states: Vec<f64>,
    controls: Vec<f64>,
    noises: Vec<f64>,
    costs: Vec<f64>,
}

impl Trajectory {
    pub fn new(p: usize, r: usize, x0: &[f64]) -> Self {
        Trajectory {
            p,
            r,
            states: x0.to_vec(),
            controls: Vec::new(),
            noises: Vec::new(),
            costs: Vec::new(),
        }
    }

    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.costs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.costs.is_empty()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// `x(t)` for `t` in `0..=len()`.
    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.p..(t + 1) * self.p]
    }

    /// `u(t)` for `t` in `0..len()`.
    pub fn control(&self, t: usize) -> &[f64] {
        &self.controls[t * self.r..(t + 1) * self.r]
    }

    /// `w(t + 1)`, the noise entering the transition out of `x(t)`.
    pub fn noise(&self, t: usize) -> &[f64] {
        &self.noises[t * self.p..(t + 1) * self.p]
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn last_state(&self) -> &[f64] {
        self.state(self.len())
    }

    /// Copy with every state outside `x(keep.start..=keep.end)` set to zero.
    pub fn zeroed_outside(&self, keep: std::ops::Range<usize>) -> Trajectory {
        let mut out = self.clone();
        for t in 0..=self.len() {
            if t < keep.start || t > keep.end {
                out.states[t * self.p..(t + 1) * self.p].fill(0.0);
            }
        }
        out
    }

    fn push(&mut self, u: &[f64], w: &[f64], cost: f64, next: &[f64]) {
        self.controls.extend_from_slice(u);
        self.noises.extend_from_slice(w);
        self.costs.push(cost);
        self.states.extend_from_slice(next);
    }

    /// Largest `|x(t+1) - A x(t) - B u(t) - w(t+1)|_inf` over the trajectory.
    pub fn replay_error(&self, theta: &InteractionMatrix) -> f64 {
        let mut worst: f64 = 0.0;
        let mut next = vec![0.0; self.p];
        for t in 0..self.len() {
            affine_step(theta, self.state(t), self.control(t), self.noise(t), &mut next);
            for (a, b) in next.iter().zip(self.state(t + 1)) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }
}

#[inline]
fn affine_step(theta: &InteractionMatrix, x: &[f64], u: &[f64], w: &[f64], out: &mut [f64]) {
    let p = theta.p();
    let a = theta.a.as_slice();
    let b = theta.b.as_slice();
    out.copy_from_slice(w);
    for (j, xj) in x.iter().enumerate() {
        let col = &a[j * p..(j + 1) * p];
        for (o, aij) in out.iter_mut().zip(col) {
            *o += aij * xj;
        }
    }
    for (j, uj) in u.iter().enumerate() {
        let col = &b[j * p..(j + 1) * p];
        for (o, bij) in out.iter_mut().zip(col) {
            *o += bij * uj;
        }
    }
}

/// `u = -L x` written into `u`; shared by the simulator and the regression design.
#[inline]
pub(crate) fn apply_gain(l: &DMatrix<f64>, x: &[f64], u: &mut [f64]) {
    let r = l.nrows();
    let data = l.as_slice();
    u.fill(0.0);
    for (j, xj) in x.iter().enumerate() {
        let col = &data[j * r..(j + 1) * r];
        for (ui, lij) in u.iter_mut().zip(col) {
            *ui -= lij * xj;
        }
    }
}

#[inline]
fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let n = v.len();
    let data = m.as_slice();
    let mut s = 0.0;
    for j in 0..n {
        let col = &data[j * n..(j + 1) * n];
        let mut cj = 0.0;
        for (mij, vi) in col.iter().zip(v) {
            cj += mij * vi;
        }
        s += cj * v[j];
    }
    s
}

/// `A x + B u + w`.
pub fn step(
    theta: &InteractionMatrix,
    x: &DVector<f64>,
    u: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>> {
    if x.len() != theta.p() || w.len() != theta.p() || u.len() != theta.r() {
        return Err(Error::invalid(format!(
            "step expects x, w of length {} and u of length {}",
            theta.p(),
            theta.r()
        )));
    }
    let mut out = DVector::zeros(theta.p());
    affine_step(theta, x.as_slice(), u.as_slice(), w.as_slice(), out.as_mut_slice());
    Ok(out)
}

/// `xᵀ Q x + uᵀ R u`.
pub fn stage_cost(cost: &CostMatrices, x: &DVector<f64>, u: &DVector<f64>) -> Result<f64> {
    cost.check(x.len(), u.len())?;
    Ok(quad_form(&cost.q_mat, x.as_slice()) + quad_form(&cost.r_mat, u.as_slice()))
}

/// Closed-loop simulator that can switch gains between calls to [`Simulator::advance`].
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    theta: &'a InteractionMatrix,
    cost: &'a CostMatrices,
    cap: f64,
    traj: Trajectory,
}

impl<'a> Simulator<'a> {
    pub fn new(theta: &'a InteractionMatrix, cost: &'a CostMatrices, x0: &[f64]) -> Result<Self> {
        cost.check(theta.p(), theta.r())?;
        if x0.len() != theta.p() {
            return Err(Error::invalid(format!("x0 must have length {}", theta.p())));
        }
        Ok(Simulator {
            theta,
            cost,
            cap: DIVERGENCE_CAP,
            traj: Trajectory::new(theta.p(), theta.r(), x0),
        })
    }

    pub fn with_divergence_cap(mut self, cap: f64) -> Self {
        self.cap = cap;
        self
    }

    /// Runs `n_steps` transitions under `u = -L x`.
    ///
    /// On divergence the offending step is kept in the trajectory and an
    /// error naming its index is returned.
    pub fn advance(
        &mut self,
        gain: &FeedbackGain,
        n_steps: usize,
        noise: &mut dyn NoiseSource,
    ) -> Result<()> {
        self.theta.check_gain(gain)?;
        let (p, r) = (self.theta.p(), self.theta.r());
        let l = gain.matrix();
        let mut x = self.traj.last_state().to_vec();
        let mut u = vec![0.0; r];
        let mut w = vec![0.0; p];
        let mut next = vec![0.0; p];
        for _ in 0..n_steps {
            apply_gain(l, &x, &mut u);
            noise.fill(&mut w);
            let c = quad_form(&self.cost.q_mat, &x) + quad_form(&self.cost.r_mat, &u);
            affine_step(self.theta, &x, &u, &w, &mut next);
            self.traj.push(&u, &w, c, &next);
            let norm = next.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
            if !(norm <= self.cap) {
                return Err(Error::Divergence {
                    step: self.traj.len() - 1,
                    norm,
                });
            }
            std::mem::swap(&mut x, &mut next);
        }
        Ok(())
    }

    pub fn trajectory(&self) -> &Trajectory {
        &self.traj
    }

    pub fn into_trajectory(self) -> Trajectory {
        self.traj
    }
}

/// Simulates `n_steps` of `x(t+1) = A x + B u + w` under `u = -L x`.
pub fn rollout(
    theta: &InteractionMatrix,
    gain: &FeedbackGain,
    cost: &CostMatrices,
    n_steps: usize,
    noise: &mut dyn NoiseSource,
    x0: &[f64],
) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::invalid("rollout needs n_steps >= 1"));
    }
    let mut sim = Simulator::new(theta, cost, x0)?;
    sim.advance(gain, n_steps, noise)?;
    Ok(sim.into_trajectory())
}

/// Random `k`-sparse system whose `A` has operator 2-norm `spectral_target`.
///
/// Every state must be reachable from a control in the sparsity graph and the
/// controllability matrix must have full rank; failing draws are retried up to
/// 100 times.
pub fn generate_sparse_system<R: Rng + ?Sized>(
    p: usize,
    r: usize,
    k: usize,
    spectral_target: f64,
    rng: &mut R,
) -> Result<InteractionMatrix> {
    let q = p + r;
    if p == 0 || r == 0 {
        return Err(Error::invalid("p and r must be positive"));
    }
    if k == 0 || k > q {
        return Err(Error::invalid(format!("need 1 <= k <= q = {q}, got k = {k}")));
    }
    if !(spectral_target > 0.0 && spectral_target < 1.0) {
        return Err(Error::invalid("spectral_target must lie in (0, 1)"));
    }
    for _ in 0..100 {
        let mut theta = DMatrix::zeros(p, q);
        for u in 0..p {
            for j in sample(rng, q, k).iter() {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                theta[(u, j)] = sign * rng.random_range(0.5..1.5);
            }
        }
        let a_norm = crate::linalg::op_norm2(&theta.columns(0, p).into_owned());
        if a_norm == 0.0 {
            continue;
        }
        theta.columns_mut(0, p).scale_mut(spectral_target / a_norm);
        let sys = InteractionMatrix::from_theta(&theta, p)?;
        if reachable_from_controls(&sys) && controllability_rank(&sys) == p {
            return Ok(sys);
        }
    }
    Err(Error::Generation(format!(
        "no controllable {k}-sparse system with p = {p}, r = {r} after 100 draws"
    )))
}

/// Every state node reachable from some control node along `j -> u` edges
/// where `Θ[u, j] != 0`.
pub fn reachable_from_controls(sys: &InteractionMatrix) -> bool {
    let p = sys.p();
    let mut reached = vec![false; p];
    let mut frontier: Vec<usize> = (0..p)
        .filter(|&u| (0..sys.r()).any(|j| sys.b()[(u, j)] != 0.0))
        .collect();
    for &u in &frontier {
        reached[u] = true;
    }
    while let Some(j) = frontier.pop() {
        for u in 0..p {
            if !reached[u] && sys.a()[(u, j)] != 0.0 {
                reached[u] = true;
                frontier.push(u);
            }
        }
    }
    reached.into_iter().all(|r| r)
}

/// Numerical rank of `[B, AB, ..., A^{p-1}B]` at relative tolerance 1e-8.
pub fn controllability_rank(sys: &InteractionMatrix) -> usize {
    let (p, r) = (sys.p(), sys.r());
    let mut ctrb = DMatrix::zeros(p, p * r);
    let mut block = sys.b().clone();
    for i in 0..p {
        ctrb.columns_mut(i * r, r).copy_from(&block);
        block = sys.a() * block;
    }
    let cap = crate::linalg::ITER_CAP_PER_DIM * p;
    let Some(svd) = ctrb.try_svd(false, false, f64::EPSILON, cap) else {
        return 0;
    };
    let sv = svd.singular_values;
    let top = sv.max();
    if top == 0.0 {
        return 0;
    }
    sv.iter().filter(|s| **s > 1e-8 * top).count()
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::invalid("matrix rows must be nonempty and of equal length"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

pub(crate) fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}
