//! Sparse adaptive LQ control.
//!
//! The crate learns the sparse interaction matrix `Θ⁰ = [A⁰, B⁰]` of
//! `x(t+1) = A⁰x(t) + B⁰u(t) + w(t+1)` from closed-loop data with a row-wise
//! LASSO, and controls the system with an episodic optimism-in-the-face-of-
//! uncertainty rule: each episode estimates `Θ̂`, picks the parameter with the
//! lowest optimal average cost in a shrinking ball around it, and applies that
//! parameter's Riccati gain.
//!
//! | module | contents |
//! |---|---|
//! | [`model`] | systems, costs, gains, trajectories, simulation, generation |
//! | [`riccati`] | Riccati and Lyapunov solvers, optimal gain and cost |
//! | [`estimator`] | LASSO, regularization weight, distance, sufficient-condition checks |
//! | [`identifiability`] | certificates, sample complexity, episode schedule, neighborhood profile |
//! | [`ofu`] | confidence sets, optimistic selection, the episodic loop, good events |
//! | [`harness`] | configuration, Monte Carlo sweeps, output files |
//!
//! ```
//! use nalgebra::DMatrix;
//! use sparse_lqr::model::{CostMatrices, InteractionMatrix};
//! use sparse_lqr::riccati::{solve_riccati, DEFAULT_MAX_ITER, DEFAULT_TOL};
//!
//! let theta = InteractionMatrix::new(
//!     DMatrix::from_element(1, 1, 0.5),
//!     DMatrix::from_element(1, 1, 1.0),
//! )?;
//! let sol = solve_riccati(&theta, &CostMatrices::identity(1, 1), DEFAULT_TOL, DEFAULT_MAX_ITER)?;
//! assert!(sol.average_cost() > 1.0);
//! # Ok::<(), sparse_lqr::Error>(())
//! ```

pub mod error;
pub mod estimator;
pub mod harness;
pub mod identifiability;
pub mod linalg;
pub mod model;
pub mod noise;
pub mod ofu;
pub mod riccati;

pub use error::{Error, ErrorCategory, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/riccati.md")]
    mod riccati {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/identifiability.md")]
    mod identifiability {}
    #[doc = include_str!("../../../book/src/ofu.md")]
    mod ofu {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
}
