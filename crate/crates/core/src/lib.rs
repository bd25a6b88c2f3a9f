//! Finite-difference laboratory for the two-phase free boundary problem
//!
//! ```text
//! F(D^2 u) = 0          in {u > 0} and in the interior of {u <= 0}
//! u_nu^+ = G(u_nu^-)    on the free boundary d{u > 0}
//! ```
//!
//! posed on a ball with Dirichlet data. Besides the solver, the crate carries
//! the measurement harness used to check regularity behaviour of discrete
//! solutions: dyadic decay of `(1/r) sup_{B_r} |u|`, the Lipschitz-or-decay
//! alternative, barrier comparison, flatness with respect to two-plane
//! profiles, and the large-gradient limit of the flux law.

// Negated comparisons are how NaN parameters get rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod elliptic;
pub mod error;
pub mod exec;
pub mod grid;
pub mod jump_law;
pub mod regularity;
pub mod solver;
pub mod suite;
pub mod viscosity;

pub use error::{Error, Result};
pub use exec::Exec;
