//! Central flows for gradient descent, Scalar RMSProp and RMSProp.
//!
//! A central flow is an ODE for the time-averaged trajectory of an optimizer
//! that oscillates at the edge of stability. This crate runs the discrete
//! optimizers side by side with their stable and central flows and measures
//! how well the flows predict the discrete runs.
//!
//! Layout:
//!
//! - [`linalg`]: dense symmetric eigensolver, PSD projection, LOBPCG.
//! - [`objective`]: loss oracles (quadratics, an edge-of-stability toy, a tiny MLP).
//! - [`sdcp`]: semidefinite complementarity problems `0 ⪯ X ⊥ α + β[X] ⪰ 0`.
//! - [`optimizers`]: GD, Scalar RMSProp and RMSProp as preconditioned methods.
//! - [`flows`]: stable, central, IGR and projected flows.
//! - [`predictions`]: time-averaged loss, gradient norm and oscillation predictions.
//! - [`stationary`]: RMSProp's stationary preconditioner.
//! - [`harness`]: configs, experiment runner, CSV/JSON output.
//!
//! ```
//! use centralflows::sdcp::solve_sdcp_1d;
//! assert_eq!(solve_sdcp_1d(-4.0, 2.0).unwrap(), 2.0);
//! ```
// `!(x > 0.0)` is how NaN gets rejected; index loops mirror the math
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod flows;
pub mod harness;
pub mod linalg;
pub mod objective;
pub mod optimizers;
pub mod predictions;
pub mod sdcp;
pub mod stationary;

pub use error::{Error, Result};
