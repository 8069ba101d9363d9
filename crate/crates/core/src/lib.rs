//! Numerical toolkit for the Neumann problem of strictly convex, radially
//! symmetric integrands with linear growth:
//!
//! ```text
//! minimise  ∫ f(|∇w|) − T₀ : ∇w dx   over w with vanishing mean.
//! ```
//!
//! The crate is split along the natural seams of the method:
//!
//! - [`integrand`]: the profile `f`, its derivatives, the stress tensor
//!   `A(z) = f′(|z|) z/|z|`, Hessian, recession slope and convex conjugate.
//! - [`domain`]: 1D intervals and masked 2D rectangles with a bilinear
//!   cell-centre gradient, its exact adjoint, norms and discrete curl.
//! - [`solver`]: damped Newton for the viscous approximations
//!   `𝔉ₖ = 𝔉 + (2k)⁻¹∫|∇w|²` with continuation in `k`.
//! - [`duality`]: dual certificates built from the primal iterate and
//!   coercivity classification.
//! - [`analysis`]: curl tests, potential reconstruction, convergence
//!   forensics and the one-dimensional relaxed (BV) energy.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod banded;
pub mod domain;
pub mod duality;
mod error;
pub mod integrand;
pub mod quadrature;
pub mod solver;

pub use error::{Error, Result};
