//! Relativistic Brownian motion on Lorentzian model space-times (Minkowski,
//! de Sitter, anti de Sitter) and on expanding Robertson-Walker space-times.
//!
//! The crate is organised bottom-up:
//!
//! * [`spacetime`]: quadratic forms, warped metrics, Christoffel symbols and
//!   the asymptotic regime classification of a warp function.
//! * [`base_sde`]: Euler-Maruyama integration of the relativistic diffusion in
//!   chart coordinates, with mass-shell renormalisation.
//! * [`frame_flow`]: the lifted left-invariant diffusion on the isometry groups.
//! * [`iwasawa`]: NAK factorisation and the coordinate processes built from it.
//! * [`rw_sim`]: the reduced Robertson-Walker dynamics and its boundary
//!   functionals.
//! * [`boundary_stats`]: ensemble estimators and the verdict registry.
//! * [`cli_io`]: configuration, the ensemble runner and file outputs.

// `!(x > 0.0)` is the NaN-rejecting form throughout
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod base_sde;
pub mod boundary_stats;
pub mod cli_io;
pub mod error;
pub mod frame_flow;
pub mod iwasawa;
pub mod linalg;
pub mod rng;
pub mod rw_sim;
pub mod spacetime;

pub use error::{Error, Result};
