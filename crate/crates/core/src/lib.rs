//! Safe boundary control of a hyperbolic PDE system sandwiched between a
//! strict-feedback actuator ODE and a linear distal ODE.

// Negated float comparisons reject NaN; index loops mirror the stencils.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::type_complexity)]

pub mod config;
pub mod controller;
pub mod diagnostics;
pub mod error;
pub mod filter;
pub mod harness;
pub mod identifier;
pub mod kernels;
pub mod linalg;
pub mod params;
pub mod plant;
pub mod quad;
pub mod special;

pub use error::{Error, Result};
