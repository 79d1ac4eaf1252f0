//! Strong-error laboratory for Milstein-type schemes on SDEs
//! `dX = b(X) dt + σ(X) dW` with Hölder-continuous drift.
//!
//! All schemes read their noise from a shared dyadic [`brownian::BrownianLattice`],
//! so runs at different resolutions are pathwise coupled and strong errors can
//! be measured against a fine-level reference on the same lattice.

pub mod analysis;
pub mod brownian;
pub mod coefficients;
pub mod error;
pub mod functionals;
pub mod harness;
pub mod schemes;

pub use error::{Error, Result};
