//! Bidirectional generative inverse design with conditional flow matching.
//!
//! The crate provides a small dense-network engine ([`nn`]), standard and
//! diagonal conditional flow matching ([`flow`]) with Euler synthesis and
//! analysis ([`ode`]), four uncertainty scores ([`uq`]), an affine-coupling
//! INN baseline ([`inn`]), the DTLZ2 benchmark ([`bench`]) and the
//! evaluation harness ([`eval`]).

pub mod bench;
pub mod error;
pub mod eval;
pub mod flow;
pub mod inn;
pub mod matrix;
pub mod nn;
pub mod persist;
pub mod ode;
pub mod report;
pub mod rng;
pub mod uq;

pub use error::{Error, Result};
pub use matrix::Matrix;
