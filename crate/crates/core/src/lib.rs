//! Dropout ensemble Kalman inversion.
//!
//! The crate provides the ensemble state and dropout mechanism
//! ([`ensemble`]), forward maps and the Tikhonov-regularized problem
//! ([`forward`]), the iteration schemes ([`schemes`]), runtime checks of the
//! collapse and convergence bounds ([`theory`]) and the query-complexity
//! adversary ([`lowerbound`]).

pub mod ensemble;
pub mod error;
pub mod forward;
pub mod linalg;
pub mod lowerbound;
pub mod rng;
pub mod schemes;
pub mod theory;

pub use error::{Error, Result};
