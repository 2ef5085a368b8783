//! Conservative finite-volume solvers for 1D hyperbolic conservation laws:
//! classical WENO5 and its learned variants, in which a hypernetwork generates
//! a per-cell network that predicts the reconstruction weights (optionally
//! paired with a learned interface flux).

pub mod autodiff;
pub mod benchmarks;
pub mod error;
pub mod grid;
pub mod io;
pub mod networks;
pub mod physics;
pub mod scheme;
pub mod stepper;
pub mod training;
pub mod weno;

pub use error::{Error, Result};
