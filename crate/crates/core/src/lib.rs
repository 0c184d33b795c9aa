//! Promised-utility mechanisms for repeated allocation of a single resource
//! without money.
//!
//! The crate builds incentive-compatible dynamic allocation rules that track a
//! promised continuation utility per agent, checks them exactly on finite
//! discrete instances, and measures how fast the achievable welfare approaches
//! the full-information optimum as the discount factor tends to one or the
//! horizon grows.
//!
//! Module map:
//! - [`dist`]: discrete utility distributions, instances, joint enumeration.
//! - [`geometry`]: support function of the full-information region, ball
//!   membership, agent classification and pruning.
//! - [`realize`]: allocation tables and the "realize this utility vector" solver.
//! - [`mechanism`]: promise coupling, the ball mechanism and its verifiers,
//!   finite-horizon schedules.
//! - [`rates`]: rate functions, max flow, slope fitting.
//! - [`sim`]: exact and Monte Carlo evaluation, deviation search, sweeps.

pub mod dist;
pub mod error;
pub mod geometry;
pub mod mechanism;
pub mod rates;
pub mod realize;
pub mod sim;

pub use dist::{DiscreteDist, InstanceFile, JointSupport, UtilityProfile};
pub use error::{Error, Result};

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}
