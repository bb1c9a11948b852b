//! Online tracking of time-varying resource-dispatch optima with
//! feasibility-preserving ADMM over a simulated star network.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coop;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod netsim;
pub mod oracle;
pub mod projection;
pub mod reference;
pub mod scenario;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
pub use model::{DispatchInstance, Matrix, NodeObjective, ObjectiveKind, Scenario, Vector};
