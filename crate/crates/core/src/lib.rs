//! Joint learning and grid verification of barrier and Lyapunov-like
//! certificates for nonlinear control systems.

// `!(a < b)` is used on purpose so that NaN fails every check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certify;
pub mod cli;
pub mod config;
pub mod diffnet;
pub mod error;
pub mod par;
pub mod sets;
pub mod sim;
pub mod systems;
pub mod verify;

pub use error::{Error, Result};
