//! Peer-to-peer electricity market clearing.
//!
//! The engine clears a bilateral producer-consumer market by dual
//! decomposition with optional Nesterov-style price extrapolation, prunes
//! trading partners by consumer preference, evaluates linearized radial-grid
//! constraints, and validates everything against a centralized social-welfare
//! solver.

pub mod clearing;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod instance;
pub mod model;
pub mod oracle;
pub mod selection;
pub mod subproblem;

pub use error::{Error, Result};
