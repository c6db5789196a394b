//! Handover mobility prediction with latent recurrent-state transfer.
//!
//! The crate models a radio access network as a dynamic heterogeneous graph,
//! maintains a per-UE recurrent state over it, compresses that state to a
//! 128-byte latent at handover, transports it as an Xn payload, and
//! re-projects it into the target cell's context. Rule-based (A3/A5) and
//! state-reset baselines plus a metric suite with bootstrap confidence
//! intervals round out the toolkit.

pub mod error;
pub mod trace;
pub mod rules;
pub mod synthgen;
pub mod perturb;
pub mod graph;
pub mod diffcore;
pub mod model;
pub mod xn;
pub mod trainer;
pub mod eval;

pub use error::{Error, Result};
