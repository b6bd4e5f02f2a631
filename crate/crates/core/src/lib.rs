// Frozen oracle constants in the test suites carry their full binary64
// decimal expansions on purpose.
#![allow(clippy::excessive_precision)]

//! Resource planning for two-stage edge learning: centralized pre-training
//! on an edge server followed by federated fine-tuning across devices.
//!
//! The crate evaluates the closed-form delay, energy, and convergence-bound
//! models for any allocation, solves the bound-minimization problem with a
//! two-dimensional search over round counts around a successive-convex-
//! approximation inner solver, and verifies its own results against
//! independent replays, exhaustive grid oracles, and a synthetic
//! quadratic-task gradient-descent emulator.

pub mod bound;
pub mod config;
pub mod error;
pub mod metrics;
pub mod planner;
pub mod presets;
pub mod sim;
pub mod solver;
pub mod testutil;

pub use error::{Error, Result};
