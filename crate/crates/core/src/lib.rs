//! Variance-informed rollout allocation.
//!
//! The pipeline predicts per-prompt success probabilities with a recursive
//! Gaussian-process belief over prompt embeddings, converts them into
//! gradient-variance coefficients, and splits a fixed rollout budget across a
//! mini-batch so that the total predicted gradient variance is minimal.
//!
//! * [`prompt_space`] – prompt embeddings, RBF kernel, median-heuristic bandwidth.
//! * [`belief`] – latent GP mean and its recursive conditioning update.
//! * [`variance`] – closed-form gradient variances and allocation coefficients.
//! * [`allocator`] – KKT/bisection solver, greedy integer rounding, baselines.
//! * [`stats`] – special functions and the assumption tests.
//! * [`simulator`] – synthetic drifting worlds and strategy replay.
//! * [`service`] – session-scoped plan/observe protocol (HTTP with `server`).

pub mod allocator;
pub mod belief;
pub mod error;
pub mod io;
pub mod prompt_space;
pub mod service;
pub mod simulator;
pub mod stats;
pub mod variance;

pub use allocator::{AllocationPlan, AllocationProblem};
pub use belief::{BatchObservation, BeliefState, Link};
pub use error::{ErrorCode, Result, VipError};
pub use prompt_space::{KernelMatrix, PromptSet};
pub use variance::EstimatorFamily;

/// Crate version reported by the service health endpoint and the FFI layer.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
