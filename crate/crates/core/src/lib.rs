//! Adaptive vision-enhanced preference optimization at desk scale.
//!
//! The crate is split by role:
//!
//! - [`pref_math`]: implicit rewards, pairwise and Plackett-Luce preference
//!   probabilities, the adaptive three-way loss, its gradient gate and the
//!   adaptive rejected-sample weights.
//! - [`policy`]: a log-linear conditional token model with exact
//!   log-probabilities and analytic gradients, plus checkpoint IO.
//! - [`scene_world`]: a synthetic grid world, its renderer, the
//!   tag / detect / segment / remove / score cascade that builds
//!   vision-rejected images, and the JSON-lines dataset format.
//! - [`trainer`]: batched gradient descent over preference records with
//!   three strategies and per-step dynamics logging.
//! - [`eval`]: a toy hallucination benchmark (response / mention rates,
//!   CHAIR, presence probes).
//! - [`config`]: the flat `key=value` run configuration.

pub mod config;
pub mod error;
pub mod eval;
pub mod policy;
pub mod pref_math;
pub mod scene_world;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
