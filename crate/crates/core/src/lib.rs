//! Feedback-driven bi-objective reinforcement learning for small
//! autoregressive policies.
//!
//! The crate is organised bottom-up:
//!
//! * [`policy`]: token policies with exact log-probabilities and closed-form
//!   gradients (no autodiff).
//! * [`envs`]: rule-based environments whose verifiers return a reward plus
//!   error-localised feedback.
//! * [`sampling`]: two-round rollout collection (initial exploration, then
//!   feedback-augmented prompts) and group assembly.
//! * [`objectives`]: group-normalised advantages, importance ratios and the
//!   clipped EPA / ECC surrogates with analytic gradients.
//! * [`trainer`]: the per-step update protocols for FBOS and its baselines.
//! * [`metrics`]: pass-rate formulas and validation runs.
//! * [`harness`]: config files, seeded multi-repeat runs, CSV output and
//!   run comparison.
//! * [`verify`]: finite-difference and invariant suites shared by the CLI
//!   and the test targets.

pub mod envs;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod objectives;
pub mod optimizer;
pub mod policy;
pub mod rng;
pub mod sampling;
pub mod trainer;
pub mod verify;
pub mod vocab;

pub use error::{Error, Result};
