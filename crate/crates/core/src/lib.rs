//! Exact tabular laboratory for self-improving robust preference optimization
//! (SRPO) and the DPO/IPO baselines.
//!
//! Everything here works on finite context and action sets, so expectations
//! are computed by enumeration and the closed-form optima are available as
//! oracles for the trained policies.
//!
//! Module map:
//! - [`prefcore`]: action spaces, preference models, tabular policies.
//! - [`analytic`]: closed-form optima, preference identities, the min-max objective.
//! - [`losses`]: population and sampled losses with analytic logit gradients.
//! - [`optim`]: Adam and the minibatch / full-gradient training loops.
//! - [`datagen`]: Bernoulli-labelled dataset generation and text persistence.
//! - [`experiments`]: configuration, the behavior-policy robustness study,
//!   the α sweep, N-revision sampling, CSV output and the CLI.

pub mod analytic;
pub mod datagen;
mod error;
pub mod experiments;
mod fsutil;
pub mod losses;
pub mod optim;
pub mod prefcore;

pub use error::{Error, Result};
