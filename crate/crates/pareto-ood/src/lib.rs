//! Preference-aware multi-objective training for out-of-distribution
//! generalization, at desk scale.
//!
//! The crate has three layers:
//!
//! * **Analytic laboratory** ([`twobit`]): closed-form population losses,
//!   invariance-constraint residuals, root solving for invariant sets, and
//!   brute-force Pareto scans over two-bit environments.
//! * **Sampled pipeline** ([`data`], [`nn`], [`objectives`], [`trainer`]):
//!   synthetic environment samplers, a small dense network with exact
//!   gradients, the (ERM, IRMv1 penalty, V-REx) objective assembly, and a
//!   two-phase trainer whose balance phase reweights objective gradients
//!   through a preference-aware LP ([`epo`]).
//! * **Selection** ([`selection`]): scoring logged run histories by
//!   preference-weighted loss and an exact-Pareto satisfaction metric.

pub mod data;
pub mod epo;
pub mod error;
pub mod linalg;
pub mod nn;
pub mod objectives;
pub mod selection;
pub mod trainer;
pub mod twobit;

pub use error::{Error, Result};
