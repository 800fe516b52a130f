//! Policy-gradient engine and experiment harness built around control
//! variates for gradient variance reduction: a scalar state baseline, a
//! layer-wise baseline (one output per parameter tensor), and a full
//! coordinate-wise baseline (one output per parameter).
//!
//! The crate provides the numeric substrate (per-example MLP gradients with
//! explicit tapes), Gaussian and softmax policies, small self-contained
//! environments including an exactly enumerable finite MDP, closed-form
//! optimal baselines and variance diagnostics, a fitted vector-valued
//! baseline, a PPO variant whose surrogate is clipped per coordinate, and a
//! CLI harness for the variance case study, training runs, and sweeps.

pub mod baseline_fit;
pub mod chain_oracle;
pub mod envs;
pub mod error;
pub mod estimators;
pub mod gradcheck;
pub mod harness;
pub mod linalg;
pub mod nn;
pub mod opt;
pub mod policy;
pub mod ppo;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
