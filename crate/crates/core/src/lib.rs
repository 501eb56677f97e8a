//! Desk-scale reinforcement-learning lab for autoregressive token MDPs.
//!
//! The environment is a deterministic token-level MDP: states are token
//! prefixes, actions append one token, and a binary reward is paid only when
//! the episode terminates. On top of it this crate implements:
//!
//! * softmax policies (tabular and a small MLP) with exact log-probs and
//!   hand-derived parameter gradients,
//! * three interchangeable state-value estimators: a learned value network,
//!   Monte-Carlo rollouts from intermediate states, and an exact enumeration
//!   oracle usable at tiny scale,
//! * PPO with GAE plus the Monte-Carlo credit-assignment variant that swaps
//!   the critic for per-step rollout value estimates, and the RestEM /
//!   DPO-Positive baselines,
//! * an analysis layer that scores value predictions against ground truth
//!   (MAE, 0.05-threshold accuracy, 5-way top-action identification,
//!   per-step error profiles, accuracy-vs-KL curves).
//!
//! Everything is seeded and deterministic: single-threaded runs are
//! byte-reproducible, and parallel sections draw from RNG streams derived
//! from stable (seed, purpose, index) keys so results do not depend on
//! scheduling.

pub mod acceptance;
pub mod advantage;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod error;
pub mod grad_check;
pub mod metrics;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod rollout;
pub mod runner;
pub mod trainers;
pub mod value;

pub use error::{Error, Result};
