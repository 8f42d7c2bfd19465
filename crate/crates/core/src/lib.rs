//! Pseudometric learning for offline reinforcement learning.
//!
//! The crate computes a reward-based pseudometric over state-action pairs
//! (exactly on tabular MDPs, approximately with Siamese networks), turns it
//! into a nearest-neighbour lookup bonus, and trains a bonus-regularized
//! deterministic actor-critic from a fixed dataset.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::type_complexity)]

pub mod agent;
pub mod bonus;
pub mod container;
pub mod dataset;
pub mod env;
pub mod error;
pub mod figures;
pub mod kdtree;
pub mod metric_approx;
pub mod metric_exact;
pub mod nn;
pub mod rng;
mod scalar;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Single-precision instantiations used by the pipeline.
pub type Dataset = dataset::TransitionDataset<f32>;
pub type Metric = metric_approx::EmbedderPair<f32>;
pub type Index = bonus::NeighborIndex<f32>;
pub type Agent = agent::AgentParams<f32>;
pub type PointMass = env::ContinuousEnv<f32>;
pub type Grid = env::Gridworld<f32>;

/// Double-precision instantiations used for exact computations and checks.
pub type TabularMdp64 = env::TabularMdp<f64>;
pub type Pseudometric64 = metric_exact::TabularPseudometric<f64>;
pub type Dataset64 = dataset::TransitionDataset<f64>;
pub type Metric64 = metric_approx::EmbedderPair<f64>;
