//! Navigation-aware token pruning.
//!
//! The crate bundles a small multi-head self-attention encoder that exposes
//! per-layer attention and importance scores, the pruning strategies that run
//! inside it (background pruning, backtracking pruning, vocabulary priority
//! pruning and four general-purpose baselines), an offline builder for the
//! vocabulary of navigation-irrelevant words, a seeded generator of synthetic
//! navigation worlds, a feature-matching navigation agent, an analytic FLOP
//! model and the sweep harness that ties them together.

pub mod agent;
pub mod bench;
pub mod encoder;
pub mod flops;
pub mod pruning;
pub mod rng;
pub mod vocabulary;
pub mod worldgen;

mod error;

pub use error::{Error, Result};
