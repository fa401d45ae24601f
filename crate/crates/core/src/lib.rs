//! Retrieval-augmented address rewriting over a synthetic geography, with a
//! small autoregressive policy trained by supervised fine-tuning and aligned
//! with PPO against a geocoding-based composite reward.

pub mod address;
pub mod corruptor;
pub mod datasets;
pub mod embedder;
pub mod error;
pub mod eval;
pub mod nn;
pub mod policy;
pub mod ppo;
pub mod retriever;
pub mod reward;
pub mod rng;
pub mod world;

pub use error::{Error, Result};
