//! Library for turning toxic image prompts into safe ones: dataset
//! construction, supervised fine-tuning of a small rewriting policy,
//! reinforcement learning against a toxicity/alignment reward, and
//! evaluation.

pub mod eval;
pub mod foundry;
pub mod policy;
pub mod ppo;
pub mod reward;
pub mod rng;
pub mod sft;
pub mod text;
pub mod toyworld;
