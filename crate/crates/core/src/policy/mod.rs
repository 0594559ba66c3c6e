//! The autoregressive rewriting policy: a small decoder-only transformer
//! over framed `BOS x SEP x' EOS` sequences, with exact hand-written
//! gradients, optional low-rank adapters on the attention projections, and a
//! scalar value head for reinforcement learning.

mod net;
mod ops;
mod params;
pub mod tensor;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ops::{
    frame, forward_logits, sample_continuation, score_actions, sequence_logprob, teacher_loss,
    teacher_loss_and_grad, value_estimate, value_regression_loss, value_regression_loss_and_grad,
    RewritePair, SampledContinuation, ScoredActions,
};
pub use params::{AdapterSpec, AdapterTarget, Grads, PolicyParameters};

pub(crate) use net::{backward, forward, log_softmax_row, softmax_row};

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid policy config: {0}")]
    ConfigInvalid(String),
    #[error("sequence of {len} tokens exceeds the {max}-token context")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("model was built without a value head")]
    ValueHeadDisabled,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("mismatched lengths: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("adapters are already attached")]
    AdaptersAlreadyAttached,
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// What a parameter set is for. The reference copy used for the drift
/// penalty stays frozen; the trainable copy is the one being optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "sft-reference")]
    SftReference,
    #[serde(rename = "trainable-policy")]
    TrainablePolicy,
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::SftReference => "sft-reference",
            Role::TrainablePolicy => "trainable-policy",
        })
    }
}

/// Architecture of the rewriting network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub max_seq: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub adapter_rank: usize,
    pub adapter_targets: Vec<AdapterTarget>,
    pub value_head: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            vocab_size: 256,
            max_seq: 64,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            adapter_rank: 4,
            adapter_targets: vec![AdapterTarget::Q, AdapterTarget::V],
            value_head: true,
        }
    }
}

impl PolicyConfig {
    /// The default desk-scale architecture over a concrete vocabulary.
    pub fn sized_for(vocab_size: usize) -> Self {
        PolicyConfig { vocab_size, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.vocab_size < 6 {
            return Err(PolicyError::ConfigInvalid(
                "vocab_size must cover the five reserved markers plus content".into(),
            ));
        }
        if self.max_seq < 4 {
            return Err(PolicyError::ConfigInvalid("max_seq must be at least 4".into()));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_layers == 0 || self.d_ff == 0 {
            return Err(PolicyError::ConfigInvalid("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(PolicyError::ConfigInvalid(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.adapter_rank == 0 {
            return Err(PolicyError::ConfigInvalid("adapter_rank must be at least 1".into()));
        }
        Ok(())
    }
}

/// How continuations are drawn from the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// 0 means greedy argmax decoding.
    pub temperature: f64,
    pub top_k: Option<usize>,
    pub max_new_tokens: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { temperature: 1.0, top_k: None, max_new_tokens: 32 }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig { temperature: 0.0, ..Default::default() }
    }
}
