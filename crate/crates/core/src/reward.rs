//! Composite reward for a rewrite: a toxicity score and a capped alignment
//! score averaged over generated samples, minus a policy penalty against a
//! frozen reference. Generation and scoring go through a pluggable bundle so
//! the surrogate world can be swapped for real scorers.

use rand::rngs::StdRng;
use serde::{Deserialize, Serialize};

use crate::policy::{sequence_logprob, PolicyError, PolicyParameters};
use crate::text::Prompt;

/// Failure surfaced by a scorer bundle implementation.
pub type ScorerError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("sample set is empty")]
    EmptySampleSet,
    #[error("at least one sample per prompt is required")]
    ZeroSamples,
    #[error("non-finite input")]
    NonFiniteInput,
    #[error("invalid reward config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("scorer failure: {0}")]
    Scorer(#[source] ScorerError),
}

/// One synthetic "image": a unit embedding plus bookkeeping about where it
/// came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub embedding: Vec<f64>,
    /// text of the prompt the sample was generated from
    pub prompt: String,
    /// index of this draw within its sampling loop
    pub draw: u64,
}

/// Generator plus the two scorers used during training. Implementations must
/// be safe for concurrent invocation.
pub trait ScorerBundle: Sync {
    /// Draws one sample from the generator conditioned on the rewrite.
    fn generate(&self, x_prime: &Prompt, rng: &mut StdRng) -> Result<GeneratedSample, ScorerError>;

    /// Confidence that the sample is inappropriate. Callers clamp to [0, 1].
    fn tox_confidence(&self, sample: &GeneratedSample) -> f64;

    /// Similarity between the original prompt and the sample.
    fn align_similarity(&self, x: &Prompt, sample: &GeneratedSample) -> Result<f64, ScorerError>;
}

/// How the penalty term combines the two sequence log probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyForm {
    /// beta * exp(logp_policy - logp_ref); always positive, grows fast
    Ratio,
    /// beta * (logp_policy - logp_ref); zero when the policies agree
    LogRatio,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub toxic_slope: f64,
    pub toxic_offset: f64,
    pub alignment_cap: f64,
    pub beta: f64,
    pub samples_per_prompt: usize,
    pub penalty_form: PenaltyForm,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            toxic_slope: -5.0,
            toxic_offset: 5.0,
            alignment_cap: 0.31,
            beta: 0.02,
            samples_per_prompt: 10,
            penalty_form: PenaltyForm::Ratio,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        if !(self.alignment_cap > 0.0) {
            return Err(RewardError::ConfigInvalid("alignment cap must be positive".into()));
        }
        if self.samples_per_prompt == 0 {
            return Err(RewardError::ConfigInvalid("samples per prompt must be >= 1".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(RewardError::ConfigInvalid("beta must be >= 0".into()));
        }
        Ok(())
    }
}

/// Everything that went into one reward value, kept for the metric log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub s_toxic: f64,
    pub s_alt: f64,
    pub penalty: f64,
    pub total: f64,
    pub confidences: Vec<f64>,
    pub similarities: Vec<f64>,
    pub beta: f64,
}

/// Mean over samples of (slope * confidence + offset). With the default
/// constants this maps confidence 0 to 5 and confidence 1 to 0.
pub fn toxic_score(cfg: &RewardConfig, confidences: &[f64]) -> Result<f64, RewardError> {
    if confidences.is_empty() {
        return Err(RewardError::EmptySampleSet);
    }
    let sum: f64 = confidences.iter().map(|&f| cfg.toxic_slope * f + cfg.toxic_offset).sum();
    Ok(sum / confidences.len() as f64)
}

/// Mean over samples of min(cap, similarity). The cap is one-sided: values
/// below zero pass through unclamped.
pub fn alignment_score(cfg: &RewardConfig, similarities: &[f64]) -> Result<f64, RewardError> {
    if similarities.is_empty() {
        return Err(RewardError::EmptySampleSet);
    }
    let sum: f64 = similarities.iter().map(|&s| s.min(cfg.alignment_cap)).sum();
    Ok(sum / similarities.len() as f64)
}

pub fn policy_penalty(
    logp_policy: f64,
    logp_ref: f64,
    beta: f64,
    form: PenaltyForm,
) -> Result<f64, RewardError> {
    if !logp_policy.is_finite() || !logp_ref.is_finite() {
        return Err(RewardError::NonFiniteInput);
    }
    let diff = logp_policy - logp_ref;
    Ok(match form {
        PenaltyForm::Ratio => beta * diff.exp(),
        PenaltyForm::LogRatio => beta * diff,
    })
}

/// Draws `samples_per_prompt` samples from the generator conditioned on the
/// rewrite; the same samples feed both score terms. The penalty compares the
/// rewrite's sequence log probability under the policy and the reference.
pub fn total_reward(
    x: &Prompt,
    x_prime: &Prompt,
    bundle: &dyn ScorerBundle,
    policy: &PolicyParameters,
    reference: &PolicyParameters,
    cfg: &RewardConfig,
    rng: &mut StdRng,
) -> Result<RewardBreakdown, RewardError> {
    if cfg.samples_per_prompt == 0 {
        return Err(RewardError::ZeroSamples);
    }
    let mut confidences = Vec::with_capacity(cfg.samples_per_prompt);
    let mut similarities = Vec::with_capacity(cfg.samples_per_prompt);
    for draw in 0..cfg.samples_per_prompt {
        let mut sample = bundle.generate(x_prime, rng).map_err(RewardError::Scorer)?;
        sample.draw = draw as u64;
        confidences.push(bundle.tox_confidence(&sample).clamp(0.0, 1.0));
        similarities.push(bundle.align_similarity(x, &sample).map_err(RewardError::Scorer)?);
    }
    let s_toxic = toxic_score(cfg, &confidences)?;
    let s_alt = alignment_score(cfg, &similarities)?;
    let logp_policy = sequence_logprob(policy, &x.tokens, &x_prime.tokens)?;
    let logp_ref = sequence_logprob(reference, &x.tokens, &x_prime.tokens)?;
    let penalty = policy_penalty(logp_policy, logp_ref, cfg.beta, cfg.penalty_form)?;
    Ok(RewardBreakdown {
        s_toxic,
        s_alt,
        penalty,
        total: s_toxic + s_alt - penalty,
        confidences,
        similarities,
        beta: cfg.beta,
    })
}
