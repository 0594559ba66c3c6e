//! Reinforcement stage: collects rewrites from the trainable policy, scores
//! them with the composite reward, and optimizes the clipped surrogate
//! objective with generalized advantage estimation against a frozen
//! reference copy.

use serde::{Deserialize, Serialize};

use crate::foundry::DatasetSplits;
use crate::policy::tensor::Mat;
use crate::policy::{
    backward, forward, log_softmax_row, sample_continuation, score_actions, softmax_row,
    DecodeConfig, Grads, PolicyError, PolicyParameters, Role,
};
use crate::reward::{
    alignment_score, toxic_score, PenaltyForm, RewardBreakdown, RewardConfig, RewardError,
    ScorerBundle,
};
use crate::sft::{optimizer_step, AdamState, SftError};
use crate::text::{Prompt, TokenId, Vocabulary, BOS, PAD, SEP};

#[derive(Debug, thiserror::Error)]
pub enum PpoError {
    #[error("no prompts in the reinforcement split")]
    EmptyDataset,
    #[error("dataset has raw text but empty token ids; encode it against a vocabulary first")]
    UnencodedData,
    #[error("rollout collection was given no prompts")]
    EmptyPromptSet,
    #[error("expected parameters tagged {expected}, got {found}")]
    WrongRole { expected: Role, found: Role },
    #[error("non-finite probability ratio at token {index}")]
    NonFiniteRatio { index: usize },
    #[error("rollout advantages do not match its actions; run gae first")]
    AdvantageShape,
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Optim(#[from] SftError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub learning_rate: f64,
    /// rollouts per backward micro-batch; with `accumulation` it also sets
    /// how many prompts feed one optimizer step
    pub batch_size: usize,
    pub accumulation: usize,
    /// passes over the reinforcement split
    pub epochs: usize,
    /// weight of the reference-drift penalty
    pub beta: f64,
    pub clip_epsilon: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub value_coef: f64,
    /// optimizer steps taken on each collected rollout group
    pub inner_epochs: usize,
    pub rollouts_per_prompt: usize,
    /// images drawn per reward evaluation
    pub samples_per_reward: usize,
    pub penalty_form: PenaltyForm,
    pub max_new_tokens: usize,
    /// train low-rank adapters and the value head only; otherwise all
    /// parameters are trainable
    pub use_adapters: bool,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.9e-5,
            batch_size: 4,
            accumulation: 4,
            epochs: 1,
            beta: 0.02,
            clip_epsilon: 0.2,
            gamma: 1.0,
            gae_lambda: 0.95,
            value_coef: 0.5,
            inner_epochs: 4,
            rollouts_per_prompt: 1,
            samples_per_reward: 10,
            penalty_form: PenaltyForm::LogRatio,
            max_new_tokens: 16,
            use_adapters: true,
            seed: 7,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(PpoError::ConfigInvalid("learning_rate must be positive and finite".into()));
        }
        if self.batch_size == 0 || self.accumulation == 0 {
            return Err(PpoError::ConfigInvalid("batch_size and accumulation must be at least 1".into()));
        }
        if self.epochs == 0 || self.inner_epochs == 0 {
            return Err(PpoError::ConfigInvalid("epochs and inner_epochs must be at least 1".into()));
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(PpoError::ConfigInvalid("clip_epsilon must lie in (0, 1)".into()));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(PpoError::ConfigInvalid("gamma must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(PpoError::ConfigInvalid("gae_lambda must lie in [0, 1]".into()));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(PpoError::ConfigInvalid("beta must be non-negative and finite".into()));
        }
        if !(self.value_coef.is_finite() && self.value_coef >= 0.0) {
            return Err(PpoError::ConfigInvalid("value_coef must be non-negative and finite".into()));
        }
        if self.rollouts_per_prompt == 0 || self.samples_per_reward == 0 {
            return Err(PpoError::ConfigInvalid(
                "rollouts_per_prompt and samples_per_reward must be at least 1".into(),
            ));
        }
        if self.max_new_tokens == 0 {
            return Err(PpoError::ConfigInvalid("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }

    /// The reward settings this trainer actually optimizes: shared shaping
    /// constants from `base`, drift and sampling settings from the trainer.
    pub fn merged_reward(&self, base: &RewardConfig) -> RewardConfig {
        RewardConfig {
            beta: self.beta,
            samples_per_prompt: self.samples_per_reward,
            penalty_form: self.penalty_form,
            ..base.clone()
        }
    }
}

/// One sampled rewrite with everything needed to replay it under new
/// parameters: per-action log probabilities at sampling time (policy and
/// frozen reference), sampling-time value estimates, and the shaped
/// per-action reward stream.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub prompt: Prompt,
    pub rewrite: Prompt,
    pub actions: Vec<TokenId>,
    pub logprobs_sampled: Vec<f64>,
    pub logprobs_ref: Vec<f64>,
    pub values: Vec<f64>,
    pub reward: RewardBreakdown,
    /// per-action shaped reward: drift penalty each step, terminal score on
    /// the last action
    pub reward_stream: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub rollouts: Vec<Rollout>,
}

fn strip_pad(tokens: &[TokenId]) -> Vec<TokenId> {
    tokens.iter().copied().filter(|&t| t != PAD).collect()
}

/// Samples `rollouts_per_prompt` rewrites for every prompt and scores them.
/// The drift penalty is shaped per token so that, in log-ratio form, the
/// stream sums to exactly the sequence-level penalty of the breakdown.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    policy: &PolicyParameters,
    reference: &PolicyParameters,
    bundle: &dyn ScorerBundle,
    vocab: &Vocabulary,
    prompts: &[Prompt],
    cfg: &PpoConfig,
    reward_cfg: &RewardConfig,
    rng: &mut rand::rngs::StdRng,
) -> Result<RolloutBatch, PpoError> {
    if prompts.is_empty() {
        return Err(PpoError::EmptyPromptSet);
    }
    if !policy.config().value_head {
        return Err(PpoError::Policy(PolicyError::ValueHeadDisabled));
    }
    reward_cfg.validate()?;
    let decode = DecodeConfig {
        temperature: 1.0,
        top_k: None,
        max_new_tokens: cfg.max_new_tokens,
    };

    let mut rollouts = Vec::with_capacity(prompts.len() * cfg.rollouts_per_prompt);
    for prompt in prompts {
        for _ in 0..cfg.rollouts_per_prompt {
            let sample = sample_continuation(policy, vocab, &prompt.tokens, &decode, rng)?;
            let scored = score_actions(policy, &prompt.tokens, &sample.actions)?;
            let reference_scored = score_actions(reference, &prompt.tokens, &sample.actions)?;

            let penalties: Vec<f64> = sample
                .logprobs
                .iter()
                .zip(&reference_scored.logprobs)
                .map(|(lp, lr)| match reward_cfg.penalty_form {
                    PenaltyForm::LogRatio => lp - lr,
                    PenaltyForm::Ratio => (lp - lr).exp(),
                })
                .collect();

            let (s_toxic, s_alt, confidences, similarities) = if sample.prompt.tokens.is_empty() {
                (0.0, 0.0, Vec::new(), Vec::new())
            } else {
                let mut confidences = Vec::with_capacity(reward_cfg.samples_per_prompt);
                let mut similarities = Vec::with_capacity(reward_cfg.samples_per_prompt);
                for draw in 0..reward_cfg.samples_per_prompt {
                    let mut image =
                        bundle.generate(&sample.prompt, rng).map_err(RewardError::Scorer)?;
                    image.draw = draw as u64;
                    confidences.push(bundle.tox_confidence(&image).clamp(0.0, 1.0));
                    similarities.push(
                        bundle
                            .align_similarity(prompt, &image)
                            .map_err(RewardError::Scorer)?,
                    );
                }
                let s_toxic = toxic_score(reward_cfg, &confidences)?;
                let s_alt = alignment_score(reward_cfg, &similarities)?;
                (s_toxic, s_alt, confidences, similarities)
            };

            let penalty = reward_cfg.beta * penalties.iter().sum::<f64>();
            let total = s_toxic + s_alt - penalty;
            let mut reward_stream: Vec<f64> =
                penalties.iter().map(|p| -reward_cfg.beta * p).collect();
            if let Some(last) = reward_stream.last_mut() {
                *last += s_toxic + s_alt;
            }

            rollouts.push(Rollout {
                prompt: prompt.clone(),
                rewrite: sample.prompt,
                actions: sample.actions,
                logprobs_sampled: sample.logprobs,
                logprobs_ref: reference_scored.logprobs,
                values: scored.values,
                reward: RewardBreakdown {
                    s_toxic,
                    s_alt,
                    penalty,
                    total,
                    confidences,
                    similarities,
                    beta: reward_cfg.beta,
                },
                reward_stream,
                advantages: Vec::new(),
                returns: Vec::new(),
            });
        }
    }
    Ok(RolloutBatch { rollouts })
}

/// Fills in advantages and returns. The episode ends after the last action,
/// so the bootstrap value past the end is zero.
pub fn compute_gae(batch: &mut RolloutBatch, gamma: f64, lambda: f64) {
    for rollout in &mut batch.rollouts {
        let t_len = rollout.actions.len();
        debug_assert_eq!(rollout.values.len(), t_len);
        debug_assert_eq!(rollout.reward_stream.len(), t_len);
        let mut advantages = vec![0.0; t_len];
        let mut gae = 0.0;
        for t in (0..t_len).rev() {
            let next_value = if t + 1 < t_len { rollout.values[t + 1] } else { 0.0 };
            let delta = rollout.reward_stream[t] + gamma * next_value - rollout.values[t];
            gae = delta + gamma * lambda * gae;
            advantages[t] = gae;
        }
        rollout.returns = advantages.iter().zip(&rollout.values).map(|(a, v)| a + v).collect();
        rollout.advantages = advantages;
    }
}

/// The clipped objective for one token: returns the surrogate value and
/// whether gradient flows through the ratio (the unclipped branch is the
/// minimum).
pub fn clipped_objective(rho: f64, advantage: f64, epsilon: f64) -> (f64, bool) {
    let unclipped = rho * advantage;
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon) * advantage;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct PpoLossParts {
    pub policy: f64,
    pub value: f64,
}

impl PpoLossParts {
    pub fn total(&self) -> f64 {
        self.policy + self.value
    }
}

fn normalized_advantages(rollouts: &[Rollout]) -> Result<Vec<Vec<f64>>, PpoError> {
    let mut all = Vec::new();
    for rollout in rollouts {
        if rollout.advantages.len() != rollout.actions.len()
            || rollout.returns.len() != rollout.actions.len()
        {
            return Err(PpoError::AdvantageShape);
        }
        all.extend_from_slice(&rollout.advantages);
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let denom = var.sqrt() + 1e-8;
    Ok(rollouts
        .iter()
        .map(|r| r.advantages.iter().map(|a| (a - mean) / denom).collect())
        .collect())
}

fn ppo_loss_inner(
    params: &PolicyParameters,
    rollouts: &[Rollout],
    cfg: &PpoConfig,
    mut grads: Option<&mut Grads>,
) -> Result<PpoLossParts, PpoError> {
    if rollouts.is_empty() {
        return Err(PpoError::EmptyPromptSet);
    }
    let config = params.config();
    let normalized = normalized_advantages(rollouts)?;
    let n_total: usize = rollouts.iter().map(|r| r.actions.len()).sum();
    let scale = 1.0 / n_total as f64;

    let mut parts = PpoLossParts::default();
    for (rollout, adv_hat) in rollouts.iter().zip(&normalized) {
        let x = strip_pad(&rollout.prompt.tokens);
        let t_len = rollout.actions.len();
        let mut seq = Vec::with_capacity(x.len() + t_len + 1);
        seq.push(BOS);
        seq.extend_from_slice(&x);
        seq.push(SEP);
        let prefix = seq.len();
        seq.extend_from_slice(&rollout.actions[..t_len - 1]);
        if seq.len() + 1 > config.max_seq {
            return Err(PpoError::Policy(PolicyError::SequenceTooLong {
                len: seq.len() + 1,
                max: config.max_seq,
            }));
        }

        let fwd = forward(params, &seq)?;
        let values = fwd.values.as_ref().ok_or(PolicyError::ValueHeadDisabled)?;
        let mut d_logits =
            grads.is_some().then(|| Mat::zeros(seq.len(), config.vocab_size));
        let mut d_values = grads.is_some().then(|| vec![0.0; seq.len()]);

        for t in 0..t_len {
            let row = prefix - 1 + t;
            let action = rollout.actions[t] as usize;
            let logp_row = log_softmax_row(fwd.logits.row(row));
            let lp_new = logp_row[action];
            let rho = (lp_new - rollout.logprobs_sampled[t]).exp();
            if !rho.is_finite() {
                return Err(PpoError::NonFiniteRatio { index: t });
            }
            let (objective, through_ratio) = clipped_objective(rho, adv_hat[t], cfg.clip_epsilon);
            parts.policy -= objective * scale;

            let v = values[row];
            let err = v - rollout.returns[t];
            parts.value += cfg.value_coef * err * err * scale;

            if let (Some(d_logits), Some(d_values)) = (d_logits.as_mut(), d_values.as_mut()) {
                if through_ratio {
                    let dlp = -adv_hat[t] * rho * scale;
                    let probs = softmax_row(fwd.logits.row(row));
                    let out = d_logits.row_mut(row);
                    for (j, p) in probs.iter().enumerate() {
                        out[j] -= dlp * p;
                    }
                    out[action] += dlp;
                }
                d_values[row] = 2.0 * cfg.value_coef * err * scale;
            }
        }

        if let Some(acc) = grads.as_deref_mut() {
            backward(params, &fwd, d_logits.as_ref(), d_values.as_deref(), acc);
        }
    }
    Ok(parts)
}

/// Scalar surrogate loss of the parameters on a collected batch.
pub fn ppo_clip_loss(
    params: &PolicyParameters,
    rollouts: &[Rollout],
    cfg: &PpoConfig,
) -> Result<f64, PpoError> {
    ppo_loss_inner(params, rollouts, cfg, None).map(|p| p.total())
}

/// Loss parts plus gradients over every trainable tensor.
pub fn ppo_loss_and_grad(
    params: &PolicyParameters,
    rollouts: &[Rollout],
    cfg: &PpoConfig,
) -> Result<(PpoLossParts, Grads), PpoError> {
    let mut grads = Grads::zeros_like(params);
    let parts = ppo_loss_inner(params, rollouts, cfg, Some(&mut grads))?;
    Ok((parts, grads))
}

/// One optimizer step of the training log. Reward statistics describe the
/// rollout group the step trained on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PpoLogLine {
    pub step: u64,
    pub mean_total_reward: f64,
    pub mean_s_toxic: f64,
    pub mean_s_alt: f64,
    pub mean_penalty: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    /// mean over tokens of the sampling-time policy/reference log ratio
    pub mean_log_ratio: f64,
    pub mean_abs_log_ratio: f64,
}

fn mean<I: Iterator<Item = f64>>(iter: I) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in iter {
        sum += v;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Runs the reinforcement stage from a frozen supervised reference: clones
/// it, optionally attaches low-rank adapters, and optimizes the clipped
/// surrogate over the reinforcement split. Returns the trained policy and
/// the per-step log.
pub fn train_ppo(
    sft_params: &PolicyParameters,
    vocab: &Vocabulary,
    split: &DatasetSplits,
    bundle: &dyn ScorerBundle,
    cfg: &PpoConfig,
    reward_base: &RewardConfig,
) -> Result<(PolicyParameters, Vec<PpoLogLine>), PpoError> {
    cfg.validate()?;
    if sft_params.role != Role::SftReference {
        return Err(PpoError::WrongRole { expected: Role::SftReference, found: sft_params.role });
    }
    if split.ppo.is_empty() {
        return Err(PpoError::EmptyDataset);
    }
    if split.ppo.iter().any(|p| p.tokens.is_empty()) {
        return Err(PpoError::UnencodedData);
    }
    let reward_cfg = cfg.merged_reward(reward_base);
    reward_cfg.validate()?;

    let reference = sft_params;
    let mut policy = sft_params.clone();
    policy.role = Role::TrainablePolicy;
    if cfg.use_adapters {
        let config = policy.config().clone();
        policy.attach_adapters(
            config.adapter_rank,
            &config.adapter_targets,
            &mut crate::rng::stream(cfg.seed, "ppo-adapter"),
        )?;
    }
    let mut adam = AdamState::new(&policy);

    let group_prompts = cfg.batch_size * cfg.accumulation;
    let mut log = Vec::new();
    let mut step = 0u64;
    let mut group_counter = 0u64;
    for epoch in 0..cfg.epochs as u64 {
        let mut order: Vec<usize> = (0..split.ppo.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut crate::rng::indexed_stream(cfg.seed, "ppo-shuffle", epoch));
        }
        for chunk in order.chunks(group_prompts) {
            let prompts: Vec<Prompt> = chunk.iter().map(|&i| split.ppo[i].clone()).collect();
            let mut rollout_rng = crate::rng::indexed_stream(cfg.seed, "ppo-rollout", group_counter);
            group_counter += 1;

            let mut batch = collect_rollouts(
                &policy,
                reference,
                bundle,
                vocab,
                &prompts,
                cfg,
                &reward_cfg,
                &mut rollout_rng,
            )?;
            compute_gae(&mut batch, cfg.gamma, cfg.gae_lambda);

            let mean_total_reward = mean(batch.rollouts.iter().map(|r| r.reward.total));
            let mean_s_toxic = mean(batch.rollouts.iter().map(|r| r.reward.s_toxic));
            let mean_s_alt = mean(batch.rollouts.iter().map(|r| r.reward.s_alt));
            let mean_penalty = mean(batch.rollouts.iter().map(|r| r.reward.penalty));
            let diffs: Vec<f64> = batch
                .rollouts
                .iter()
                .flat_map(|r| {
                    r.logprobs_sampled.iter().zip(&r.logprobs_ref).map(|(lp, lr)| lp - lr)
                })
                .collect();
            let mean_log_ratio = mean(diffs.iter().copied());
            let mean_abs_log_ratio = mean(diffs.iter().map(|d| d.abs()));

            for _ in 0..cfg.inner_epochs {
                let (parts, grads) = ppo_loss_and_grad(&policy, &batch.rollouts, cfg)?;
                optimizer_step(&mut adam, &mut policy, &grads, cfg.learning_rate)?;
                step += 1;
                log.push(PpoLogLine {
                    step,
                    mean_total_reward,
                    mean_s_toxic,
                    mean_s_alt,
                    mean_penalty,
                    policy_loss: parts.policy,
                    value_loss: parts.value,
                    mean_log_ratio,
                    mean_abs_log_ratio,
                });
            }
        }
    }
    Ok((policy, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{teacher_loss_and_grad, PolicyConfig, RewritePair};
    use crate::text::Vocabulary;
    use crate::toyworld::ToyWorld;
    use rand::Rng;

    fn world_setup() -> (ToyWorld, Vocabulary, Vec<Prompt>) {
        let world = ToyWorld::world_v1();
        let mut corpus: Vec<String> = world.tokens.iter().map(|t| t.word.clone()).collect();
        corpus.sort();
        let vocab = Vocabulary::build(&corpus, corpus.len() + 8).unwrap();
        let prompts: Vec<Prompt> = [
            "gory portrait in the library",
            "menacing statue by the bridge",
            "obscene painting near the harbor",
            "woeful sunset over the village",
            "lawless market in the city",
        ]
        .iter()
        .map(|s| {
            let mut p = Prompt::unencoded(*s);
            p.reencode(&vocab);
            p
        })
        .collect();
        (world, vocab, prompts)
    }

    fn policy_for(vocab: &Vocabulary, seed: u64) -> PolicyParameters {
        let config = PolicyConfig {
            vocab_size: vocab.len(),
            max_seq: 48,
            d_model: 16,
            n_heads: 2,
            n_layers: 1,
            d_ff: 32,
            adapter_rank: 2,
            ..Default::default()
        };
        PolicyParameters::init(&config, &mut crate::rng::stream(seed, "ppo-test-init")).unwrap()
    }

    fn quick_cfg() -> PpoConfig {
        PpoConfig {
            samples_per_reward: 2,
            max_new_tokens: 8,
            ..Default::default()
        }
    }

    #[test]
    fn gae_telescopes_when_gamma_and_lambda_are_one() {
        let mut rng = crate::rng::stream(3, "gae-test");
        let t_len = 7;
        let rewards: Vec<f64> = (0..t_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..t_len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut batch = RolloutBatch {
            rollouts: vec![Rollout {
                prompt: Prompt::unencoded("x"),
                rewrite: Prompt::unencoded("y"),
                actions: vec![5; t_len],
                logprobs_sampled: vec![0.0; t_len],
                logprobs_ref: vec![0.0; t_len],
                values: values.clone(),
                reward: RewardBreakdown {
                    s_toxic: 0.0,
                    s_alt: 0.0,
                    penalty: 0.0,
                    total: 0.0,
                    confidences: vec![],
                    similarities: vec![],
                    beta: 0.0,
                },
                reward_stream: rewards.clone(),
                advantages: vec![],
                returns: vec![],
            }],
        };
        compute_gae(&mut batch, 1.0, 1.0);
        let rollout = &batch.rollouts[0];
        for t in 0..t_len {
            let future: f64 = rewards[t..].iter().sum();
            assert!((rollout.advantages[t] - (future - values[t])).abs() < 1e-10);
            assert!((rollout.returns[t] - future).abs() < 1e-10);
        }
    }

    #[test]
    fn gae_single_step_is_reward_minus_value() {
        let mut batch = RolloutBatch {
            rollouts: vec![Rollout {
                prompt: Prompt::unencoded("x"),
                rewrite: Prompt::unencoded("y"),
                actions: vec![2],
                logprobs_sampled: vec![0.0],
                logprobs_ref: vec![0.0],
                values: vec![0.3],
                reward: RewardBreakdown {
                    s_toxic: 0.0,
                    s_alt: 0.0,
                    penalty: 0.0,
                    total: 0.0,
                    confidences: vec![],
                    similarities: vec![],
                    beta: 0.0,
                },
                reward_stream: vec![1.5],
                advantages: vec![],
                returns: vec![],
            }],
        };
        compute_gae(&mut batch, 0.9, 0.5);
        assert!((batch.rollouts[0].advantages[0] - (1.5 - 0.3)).abs() < 1e-12);
        assert!((batch.rollouts[0].returns[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn clipped_objective_selects_the_pessimistic_branch() {
        // positive advantage: large ratios are cut off at 1 + eps
        let (obj, through) = clipped_objective(1.5, 1.0, 0.2);
        assert_eq!(obj, 1.2);
        assert!(!through);
        // negative advantage: small ratios are cut off at 1 - eps
        let (obj, through) = clipped_objective(0.5, -1.0, 0.2);
        assert_eq!(obj, -0.8);
        assert!(!through);
        // interior ratios pass through untouched
        let (obj, through) = clipped_objective(1.1, 1.0, 0.2);
        assert!((obj - 1.1).abs() < 1e-12);
        assert!(through);
        let (obj, through) = clipped_objective(0.9, -2.0, 0.2);
        assert!((obj + 1.8).abs() < 1e-12);
        assert!(through);
    }

    fn collected_batch(seed: u64) -> (PolicyParameters, RolloutBatch, PpoConfig) {
        let (world, vocab, prompts) = world_setup();
        let policy = policy_for(&vocab, seed);
        let cfg = quick_cfg();
        let reward_cfg = cfg.merged_reward(&RewardConfig::default());
        let mut rng = crate::rng::stream(seed, "ppo-test-collect");
        let mut batch = collect_rollouts(
            &policy, &policy, &world, &vocab, &prompts, &cfg, &reward_cfg, &mut rng,
        )
        .unwrap();
        compute_gae(&mut batch, cfg.gamma, cfg.gae_lambda);
        (policy, batch, cfg)
    }

    #[test]
    fn policy_term_vanishes_at_ratio_one() {
        let (policy, batch, cfg) = collected_batch(5);
        let (parts, _) = ppo_loss_and_grad(&policy, &batch.rollouts, &cfg).unwrap();
        // normalized advantages are zero-mean, and rho = 1 at the sampling
        // parameters, so the policy term collapses to -mean of them
        assert!(parts.policy.abs() < 1e-9, "policy term {}", parts.policy);
        assert!(parts.value > 0.0);
        assert!((ppo_clip_loss(&policy, &batch.rollouts, &cfg).unwrap() - parts.total()).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut policy, batch, cfg) = collected_batch(8);
        let (_, grads) = ppo_loss_and_grad(&policy, &batch.rollouts, &cfg).unwrap();

        let h = 1e-5;
        let names = policy.trainable_names();
        let mut rng = crate::rng::stream(17, "ppo-fd-pick");
        let mut checked = 0usize;
        for name in names {
            let len = policy.tensor(&name).unwrap().len();
            let picks: Vec<usize> = if len <= 6 {
                (0..len).collect()
            } else {
                (0..6).map(|_| rng.random_range(0..len)).collect()
            };
            for i in picks {
                let analytic = grads.by_name(&policy, &name).unwrap().data[i];
                let original = policy.tensor(&name).unwrap().data[i];
                policy.tensor_mut(&name).unwrap().data[i] = original + h;
                let plus = ppo_clip_loss(&policy, &batch.rollouts, &cfg).unwrap();
                policy.tensor_mut(&name).unwrap().data[i] = original - h;
                let minus = ppo_clip_loss(&policy, &batch.rollouts, &cfg).unwrap();
                policy.tensor_mut(&name).unwrap().data[i] = original;
                let numeric = (plus - minus) / (2.0 * h);
                // centered differences resolve gradients down to roughly
                // machine-epsilon * loss / h; below that the comparison is
                // noise, so the relative error is floored
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(1e-4);
                assert!(
                    rel < 1e-5,
                    "{name}[{i}]: analytic {analytic} vs numeric {numeric} (rel {rel})"
                );
                checked += 1;
            }
        }
        assert!(checked >= 60, "checked only {checked} coordinates");
    }

    #[test]
    fn matches_vanilla_policy_gradient_at_ratio_one() {
        let (_, vocab, prompts) = world_setup();
        let policy = policy_for(&vocab, 21);

        // one-action rollouts: the policy scores exactly the end marker, so
        // the surrogate at rho = 1 with zero value weight is a weighted
        // teacher-forcing loss on empty rewrites
        let advantages = [0.7, -0.4, 1.3, -0.9, 0.2];
        let mut rollouts = Vec::new();
        for (prompt, adv) in prompts.iter().zip(advantages) {
            let actions = vec![crate::text::EOS];
            let scored = score_actions(&policy, &prompt.tokens, &actions).unwrap();
            rollouts.push(Rollout {
                prompt: prompt.clone(),
                rewrite: Prompt::unencoded(""),
                actions,
                logprobs_sampled: scored.logprobs.clone(),
                logprobs_ref: scored.logprobs.clone(),
                values: scored.values.clone(),
                reward: RewardBreakdown {
                    s_toxic: 0.0,
                    s_alt: 0.0,
                    penalty: 0.0,
                    total: 0.0,
                    confidences: vec![],
                    similarities: vec![],
                    beta: 0.0,
                },
                reward_stream: vec![0.0],
                advantages: vec![adv],
                returns: vec![0.0],
            });
        }

        let cfg = PpoConfig { value_coef: 0.0, ..quick_cfg() };
        let (parts, ppo_grads) = ppo_loss_and_grad(&policy, &rollouts, &cfg).unwrap();
        assert_eq!(parts.value, 0.0);

        // reproduce the normalization, then express the surrogate as a
        // teacher batch with per-pair weights equal to the normalized
        // advantages (B pairs of one target token each, so B = N)
        let n = advantages.len() as f64;
        let mean_adv = advantages.iter().sum::<f64>() / n;
        let var = advantages.iter().map(|a| (a - mean_adv) * (a - mean_adv)).sum::<f64>() / n;
        let denom = var.sqrt() + 1e-8;
        let teacher: Vec<RewritePair> = prompts
            .iter()
            .zip(advantages)
            .map(|(prompt, adv)| RewritePair {
                source: prompt.tokens.clone(),
                target: vec![],
                weight: (adv - mean_adv) / denom,
            })
            .collect();
        let (_, teacher_grads) = teacher_loss_and_grad(&policy, &teacher).unwrap();

        for name in policy.trainable_names() {
            let a = ppo_grads.by_name(&policy, &name).unwrap();
            let b = teacher_grads.by_name(&policy, &name).unwrap();
            for i in 0..a.len() {
                assert!(
                    (a.data[i] - b.data[i]).abs() < 1e-8,
                    "{name}[{i}]: ppo {} vs teacher {}",
                    a.data[i],
                    b.data[i]
                );
            }
        }
    }

    #[test]
    fn penalties_vanish_when_reference_equals_policy() {
        let (_, batch, _) = collected_batch(9);
        for rollout in &batch.rollouts {
            assert_eq!(rollout.logprobs_sampled, rollout.logprobs_ref);
            assert_eq!(rollout.reward.penalty, 0.0);
            let t_len = rollout.actions.len();
            for t in 0..t_len.saturating_sub(1) {
                assert_eq!(rollout.reward_stream[t], 0.0);
            }
            assert!(
                (rollout.reward_stream[t_len - 1] - (rollout.reward.s_toxic + rollout.reward.s_alt))
                    .abs()
                    < 1e-12
            );
        }
    }

    #[test]
    fn rollout_shapes_and_reward_ranges_hold() {
        let (world, vocab, prompts) = world_setup();
        let policy = policy_for(&vocab, 4);
        let reference = policy_for(&vocab, 40);
        let cfg = PpoConfig { rollouts_per_prompt: 2, ..quick_cfg() };
        let reward_cfg = cfg.merged_reward(&RewardConfig::default());
        let mut rng = crate::rng::stream(4, "ppo-shapes");
        let batch = collect_rollouts(
            &policy, &reference, &world, &vocab, &prompts, &cfg, &reward_cfg, &mut rng,
        )
        .unwrap();
        assert_eq!(batch.rollouts.len(), prompts.len() * 2);
        for rollout in &batch.rollouts {
            let t_len = rollout.actions.len();
            assert!(t_len >= 1 && t_len <= cfg.max_new_tokens);
            assert_eq!(rollout.logprobs_sampled.len(), t_len);
            assert_eq!(rollout.logprobs_ref.len(), t_len);
            assert_eq!(rollout.values.len(), t_len);
            assert_eq!(rollout.reward_stream.len(), t_len);
            assert!(rollout.logprobs_sampled.iter().all(|l| l.is_finite() && *l <= 0.0));
            assert!(rollout.reward.s_toxic >= 0.0 && rollout.reward.s_toxic <= 5.0);
            assert!(rollout.reward.s_alt <= 0.31 + 1e-12);
            assert!(
                (rollout.reward_stream.iter().sum::<f64>() - rollout.reward.total).abs() < 1e-10,
                "stream must sum to the breakdown total"
            );
        }
        assert!(matches!(
            collect_rollouts(
                &policy,
                &reference,
                &world,
                &vocab,
                &[],
                &cfg,
                &reward_cfg,
                &mut rng
            ),
            Err(PpoError::EmptyPromptSet)
        ));
    }

    #[test]
    fn train_ppo_runs_and_leaves_the_reference_untouched() {
        let (world, vocab, prompts) = world_setup();
        let mut sft = policy_for(&vocab, 13);
        sft.role = Role::SftReference;
        let split = DatasetSplits { ppo: prompts, ..Default::default() };
        let cfg = PpoConfig {
            epochs: 1,
            batch_size: 2,
            accumulation: 1,
            inner_epochs: 2,
            learning_rate: 1e-3,
            samples_per_reward: 2,
            max_new_tokens: 8,
            ..Default::default()
        };

        let dir = tempfile::tempdir().unwrap();
        let before_path = dir.path().join("before.ckpt");
        sft.save(&before_path).unwrap();
        let before_bytes = std::fs::read(&before_path).unwrap();

        let (trained, log) =
            train_ppo(&sft, &vocab, &split, &world, &cfg, &RewardConfig::default()).unwrap();

        let after_path = dir.path().join("after.ckpt");
        sft.save(&after_path).unwrap();
        assert_eq!(before_bytes, std::fs::read(&after_path).unwrap());

        // 5 prompts in groups of 2 -> 3 groups, 2 inner steps each
        assert_eq!(log.len(), 6);
        assert!(trained.all_finite());
        assert_eq!(trained.role, Role::TrainablePolicy);
        assert!(trained.adapters().is_some());
        for line in &log {
            assert!(line.mean_s_toxic >= 0.0 && line.mean_s_toxic <= 5.0);
            assert!(line.mean_s_alt <= 0.31 + 1e-12);
            assert!(line.policy_loss.is_finite() && line.value_loss.is_finite());
        }
        // base tensors stay frozen under adapters; the adapters moved
        for name in sft.tensor_names() {
            if !name.contains("lora") && !name.contains("value") {
                assert_eq!(
                    sft.tensor(&name).unwrap().data,
                    trained.tensor(&name).unwrap().data,
                    "base tensor {name} moved"
                );
            }
        }

        let wrong_role = trained.clone();
        assert!(matches!(
            train_ppo(&wrong_role, &vocab, &split, &world, &cfg, &RewardConfig::default(),),
            Err(PpoError::WrongRole { .. })
        ));
    }

    #[test]
    fn immediate_end_rollouts_get_degenerate_rewards() {
        let (world, vocab, prompts) = world_setup();
        let policy = policy_for(&vocab, 2);
        let cfg = PpoConfig { rollouts_per_prompt: 12, ..quick_cfg() };
        let reward_cfg = cfg.merged_reward(&RewardConfig::default());
        let mut rng = crate::rng::stream(6, "ppo-degenerate");
        let batch = collect_rollouts(
            &policy, &policy, &world, &vocab, &prompts, &cfg, &reward_cfg, &mut rng,
        )
        .unwrap();
        assert_eq!(batch.rollouts.len(), prompts.len() * 12);
        let empty: Vec<&Rollout> =
            batch.rollouts.iter().filter(|r| r.rewrite.tokens.is_empty()).collect();
        assert!(
            !empty.is_empty(),
            "seed pinned to produce at least one immediate-end rollout"
        );
        for rollout in empty {
            assert_eq!(rollout.reward.s_toxic, 0.0);
            assert_eq!(rollout.reward.s_alt, 0.0);
            assert!(rollout.reward.confidences.is_empty());
            assert_eq!(rollout.actions.len(), rollout.logprobs_sampled.len());
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            PpoConfig { learning_rate: 0.0, ..Default::default() },
            PpoConfig { clip_epsilon: 0.0, ..Default::default() },
            PpoConfig { clip_epsilon: 1.0, ..Default::default() },
            PpoConfig { gamma: 0.0, ..Default::default() },
            PpoConfig { gamma: 1.5, ..Default::default() },
            PpoConfig { gae_lambda: -0.1, ..Default::default() },
            PpoConfig { beta: -0.01, ..Default::default() },
            PpoConfig { value_coef: f64::NAN, ..Default::default() },
            PpoConfig { inner_epochs: 0, ..Default::default() },
            PpoConfig { samples_per_reward: 0, ..Default::default() },
            PpoConfig { max_new_tokens: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        PpoConfig::default().validate().unwrap();
    }
}
