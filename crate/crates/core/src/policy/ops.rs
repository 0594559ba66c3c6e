//! Sequence-level operations over the policy: framing, likelihoods,
//! sampling, and the differentiable losses the trainers build on.

use rand::rngs::StdRng;
use rand::Rng;

use crate::text::{Prompt, TokenId, Vocabulary, BOS, EOS, PAD, SEP};

use super::net::{self, log_softmax_row, softmax_row};
use super::params::{Grads, PolicyParameters};
use super::tensor::Mat;
use super::{DecodeConfig, PolicyConfig, PolicyError};

/// One teacher-forcing example: rewrite `source` into `target`.
#[derive(Debug, Clone)]
pub struct RewritePair {
    pub source: Vec<TokenId>,
    pub target: Vec<TokenId>,
    /// Relative contribution to the batch loss; 1.0 for ordinary examples.
    pub weight: f64,
}

impl RewritePair {
    pub fn new(source: Vec<TokenId>, target: Vec<TokenId>) -> Self {
        RewritePair { source, target, weight: 1.0 }
    }
}

fn strip_pad(tokens: &[TokenId]) -> Vec<TokenId> {
    tokens.iter().copied().filter(|&t| t != PAD).collect()
}

/// Builds the training frame `BOS x SEP x' EOS`. Padding markers are inert
/// and are dropped from both sides before framing.
pub fn frame(
    config: &PolicyConfig,
    x: &[TokenId],
    x_prime: &[TokenId],
) -> Result<Vec<TokenId>, PolicyError> {
    let x = strip_pad(x);
    let x_prime = strip_pad(x_prime);
    let len = x.len() + x_prime.len() + 3;
    if len > config.max_seq {
        return Err(PolicyError::SequenceTooLong { len, max: config.max_seq });
    }
    let mut framed = Vec::with_capacity(len);
    framed.push(BOS);
    framed.extend_from_slice(&x);
    framed.push(SEP);
    framed.extend_from_slice(&x_prime);
    framed.push(EOS);
    Ok(framed)
}

/// Next-token logits for every position of `tokens`, one row per position.
pub fn forward_logits(
    params: &PolicyParameters,
    tokens: &[TokenId],
) -> Result<Mat, PolicyError> {
    Ok(net::forward(params, tokens)?.logits)
}

/// Scalar value estimate per position.
pub fn value_estimate(
    params: &PolicyParameters,
    tokens: &[TokenId],
) -> Result<Vec<f64>, PolicyError> {
    net::forward(params, tokens)?.values.ok_or(PolicyError::ValueHeadDisabled)
}

/// Log probability of producing exactly `x_prime` (and then stopping) from
/// `x`: the sum of per-token log probabilities of the rewrite tokens and the
/// terminating end marker.
pub fn sequence_logprob(
    params: &PolicyParameters,
    x: &[TokenId],
    x_prime: &[TokenId],
) -> Result<f64, PolicyError> {
    let framed = frame(params.config(), x, x_prime)?;
    let n = framed.len();
    let sep_idx = framed.iter().position(|&t| t == SEP).expect("frame always holds SEP");
    let fwd = net::forward(params, &framed[..n - 1])?;
    let mut total = 0.0;
    for i in sep_idx..n - 1 {
        let logp = log_softmax_row(fwd.logits.row(i));
        total += logp[framed[i + 1] as usize];
    }
    Ok(total)
}

/// A continuation drawn from the policy for one source prompt.
#[derive(Debug, Clone)]
pub struct SampledContinuation {
    /// The rewrite as a prompt: decoded text plus its non-reserved tokens.
    pub prompt: Prompt,
    /// Every sampled id in order, including the end marker when reached.
    pub actions: Vec<TokenId>,
    /// Log probability of each action under the model.
    pub logprobs: Vec<f64>,
    pub ended_with_eos: bool,
}

/// Samples a rewrite of `x` token by token, stopping at the end marker or
/// the decode budget. Sampling never runs the frame past the context
/// window: the budget is clipped so a scored frame always fits.
pub fn sample_continuation(
    params: &PolicyParameters,
    vocab: &Vocabulary,
    x: &[TokenId],
    cfg: &DecodeConfig,
    rng: &mut StdRng,
) -> Result<SampledContinuation, PolicyError> {
    let config = params.config();
    if vocab.len() != config.vocab_size {
        return Err(PolicyError::ConfigInvalid(format!(
            "vocabulary holds {} entries but the model was built for {}",
            vocab.len(),
            config.vocab_size
        )));
    }
    let mut seq = Vec::with_capacity(config.max_seq);
    seq.push(BOS);
    seq.extend(strip_pad(x));
    seq.push(SEP);
    if seq.len() + 2 > config.max_seq {
        return Err(PolicyError::SequenceTooLong { len: seq.len() + 2, max: config.max_seq });
    }
    let budget = cfg.max_new_tokens.min(config.max_seq - seq.len() - 1);

    let mut actions = Vec::new();
    let mut logprobs = Vec::new();
    let mut ended_with_eos = false;
    for _ in 0..budget {
        let fwd = net::forward(params, &seq)?;
        let row = fwd.logits.row(fwd.logits.rows - 1);
        let tok = select_token(row, cfg, rng);
        logprobs.push(log_softmax_row(row)[tok as usize]);
        actions.push(tok);
        if tok == EOS {
            ended_with_eos = true;
            break;
        }
        seq.push(tok);
    }

    let content: Vec<TokenId> =
        actions.iter().copied().filter(|&t| !Vocabulary::is_special(t)).collect();
    let raw = vocab.decode(&content).map_err(|_| PolicyError::TokenOutOfRange {
        id: *content.iter().max().unwrap_or(&0),
        vocab: vocab.len(),
    })?;
    Ok(SampledContinuation {
        prompt: Prompt { raw, tokens: content },
        actions,
        logprobs,
        ended_with_eos,
    })
}

/// Per-action scores for an already-chosen action sequence.
#[derive(Debug, Clone)]
pub struct ScoredActions {
    /// Log probability of each action at the state where it was taken.
    pub logprobs: Vec<f64>,
    /// Value estimate of the state *before* each action.
    pub values: Vec<f64>,
}

/// Replays `actions` against the model, conditioned exactly as
/// `sample_continuation` conditions its draws, and returns each action's log
/// probability together with the value of the state it was taken from.
pub fn score_actions(
    params: &PolicyParameters,
    x: &[TokenId],
    actions: &[TokenId],
) -> Result<ScoredActions, PolicyError> {
    if actions.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let config = params.config();
    let mut seq = Vec::with_capacity(x.len() + actions.len() + 2);
    seq.push(BOS);
    seq.extend(strip_pad(x));
    seq.push(SEP);
    let prefix = seq.len();
    seq.extend_from_slice(&actions[..actions.len() - 1]);
    if seq.len() + 1 > config.max_seq {
        return Err(PolicyError::SequenceTooLong { len: seq.len() + 1, max: config.max_seq });
    }
    let fwd = net::forward(params, &seq)?;
    let all_values = fwd.values.as_ref().ok_or(PolicyError::ValueHeadDisabled)?;
    let mut logprobs = Vec::with_capacity(actions.len());
    let mut values = Vec::with_capacity(actions.len());
    for (t, &action) in actions.iter().enumerate() {
        let row = prefix - 1 + t;
        logprobs.push(log_softmax_row(fwd.logits.row(row))[action as usize]);
        values.push(all_values[row]);
    }
    Ok(ScoredActions { logprobs, values })
}

fn select_token(row: &[f64], cfg: &DecodeConfig, rng: &mut StdRng) -> TokenId {
    if cfg.temperature == 0.0 {
        let mut best = 0usize;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        return best as TokenId;
    }

    let mut candidates: Vec<usize> = (0..row.len()).collect();
    if let Some(k) = cfg.top_k {
        candidates.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a]).expect("finite logits").then(a.cmp(&b))
        });
        candidates.truncate(k.max(1));
    }
    let scaled: Vec<f64> = candidates.iter().map(|&i| row[i] / cfg.temperature).collect();
    let probs = softmax_row(&scaled);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (slot, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return candidates[slot] as TokenId;
        }
    }
    *candidates.last().expect("candidate list is never empty") as TokenId
}

/// Mean over the batch of the per-token negative log likelihood of each
/// target (its tokens plus the end marker), teacher-forced on the frame.
pub fn teacher_loss(
    params: &PolicyParameters,
    batch: &[RewritePair],
) -> Result<f64, PolicyError> {
    run_teacher(params, batch, None)
}

/// Same loss, plus its exact gradient for the trainable tensors.
pub fn teacher_loss_and_grad(
    params: &PolicyParameters,
    batch: &[RewritePair],
) -> Result<(f64, Grads), PolicyError> {
    let mut grads = Grads::zeros_like(params);
    let loss = run_teacher(params, batch, Some(&mut grads))?;
    Ok((loss, grads))
}

fn run_teacher(
    params: &PolicyParameters,
    batch: &[RewritePair],
    mut grads: Option<&mut Grads>,
) -> Result<f64, PolicyError> {
    if batch.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let b = batch.len() as f64;
    let mut total = 0.0;
    for pair in batch {
        let framed = frame(params.config(), &pair.source, &pair.target)?;
        let n = framed.len();
        let sep_idx = framed.iter().position(|&t| t == SEP).expect("frame always holds SEP");
        let fwd = net::forward(params, &framed[..n - 1])?;
        let count = (n - 1 - sep_idx) as f64;

        let mut pair_loss = 0.0;
        let mut d_logits = grads
            .as_ref()
            .map(|_| Mat::zeros(fwd.logits.rows, fwd.logits.cols));
        for i in sep_idx..n - 1 {
            let target = framed[i + 1] as usize;
            let logp = log_softmax_row(fwd.logits.row(i));
            pair_loss -= logp[target];
            if let Some(dl) = d_logits.as_mut() {
                let coeff = pair.weight / (b * count);
                let dl_row = dl.row_mut(i);
                for (j, &lp) in logp.iter().enumerate() {
                    dl_row[j] = coeff * lp.exp();
                }
                dl_row[target] -= coeff;
            }
        }
        total += pair.weight * pair_loss / count;
        if let (Some(g), Some(dl)) = (grads.as_deref_mut(), d_logits.as_ref()) {
            net::backward(params, &fwd, Some(dl), None, g);
        }
    }
    Ok(total / b)
}

/// Mean squared error of the value head against per-position targets; used
/// by the gradient tests and mirrored by the RL value loss.
pub fn value_regression_loss(
    params: &PolicyParameters,
    items: &[(Vec<TokenId>, Vec<f64>)],
) -> Result<f64, PolicyError> {
    run_value_regression(params, items, None)
}

pub fn value_regression_loss_and_grad(
    params: &PolicyParameters,
    items: &[(Vec<TokenId>, Vec<f64>)],
) -> Result<(f64, Grads), PolicyError> {
    let mut grads = Grads::zeros_like(params);
    let loss = run_value_regression(params, items, Some(&mut grads))?;
    Ok((loss, grads))
}

fn run_value_regression(
    params: &PolicyParameters,
    items: &[(Vec<TokenId>, Vec<f64>)],
    mut grads: Option<&mut Grads>,
) -> Result<f64, PolicyError> {
    if items.is_empty() {
        return Err(PolicyError::EmptyBatch);
    }
    let b = items.len() as f64;
    let mut total = 0.0;
    for (tokens, targets) in items {
        if tokens.len() != targets.len() {
            return Err(PolicyError::LengthMismatch {
                left: tokens.len(),
                right: targets.len(),
            });
        }
        let fwd = net::forward(params, tokens)?;
        let values = fwd.values.as_ref().ok_or(PolicyError::ValueHeadDisabled)?;
        let t_len = tokens.len() as f64;
        let mut d_values = vec![0.0; tokens.len()];
        for t in 0..tokens.len() {
            let err = values[t] - targets[t];
            total += err * err / (t_len * b);
            d_values[t] = 2.0 * err / (t_len * b);
        }
        if let Some(g) = grads.as_deref_mut() {
            net::backward(params, &fwd, None, Some(&d_values), g);
        }
    }
    Ok(total)
}
