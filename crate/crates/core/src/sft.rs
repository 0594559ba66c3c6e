//! Supervised stage: teacher-forced training of the rewriter on toxic-clean
//! pairs, with a bias-corrected adaptive-moment optimizer, gradient
//! accumulation, and resumable checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::foundry::DatasetSplits;
use crate::policy::{teacher_loss, teacher_loss_and_grad, Grads, PolicyError, PolicyParameters, RewritePair, Role};
use crate::text::{PromptPair, PAD};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SftError {
    #[error("no training pairs in the supervised split")]
    EmptyDataset,
    #[error("dataset has raw text but empty token ids; encode it against a vocabulary first")]
    UnencodedData,
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("optimizer state does not match the trainable tensors of the parameters")]
    StateMismatch,
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// micro-batches accumulated per optimizer step
    pub accumulation: usize,
    pub epochs: usize,
    pub seed: u64,
    /// stop after this many optimizer steps; 0 means run all epochs
    pub max_steps: usize,
    /// write a checkpoint every n optimizer steps; 0 disables
    pub checkpoint_every: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 4,
            accumulation: 4,
            epochs: 3,
            seed: 7,
            max_steps: 0,
            checkpoint_every: 0,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), SftError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(SftError::ConfigInvalid("learning_rate must be positive and finite".into()));
        }
        if self.batch_size == 0 || self.accumulation == 0 {
            return Err(SftError::ConfigInvalid("batch_size and accumulation must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(SftError::ConfigInvalid("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// First and second moment estimates, one slot per trainable tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    names: Vec<String>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &PolicyParameters) -> Self {
        let names = params.trainable_names();
        let m = names
            .iter()
            .map(|n| vec![0.0; params.tensor(n).expect("trainable tensor exists").len()])
            .collect::<Vec<_>>();
        let v = m.clone();
        AdamState { names, m, v, step: 0 }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// One bias-corrected moment update over every trainable tensor.
pub fn optimizer_step(
    state: &mut AdamState,
    params: &mut PolicyParameters,
    grads: &Grads,
    lr: f64,
) -> Result<(), SftError> {
    if state.names != params.trainable_names() {
        return Err(SftError::StateMismatch);
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(SftError::ConfigInvalid("learning rate must be positive and finite".into()));
    }
    for name in &state.names {
        let g = grads.by_name(params, name).ok_or(SftError::StateMismatch)?;
        if !g.all_finite() {
            return Err(SftError::NonFiniteGradient(name.clone()));
        }
    }

    state.step += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.step as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.step as i32);
    for (slot, name) in state.names.iter().enumerate() {
        let grad = grads.by_name(params, name).ok_or(SftError::StateMismatch)?.data.clone();
        let tensor = params.tensor_mut(name).ok_or(SftError::StateMismatch)?;
        if grad.len() != tensor.len() {
            return Err(SftError::StateMismatch);
        }
        let m = &mut state.m[slot];
        let v = &mut state.v[slot];
        for i in 0..grad.len() {
            let g = grad[i];
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            tensor.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

fn to_rewrite_pair(pair: &PromptPair) -> RewritePair {
    RewritePair::new(pair.toxic.tokens.clone(), pair.clean.tokens.clone())
}

/// Mean teacher-forcing loss of the policy on the given pairs.
pub fn sft_loss(params: &PolicyParameters, batch: &[PromptPair]) -> Result<f64, SftError> {
    let pairs: Vec<RewritePair> = batch.iter().map(to_rewrite_pair).collect();
    Ok(teacher_loss(params, &pairs)?)
}

/// One optimizer step of the training log. Loss is measured before the
/// update, so the first line shows the untrained model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SftLogLine {
    pub step: u64,
    pub epoch: u64,
    pub loss: f64,
    pub lr: f64,
    /// target tokens consumed by this step
    pub tokens: u64,
}

/// Serializes log lines as JSON, one object per line.
pub fn render_log<T: Serialize>(lines: &[T]) -> String {
    let mut out = String::new();
    for line in lines {
        out.push_str(&serde_json::to_string(line).expect("log line serializes"));
        out.push('\n');
    }
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainState {
    version: u32,
    adam: AdamState,
    epoch: u64,
    /// optimizer steps already taken within `epoch`
    groups_done: u64,
    global_step: u64,
}

fn checkpoint_paths(dir: &Path, step: u64) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("sft-step-{step:06}.ckpt")),
        dir.join(format!("sft-step-{step:06}.state.json")),
    )
}

fn save_state(path: &Path, state: &TrainState) -> Result<(), SftError> {
    let body = serde_json::to_string_pretty(state)
        .map_err(|e| SftError::Malformed { path: path.to_path_buf(), reason: e.to_string() })?;
    std::fs::write(path, body).map_err(|source| SftError::Io { path: path.to_path_buf(), source })
}

fn load_state(path: &Path) -> Result<TrainState, SftError> {
    let body = std::fs::read_to_string(path)
        .map_err(|source| SftError::Io { path: path.to_path_buf(), source })?;
    let state: TrainState = serde_json::from_str(&body)
        .map_err(|e| SftError::Malformed { path: path.to_path_buf(), reason: e.to_string() })?;
    if state.version != CHECKPOINT_VERSION {
        return Err(SftError::UnsupportedVersion(state.version));
    }
    Ok(state)
}

/// Trains the policy on the supervised split and returns it tagged as the
/// frozen reference, along with the per-step log.
pub fn train_sft(
    split: &DatasetSplits,
    config: &SftConfig,
    params: PolicyParameters,
    checkpoint_dir: Option<&Path>,
) -> Result<(PolicyParameters, Vec<SftLogLine>), SftError> {
    config.validate()?;
    let state = AdamState::new(&params);
    run_loop(split, config, params, state, 0, 0, 0, checkpoint_dir)
}

/// Continues a checkpointed run. The shuffle order is re-derived from the
/// config seed, so a resumed run retraces the interrupted one exactly.
pub fn resume_sft(
    split: &DatasetSplits,
    config: &SftConfig,
    policy_path: &Path,
    state_path: &Path,
    checkpoint_dir: Option<&Path>,
) -> Result<(PolicyParameters, Vec<SftLogLine>), SftError> {
    config.validate()?;
    let params = PolicyParameters::load(policy_path)?;
    let state = load_state(state_path)?;
    if state.adam.names != params.trainable_names() {
        return Err(SftError::StateMismatch);
    }
    run_loop(
        split,
        config,
        params,
        state.adam,
        state.epoch,
        state.groups_done,
        state.global_step,
        checkpoint_dir,
    )
}

fn target_tokens(pair: &PromptPair) -> u64 {
    pair.clean.tokens.iter().filter(|&&t| t != PAD).count() as u64 + 1
}

#[allow(clippy::too_many_arguments)]
fn run_loop(
    split: &DatasetSplits,
    config: &SftConfig,
    mut params: PolicyParameters,
    mut adam: AdamState,
    start_epoch: u64,
    start_groups_done: u64,
    start_step: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<(PolicyParameters, Vec<SftLogLine>), SftError> {
    let pairs = &split.sft;
    if pairs.is_empty() {
        return Err(SftError::EmptyDataset);
    }
    if pairs.iter().any(|p| p.toxic.tokens.is_empty() || p.clean.tokens.is_empty()) {
        return Err(SftError::UnencodedData);
    }

    let mut log = Vec::new();
    let mut global_step = start_step;
    'epochs: for epoch in start_epoch..config.epochs as u64 {
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(&mut crate::rng::indexed_stream(config.seed, "sft-shuffle", epoch));
        }
        let micro_batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        let skip_groups = if epoch == start_epoch { start_groups_done as usize } else { 0 };
        for (group_idx, group) in micro_batches.chunks(config.accumulation).enumerate() {
            if group_idx < skip_groups {
                continue;
            }
            let mut grads = Grads::zeros_like(&params);
            let mut loss_sum = 0.0;
            let mut tokens = 0u64;
            for micro in group {
                let batch: Vec<RewritePair> =
                    micro.iter().map(|&i| to_rewrite_pair(&pairs[i])).collect();
                let (loss, g) = teacher_loss_and_grad(&params, &batch)?;
                grads.add(&g);
                loss_sum += loss;
                tokens += micro.iter().map(|&i| target_tokens(&pairs[i])).sum::<u64>();
            }
            grads.scale(1.0 / group.len() as f64);
            let loss = loss_sum / group.len() as f64;
            optimizer_step(&mut adam, &mut params, &grads, config.learning_rate)?;
            global_step += 1;
            log.push(SftLogLine {
                step: global_step,
                epoch,
                loss,
                lr: config.learning_rate,
                tokens,
            });

            if let Some(dir) = checkpoint_dir {
                if config.checkpoint_every > 0 && global_step % config.checkpoint_every as u64 == 0
                {
                    let (policy_path, state_path) = checkpoint_paths(dir, global_step);
                    params.save(&policy_path)?;
                    let snapshot = TrainState {
                        version: CHECKPOINT_VERSION,
                        adam: adam.clone(),
                        epoch,
                        groups_done: group_idx as u64 + 1,
                        global_step,
                    };
                    save_state(&state_path, &snapshot)?;
                }
            }
            if config.max_steps > 0 && global_step >= config.max_steps as u64 {
                break 'epochs;
            }
        }
    }
    params.role = Role::SftReference;
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{AdapterTarget, PolicyConfig};
    use crate::text::{Prompt, Provenance, Vocabulary};

    fn small_policy() -> PolicyParameters {
        let config = PolicyConfig {
            vocab_size: 12,
            max_seq: 16,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            adapter_rank: 2,
            ..Default::default()
        };
        PolicyParameters::init(&config, &mut crate::rng::stream(11, "sft-test-init")).unwrap()
    }

    fn vocab_and_pairs(n: usize) -> (Vocabulary, Vec<PromptPair>) {
        let words = ["gory", "tidy", "scene", "apple", "table", "red", "green"];
        let corpus: Vec<String> = words.iter().map(|w| w.to_string()).collect();
        let vocab = Vocabulary::build(&corpus, 12).unwrap();
        let pairs = (0..n)
            .map(|i| {
                let a = words[i % words.len()];
                let b = words[(i + 1) % words.len()];
                let c = words[(i + 2) % words.len()];
                let mut pair = PromptPair {
                    toxic: Prompt::unencoded(format!("{a} {b}")),
                    clean: Prompt::unencoded(format!("{c} {b}")),
                    provenance: Provenance::Manual,
                    category: None,
                };
                pair.reencode(&vocab);
                pair
            })
            .collect();
        (vocab, pairs)
    }

    fn splits_of(pairs: Vec<PromptPair>) -> DatasetSplits {
        DatasetSplits { sft: pairs, ..Default::default() }
    }

    #[test]
    fn first_adam_update_has_learning_rate_magnitude() {
        let mut params = small_policy();
        let mut adam = AdamState::new(&params);
        let (_, pairs) = vocab_and_pairs(4);
        let batch: Vec<RewritePair> = pairs.iter().map(to_rewrite_pair).collect();
        let (_, g) = teacher_loss_and_grad(&params, &batch).unwrap();

        let before = params.clone();
        let lr = 1e-3;
        optimizer_step(&mut adam, &mut params, &g, lr).unwrap();
        assert_eq!(adam.step, 1);

        let mut checked = 0usize;
        for name in before.trainable_names() {
            let old = before.tensor(&name).unwrap();
            let new = params.tensor(&name).unwrap();
            let grad = g.by_name(&before, &name).unwrap();
            for i in 0..old.len() {
                if grad.data[i].abs() > 1e-3 {
                    let delta = (new.data[i] - old.data[i]).abs();
                    assert!(
                        (delta - lr).abs() < lr * 0.01,
                        "first-step delta {delta} should be ~lr {lr}"
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 50, "needed meaningful gradients to check, got {checked}");
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = small_policy();
        let mut adam = AdamState::new(&params);
        let grads = Grads::zeros_like(&params);
        let before = params.clone();
        optimizer_step(&mut adam, &mut params, &grads, 1e-3).unwrap();
        for name in before.trainable_names() {
            assert_eq!(before.tensor(&name).unwrap().data, params.tensor(&name).unwrap().data);
        }
    }

    #[test]
    fn adapter_attachment_invalidates_old_state() {
        let mut params = small_policy();
        let mut adam = AdamState::new(&params);
        params
            .attach_adapters(2, &[AdapterTarget::Q, AdapterTarget::V], &mut crate::rng::stream(0, "t"))
            .unwrap();
        let grads = Grads::zeros_like(&params);
        assert!(matches!(
            optimizer_step(&mut adam, &mut params, &grads, 1e-3),
            Err(SftError::StateMismatch)
        ));
    }

    #[test]
    fn accumulated_groups_match_one_concatenated_batch() {
        let params = small_policy();
        let (_, pairs) = vocab_and_pairs(8);
        let all: Vec<RewritePair> = pairs.iter().map(to_rewrite_pair).collect();

        let (loss_full, grads_full) = teacher_loss_and_grad(&params, &all).unwrap();

        let mut grads_acc = Grads::zeros_like(&params);
        let mut loss_acc = 0.0;
        for micro in all.chunks(4) {
            let (l, g) = teacher_loss_and_grad(&params, micro).unwrap();
            grads_acc.add(&g);
            loss_acc += l;
        }
        grads_acc.scale(1.0 / 2.0);
        loss_acc /= 2.0;

        assert!((loss_full - loss_acc).abs() < 1e-10);
        for name in params.trainable_names() {
            let a = grads_full.by_name(&params, &name).unwrap();
            let b = grads_acc.by_name(&params, &name).unwrap();
            for i in 0..a.len() {
                assert!(
                    (a.data[i] - b.data[i]).abs() < 1e-10,
                    "{name}[{i}]: {} vs {}",
                    a.data[i],
                    b.data[i]
                );
            }
        }

        let mut p1 = params.clone();
        let mut s1 = AdamState::new(&p1);
        optimizer_step(&mut s1, &mut p1, &grads_full, 1e-3).unwrap();
        let mut p2 = params.clone();
        let mut s2 = AdamState::new(&p2);
        optimizer_step(&mut s2, &mut p2, &grads_acc, 1e-3).unwrap();
        for name in p1.trainable_names() {
            let a = p1.tensor(&name).unwrap();
            let b = p2.tensor(&name).unwrap();
            for i in 0..a.len() {
                assert!((a.data[i] - b.data[i]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn loss_starts_at_uniform_entropy_and_falls() {
        let params = small_policy();
        let (_, pairs) = vocab_and_pairs(12);
        let split = splits_of(pairs);
        let config = SftConfig {
            learning_rate: 3e-3,
            batch_size: 4,
            accumulation: 1,
            epochs: 30,
            seed: 5,
            ..Default::default()
        };
        let (trained, log) = train_sft(&split, &config, params, None).unwrap();
        assert_eq!(trained.role, Role::SftReference);
        let ln_v = (12f64).ln();
        let first = log.first().unwrap().loss;
        assert!(
            (first - ln_v).abs() / ln_v < 0.05,
            "untrained loss {first} should be within 5% of ln V {ln_v}"
        );
        let last = log.last().unwrap().loss;
        assert!(last < first * 0.5, "loss should fall: first {first}, last {last}");
        assert!(trained.all_finite());
        // epochs * ceil(12/4 micro-batches / 1 accumulation) steps
        assert_eq!(log.len(), 30 * 3);
        assert_eq!(log.first().unwrap().step, 1);
        assert_eq!(log.first().unwrap().tokens, 4 * 3);
    }

    #[test]
    fn training_is_deterministic_for_a_seed() {
        let params = small_policy();
        let (_, pairs) = vocab_and_pairs(10);
        let split = splits_of(pairs);
        let config = SftConfig { epochs: 2, seed: 9, ..Default::default() };
        let (p1, log1) = train_sft(&split, &config, params.clone(), None).unwrap();
        let (p2, log2) = train_sft(&split, &config, params, None).unwrap();
        assert_eq!(render_log(&log1), render_log(&log2));
        for name in p1.tensor_names() {
            assert_eq!(p1.tensor(&name).unwrap().data, p2.tensor(&name).unwrap().data);
        }
    }

    #[test]
    fn resume_replays_the_interrupted_run_exactly() {
        let params = small_policy();
        let (_, pairs) = vocab_and_pairs(16);
        let split = splits_of(pairs);
        let dir = tempfile::tempdir().unwrap();

        let straight = SftConfig {
            epochs: 3,
            batch_size: 4,
            accumulation: 1,
            max_steps: 10,
            seed: 2,
            ..Default::default()
        };
        let (p_straight, log_straight) = train_sft(&split, &straight, params.clone(), None).unwrap();

        let half = SftConfig { max_steps: 5, checkpoint_every: 5, ..straight.clone() };
        let (_, log_first) = train_sft(&split, &half, params, Some(dir.path())).unwrap();
        assert_eq!(log_first.len(), 5);

        let (ckpt, state) = checkpoint_paths(dir.path(), 5);
        let (p_resumed, log_second) = resume_sft(&split, &straight, &ckpt, &state, None).unwrap();
        assert_eq!(log_second.len(), 5);

        let mut log_joined = log_first;
        log_joined.extend(log_second);
        assert_eq!(render_log(&log_straight), render_log(&log_joined));
        for name in p_straight.tensor_names() {
            assert_eq!(
                p_straight.tensor(&name).unwrap().data,
                p_resumed.tensor(&name).unwrap().data,
                "tensor {name} diverged after resume"
            );
        }
        assert_eq!(p_resumed.role, Role::SftReference);
    }

    #[test]
    fn empty_or_unencoded_datasets_are_rejected() {
        let params = small_policy();
        let config = SftConfig::default();
        let empty = splits_of(vec![]);
        assert!(matches!(
            train_sft(&empty, &config, params.clone(), None),
            Err(SftError::EmptyDataset)
        ));
        let unencoded = splits_of(vec![PromptPair {
            toxic: Prompt::unencoded("gory scene"),
            clean: Prompt::unencoded("tidy scene"),
            provenance: Provenance::Manual,
            category: None,
        }]);
        assert!(matches!(
            train_sft(&unencoded, &config, params, None),
            Err(SftError::UnencodedData)
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            SftConfig { learning_rate: 0.0, ..Default::default() },
            SftConfig { learning_rate: f64::NAN, ..Default::default() },
            SftConfig { batch_size: 0, ..Default::default() },
            SftConfig { accumulation: 0, ..Default::default() },
            SftConfig { epochs: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
        SftConfig::default().validate().unwrap();
    }
}
