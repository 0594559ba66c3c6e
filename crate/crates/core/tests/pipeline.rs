//! End-to-end smoke test of the desk-scale pipeline: synthesize pairs,
//! split, build a vocabulary, supervise, reinforce, and evaluate, twice,
//! asserting the second run reproduces the first bit for bit.

use promptforge_core::eval::{evaluate, EvalConfig, PolicyRewriter};
use promptforge_core::foundry::{split_dataset, synth_pairs, DatasetSplits};
use promptforge_core::policy::{DecodeConfig, PolicyConfig, PolicyParameters, Role};
use promptforge_core::ppo::{train_ppo, PpoConfig};
use promptforge_core::reward::RewardConfig;
use promptforge_core::sft::{train_sft, SftConfig};
use promptforge_core::text::Vocabulary;
use promptforge_core::toyworld::ToyWorld;
use rand::SeedableRng;

struct RunArtifacts {
    sft_loss_first: f64,
    sft_loss_last: f64,
    ppo_log: String,
    report_json: String,
    trained_bytes: Vec<u8>,
}

fn run_pipeline(seed: u64) -> RunArtifacts {
    let world = ToyWorld::world_v1();
    let mut synth_rng = rand::rngs::StdRng::seed_from_u64(seed);
    let pairs = synth_pairs(&world, 60, &mut synth_rng).unwrap();
    let mut splits = split_dataset(&pairs, (30, 12, 8), seed).unwrap();

    let mut corpus: Vec<String> = world.tokens.iter().map(|t| t.word.clone()).collect();
    corpus.sort();
    let vocab = Vocabulary::build(&corpus, corpus.len() + 8).unwrap();
    splits.reencode(&vocab);

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
    let params =
        PolicyParameters::init(&config, &mut promptforge_core::rng::stream(seed, "pipeline-init"))
            .unwrap();

    let sft_cfg = SftConfig {
        learning_rate: 2e-3,
        batch_size: 4,
        accumulation: 2,
        epochs: 4,
        seed,
        ..Default::default()
    };
    let (reference, sft_log) = train_sft(&splits, &sft_cfg, params, None).unwrap();
    assert_eq!(reference.role, Role::SftReference);

    let ppo_cfg = PpoConfig {
        learning_rate: 1e-3,
        batch_size: 2,
        accumulation: 2,
        epochs: 1,
        inner_epochs: 2,
        samples_per_reward: 2,
        max_new_tokens: 8,
        seed,
        ..Default::default()
    };
    let (policy, ppo_log) =
        train_ppo(&reference, &vocab, &splits, &world, &ppo_cfg, &RewardConfig::default())
            .unwrap();
    assert!(policy.all_finite());
    assert!(!ppo_log.is_empty());

    let eval_cfg = EvalConfig { images_per_prompt: 3, seed, ..Default::default() };
    let rewriter =
        PolicyRewriter { params: &policy, vocab: &vocab, decode: DecodeConfig::greedy() };
    let report = evaluate(Some(&rewriter), &splits.eval, &world, &eval_cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("trained.ckpt");
    policy.save(&ckpt).unwrap();

    RunArtifacts {
        sft_loss_first: sft_log.first().unwrap().loss,
        sft_loss_last: sft_log.last().unwrap().loss,
        ppo_log: promptforge_core::sft::render_log(&ppo_log),
        report_json: report.render_json(),
        trained_bytes: std::fs::read(&ckpt).unwrap(),
    }
}

#[test]
fn pipeline_trains_and_reproduces_itself() {
    let first = run_pipeline(41);
    assert!(
        first.sft_loss_last < first.sft_loss_first,
        "supervised loss should fall: {} -> {}",
        first.sft_loss_first,
        first.sft_loss_last
    );

    let second = run_pipeline(41);
    assert_eq!(first.ppo_log, second.ppo_log, "reinforcement logs must be reproducible");
    assert_eq!(first.report_json, second.report_json, "eval reports must be reproducible");
    assert_eq!(first.trained_bytes, second.trained_bytes, "checkpoints must be reproducible");
}

#[test]
fn split_storage_round_trips_through_reencode() {
    let world = ToyWorld::world_v1();
    let mut rng = rand::rngs::StdRng::seed_from_u64(3);
    let pairs = synth_pairs(&world, 24, &mut rng).unwrap();
    let splits = split_dataset(&pairs, (10, 6, 4), 3).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("splits.json");
    splits.save(&path).unwrap();
    let mut loaded = DatasetSplits::load(&path).unwrap();

    let mut corpus: Vec<String> = world.tokens.iter().map(|t| t.word.clone()).collect();
    corpus.sort();
    let vocab = Vocabulary::build(&corpus, corpus.len() + 8).unwrap();
    loaded.reencode(&vocab);

    for pair in &loaded.sft {
        assert!(!pair.toxic.tokens.is_empty());
        assert!(!pair.clean.tokens.is_empty());
    }
    for prompt in &loaded.ppo {
        assert!(!prompt.tokens.is_empty());
    }
    for item in &loaded.eval {
        assert!(!item.prompt.tokens.is_empty());
    }
}
