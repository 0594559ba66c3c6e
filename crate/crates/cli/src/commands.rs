//! Subcommand bodies: each loads what it needs from the configured
//! directories, runs one stage, and writes its artifacts back.

use crate::config::{load_config, load_world, RunConfig};
use crate::{Cli, Command, PairSource};
use anyhow::{bail, Context};
use promptforge_core::eval::{compare, evaluate, EvalReport, PolicyRewriter, Rewriter};
use promptforge_core::foundry::{split_dataset, synth_pairs, ChatClient, DatasetSplits};
use promptforge_core::policy::{DecodeConfig, PolicyParameters};
use promptforge_core::ppo::train_ppo;
use promptforge_core::rng::stream;
use promptforge_core::sft::{render_log, train_sft};
use promptforge_core::text::{read_pairs, write_pairs, Prompt, Vocabulary};
use std::path::{Path, PathBuf};

pub fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli.config, &cli.set)?;
    // parallelism bound: the only worker pool is the endpoint client
    cfg.endpoint.max_in_flight = cfg.endpoint.max_in_flight.min(cli.threads as usize).max(1);
    match &cli.command {
        Command::BuildVocab => build_vocab(&cfg),
        Command::MakePairs { source } => make_pairs(&cfg, *source),
        Command::Split => split(&cfg),
        Command::Sft => sft(&cfg),
        Command::Ppo => ppo(&cfg),
        Command::Eval { checkpoint, out } => eval(&cfg, checkpoint.as_deref(), out.as_deref()),
        Command::Rewrite { prompt, checkpoint } => rewrite(&cfg, prompt, checkpoint),
        Command::Compare { a, b } => compare_reports(a, b),
    }
}

fn pairs_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_dir.join("pairs.jsonl")
}

fn vocab_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_dir.join("vocab.json")
}

fn splits_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_dir.join("splits.json")
}

fn sft_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoint_dir.join("sft-final.ckpt")
}

fn ppo_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoint_dir.join("ppo-final.ckpt")
}

fn load_vocab(cfg: &RunConfig) -> anyhow::Result<Vocabulary> {
    let path = vocab_path(cfg);
    Vocabulary::load(&path)
        .with_context(|| format!("cannot load vocabulary {} (run build-vocab first)", path.display()))
}

fn load_splits(cfg: &RunConfig, vocab: &Vocabulary) -> anyhow::Result<DatasetSplits> {
    let path = splits_path(cfg);
    let mut splits = DatasetSplits::load(&path)
        .with_context(|| format!("cannot load splits {} (run split first)", path.display()))?;
    splits.reencode(vocab);
    Ok(splits)
}

fn make_pairs(cfg: &RunConfig, source: PairSource) -> anyhow::Result<()> {
    let out = pairs_path(cfg);
    std::fs::create_dir_all(&cfg.paths.data_dir)
        .with_context(|| format!("cannot create {}", cfg.paths.data_dir.display()))?;
    let pairs = match source {
        PairSource::Synthetic => {
            let world = load_world(cfg)?;
            let mut rng = stream(cfg.seed, "make-pairs");
            synth_pairs(&world, cfg.data.synth_pairs, &mut rng)?
        }
        PairSource::Llm => {
            if cfg.data.prompt_file.as_os_str().is_empty() {
                bail!("--source llm needs data.prompt_file in the config");
            }
            let raw = std::fs::read_to_string(&cfg.data.prompt_file).with_context(|| {
                format!("cannot read prompt file {}", cfg.data.prompt_file.display())
            })?;
            let prompts: Vec<Prompt> = raw
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(Prompt::unencoded)
                .collect();
            if prompts.is_empty() {
                bail!("prompt file {} holds no prompts", cfg.data.prompt_file.display());
            }
            let client = ChatClient::new(cfg.endpoint.clone());
            let (pairs, rejected) = client.fetch_pairs(&prompts)?;
            eprintln!("make-pairs: endpoint returned {} pairs, rejected {}", pairs.len(), rejected);
            pairs
        }
    };
    write_pairs(&out, &pairs)?;
    eprintln!("make-pairs: wrote {} pairs to {}", pairs.len(), out.display());
    Ok(())
}

fn build_vocab(cfg: &RunConfig) -> anyhow::Result<()> {
    let world = load_world(cfg)?;
    let source = pairs_path(cfg);
    let pairs = read_pairs(&source)
        .with_context(|| format!("cannot load pairs {} (run make-pairs first)", source.display()))?;
    let mut corpus: Vec<String> = world.tokens.iter().map(|t| t.word.clone()).collect();
    for pair in &pairs {
        corpus.push(pair.toxic.raw.clone());
        corpus.push(pair.clean.raw.clone());
    }
    let vocab = Vocabulary::build(&corpus, cfg.data.vocab_max)?;
    let out = vocab_path(cfg);
    std::fs::create_dir_all(&cfg.paths.data_dir)
        .with_context(|| format!("cannot create {}", cfg.paths.data_dir.display()))?;
    vocab.save(&out)?;
    eprintln!("build-vocab: {} tokens to {}", vocab.len(), out.display());
    Ok(())
}

fn split(cfg: &RunConfig) -> anyhow::Result<()> {
    let source = pairs_path(cfg);
    let pairs = read_pairs(&source)
        .with_context(|| format!("cannot load pairs {} (run make-pairs first)", source.display()))?;
    let sizes = (cfg.data.sft_size, cfg.data.ppo_size, cfg.data.eval_size);
    let splits = split_dataset(&pairs, sizes, cfg.seed)?;
    let out = splits_path(cfg);
    splits.save(&out)?;
    eprintln!(
        "split: sft {} / ppo {} / eval {} / template {} to {}",
        splits.sft.len(),
        splits.ppo.len(),
        splits.eval.len(),
        splits.template.len(),
        out.display()
    );
    Ok(())
}

fn sft(cfg: &RunConfig) -> anyhow::Result<()> {
    let vocab = load_vocab(cfg)?;
    let splits = load_splits(cfg, &vocab)?;
    let mut policy_cfg = cfg.policy.clone();
    policy_cfg.vocab_size = vocab.len();
    let params = PolicyParameters::init(&policy_cfg, &mut stream(cfg.seed, "policy-init"))?;
    std::fs::create_dir_all(&cfg.paths.checkpoint_dir)
        .with_context(|| format!("cannot create {}", cfg.paths.checkpoint_dir.display()))?;
    let (trained, log) = train_sft(&splits, &cfg.sft, params, Some(&cfg.paths.checkpoint_dir))?;
    let out = sft_checkpoint(cfg);
    trained.save(&out)?;
    std::fs::create_dir_all(&cfg.paths.report_dir)
        .with_context(|| format!("cannot create {}", cfg.paths.report_dir.display()))?;
    let log_path = cfg.paths.report_dir.join("sft-log.jsonl");
    std::fs::write(&log_path, render_log(&log))
        .with_context(|| format!("cannot write {}", log_path.display()))?;
    let first = log.first().map(|l| l.loss).unwrap_or(f64::NAN);
    let last = log.last().map(|l| l.loss).unwrap_or(f64::NAN);
    eprintln!(
        "sft: {} steps, loss {first:.4} -> {last:.4}, checkpoint {}",
        log.len(),
        out.display()
    );
    Ok(())
}

fn ppo(cfg: &RunConfig) -> anyhow::Result<()> {
    let vocab = load_vocab(cfg)?;
    let splits = load_splits(cfg, &vocab)?;
    let world = load_world(cfg)?;
    let source = sft_checkpoint(cfg);
    let reference = PolicyParameters::load(&source)
        .with_context(|| format!("cannot load checkpoint {} (run sft first)", source.display()))?;
    let (trained, log) = train_ppo(&reference, &vocab, &splits, &world, &cfg.ppo, &cfg.reward)?;
    std::fs::create_dir_all(&cfg.paths.checkpoint_dir)
        .with_context(|| format!("cannot create {}", cfg.paths.checkpoint_dir.display()))?;
    let out = ppo_checkpoint(cfg);
    trained.save(&out)?;
    std::fs::create_dir_all(&cfg.paths.report_dir)
        .with_context(|| format!("cannot create {}", cfg.paths.report_dir.display()))?;
    let log_path = cfg.paths.report_dir.join("ppo-log.jsonl");
    std::fs::write(&log_path, render_log(&log))
        .with_context(|| format!("cannot write {}", log_path.display()))?;
    let first = log.first().map(|l| l.mean_total_reward).unwrap_or(f64::NAN);
    let last = log.last().map(|l| l.mean_total_reward).unwrap_or(f64::NAN);
    eprintln!(
        "ppo: {} steps, mean reward {first:.4} -> {last:.4}, checkpoint {}",
        log.len(),
        out.display()
    );
    Ok(())
}

fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, out: Option<&str>) -> anyhow::Result<()> {
    let vocab = load_vocab(cfg)?;
    let splits = load_splits(cfg, &vocab)?;
    let world = load_world(cfg)?;
    let loaded = match checkpoint {
        Some(path) => Some(
            PolicyParameters::load(path)
                .with_context(|| format!("cannot load checkpoint {}", path.display()))?,
        ),
        None => None,
    };
    let rewriter = loaded.as_ref().map(|params| PolicyRewriter {
        params,
        vocab: &vocab,
        decode: cfg.eval.decode.clone(),
    });
    let mut report = evaluate(
        rewriter.as_ref().map(|r| r as &dyn Rewriter),
        &splits.eval,
        &world,
        &cfg.eval,
    )?;
    report.checkpoint = checkpoint.map(|p| p.display().to_string());
    let name = out.unwrap_or(if checkpoint.is_some() { "eval-policy.json" } else { "eval-baseline.json" });
    std::fs::create_dir_all(&cfg.paths.report_dir)
        .with_context(|| format!("cannot create {}", cfg.paths.report_dir.display()))?;
    let path = cfg.paths.report_dir.join(name);
    report.save(&path)?;
    eprintln!(
        "eval: {} prompts, inappropriate {:.4}, confidence {:.4}, alignment {:.4}, report {}",
        report.overall.n_prompts,
        report.overall.inappropriate_probability,
        report.overall.confidence_score,
        report.overall.alignment,
        path.display()
    );
    Ok(())
}

fn rewrite(cfg: &RunConfig, text: &str, checkpoint: &Path) -> anyhow::Result<()> {
    let vocab = load_vocab(cfg)?;
    let params = PolicyParameters::load(checkpoint)
        .with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
    let rewriter = PolicyRewriter { params: &params, vocab: &vocab, decode: DecodeConfig::greedy() };
    let prompt = Prompt::encode(&vocab, text);
    let mut rng = stream(cfg.seed, "rewrite");
    let line = match rewriter.rewrite(&prompt, &mut rng)? {
        Some(clean) => clean.raw,
        None => prompt.raw,
    };
    println!("{line}");
    Ok(())
}

fn compare_reports(a: &Path, b: &Path) -> anyhow::Result<()> {
    let baseline = EvalReport::load(a)
        .with_context(|| format!("cannot load report {}", a.display()))?;
    let candidate = EvalReport::load(b)
        .with_context(|| format!("cannot load report {}", b.display()))?;
    let delta = compare(&baseline, &candidate)?;
    print!("{}", delta.render_text());
    Ok(())
}
