//! Black-box tests of the binary: exit codes, help output, config
//! handling, and byte-identical artifacts across reruns of every stage.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_promptforge"))
}

const MICRO_CONFIG: &str = r#"
seed = 11

[data]
synth_pairs = 60
sft_size = 24
ppo_size = 12
eval_size = 8

[policy]
max_seq = 48
d_model = 16
n_heads = 2
n_layers = 1
d_ff = 32
adapter_rank = 2

[sft]
learning_rate = 2e-3
epochs = 1

[ppo]
learning_rate = 1e-3
batch_size = 2
accumulation = 1
epochs = 1
inner_epochs = 1
samples_per_reward = 2
max_new_tokens = 6

[eval]
images_per_prompt = 2
"#;

fn setup(dir: &Path) {
    std::fs::write(dir.join("promptforge.toml"), MICRO_CONFIG).unwrap();
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "promptforge {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_stage_chain(dir: &Path) {
    run(dir, &["make-pairs", "--source", "synthetic"]);
    run(dir, &["build-vocab"]);
    run(dir, &["split"]);
    run(dir, &["sft"]);
    run(dir, &["ppo"]);
    run(dir, &["eval"]);
    run(dir, &["eval", "--checkpoint", "checkpoints/ppo-final.ckpt"]);
}

#[test]
fn help_exits_zero_and_lists_flags_everywhere() {
    let root = bin().arg("--help").output().unwrap();
    assert!(root.status.success());
    let text = String::from_utf8_lossy(&root.stdout).to_string();
    for sub in ["build-vocab", "make-pairs", "split", "sft", "ppo", "eval", "rewrite", "compare"] {
        assert!(text.contains(sub), "root help should list {sub}");
        let out = bin().args([sub, "--help"]).output().unwrap();
        assert!(out.status.success(), "{sub} --help should exit 0");
        let body = String::from_utf8_lossy(&out.stdout).to_string();
        assert!(body.contains("--config"), "{sub} help should list --config");
        assert!(body.contains("--set"), "{sub} help should list --set");
        assert!(body.contains("--threads"), "{sub} help should list --threads");
    }
    let eval_help = bin().args(["eval", "--help"]).output().unwrap();
    assert!(String::from_utf8_lossy(&eval_help.stdout).contains("--checkpoint"));
    let rewrite_help = bin().args(["rewrite", "--help"]).output().unwrap();
    let rewrite_text = String::from_utf8_lossy(&rewrite_help.stdout).to_string();
    assert!(rewrite_text.contains("--prompt"));
    assert!(rewrite_text.contains("--checkpoint"));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn zero_threads_is_a_usage_error() {
    let out = bin().args(["sft", "--threads", "0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_config_file_is_a_runtime_error_naming_the_path() {
    let out = bin().args(["sft", "--config", "/no/such/file.toml"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/no/such/file.toml"));
}

#[test]
fn llm_source_without_prompt_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let out = bin()
        .current_dir(dir.path())
        .args(["make-pairs", "--source", "llm"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prompt_file"));
}

#[test]
fn every_stage_reproduces_its_artifacts_byte_for_byte() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    setup(first.path());
    setup(second.path());
    run_stage_chain(first.path());
    run_stage_chain(second.path());

    for rel in [
        "data/pairs.jsonl",
        "data/vocab.json",
        "data/splits.json",
        "checkpoints/sft-final.ckpt",
        "checkpoints/ppo-final.ckpt",
        "reports/sft-log.jsonl",
        "reports/ppo-log.jsonl",
        "reports/eval-baseline.json",
        "reports/eval-policy.json",
    ] {
        let a = std::fs::read(first.path().join(rel)).unwrap();
        let b = std::fs::read(second.path().join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs between identical runs");
    }
}

#[test]
fn rewrite_prints_exactly_one_line() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    run(dir.path(), &["make-pairs", "--source", "synthetic"]);
    run(dir.path(), &["build-vocab"]);
    run(dir.path(), &["split"]);
    run(dir.path(), &["sft"]);
    let out = run(
        dir.path(),
        &["rewrite", "--prompt", "a pool of blood", "--checkpoint", "checkpoints/sft-final.ckpt"],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.ends_with('\n'));
    assert_eq!(text.trim_end_matches('\n').lines().count(), 1);
    assert!(!text.trim().is_empty());
}

#[test]
fn eval_stamps_the_checkpoint_into_the_report() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    run(dir.path(), &["make-pairs", "--source", "synthetic"]);
    run(dir.path(), &["build-vocab"]);
    run(dir.path(), &["split"]);
    run(dir.path(), &["sft"]);
    run(dir.path(), &["eval", "--checkpoint", "checkpoints/sft-final.ckpt", "--out", "r.json"]);
    let raw = std::fs::read_to_string(dir.path().join("reports/r.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&raw).unwrap();
    assert_eq!(report["checkpoint"], "checkpoints/sft-final.ckpt");

    run(dir.path(), &["eval", "--out", "base.json"]);
    let raw = std::fs::read_to_string(dir.path().join("reports/base.json")).unwrap();
    let report: serde_json::Value = serde_json::from_str(&raw).unwrap();
    assert!(report["checkpoint"].is_null());
}

#[test]
fn set_overrides_reach_the_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    run(dir.path(), &["make-pairs", "--source", "synthetic"]);
    run(dir.path(), &["split", "--set", "data.sft_size=10", "--set", "data.ppo_size=5"]);
    let raw = std::fs::read_to_string(dir.path().join("data/splits.json")).unwrap();
    let splits: serde_json::Value = serde_json::from_str(&raw).unwrap();
    assert_eq!(splits["sft"].as_array().unwrap().len(), 10);
    assert_eq!(splits["ppo"].as_array().unwrap().len(), 5);
}

#[test]
fn compare_renders_deltas_for_two_reports() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    run(dir.path(), &["make-pairs", "--source", "synthetic"]);
    run(dir.path(), &["build-vocab"]);
    run(dir.path(), &["split"]);
    run(dir.path(), &["eval", "--out", "a.json"]);
    run(dir.path(), &["eval", "--out", "b.json"]);
    let out = run(dir.path(), &["compare", "reports/a.json", "reports/b.json"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("(overall)"));
    assert!(text.contains("inappropriate_probability"));
}
