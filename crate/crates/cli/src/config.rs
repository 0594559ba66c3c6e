//! Declarative run configuration: one TOML document mirroring every stage
//! config, loaded once per invocation and optionally overridden with
//! dotted `--set key=value` pairs.

use anyhow::{anyhow, Context};
use promptforge_core::eval::EvalConfig;
use promptforge_core::foundry::EndpointConfig;
use promptforge_core::policy::PolicyConfig;
use promptforge_core::ppo::PpoConfig;
use promptforge_core::reward::RewardConfig;
use promptforge_core::sft::SftConfig;
use promptforge_core::toyworld::ToyWorld;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Where artifacts live. Relative paths resolve against the working
/// directory of the invocation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    /// serialized world to score against; empty means the built-in world
    pub world_fixture: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            checkpoint_dir: PathBuf::from("checkpoints"),
            report_dir: PathBuf::from("reports"),
            world_fixture: PathBuf::new(),
        }
    }
}

/// Sizes and sources for pair construction and splitting.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// pairs to synthesize with `make-pairs --source synthetic`
    pub synth_pairs: usize,
    /// newline-separated prompts to send with `make-pairs --source llm`
    pub prompt_file: PathBuf,
    pub sft_size: usize,
    pub ppo_size: usize,
    pub eval_size: usize,
    /// vocabulary cap passed to the tokenizer
    pub vocab_max: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synth_pairs: 600,
            prompt_file: PathBuf::new(),
            sft_size: 300,
            ppo_size: 200,
            eval_size: 60,
            vocab_max: 512,
        }
    }
}

/// Union of every stage configuration plus the single global seed that
/// drives all of them through named substreams.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub policy: PolicyConfig,
    pub sft: SftConfig,
    pub ppo: PpoConfig,
    pub reward: RewardConfig,
    pub eval: EvalConfig,
    pub endpoint: EndpointConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            policy: PolicyConfig::default(),
            sft: SftConfig::default(),
            ppo: PpoConfig::default(),
            reward: RewardConfig::default(),
            eval: EvalConfig::default(),
            endpoint: EndpointConfig::default(),
        }
    }
}

pub fn load_config(path: &Path, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let raw = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let mut table: toml::Table = raw
        .parse()
        .with_context(|| format!("config file {} is not valid TOML", path.display()))?;
    for spec in overrides {
        apply_override(&mut table, spec)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(table)
        .try_into()
        .with_context(|| format!("config file {} has invalid fields", path.display()))?;
    // every stage draws from the one global seed; stage-local seed fields
    // in the file are deliberately ignored
    cfg.sft.seed = cfg.seed;
    cfg.ppo.seed = cfg.seed;
    cfg.eval.seed = cfg.seed;
    Ok(cfg)
}

fn apply_override(table: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override '{spec}' is not of the form key=value"))?;
    let parts: Vec<&str> = key.split('.').collect();
    if key.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(anyhow!("override '{spec}' has an empty key segment"));
    }
    // parse the right-hand side as a TOML literal so numbers and booleans
    // keep their types; anything unparseable is taken as a string
    let parsed = match format!("v = {value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(value.to_string()),
    };
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        node = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override key '{key}' descends into a non-table value"))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

pub fn load_world(cfg: &RunConfig) -> anyhow::Result<ToyWorld> {
    if cfg.paths.world_fixture.as_os_str().is_empty() {
        return Ok(ToyWorld::world_v1());
    }
    ToyWorld::load(&cfg.paths.world_fixture).with_context(|| {
        format!("cannot load world fixture {}", cfg.paths.world_fixture.display())
    })
}
