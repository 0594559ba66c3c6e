//! Builds the toxic-clean pair dataset: renders the rewriting instruction,
//! calls a chat-completion endpoint, parses the replies into pairs,
//! synthesizes pairs from the surrogate world, and splits everything into
//! the supervised / reinforcement / evaluation subsets.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::text::{CategorizedPrompt, Prompt, PromptPair, Provenance};
use crate::toyworld::ToyWorld;

#[derive(Debug, thiserror::Error)]
pub enum FoundryError {
    #[error("instruction batch is empty")]
    EmptyBatch,
    #[error("api key environment variable {var} is not set")]
    MissingApiKey { var: String },
    #[error("transport failure: {0}")]
    TransportError(String),
    #[error("rate limited and retries exhausted")]
    RateLimited,
    #[error("malformed endpoint response: {0}")]
    MalformedResponse(String),
    #[error("endpoint rejected the request with status {status}")]
    Endpoint { status: u16 },
    #[error("the world has no synonym entries to synthesize from")]
    NoSynonyms,
    #[error("need {need} distinct pairs but only {have} are available")]
    InsufficientPairs { have: usize, need: usize },
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("split file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// name of the environment variable holding the bearer token
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub max_retries: u32,
    pub temperature: f64,
    pub max_in_flight: usize,
    pub prompts_per_request: usize,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "PROMPTFORGE_API_KEY".into(),
            timeout_secs: 30,
            max_retries: 3,
            temperature: 1.0,
            max_in_flight: 2,
            prompts_per_request: 20,
        }
    }
}

impl EndpointConfig {
    pub fn validate(&self) -> Result<(), FoundryError> {
        if self.timeout_secs == 0 {
            return Err(FoundryError::TransportError("timeout must be positive".into()));
        }
        if self.max_in_flight == 0 || self.prompts_per_request == 0 {
            return Err(FoundryError::TransportError(
                "in-flight and per-request limits must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

const SYSTEM_INSTRUCTION: &str = "Now you are asked to play the role of Granny Wolf who was \
very happy to make toxic prompts not toxic and make slight changes to the words in the \
sentences that may produce harmful content so that the content they produce becomes appropriate.";

const USER_PREAMBLE: &str = "I will give you some sentences (prompts) describing scenarios \
with negative and harmful information. Changing only the words that will have a negative \
impact and leaving the other words untouched leaves the generated picture mostly intact. \
Here are some examples:";

const FEW_SHOT_EXAMPLES: [(&str, &str); 5] = [
    ("A bad apple on the white table", "A normal apple on the white table."),
    ("veins on an arm forming a rose", "Branches on an arm forming a rose."),
    (
        "the four horsewomen of the apocalypse, painting by tom of finland, gaston bussiere, \
craig mullins, j. c. leyendecker",
        "The four horsewomen in dresses of the art world, paintings by Tom of Finland, Gaston \
Bussiere, Craig Mullins, J. C. Leyendecker.",
    ),
    (
        "photo of the first russian robot policeman guarding a vodka store, babushkas visible \
in the background",
        "Photo of the first Russian automated unarmed policeman guarding a vodka store, \
babushkas visible in the background.",
    ),
    (
        "the night of despair, doompunk, dark emotional portrait, nineteenth century painting \
masterpiece",
        "The evening of happiness, doompunk, emotional portrait, nineteenth-century artwork \
masterpiece.",
    ),
];

const USER_CLOSING: &str = "All sentence pairs should be formatted like this: Original \
Sentence: xx Modified Sentence: xx. Here are some original prompts that need to be modified:";

/// The verbatim two-message rewriting instruction, with the batch prompts
/// appended newline-separated as the hint string.
pub fn render_instruction(toxic_batch: &[Prompt]) -> Result<Vec<ChatMessage>, FoundryError> {
    if toxic_batch.is_empty() {
        return Err(FoundryError::EmptyBatch);
    }
    let examples = FEW_SHOT_EXAMPLES
        .iter()
        .map(|(x, y)| format!("Original Sentence: {x} Modified Sentence: {y}"))
        .collect::<Vec<_>>()
        .join(" ");
    let hint = toxic_batch.iter().map(|p| p.raw.as_str()).collect::<Vec<_>>().join("\n");
    let user = format!("{USER_PREAMBLE} {examples} {USER_CLOSING} {hint}");
    Ok(vec![
        ChatMessage { role: ChatRole::System, content: SYSTEM_INSTRUCTION.to_string() },
        ChatMessage { role: ChatRole::User, content: user },
    ])
}

const ORIGINAL_MARKER: &str = "Original Sentence:";
const MODIFIED_MARKER: &str = "Modified Sentence:";

/// Scans arbitrary response text for Original/Modified sentence spans. Never
/// fails; spans that cannot be read cleanly are dropped and counted.
pub fn parse_pairs(raw: &str) -> (Vec<PromptPair>, usize) {
    let text = raw.trim();
    if text.is_empty() {
        return (Vec::new(), 0);
    }
    if !text.contains(ORIGINAL_MARKER) {
        return (Vec::new(), 1);
    }
    let mut pairs = Vec::new();
    let mut rejected = 0usize;
    let mut segments = text.split(ORIGINAL_MARKER);
    let preamble = segments.next().unwrap_or("");
    if preamble.contains(MODIFIED_MARKER) {
        rejected += 1;
    }
    for segment in segments {
        match segment.split_once(MODIFIED_MARKER) {
            None => rejected += 1,
            Some((original, modified)) => {
                let original = original.trim();
                let modified = modified.trim();
                if original.is_empty() || modified.is_empty() || modified.contains(MODIFIED_MARKER)
                {
                    rejected += 1;
                } else {
                    pairs.push(PromptPair {
                        toxic: Prompt::unencoded(original),
                        clean: Prompt::unencoded(modified),
                        provenance: Provenance::Llm,
                        category: None,
                    });
                }
            }
        }
    }
    (pairs, rejected)
}

/// What came back from one HTTP exchange. Transport-level failures are the
/// `Err` branch of the trait method instead.
#[derive(Debug, Clone)]
pub struct TransportReply {
    pub status: u16,
    pub body: String,
}

/// Seam between the chat client and the network, so tests can script
/// exchanges without sockets.
pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<TransportReply, String>;
}

/// Blocking HTTP transport used outside of tests.
pub struct UreqTransport;

impl HttpTransport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        bearer: &str,
        body: &serde_json::Value,
        timeout: Duration,
    ) -> Result<TransportReply, String> {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        let request = agent
            .post(url)
            .set("authorization", &format!("Bearer {bearer}"))
            .set("content-type", "application/json");
        match request.send_json(body.clone()) {
            Ok(resp) => {
                let status = resp.status();
                let body = resp.into_string().map_err(|e| e.to_string())?;
                Ok(TransportReply { status, body })
            }
            Err(ureq::Error::Status(status, resp)) => {
                Ok(TransportReply { status, body: resp.into_string().unwrap_or_default() })
            }
            Err(ureq::Error::Transport(t)) => Err(t.to_string()),
        }
    }
}

struct InFlightGate {
    active: Mutex<usize>,
    freed: Condvar,
    limit: usize,
}

impl InFlightGate {
    fn new(limit: usize) -> Self {
        Self { active: Mutex::new(0), freed: Condvar::new(), limit: limit.max(1) }
    }

    fn acquire(&self) -> InFlightPermit<'_> {
        let mut active = self.active.lock().expect("gate poisoned");
        while *active >= self.limit {
            active = self.freed.wait(active).expect("gate poisoned");
        }
        *active += 1;
        InFlightPermit { gate: self }
    }
}

struct InFlightPermit<'a> {
    gate: &'a InFlightGate,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        let mut active = self.gate.active.lock().expect("gate poisoned");
        *active -= 1;
        self.gate.freed.notify_one();
    }
}

/// Chat-completion client with retry, backoff, and an in-flight cap.
pub struct ChatClient {
    cfg: EndpointConfig,
    transport: Box<dyn HttpTransport>,
    backoff: Box<dyn Fn(u32) -> Duration + Send + Sync>,
    gate: InFlightGate,
}

impl ChatClient {
    pub fn new(cfg: EndpointConfig) -> Self {
        Self::with_transport(
            cfg,
            Box::new(UreqTransport),
            Box::new(|attempt| {
                Duration::from_millis((500u64 << attempt.min(4)).min(8_000))
            }),
        )
    }

    /// Client over a scripted transport and custom backoff; the test seam.
    pub fn with_transport(
        cfg: EndpointConfig,
        transport: Box<dyn HttpTransport>,
        backoff: Box<dyn Fn(u32) -> Duration + Send + Sync>,
    ) -> Self {
        let gate = InFlightGate::new(cfg.max_in_flight);
        Self { cfg, transport, backoff, gate }
    }

    /// Sends the messages and returns the assistant content of the first
    /// choice, retrying transient failures with backoff.
    pub fn request_rewrites(&self, messages: &[ChatMessage]) -> Result<String, FoundryError> {
        let key = std::env::var(&self.cfg.api_key_env)
            .map_err(|_| FoundryError::MissingApiKey { var: self.cfg.api_key_env.clone() })?;
        let body = serde_json::json!({
            "model": self.cfg.model,
            "messages": messages,
            "temperature": self.cfg.temperature,
        });
        let timeout = Duration::from_secs(self.cfg.timeout_secs);
        let _permit = self.gate.acquire();

        let mut attempt: u32 = 0;
        loop {
            let outcome = self.transport.post_json(&self.cfg.base_url, &key, &body, timeout);
            let failure = match outcome {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    return extract_content(&reply.body);
                }
                Ok(reply) if reply.status == 429 => FoundryError::RateLimited,
                Ok(reply) if reply.status >= 500 => FoundryError::Endpoint { status: reply.status },
                Ok(reply) => return Err(FoundryError::Endpoint { status: reply.status }),
                Err(detail) => FoundryError::TransportError(detail),
            };
            if attempt >= self.cfg.max_retries {
                return Err(failure);
            }
            std::thread::sleep((self.backoff)(attempt));
            attempt += 1;
        }
    }

    /// Full instruction round trip for a list of toxic prompts: batches them,
    /// renders the instruction per batch, and parses every reply. Returns the
    /// collected pairs and the total rejected-span count.
    pub fn fetch_pairs(&self, prompts: &[Prompt]) -> Result<(Vec<PromptPair>, usize), FoundryError> {
        self.cfg.validate()?;
        let mut pairs = Vec::new();
        let mut rejected = 0usize;
        for batch in prompts.chunks(self.cfg.prompts_per_request) {
            let messages = render_instruction(batch)?;
            let reply = self.request_rewrites(&messages)?;
            let (batch_pairs, batch_rejected) = parse_pairs(&reply);
            pairs.extend(batch_pairs);
            rejected += batch_rejected;
        }
        Ok((pairs, rejected))
    }
}

fn extract_content(body: &str) -> Result<String, FoundryError> {
    let value: serde_json::Value = serde_json::from_str(body)
        .map_err(|e| FoundryError::MalformedResponse(e.to_string()))?;
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| FoundryError::MalformedResponse("no assistant content in first choice".into()))
}

/// Synthesizes toxic-clean pairs from the world lexicon: each toxic prompt
/// mixes neutral scene words with at least one toxic word, and the clean
/// side substitutes every toxic word with its safe synonym.
pub fn synth_pairs(
    world: &ToyWorld,
    n: usize,
    rng: &mut StdRng,
) -> Result<Vec<PromptPair>, FoundryError> {
    let toxic_entries: Vec<(&str, &str, Option<&str>)> = world
        .toxic_entries()
        .map(|t| (t.word.as_str(), t.synonym.as_deref().expect("toxic entries carry synonyms"), t.category.as_deref()))
        .collect();
    if toxic_entries.is_empty() {
        return Err(FoundryError::NoSynonyms);
    }
    let neutrals = world.neutral_words();

    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let len: usize = rng.random_range(4..=8);
        let n_toxic = if len >= 6 && rng.random::<f64>() < 0.25 { 2 } else { 1 };

        let mut words: Vec<&str> = Vec::with_capacity(len);
        let mut toxic_picks: Vec<usize> = (0..toxic_entries.len()).collect();
        toxic_picks.shuffle(rng);
        for &pick in toxic_picks.iter().take(n_toxic) {
            words.push(toxic_entries[pick].0);
        }
        let mut neutral_picks: Vec<usize> = (0..neutrals.len()).collect();
        neutral_picks.shuffle(rng);
        for &pick in neutral_picks.iter().take(len - n_toxic) {
            words.push(neutrals[pick]);
        }
        words.shuffle(rng);

        let category = words
            .iter()
            .find_map(|w| {
                toxic_entries
                    .iter()
                    .find(|(tw, _, _)| tw == w)
                    .and_then(|(_, _, cat)| cat.map(str::to_string))
            });
        let clean_words: Vec<&str> = words
            .iter()
            .map(|w| {
                toxic_entries
                    .iter()
                    .find(|(tw, _, _)| tw == w)
                    .map(|(_, safe, _)| *safe)
                    .unwrap_or(w)
            })
            .collect();

        pairs.push(PromptPair {
            toxic: Prompt::unencoded(words.join(" ")),
            clean: Prompt::unencoded(clean_words.join(" ")),
            provenance: Provenance::Synthetic,
            category,
        });
    }
    Ok(pairs)
}

/// The four dataset subsets, disjoint by toxic-prompt text.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DatasetSplits {
    /// training pairs for the supervised stage
    pub sft: Vec<PromptPair>,
    /// toxic prompts only, for rollout collection
    pub ppo: Vec<Prompt>,
    /// held-out toxic prompts with category labels
    pub eval: Vec<CategorizedPrompt>,
    /// leftover toxic prompts, available as instruction hints
    pub template: Vec<Prompt>,
}

impl DatasetSplits {
    pub fn save(&self, path: &Path) -> Result<(), FoundryError> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| FoundryError::Malformed { path: path.to_path_buf(), reason: e.to_string() })?;
        std::fs::write(path, body)
            .map_err(|source| FoundryError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, FoundryError> {
        let body = std::fs::read_to_string(path)
            .map_err(|source| FoundryError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&body)
            .map_err(|e| FoundryError::Malformed { path: path.to_path_buf(), reason: e.to_string() })
    }

    /// Re-encodes every stored prompt against `vocab`.
    pub fn reencode(&mut self, vocab: &crate::text::Vocabulary) {
        for pair in &mut self.sft {
            pair.reencode(vocab);
        }
        for prompt in &mut self.ppo {
            prompt.reencode(vocab);
        }
        for item in &mut self.eval {
            item.prompt.reencode(vocab);
        }
        for prompt in &mut self.template {
            prompt.reencode(vocab);
        }
    }
}

/// Deduplicates by toxic text (first occurrence wins), shuffles by seed, and
/// assigns contiguous runs to the subsets; whatever remains becomes the
/// template pool.
pub fn split_dataset(
    pairs: &[PromptPair],
    counts: (usize, usize, usize),
    seed: u64,
) -> Result<DatasetSplits, FoundryError> {
    let mut seen = HashSet::new();
    let unique: Vec<&PromptPair> =
        pairs.iter().filter(|p| seen.insert(p.toxic.raw.clone())).collect();
    let (n_sft, n_ppo, n_eval) = counts;
    let need = n_sft + n_ppo + n_eval;
    if unique.len() < need {
        return Err(FoundryError::InsufficientPairs { have: unique.len(), need });
    }
    let mut order: Vec<usize> = (0..unique.len()).collect();
    order.shuffle(&mut crate::rng::stream(seed, "dataset-split"));

    let mut splits = DatasetSplits::default();
    for (slot, &idx) in order.iter().enumerate() {
        let pair = unique[idx];
        if slot < n_sft {
            splits.sft.push(pair.clone());
        } else if slot < n_sft + n_ppo {
            splits.ppo.push(pair.toxic.clone());
        } else if slot < need {
            splits
                .eval
                .push(CategorizedPrompt { prompt: pair.toxic.clone(), category: pair.category.clone() });
        } else {
            splits.template.push(pair.toxic.clone());
        }
    }
    Ok(splits)
}
