//! Word-level vocabulary, prompt types, and the line-oriented pair file
//! format shared by every stage of the pipeline.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense index into a [`Vocabulary`].
pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const SEP: TokenId = 1;
pub const EOS: TokenId = 2;
pub const PAD: TokenId = 3;
pub const UNK: TokenId = 4;

const SPECIAL_TOKENS: [&str; 5] = ["<bos>", "<sep>", "<eos>", "<pad>", "<unk>"];
const VOCAB_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TextError {
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("vocabulary budget {0} is too small, need at least 8")]
    MaxSizeTooSmall(usize),
    #[error("token id {id} out of range for vocabulary of {len} entries")]
    IndexOutOfRange { id: TokenId, len: usize },
    #[error("line {line}: malformed record: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("unsupported vocabulary file version {0}")]
    UnsupportedVersion(u32),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> TextError {
    TextError::Io { path: path.display().to_string(), source }
}

/// Lowercases `text` and splits it into alphanumeric runs. Punctuation and
/// whitespace only separate tokens, they never become tokens themselves.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Word-level vocabulary with five reserved markers at fixed indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    lookup: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Builds a vocabulary from a corpus of raw texts, keeping the most
    /// frequent tokens up to `max_size` minus the five reserved slots.
    /// Frequency ties are broken by first occurrence in the corpus.
    pub fn build(corpus: &[String], max_size: usize) -> Result<Self, TextError> {
        if max_size < 8 {
            return Err(TextError::MaxSizeTooSmall(max_size));
        }
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        let mut order = 0usize;
        for text in corpus {
            for tok in tokenize(text) {
                let entry = counts.entry(tok).or_insert((0, order));
                entry.0 += 1;
                order += 1;
            }
        }
        if counts.is_empty() {
            return Err(TextError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        ranked.truncate(max_size - SPECIAL_TOKENS.len());

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(ranked.into_iter().map(|(tok, _)| tok));
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let lookup = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Vocabulary { tokens, lookup }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id_of(&self, token: &str) -> Option<TokenId> {
        self.lookup.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Result<&str, TextError> {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(TextError::IndexOutOfRange { id, len: self.tokens.len() })
    }

    pub fn is_special(id: TokenId) -> bool {
        id <= UNK
    }

    /// Maps text to token ids; words outside the vocabulary become [`UNK`].
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text)
            .into_iter()
            .map(|tok| self.lookup.get(&tok).copied().unwrap_or(UNK))
            .collect()
    }

    /// Renders token ids back to text. Reserved markers render as empty, so
    /// the result is the space-joined ordinary tokens.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<String, TextError> {
        let mut words = Vec::with_capacity(tokens.len());
        for &id in tokens {
            let tok = self.token(id)?;
            if !Self::is_special(id) {
                words.push(tok);
            }
        }
        Ok(words.join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let file = VocabFile { version: VOCAB_FILE_VERSION, tokens: self.tokens.clone() };
        let body = serde_json::to_string_pretty(&file).expect("vocabulary serializes");
        fs::write(path, body + "\n").map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let body = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let file: VocabFile = serde_json::from_str(&body)
            .map_err(|e| TextError::MalformedRecord { line: e.line(), reason: e.to_string() })?;
        if file.version != VOCAB_FILE_VERSION {
            return Err(TextError::UnsupportedVersion(file.version));
        }
        Ok(Self::from_tokens(file.tokens))
    }
}

/// A piece of text along with its encoding. `tokens` is empty until the
/// prompt has been encoded against a vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub raw: String,
    pub tokens: Vec<TokenId>,
}

impl Prompt {
    pub fn unencoded(raw: impl Into<String>) -> Self {
        Prompt { raw: raw.into(), tokens: Vec::new() }
    }

    pub fn encode(vocab: &Vocabulary, raw: impl Into<String>) -> Self {
        let raw = raw.into();
        let tokens = vocab.encode(&raw);
        Prompt { raw, tokens }
    }

    /// Re-derives `tokens` from `raw` against the given vocabulary.
    pub fn reencode(&mut self, vocab: &Vocabulary) {
        self.tokens = vocab.encode(&self.raw);
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Llm,
    Synthetic,
    Manual,
}

/// A toxic prompt together with its cleaned rewrite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPair {
    pub toxic: Prompt,
    pub clean: Prompt,
    pub provenance: Provenance,
    pub category: Option<String>,
}

impl PromptPair {
    pub fn reencode(&mut self, vocab: &Vocabulary) {
        self.toxic.reencode(vocab);
        self.clean.reencode(vocab);
    }
}

/// A prompt tagged with the category of harm it represents, if known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorizedPrompt {
    pub prompt: Prompt,
    pub category: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct PairRecord {
    toxic: String,
    clean: String,
    provenance: Provenance,
    category: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct PromptRecord {
    text: String,
    category: Option<String>,
}

/// Writes pairs as one JSON object per line, raw text only.
pub fn write_pairs(path: &Path, pairs: &[PromptPair]) -> Result<(), TextError> {
    let mut out = fs::File::create(path).map_err(|e| io_err(path, e))?;
    for pair in pairs {
        let record = PairRecord {
            toxic: pair.toxic.raw.clone(),
            clean: pair.clean.raw.clone(),
            provenance: pair.provenance,
            category: pair.category.clone(),
        };
        let line = serde_json::to_string(&record).expect("pair record serializes");
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// Reads a pair file written by [`write_pairs`]. Prompts come back
/// unencoded. Blank lines are not tolerated: every line must hold a record
/// with non-empty toxic and clean text.
pub fn read_pairs(path: &Path) -> Result<Vec<PromptPair>, TextError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        let record: PairRecord = serde_json::from_str(&line).map_err(|e| {
            TextError::MalformedRecord { line: line_no, reason: e.to_string() }
        })?;
        if record.toxic.trim().is_empty() || record.clean.trim().is_empty() {
            return Err(TextError::MalformedRecord {
                line: line_no,
                reason: "empty prompt side".to_string(),
            });
        }
        pairs.push(PromptPair {
            toxic: Prompt::unencoded(record.toxic),
            clean: Prompt::unencoded(record.clean),
            provenance: record.provenance,
            category: record.category,
        });
    }
    Ok(pairs)
}

/// Writes bare prompts (with optional categories) one JSON object per line.
pub fn write_prompts(path: &Path, prompts: &[CategorizedPrompt]) -> Result<(), TextError> {
    let mut out = fs::File::create(path).map_err(|e| io_err(path, e))?;
    for p in prompts {
        let record = PromptRecord { text: p.prompt.raw.clone(), category: p.category.clone() };
        let line = serde_json::to_string(&record).expect("prompt record serializes");
        writeln!(out, "{line}").map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

pub fn read_prompts(path: &Path) -> Result<Vec<CategorizedPrompt>, TextError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut prompts = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        let record: PromptRecord = serde_json::from_str(&line).map_err(|e| {
            TextError::MalformedRecord { line: line_no, reason: e.to_string() }
        })?;
        if record.text.trim().is_empty() {
            return Err(TextError::MalformedRecord {
                line: line_no,
                reason: "empty prompt".to_string(),
            });
        }
        prompts.push(CategorizedPrompt {
            prompt: Prompt::unencoded(record.text),
            category: record.category,
        });
    }
    Ok(prompts)
}
