//! Deterministic surrogate for the image generator and every classifier:
//! token semantics live in a small vector space, toxicity is a sigmoid along
//! one fixed direction, alignment is bag-of-vectors cosine, and a second
//! flagger plus a distinct eval-side projection stand in for the independent
//! evaluation stack. Also hosts a brute-force rewrite oracle used to bound
//! how much objective a trained policy leaves on the table.

use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::reward::{alignment_score, toxic_score, GeneratedSample, RewardConfig, ScorerBundle, ScorerError};
use crate::text::{tokenize, Prompt};

pub const WORLD_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("prompt has no usable tokens")]
    EmptyPrompt,
    #[error("rewrite search space too large: {0}")]
    TooManyCandidates(String),
    #[error("at least one sample draw is required")]
    NoSamples,
    #[error("world file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("unsupported world file version {0}")]
    UnsupportedVersion(u32),
    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldToken {
    pub word: String,
    /// semantic vector s_t, loading included
    pub vector: Vec<f64>,
    /// component along the toxic direction
    pub loading: f64,
    /// safe replacement word, present only on toxic tokens
    pub synonym: Option<String>,
    /// category label, present only on toxic tokens
    pub category: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyWorld {
    pub version: u32,
    pub seed: u64,
    pub dim: usize,
    /// generation noise scale
    pub sigma: f64,
    pub k_tox: f64,
    pub b_tox: f64,
    /// unit direction u the toxicity classifier reads
    pub toxic_direction: Vec<f64>,
    /// unit direction of the second flagger
    pub second_direction: Vec<f64>,
    pub second_threshold: f64,
    /// row-major dim x dim full-rank matrix used by the eval-side scorer
    pub eval_projection: Vec<f64>,
    pub tokens: Vec<WorldToken>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn normalize(v: &mut [f64]) -> bool {
    let n = norm(v);
    if n < 1e-12 {
        return false;
    }
    for x in v {
        *x /= n;
    }
    true
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn gaussian_vec(dim: usize, rng: &mut StdRng) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Random unit vector orthogonal to `u`.
fn unit_orthogonal(u: &[f64], rng: &mut StdRng) -> Vec<f64> {
    loop {
        let mut v = gaussian_vec(u.len(), rng);
        let c = dot(&v, u);
        for (vi, ui) in v.iter_mut().zip(u) {
            *vi -= c * ui;
        }
        if normalize(&mut v) {
            return v;
        }
    }
}

const SYNONYM_TABLE: [(&str, &str, &str); 6] = [
    ("gory", "tidy", "violence"),
    ("menacing", "friendly", "harassment"),
    ("obscene", "modest", "sexual"),
    ("grisly", "serene", "shocking"),
    ("woeful", "hopeful", "despair"),
    ("lawless", "lawful", "crime"),
];

const NEUTRAL_WORDS: [&str; 28] = [
    "apple", "table", "portrait", "forest", "city", "river", "painting", "photo", "sunset",
    "garden", "street", "castle", "mountain", "bridge", "library", "window", "ocean", "village",
    "lantern", "field", "market", "harbor", "museum", "temple", "statue", "meadow", "tower",
    "cottage",
];

impl ToyWorld {
    /// The default fixture world: 40 tokens (6 toxic, 6 safe, 28 neutral),
    /// built deterministically from seed 7 and shipped as
    /// `fixtures/world-v1.json`.
    pub fn world_v1() -> Self {
        Self::build(7, 8, 0.05, 6.0, 0.35, 0.6)
    }

    fn build(seed: u64, dim: usize, sigma: f64, k_tox: f64, b_tox: f64, second_threshold: f64) -> Self {
        let mut rng = crate::rng::stream(seed, "world-build");

        let mut u = gaussian_vec(dim, &mut rng);
        assert!(normalize(&mut u));

        let w = unit_orthogonal(&u, &mut rng);
        let second_direction: Vec<f64> =
            u.iter().zip(&w).map(|(ui, wi)| 0.8 * ui + 0.6 * wi).collect();

        let mut tokens = Vec::with_capacity(40);
        for (toxic_word, safe_word, category) in SYNONYM_TABLE {
            let base = unit_orthogonal(&u, &mut rng);
            let loading: f64 = rng.random_range(1.2..2.2);
            let toxic_vec: Vec<f64> =
                base.iter().zip(&u).map(|(b, ui)| b + loading * ui).collect();
            tokens.push(WorldToken {
                word: toxic_word.to_string(),
                vector: toxic_vec,
                loading,
                synonym: Some(safe_word.to_string()),
                category: Some(category.to_string()),
            });
            tokens.push(WorldToken {
                word: safe_word.to_string(),
                vector: base,
                loading: 0.0,
                synonym: None,
                category: None,
            });
        }
        for word in NEUTRAL_WORDS {
            tokens.push(WorldToken {
                word: word.to_string(),
                vector: unit_orthogonal(&u, &mut rng),
                loading: 0.0,
                synonym: None,
                category: None,
            });
        }

        // Gaussian entries plus half the identity: almost surely full rank
        // and never the identity itself.
        let mut eval_projection = vec![0.0; dim * dim];
        for (i, cell) in eval_projection.iter_mut().enumerate() {
            let g: f64 = rng.sample(StandardNormal);
            *cell = g + if i % (dim + 1) == 0 { 0.5 } else { 0.0 };
        }

        Self {
            version: WORLD_VERSION,
            seed,
            dim,
            sigma,
            k_tox,
            b_tox,
            toxic_direction: u,
            second_direction,
            second_threshold,
            eval_projection,
            tokens,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), WorldError> {
        let body = serde_json::to_string_pretty(self)
            .map_err(|e| WorldError::Malformed { path: path.to_path_buf(), reason: e.to_string() })?;
        std::fs::write(path, body)
            .map_err(|source| WorldError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        let body = std::fs::read_to_string(path)
            .map_err(|source| WorldError::Io { path: path.to_path_buf(), source })?;
        let world: Self = serde_json::from_str(&body)
            .map_err(|e| WorldError::Malformed { path: path.to_path_buf(), reason: e.to_string() })?;
        if world.version != WORLD_VERSION {
            return Err(WorldError::UnsupportedVersion(world.version));
        }
        let bad_shape = world.toxic_direction.len() != world.dim
            || world.second_direction.len() != world.dim
            || world.eval_projection.len() != world.dim * world.dim
            || world.tokens.iter().any(|t| t.vector.len() != world.dim);
        if bad_shape {
            return Err(WorldError::Malformed {
                path: path.to_path_buf(),
                reason: "vector shapes do not match the declared dimension".into(),
            });
        }
        Ok(world)
    }

    pub fn entry(&self, word: &str) -> Option<&WorldToken> {
        self.tokens.iter().find(|t| t.word == word)
    }

    pub fn has_synonyms(&self) -> bool {
        self.tokens.iter().any(|t| t.synonym.is_some())
    }

    /// Tokens that carry a safe synonym, i.e. the toxic part of the lexicon.
    pub fn toxic_entries(&self) -> impl Iterator<Item = &WorldToken> {
        self.tokens.iter().filter(|t| t.synonym.is_some())
    }

    /// Tokens that are neither toxic nor anyone's synonym target.
    pub fn neutral_words(&self) -> Vec<&str> {
        let synonym_targets: Vec<&str> =
            self.tokens.iter().filter_map(|t| t.synonym.as_deref()).collect();
        self.tokens
            .iter()
            .filter(|t| t.synonym.is_none() && !synonym_targets.contains(&t.word.as_str()))
            .map(|t| t.word.as_str())
            .collect()
    }

    /// Sum of semantic vectors over the prompt's words. Unknown words
    /// contribute nothing; a prompt with no words at all is an error.
    fn bag_vector(&self, raw: &str) -> Result<Vec<f64>, WorldError> {
        let words = tokenize(raw);
        if words.is_empty() {
            return Err(WorldError::EmptyPrompt);
        }
        let mut sum = vec![0.0; self.dim];
        for word in &words {
            if let Some(entry) = self.entry(word) {
                for (s, v) in sum.iter_mut().zip(&entry.vector) {
                    *s += v;
                }
            }
        }
        Ok(sum)
    }

    /// One synthetic image: the normalized noisy bag of the rewrite's
    /// vectors. Exactly `dim` normal draws are consumed per call, so streams
    /// stay aligned whether or not sigma is zero.
    pub fn generate_image(&self, x_prime: &Prompt, rng: &mut StdRng) -> Result<GeneratedSample, WorldError> {
        let mut v = self.bag_vector(&x_prime.raw)?;
        for x in v.iter_mut() {
            let eps: f64 = rng.sample(StandardNormal);
            *x += self.sigma * eps;
        }
        if !normalize(&mut v) {
            return Err(WorldError::EmptyPrompt);
        }
        Ok(GeneratedSample { embedding: v, prompt: x_prime.raw.clone(), draw: 0 })
    }

    pub fn tox_confidence(&self, sample: &GeneratedSample) -> f64 {
        sigmoid(self.k_tox * (dot(&sample.embedding, &self.toxic_direction) - self.b_tox))
    }

    /// Cosine between the normalized bag of `x` and the sample embedding.
    pub fn align_similarity(&self, x: &Prompt, sample: &GeneratedSample) -> Result<f64, WorldError> {
        let mut bag = self.bag_vector(&x.raw)?;
        if !normalize(&mut bag) {
            return Err(WorldError::EmptyPrompt);
        }
        Ok(dot(&bag, &sample.embedding))
    }

    /// Like align_similarity but both vectors pass through the eval
    /// projection first, so the eval-side metric is not the training metric.
    pub fn eval_similarity(&self, x: &Prompt, sample: &GeneratedSample) -> Result<f64, WorldError> {
        let bag = self.bag_vector(&x.raw)?;
        let mut pb = self.project(&bag);
        let mut pe = self.project(&sample.embedding);
        if !normalize(&mut pb) || !normalize(&mut pe) {
            return Err(WorldError::EmptyPrompt);
        }
        Ok(dot(&pb, &pe))
    }

    fn project(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; d];
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&self.eval_projection[i * d..(i + 1) * d], v);
        }
        out
    }

    pub fn second_flag(&self, sample: &GeneratedSample) -> bool {
        dot(&sample.embedding, &self.second_direction) > self.second_threshold
    }

    /// Raw standard-normal noise draws, `dim` values each, for
    /// common-random-number estimates across rewrite candidates.
    pub fn draw_noises(&self, n: usize, rng: &mut StdRng) -> Vec<Vec<f64>> {
        (0..n).map(|_| gaussian_vec(self.dim, rng)).collect()
    }

    /// Estimates the toxicity-plus-alignment objective of `candidate_raw` as
    /// a rewrite of `x`, one generated sample per provided noise vector.
    pub fn objective_with_noises(
        &self,
        x: &Prompt,
        candidate_raw: &str,
        noises: &[Vec<f64>],
    ) -> Result<f64, WorldError> {
        if noises.is_empty() {
            return Err(WorldError::NoSamples);
        }
        let bag = self.bag_vector(candidate_raw)?;
        let mut x_bag = self.bag_vector(&x.raw)?;
        if !normalize(&mut x_bag) {
            return Err(WorldError::EmptyPrompt);
        }
        let mut confidences = Vec::with_capacity(noises.len());
        let mut similarities = Vec::with_capacity(noises.len());
        for eps in noises {
            let mut e: Vec<f64> =
                bag.iter().zip(eps).map(|(b, n)| b + self.sigma * n).collect();
            if !normalize(&mut e) {
                return Err(WorldError::EmptyPrompt);
            }
            confidences
                .push(sigmoid(self.k_tox * (dot(&e, &self.toxic_direction) - self.b_tox)));
            similarities.push(dot(&x_bag, &e));
        }
        let cfg = RewardConfig::default();
        let s_toxic = toxic_score(&cfg, &confidences).expect("non-empty by construction");
        let s_alt = alignment_score(&cfg, &similarities).expect("non-empty by construction");
        Ok(s_toxic + s_alt)
    }

    /// Brute force over all synonym-substitution subsets of `x` (identity
    /// included), scoring each candidate on the same noise draws. Noise is
    /// drawn from `rng` before anything else, so two callers seeding
    /// identical streams share draws exactly. Ties keep the earliest
    /// candidate, which puts the identity rewrite first.
    pub fn oracle_best_rewrite(
        &self,
        x: &Prompt,
        n_mc: usize,
        rng: &mut StdRng,
    ) -> Result<(Prompt, f64), WorldError> {
        if n_mc == 0 {
            return Err(WorldError::NoSamples);
        }
        let words = tokenize(&x.raw);
        if words.is_empty() {
            return Err(WorldError::EmptyPrompt);
        }
        if words.len() > 12 {
            return Err(WorldError::TooManyCandidates(format!(
                "{} tokens exceeds the 12-token limit",
                words.len()
            )));
        }
        let substitutable: Vec<(usize, String)> = words
            .iter()
            .enumerate()
            .filter_map(|(i, w)| {
                self.entry(w).and_then(|t| t.synonym.clone()).map(|s| (i, s))
            })
            .collect();
        let m = substitutable.len();
        if m > 6 {
            return Err(WorldError::TooManyCandidates(format!(
                "{m} substitutable tokens exceeds the 6-token limit"
            )));
        }

        let noises = self.draw_noises(n_mc, rng);
        let mut best_mask = 0usize;
        let mut best_value = f64::NEG_INFINITY;
        for mask in 0..(1usize << m) {
            let mut candidate = words.clone();
            for (bit, (pos, safe)) in substitutable.iter().enumerate() {
                if mask & (1 << bit) != 0 {
                    candidate[*pos] = safe.clone();
                }
            }
            let value = self.objective_with_noises(x, &candidate.join(" "), &noises)?;
            if value > best_value {
                best_value = value;
                best_mask = mask;
            }
        }

        let best_prompt = if best_mask == 0 {
            x.clone()
        } else {
            let mut candidate = words;
            for (bit, (pos, safe)) in substitutable.iter().enumerate() {
                if best_mask & (1 << bit) != 0 {
                    candidate[*pos] = safe.clone();
                }
            }
            Prompt::unencoded(candidate.join(" "))
        };
        Ok((best_prompt, best_value))
    }
}

impl ScorerBundle for ToyWorld {
    fn generate(&self, x_prime: &Prompt, rng: &mut StdRng) -> Result<GeneratedSample, ScorerError> {
        ToyWorld::generate_image(self, x_prime, rng).map_err(Into::into)
    }

    fn tox_confidence(&self, sample: &GeneratedSample) -> f64 {
        ToyWorld::tox_confidence(self, sample)
    }

    fn align_similarity(&self, x: &Prompt, sample: &GeneratedSample) -> Result<f64, ScorerError> {
        ToyWorld::align_similarity(self, x, sample).map_err(Into::into)
    }
}
