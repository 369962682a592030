//! Deterministic offline backend.
//!
//! Every value is derived from a SHA-256 digest of the seed and the request
//! contents, expanded with ChaCha8, so responses are identical across runs
//! and platforms. Attention rows are pseudo-random distributions; masked-LM
//! candidates come from small per-category word lists; UPOS tags come from a
//! closed-class lexicon with suffix heuristics.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{AttentionPayload, Candidate, ModelInfo, ModelResponse, Provider, ProviderError, Query};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixtureConfig {
    pub seed: u64,
    pub layers: usize,
    pub heads: usize,
    /// Wrap each sentence in `[CLS]` … `[SEP]` (word id `None`).
    pub special_tokens: bool,
    /// Split words longer than this many characters into two subwords.
    pub split_above: Option<usize>,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            seed: 0,
            layers: 12,
            heads: 12,
            special_tokens: false,
            split_above: None,
        }
    }
}

fn digest(domain: &str, seed: u64, words: &[String], extra: &[u64]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.update((words.len() as u64).to_le_bytes());
    for w in words {
        h.update((w.len() as u64).to_le_bytes());
        h.update(w.as_bytes());
    }
    for x in extra {
        h.update(x.to_le_bytes());
    }
    h.finalize().into()
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn random_row(seed: u64, words: &[String], layer: usize, head: usize, row: usize, t: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::from_seed(digest(
        "attention",
        seed,
        words,
        &[layer as u64, head as u64, row as u64],
    ));
    let raw: Vec<f64> = (0..t).map(|_| unit(&mut rng) + 0.01).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

fn subwords(words: &[String], config: &FixtureConfig) -> (Vec<String>, Vec<Option<usize>>) {
    let mut forms = Vec::new();
    let mut ids = Vec::new();
    if config.special_tokens {
        forms.push("[CLS]".to_string());
        ids.push(None);
    }
    for (i, w) in words.iter().enumerate() {
        match config.split_above {
            Some(limit) if w.chars().count() > limit => {
                let cut = w.char_indices().nth(limit / 2 + 1).map_or(w.len(), |(b, _)| b);
                forms.push(w[..cut].to_string());
                forms.push(format!("##{}", &w[cut..]));
                ids.extend([Some(i), Some(i)]);
            }
            _ => {
                forms.push(w.clone());
                ids.push(Some(i));
            }
        }
    }
    if config.special_tokens {
        forms.push("[SEP]".to_string());
        ids.push(None);
    }
    (forms, ids)
}

fn attention_payload(words: &[String], layers: &[usize], config: &FixtureConfig) -> AttentionPayload {
    let (subword_forms, word_ids) = subwords(words, config);
    let t = subword_forms.len();
    let attention = layers
        .iter()
        .map(|&layer| {
            let heads = (0..config.heads)
                .map(|head| {
                    (0..t)
                        .map(|row| random_row(config.seed, words, layer, head, row, t))
                        .collect()
                })
                .collect();
            (layer, heads)
        })
        .collect();
    AttentionPayload {
        subword_forms,
        word_ids,
        attention,
    }
}

/// Pseudo-random row-stochastic attention, one subword per word, keyed by
/// `(seed, words, layer, head, row)`.
pub fn fixture_attention(words: &[String], layers: &[usize], heads: usize, seed: u64) -> ModelResponse {
    let config = FixtureConfig {
        seed,
        heads,
        layers: layers.iter().max().map_or(0, |l| l + 1),
        ..FixtureConfig::default()
    };
    ModelResponse::attention(0, attention_payload(words, layers, &config))
}

const DETERMINERS: &[&str] = &[
    "the", "a", "an", "this", "these", "those", "every", "some", "each", "no", "any", "all",
    "another", "my", "his", "her", "their", "our", "its", "your",
];
const PREPOSITIONS: &[&str] = &[
    "in", "on", "at", "with", "of", "for", "from", "by", "about", "into", "over", "under", "near",
    "after", "before", "through", "during", "without", "against", "between",
];
const PRONOUNS: &[&str] = &[
    "i", "you", "he", "she", "it", "we", "they", "me", "him", "us", "them", "who", "which",
    "what", "that", "something", "everyone",
];
const AUXILIARIES: &[&str] = &[
    "is", "are", "was", "were", "be", "been", "being", "'d", "will", "would", "can", "could",
    "do", "does", "did", "has", "have", "had", "should", "may", "might", "must", "'s", "'re",
    "'ll", "'ve", "'m",
];
const CONJUNCTIONS: &[&str] = &["and", "or", "but", "nor"];
const SUBORDINATORS: &[&str] = &["because", "if", "while", "although", "since", "whether", "though"];
const PARTICLES: &[&str] = &["not", "n't", "to"];
const ADVERBS: &[&str] = &[
    "just", "very", "always", "simply", "only", "also", "never", "often", "here", "there", "now",
    "then", "still", "already", "soon", "again", "even", "really", "almost", "too",
];
const ADJECTIVES: &[&str] = &[
    "big", "small", "good", "new", "old", "red", "happy", "large", "young", "long", "great",
    "little", "high", "important", "different", "early", "public", "bad", "strong", "free",
];
const VERBS: &[&str] = &[
    "thought", "like", "know", "run", "runs", "cooks", "likes", "hates", "swims", "laughs",
    "smiles", "said", "say", "make", "made", "go", "went", "see", "saw", "take", "took", "get",
    "got", "want", "help", "love", "told", "think", "figured", "knew", "talk", "stay", "admires",
    "loves", "eat", "play", "plays", "writes", "reads",
];
const NOUNS: &[&str] = &[
    "kids", "park", "ball", "yard", "pilot", "minister", "customer", "skater", "man", "woman",
    "city", "company", "year", "time", "people", "house", "dog", "teacher", "market", "report",
    "government", "child", "book", "car", "school", "game", "president", "day", "world", "family",
];

/// UPOS tag the fixture tagger assigns to `word` at `index`.
pub fn fixture_tag(word: &str, index: usize) -> &'static str {
    let lower = word.to_lowercase();
    let l = lower.as_str();
    if !word.is_empty() && word.chars().all(|c| !c.is_alphanumeric()) {
        return "PUNCT";
    }
    if word.chars().all(|c| c.is_ascii_digit() || c == '.' || c == ',') {
        return "NUM";
    }
    let lists: [(&[&str], &str); 11] = [
        (DETERMINERS, "DET"),
        (PREPOSITIONS, "ADP"),
        (PRONOUNS, "PRON"),
        (AUXILIARIES, "AUX"),
        (CONJUNCTIONS, "CCONJ"),
        (SUBORDINATORS, "SCONJ"),
        (PARTICLES, "PART"),
        (ADVERBS, "ADV"),
        (ADJECTIVES, "ADJ"),
        (VERBS, "VERB"),
        (NOUNS, "NOUN"),
    ];
    for (list, tag) in lists {
        if list.contains(&l) {
            return tag;
        }
    }
    if index > 0 && word.chars().next().is_some_and(char::is_uppercase) {
        return "PROPN";
    }
    if l.ends_with("ly") {
        "ADV"
    } else if l.ends_with("ed") || l.ends_with("ing") {
        "VERB"
    } else if l.ends_with("ous") || l.ends_with("ful") || l.ends_with("ive") || l.ends_with("able") {
        "ADJ"
    } else {
        "NOUN"
    }
}

fn pool_for(tag: &str) -> &'static [&'static str] {
    match tag {
        "DET" => DETERMINERS,
        "ADP" => PREPOSITIONS,
        "ADV" => ADVERBS,
        "ADJ" => ADJECTIVES,
        "VERB" | "AUX" => VERBS,
        "PRON" => PRONOUNS,
        _ => NOUNS,
    }
}

/// Deterministic in-process backend.
#[derive(Clone, Debug, Default)]
pub struct FixtureProvider {
    config: FixtureConfig,
    frozen: BTreeMap<String, Vec<String>>,
}

impl FixtureProvider {
    pub fn new(config: FixtureConfig) -> Self {
        FixtureProvider {
            config,
            frozen: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &FixtureConfig {
        &self.config
    }

    /// Fixes the masked-LM candidates offered for `word` (matched
    /// case-insensitively) to `candidates`, in order.
    pub fn with_candidates<I, S>(mut self, word: &str, candidates: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.frozen.insert(
            word.to_lowercase(),
            candidates.into_iter().map(Into::into).collect(),
        );
        self
    }

    pub fn info(&self) -> ModelInfo {
        ModelInfo {
            model: format!("fixture-{}", self.config.seed),
            layers: self.config.layers,
            heads: self.config.heads,
        }
    }

    fn candidates(&self, words: &[String], position: usize, k: usize) -> Vec<Candidate> {
        let original = &words[position];
        let ranked: Vec<String> = match self.frozen.get(&original.to_lowercase()) {
            Some(list) => list.clone(),
            None => {
                let tag = fixture_tag(original, position);
                let d = digest("mlm", self.config.seed, words, &[position as u64]);
                let mut pool: Vec<(u64, &str)> = pool_for(tag)
                    .iter()
                    .map(|&w| {
                        let mut h = Sha256::new();
                        h.update(d);
                        h.update(w.as_bytes());
                        let bytes: [u8; 32] = h.finalize().into();
                        (u64::from_le_bytes(bytes[..8].try_into().unwrap()), w)
                    })
                    .collect();
                pool.sort();
                let mut ranked: Vec<String> = pool.into_iter().map(|(_, w)| w.to_string()).collect();
                // noise a real masked LM produces: the original word, a
                // continuation piece and punctuation
                ranked.retain(|w| !w.eq_ignore_ascii_case(original));
                let at = |i: usize, len: usize| i.min(len);
                ranked.insert(at(1, ranked.len()), original.to_lowercase());
                ranked.insert(at(2, ranked.len()), "##s".to_string());
                ranked.insert(at(4, ranked.len()), ",".to_string());
                ranked
            }
        };
        ranked
            .into_iter()
            .take(k)
            .enumerate()
            .map(|(rank, word)| Candidate {
                word,
                log_prob: -0.5 - 0.25 * rank as f64,
            })
            .collect()
    }
}

impl Provider for FixtureProvider {
    fn request(&self, query: &Query) -> Result<ModelResponse, ProviderError> {
        query.validate()?;
        Ok(match query {
            Query::Hello => ModelResponse::hello(0, &self.info()),
            Query::Attention { words, layers } => {
                if let Some(l) = layers.iter().find(|&&l| l >= self.config.layers) {
                    return Ok(ModelResponse::error(
                        0,
                        format!("layer {l} out of range for a {}-layer model", self.config.layers),
                    ));
                }
                ModelResponse::attention(0, attention_payload(words, layers, &self.config))
            }
            Query::MlmTopk { words, position, k } => {
                ModelResponse::candidates(0, self.candidates(words, *position, *k))
            }
            Query::Upos { words } => ModelResponse::upos(
                0,
                words
                    .iter()
                    .enumerate()
                    .map(|(i, w)| fixture_tag(w, i).to_string())
                    .collect(),
            ),
        })
    }
}
