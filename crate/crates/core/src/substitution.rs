//! Substitution sets: variants of a target sentence in which one open-class
//! word is replaced by a masked-LM candidate.

use std::collections::HashMap;
use std::io::{self, BufRead, Write};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provider::{Candidate, Provider, ProviderError, ProviderExt};

/// UPOS classes whose positions are substituted.
pub const OPEN_CLASSES: [&str; 6] = ["ADJ", "NOUN", "VERB", "ADV", "ADP", "DET"];

#[derive(Debug, Error)]
pub enum SubstitutionError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{words} words but {tags} tags")]
    TagCount { words: usize, tags: usize },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubstitutionConfig {
    /// Treat PROPN like NOUN.
    pub include_propn: bool,
    /// Keep only candidates whose re-tagged UPOS equals the original's.
    pub strict_pos: bool,
    /// Extra candidates requested per position, as a multiple of `k`.
    pub slack_factor: usize,
}

impl Default for SubstitutionConfig {
    fn default() -> Self {
        SubstitutionConfig {
            include_propn: true,
            strict_pos: false,
            slack_factor: 2,
        }
    }
}

/// Indices whose tag is an open class (plus PROPN when `include_propn`).
pub fn eligible_positions(upos: &[String], include_propn: bool) -> Vec<usize> {
    upos.iter()
        .enumerate()
        .filter(|(_, tag)| {
            OPEN_CLASSES.contains(&tag.as_str()) || (include_propn && tag.as_str() == "PROPN")
        })
        .map(|(i, _)| i)
        .collect()
}

pub fn is_continuation(piece: &str) -> bool {
    piece.starts_with("##")
}

pub fn is_punct_or_symbol(word: &str) -> bool {
    word.chars().all(|c| !c.is_alphanumeric())
}

/// Candidate words usable as replacements for `original`, in input order.
pub fn filter_candidates<'a>(original: &str, candidates: &'a [Candidate]) -> Vec<&'a str> {
    let original = original.to_lowercase();
    let mut kept: Vec<&str> = Vec::new();
    for c in candidates {
        let w = c.word.as_str();
        if w.is_empty()
            || w.chars().any(char::is_whitespace)
            || is_continuation(w)
            || is_punct_or_symbol(w)
            || w.to_lowercase() == original
            || kept.contains(&w)
        {
            continue;
        }
        kept.push(w);
    }
    kept
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub position: usize,
    pub replacement: String,
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstitutionSet {
    pub target: Vec<String>,
    pub upos: Vec<String>,
    pub k: usize,
    pub eligible_positions: Vec<usize>,
    /// Grouped by position in ascending order; within a position, in
    /// candidate rank order.
    pub variants: Vec<Variant>,
    /// Positions where fewer than `k` candidates survived filtering.
    pub shortfall: Vec<usize>,
}

impl SubstitutionSet {
    pub fn target_only(target: Vec<String>, upos: Vec<String>) -> Self {
        SubstitutionSet {
            target,
            upos,
            k: 0,
            eligible_positions: Vec::new(),
            variants: Vec::new(),
            shortfall: Vec::new(),
        }
    }

    pub fn variants_at(&self, position: usize) -> impl Iterator<Item = &Variant> {
        self.variants.iter().filter(move |v| v.position == position)
    }

    /// The set that generation with a smaller `k` yields from the same
    /// candidate lists: the first `k` variants at each position.
    pub fn truncated(&self, k: usize) -> SubstitutionSet {
        let k = k.min(self.k);
        let mut seen: HashMap<usize, usize> = HashMap::new();
        let variants = self
            .variants
            .iter()
            .filter(|v| {
                let c = seen.entry(v.position).or_default();
                *c += 1;
                *c <= k
            })
            .cloned()
            .collect();
        let shortfall = self
            .eligible_positions
            .iter()
            .copied()
            .filter(|&p| self.variants_at(p).count() < k)
            .collect();
        SubstitutionSet {
            k,
            variants,
            shortfall,
            ..self.clone()
        }
    }
}

/// Masked-LM candidates keyed by model, sentence and position. A stored list
/// fetched for a larger request also serves smaller ones, since candidates
/// are ranked.
#[derive(Debug, Default)]
pub struct CandidateCache {
    entries: Mutex<HashMap<CacheKey, CacheEntry>>,
}

type CacheKey = (String, Vec<String>, usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
struct CacheEntry {
    requested: usize,
    candidates: Vec<Candidate>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    model: String,
    words: Vec<String>,
    position: usize,
    requested: usize,
    candidates: Vec<Candidate>,
}

impl CandidateCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, model: &str, words: &[String], position: usize, count: usize) -> Option<Vec<Candidate>> {
        let entries = self.entries.lock().unwrap();
        let e = entries.get(&(model.to_string(), words.to_vec(), position))?;
        (e.requested >= count).then(|| e.candidates.iter().take(count).cloned().collect())
    }

    pub fn put(&self, model: &str, words: &[String], position: usize, requested: usize, candidates: Vec<Candidate>) {
        let mut entries = self.entries.lock().unwrap();
        let key = (model.to_string(), words.to_vec(), position);
        let replace = entries.get(&key).is_none_or(|e| e.requested < requested);
        if replace {
            entries.insert(key, CacheEntry { requested, candidates });
        }
    }

    /// Writes the cache as JSON lines in a stable order.
    pub fn save<W: Write>(&self, mut out: W) -> io::Result<()> {
        let entries = self.entries.lock().unwrap();
        let mut keys: Vec<&CacheKey> = entries.keys().collect();
        keys.sort();
        for key in keys {
            let e = &entries[key];
            let line = CacheLine {
                model: key.0.clone(),
                words: key.1.clone(),
                position: key.2,
                requested: e.requested,
                candidates: e.candidates.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self, SubstitutionError> {
        let cache = CandidateCache::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let l: CacheLine =
                serde_json::from_str(&line).map_err(|source| SubstitutionError::Json { line: i + 1, source })?;
            cache.put(&l.model, &l.words, l.position, l.requested, l.candidates);
        }
        Ok(cache)
    }
}

/// Builds the substitution set of `target` with up to `k` variants per
/// eligible position.
pub fn generate<P: Provider + ?Sized>(
    target: &[String],
    upos: &[String],
    k: usize,
    provider: &P,
    config: &SubstitutionConfig,
    cache: Option<(&CandidateCache, &str)>,
) -> Result<SubstitutionSet, SubstitutionError> {
    if target.len() != upos.len() {
        return Err(SubstitutionError::TagCount {
            words: target.len(),
            tags: upos.len(),
        });
    }
    let eligible = eligible_positions(upos, config.include_propn);
    let mut set = SubstitutionSet {
        target: target.to_vec(),
        upos: upos.to_vec(),
        k,
        eligible_positions: eligible.clone(),
        variants: Vec::new(),
        shortfall: Vec::new(),
    };
    if k == 0 {
        return Ok(set);
    }
    let request = k + config.slack_factor * k;
    for &position in &eligible {
        let candidates = match cache.and_then(|(c, model)| c.get(model, target, position, request)) {
            Some(c) => c,
            None => {
                let fetched = provider.mlm_topk(target, position, request)?;
                if let Some((c, model)) = cache {
                    c.put(model, target, position, request, fetched.clone());
                }
                fetched
            }
        };
        let mut kept = 0;
        for word in filter_candidates(&target[position], &candidates) {
            if kept == k {
                break;
            }
            let mut words = target.to_vec();
            words[position] = word.to_string();
            if config.strict_pos {
                let tags = provider.upos(&words)?;
                if tags[position] != upos[position] {
                    continue;
                }
            }
            set.variants.push(Variant {
                position,
                replacement: word.to_string(),
                words,
            });
            kept += 1;
        }
        if kept < k {
            set.shortfall.push(position);
        }
    }
    Ok(set)
}

/// Writes one JSON object per line.
pub fn write_sets<W: Write>(mut out: W, sets: &[SubstitutionSet]) -> io::Result<()> {
    for s in sets {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_sets<R: BufRead>(input: R) -> Result<Vec<SubstitutionSet>, SubstitutionError> {
    let mut sets = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        sets.push(serde_json::from_str(&line).map_err(|source| SubstitutionError::Json { line: i + 1, source })?);
    }
    Ok(sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::provider::{FixtureConfig, FixtureProvider, ModelResponse, Query};
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    fn tags(s: &str) -> Vec<String> {
        words(s)
    }

    #[test]
    fn eligibility() {
        assert!(eligible_positions(&tags("PUNCT PUNCT"), true).is_empty());
        assert_eq!(eligible_positions(&tags("DET NOUN VERB"), true), vec![0, 1, 2]);
        assert_eq!(eligible_positions(&tags("PROPN VERB PRON"), true), vec![0, 1]);
        assert_eq!(eligible_positions(&tags("PROPN VERB PRON"), false), vec![1]);
    }

    // Tags as a universal tagger assigns them to the example sentence.
    #[test]
    fn eligibility_of_example_sentence() {
        let upos = tags("ADV VERB PRON AUX VERB PART VERB PUNCT");
        assert_eq!(eligible_positions(&upos, true), vec![0, 1, 4, 6]);
    }

    #[test]
    fn filter_rules() {
        let c = |w: &str| Candidate { word: w.into(), log_prob: -1.0 };
        let cands = vec![c("Park"), c("##s"), c(","), c("yard"), c("..."), c("yard"), c("two words"), c("lot")];
        assert_eq!(filter_candidates("park", &cands), vec!["yard", "lot"]);
    }

    #[test]
    fn k_zero_is_empty() {
        let p = FixtureProvider::default();
        let set = generate(&words("the kids run"), &tags("DET NOUN VERB"), 0, &p, &Default::default(), None).unwrap();
        assert!(set.variants.is_empty());
        assert_eq!(set.eligible_positions, vec![0, 1, 2]);
    }

    #[test]
    fn frozen_candidates_for_example_sentence() {
        let p = FixtureProvider::default()
            .with_candidates("just", ["always", "simply", "only"])
            .with_candidates("thought", ["figured", "knew", "think"])
            .with_candidates("like", ["love", "demand", "have"])
            .with_candidates("know", ["help", "talk", "stay"]);
        let target = words("just thought you 'd like to know .");
        let upos = tags("ADV VERB PRON AUX VERB PART VERB PUNCT");
        let set = generate(&target, &upos, 3, &p, &Default::default(), None).unwrap();
        let at = |pos| set.variants_at(pos).map(|v| v.replacement.as_str()).collect::<Vec<_>>();
        assert_eq!(at(1), ["figured", "knew", "think"]);
        assert_eq!(at(0), ["always", "simply", "only"]);
        assert_eq!(at(6), ["help", "talk", "stay"]);
        assert_eq!(set.variants.len(), 12);
        assert!(set.shortfall.is_empty());
        assert_eq!(set.variants[3].words, words("just figured you 'd like to know ."));
    }

    #[test]
    fn shortfall_recorded() {
        let p = FixtureProvider::default().with_candidates("kids", ["kids", "children", "##s"]);
        let set = generate(&words("the kids run"), &tags("DET NOUN VERB"), 2, &p, &Default::default(), None).unwrap();
        assert_eq!(set.variants_at(1).count(), 1);
        assert_eq!(set.shortfall, vec![1]);
    }

    #[test]
    fn tag_count_mismatch() {
        let p = FixtureProvider::default();
        assert!(matches!(
            generate(&words("a b"), &tags("DET"), 1, &p, &Default::default(), None),
            Err(SubstitutionError::TagCount { .. })
        ));
    }

    struct Counting<P> {
        inner: P,
        mlm_calls: AtomicUsize,
    }

    impl<P: Provider> Provider for Counting<P> {
        fn request(&self, q: &Query) -> Result<ModelResponse, ProviderError> {
            if matches!(q, Query::MlmTopk { .. }) {
                self.mlm_calls.fetch_add(1, Ordering::SeqCst);
            }
            self.inner.request(q)
        }
    }

    #[test]
    fn cache_makes_smaller_k_free() {
        let p = Counting { inner: FixtureProvider::default(), mlm_calls: AtomicUsize::new(0) };
        let cache = CandidateCache::new();
        let target = words("the kids run in the park");
        let upos = tags("DET NOUN VERB ADP DET NOUN");
        let big = generate(&target, &upos, 5, &p, &Default::default(), Some((&cache, "m"))).unwrap();
        assert_eq!(p.mlm_calls.load(Ordering::SeqCst), 6);
        let small = generate(&target, &upos, 2, &p, &Default::default(), Some((&cache, "m"))).unwrap();
        assert_eq!(p.mlm_calls.load(Ordering::SeqCst), 6);
        assert_eq!(small, big.truncated(2));

        let mut buf = Vec::new();
        cache.save(&mut buf).unwrap();
        let reloaded = CandidateCache::load(&buf[..]).unwrap();
        assert_eq!(reloaded.len(), 6);
        assert_eq!(reloaded.get("m", &target, 1, 3), cache.get("m", &target, 1, 3));
    }

    #[test]
    fn strict_pos_drops_mismatched_candidates() {
        let p = FixtureProvider::default().with_candidates("run", ["quickly", "swims", "the"]);
        let config = SubstitutionConfig { strict_pos: true, ..Default::default() };
        let set = generate(&words("the kids run"), &tags("DET NOUN VERB"), 3, &p, &config, None).unwrap();
        let at: Vec<_> = set.variants_at(2).map(|v| v.replacement.as_str()).collect();
        assert_eq!(at, ["swims"]);
    }

    #[test]
    fn json_lines_round_trip() {
        let p = FixtureProvider::default();
        let set = generate(&words("the kids run"), &tags("DET NOUN VERB"), 2, &p, &Default::default(), None).unwrap();
        let mut buf = Vec::new();
        write_sets(&mut buf, &[set.clone(), set.truncated(1)]).unwrap();
        let back = read_sets(&buf[..]).unwrap();
        assert_eq!(back, vec![set.clone(), set.truncated(1)]);
    }

    proptest! {
        #[test]
        fn set_invariants(seed in 0u64..500, k in 0usize..6, n in 1usize..9) {
            let p = FixtureProvider::new(FixtureConfig { seed, ..Default::default() });
            let pool = ["the", "kids", "run", "in", "park", "quickly", "big", "with", "ball", "."];
            let target: Vec<String> = (0..n).map(|i| pool[(i * 7 + seed as usize) % pool.len()].to_string()).collect();
            let upos: Vec<String> = target.iter().enumerate()
                .map(|(i, w)| crate::provider::fixture_tag(w, i).to_string())
                .collect();
            let a = generate(&target, &upos, k, &p, &Default::default(), None).unwrap();
            let b = generate(&target, &upos, k, &p, &Default::default(), None).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!(a.variants.len() <= k * a.eligible_positions.len());
            for v in &a.variants {
                prop_assert_eq!(v.words.len(), target.len());
                let diffs = v.words.iter().zip(&target).filter(|(x, y)| x != y).count();
                prop_assert_eq!(diffs, 1);
                prop_assert_ne!(&v.words, &target);
            }
            for &pos in &a.eligible_positions {
                prop_assert!(a.variants_at(pos).count() <= k);
            }
        }
    }
}
