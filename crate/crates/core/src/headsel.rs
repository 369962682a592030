//! Supervised head selection and directed, labeled tree induction.
//!
//! For every relation label and direction, the attention head whose row
//! argmax most often lands on the gold partner is selected on a selection
//! corpus. Directed trees are then decoded with Chu-Liu-Edmonds from the
//! elementwise maximum of the selected heads' matrices.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{AttentionMatrix, HeadId, WordAttention};
use crate::corpus::AnnotatedSentence;
use crate::induction::{chu_liu_edmonds, mean_matrix, DirectedTree, InductionError};

/// Label given to the root word of directed trees.
pub const ROOT_LABEL: &str = "root";

#[derive(Debug, Error)]
pub enum HeadSelError {
    #[error("head inventory is empty")]
    EmptyInventory,
    #[error("{sentences} sentences but {attention} attention entries")]
    Misaligned { sentences: usize, attention: usize },
    #[error("sentence {sentence}: layer {layer} not available")]
    MissingLayer { sentence: usize, layer: usize },
    #[error("sentence {sentence}: head {head} not available in layer {layer}")]
    MissingHead {
        sentence: usize,
        layer: usize,
        head: usize,
    },
    #[error("sentence {sentence}: {n}x{n} attention for {words} words")]
    Length {
        sentence: usize,
        n: usize,
        words: usize,
    },
    #[error(transparent)]
    Induction(#[from] InductionError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Row of the dependent, argmax should be its head.
    DepToParent,
    /// Row of the head, argmax should be the dependent.
    ParentToDep,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::DepToParent, Direction::ParentToDep];
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::DepToParent => "dep_to_parent",
            Direction::ParentToDep => "parent_to_dep",
        })
    }
}

/// Column of the largest entry in `row`, skipping `skip`. Ties go to the
/// smaller index.
pub fn argmax_excluding(row: ArrayView1<f64>, skip: usize) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, &v) in row.iter().enumerate() {
        if j == skip {
            continue;
        }
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((j, v));
        }
    }
    best.map(|(j, _)| j)
}

fn head_matrix(
    attention: &WordAttention,
    sentence: usize,
    layer: usize,
    head: usize,
) -> Result<&AttentionMatrix, HeadSelError> {
    attention
        .get(&layer)
        .ok_or(HeadSelError::MissingLayer { sentence, layer })?
        .get(head)
        .ok_or(HeadSelError::MissingHead {
            sentence,
            layer,
            head,
        })
}

fn check_aligned(corpus: &[AnnotatedSentence], attention: &[WordAttention]) -> Result<(), HeadSelError> {
    if corpus.len() != attention.len() {
        return Err(HeadSelError::Misaligned {
            sentences: corpus.len(),
            attention: attention.len(),
        });
    }
    Ok(())
}

/// Hits and gold arcs for one (label, direction).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HitCount {
    pub hits: usize,
    pub arcs: usize,
}

impl HitCount {
    /// `None` when no arc carried the label.
    pub fn accuracy(&self) -> Option<f64> {
        (self.arcs > 0).then(|| self.hits as f64 / self.arcs as f64)
    }
}

type HeadCounts = BTreeMap<(String, Direction), HitCount>;

/// Adds one sentence's hits for head `(layer, head)` to `counts`.
fn count_sentence(
    s: &AnnotatedSentence,
    a: &WordAttention,
    index: usize,
    layer: usize,
    head: usize,
    counts: &mut HeadCounts,
) -> Result<(), HeadSelError> {
    let m = head_matrix(a, index, layer, head)?;
    if m.n() != s.len() {
        return Err(HeadSelError::Length {
            sentence: index,
            n: m.n(),
            words: s.len(),
        });
    }
    let argmax: Vec<Option<usize>> = (0..m.n())
        .map(|r| argmax_excluding(m.values().row(r), r))
        .collect();
    for (h, d, label) in s.gold.word_arcs() {
        for dir in Direction::BOTH {
            let hit = match dir {
                Direction::DepToParent => argmax[d] == Some(h),
                Direction::ParentToDep => argmax[h] == Some(d),
            };
            let c = counts.entry((label.to_string(), dir)).or_default();
            c.arcs += 1;
            c.hits += usize::from(hit);
        }
    }
    Ok(())
}

/// Fraction of gold arcs labeled `label` whose partner is the row argmax of
/// head `(layer, head)`. `None` when the label does not occur.
pub fn head_accuracy(
    corpus: &[AnnotatedSentence],
    attention: &[WordAttention],
    layer: usize,
    head: usize,
    label: &str,
    direction: Direction,
) -> Result<Option<f64>, HeadSelError> {
    check_aligned(corpus, attention)?;
    let mut counts = HeadCounts::new();
    for (i, (s, a)) in corpus.iter().zip(attention).enumerate() {
        if s.usable {
            count_sentence(s, a, i, layer, head, &mut counts)?;
        }
    }
    Ok(counts
        .get(&(label.to_string(), direction))
        .and_then(HitCount::accuracy))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadEntry {
    pub label: String,
    pub direction: Direction,
    pub layer: usize,
    pub head: usize,
    pub accuracy: f64,
}

/// Selected heads, one per (label, direction), sorted by label then
/// direction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadInventory {
    pub entries: Vec<HeadEntry>,
    pub selection_size: usize,
}

impl HeadInventory {
    pub fn get(&self, label: &str, direction: Direction) -> Option<&HeadEntry> {
        self.entries
            .iter()
            .find(|e| e.label == label && e.direction == direction)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// Labels of all word arcs in usable sentences.
pub fn corpus_labels(corpus: &[AnnotatedSentence]) -> BTreeSet<String> {
    corpus
        .iter()
        .filter(|s| s.usable)
        .flat_map(|s| s.gold.word_arcs().map(|(_, _, l)| l.to_string()).collect::<Vec<_>>())
        .collect()
}

/// Hit counts for every head of a search grid, accumulated one sentence at
/// a time so the attention of a whole corpus never has to be held at once.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionTally {
    grid: Vec<(usize, usize)>,
    counts: Vec<HeadCounts>,
    sentences: usize,
}

impl SelectionTally {
    pub fn new(layers: &[usize], heads: usize) -> Self {
        let grid: Vec<(usize, usize)> = layers
            .iter()
            .flat_map(|&l| (0..heads).map(move |h| (l, h)))
            .collect();
        SelectionTally {
            counts: vec![HeadCounts::new(); grid.len()],
            grid,
            sentences: 0,
        }
    }

    /// Counts one sentence. Unusable sentences count toward the selection
    /// size only.
    pub fn add(&mut self, index: usize, s: &AnnotatedSentence, a: &WordAttention) -> Result<(), HeadSelError> {
        self.sentences += 1;
        if !s.usable {
            return Ok(());
        }
        for (&(layer, head), counts) in self.grid.iter().zip(&mut self.counts) {
            count_sentence(s, a, index, layer, head, counts)?;
        }
        Ok(())
    }

    /// Combines tallies over the same grid.
    pub fn merge(mut self, other: SelectionTally) -> SelectionTally {
        assert_eq!(self.grid, other.grid, "tallies over different grids");
        for (mine, theirs) in self.counts.iter_mut().zip(other.counts) {
            for (key, c) in theirs {
                let m = mine.entry(key).or_default();
                m.hits += c.hits;
                m.arcs += c.arcs;
            }
        }
        self.sentences += other.sentences;
        self
    }

    pub fn counts(&self, layer: usize, head: usize, label: &str, direction: Direction) -> Option<HitCount> {
        let i = self.grid.iter().position(|&g| g == (layer, head))?;
        self.counts[i].get(&(label.to_string(), direction)).copied()
    }

    /// Most accurate head per (label, direction) for the labels in `wanted`,
    /// or every label seen when `None`. Earlier grid cells win ties.
    pub fn select(&self, wanted: Option<&BTreeSet<String>>) -> HeadInventory {
        let mut best: BTreeMap<(String, Direction), HeadEntry> = BTreeMap::new();
        for (&(layer, head), per_head) in self.grid.iter().zip(&self.counts) {
            for ((label, direction), c) in per_head {
                if wanted.is_some_and(|w| !w.contains(label)) {
                    continue;
                }
                let Some(accuracy) = c.accuracy() else { continue };
                let key = (label.clone(), *direction);
                if best.get(&key).is_none_or(|e| accuracy > e.accuracy) {
                    best.insert(
                        key,
                        HeadEntry {
                            label: label.clone(),
                            direction: *direction,
                            layer,
                            head,
                            accuracy,
                        },
                    );
                }
            }
        }
        HeadInventory {
            entries: best.into_values().collect(),
            selection_size: self.sentences,
        }
    }
}

/// Picks the most accurate head for every label in `labels` (all corpus
/// labels when `None`) and both directions. Earlier `(layer, head)` pairs
/// win ties.
pub fn select_heads(
    corpus: &[AnnotatedSentence],
    attention: &[WordAttention],
    layers: &[usize],
    heads: usize,
    labels: Option<&BTreeSet<String>>,
) -> Result<HeadInventory, HeadSelError> {
    check_aligned(corpus, attention)?;
    let tally = corpus
        .par_iter()
        .zip(attention)
        .enumerate()
        .try_fold(
            || SelectionTally::new(layers, heads),
            |mut t, (i, (s, a))| {
                t.add(i, s, a)?;
                Ok::<_, HeadSelError>(t)
            },
        )
        .try_reduce(|| SelectionTally::new(layers, heads), |a, b| Ok(a.merge(b)))?;
    Ok(tally.select(labels))
}

/// Per-head elementwise mean over the target and its variants, without
/// symmetrization. The target is always used when there are no variants.
/// All entries must cover the same layers and heads.
pub fn mean_heads(
    target: &WordAttention,
    variants: &[WordAttention],
    include_target: bool,
) -> Result<WordAttention, InductionError> {
    let mut out = WordAttention::new();
    for (&layer, heads) in target {
        let mut merged = Vec::with_capacity(heads.len());
        for (h, own) in heads.iter().enumerate() {
            let pool = (include_target || variants.is_empty())
                .then_some(own)
                .into_iter()
                .map(Ok)
                .chain(variants.iter().map(|v| {
                    v.get(&layer)
                        .ok_or(InductionError::MissingLayer(layer))?
                        .get(h)
                        .ok_or(InductionError::MissingHead { layer, head: h })
                }))
                .collect::<Result<Vec<_>, _>>()?;
            let mean = mean_matrix(pool)?;
            merged.push(AttentionMatrix::scores(layer, HeadId::Head(h), mean)?);
        }
        out.insert(layer, merged);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RootChoice {
    /// The word with the largest total outgoing score.
    #[default]
    StrongestHead,
    /// A given word, e.g. the gold root for diagnostics.
    Fixed(usize),
}

/// Combined arc scores `scores[(h, d)]` and the label whose head produced
/// each score.
pub struct DirectedScores {
    pub scores: Array2<f64>,
    pub labels: Array2<usize>,
}

/// Elementwise maximum over inventory entries of their head matrices,
/// oriented so that `(h, d)` scores the arc `h → d`. Ties keep the earlier
/// entry.
pub fn combine_scores(
    inventory: &HeadInventory,
    attention: &WordAttention,
    n: usize,
) -> Result<DirectedScores, HeadSelError> {
    if inventory.is_empty() {
        return Err(HeadSelError::EmptyInventory);
    }
    let mut scores = Array2::from_elem((n, n), f64::NEG_INFINITY);
    let mut labels = Array2::zeros((n, n));
    for (e_idx, e) in inventory.entries.iter().enumerate() {
        let m = head_matrix(attention, 0, e.layer, e.head)?;
        if m.n() != n {
            return Err(HeadSelError::Length {
                sentence: 0,
                n: m.n(),
                words: n,
            });
        }
        for h in 0..n {
            for d in 0..n {
                let v = match e.direction {
                    Direction::DepToParent => m.get(d, h),
                    Direction::ParentToDep => m.get(h, d),
                };
                if v > scores[(h, d)] {
                    scores[(h, d)] = v;
                    labels[(h, d)] = e_idx;
                }
            }
        }
    }
    scores.diag_mut().fill(0.0);
    Ok(DirectedScores { scores, labels })
}

/// Decodes a directed labeled tree for one sentence.
pub fn induce_directed(
    inventory: &HeadInventory,
    attention: &WordAttention,
    n: usize,
    root: RootChoice,
) -> Result<DirectedTree, HeadSelError> {
    let DirectedScores { scores, labels } = combine_scores(inventory, attention, n)?;
    let root = match root {
        RootChoice::Fixed(r) => r,
        RootChoice::StrongestHead => {
            let mut best = (0, f64::NEG_INFINITY);
            for h in 0..n {
                let total: f64 = (0..n).filter(|&d| d != h).map(|d| scores[(h, d)]).sum();
                if total > best.1 {
                    best = (h, total);
                }
            }
            best.0
        }
    };
    let mut tree = chu_liu_edmonds(&scores, root)?;
    tree.labels = tree
        .heads
        .iter()
        .enumerate()
        .map(|(d, h)| match h {
            Some(h) => Some(inventory.entries[labels[(*h, d)]].label.clone()),
            None => Some(ROOT_LABEL.to_string()),
        })
        .collect();
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Scheme, Token};
    use ndarray::array;

    fn sentence(heads: &[Option<usize>], labels: &[&str]) -> AnnotatedSentence {
        let tokens = heads
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(i, (h, l))| Token::new(i, format!("w{i}"), "NOUN", *h, *l))
            .collect();
        AnnotatedSentence::from_tokens(None, tokens, Scheme::UD)
    }

    fn one_hot_to(targets: &[usize], n: usize) -> Array2<f64> {
        let mut m = Array2::zeros((n, n));
        for (r, &t) in targets.iter().enumerate() {
            m[(r, t)] = 1.0;
        }
        m
    }

    fn attention(mats: Vec<Vec<Array2<f64>>>) -> WordAttention {
        mats.into_iter()
            .enumerate()
            .map(|(l, heads)| {
                let heads = heads
                    .into_iter()
                    .enumerate()
                    .map(|(h, m)| AttentionMatrix::scores(l, HeadId::Head(h), m).unwrap())
                    .collect();
                (l, heads)
            })
            .collect()
    }

    #[test]
    fn argmax_skips_diagonal_and_prefers_smaller_index() {
        let row = array![0.9, 0.3, 0.3];
        assert_eq!(argmax_excluding(row.view(), 0), Some(1));
        assert_eq!(argmax_excluding(row.view(), 2), Some(0));
        assert_eq!(argmax_excluding(array![1.0].view(), 0), None);
    }

    #[test]
    fn one_hot_parent_attention_is_perfect() {
        // w1 is root; w0 det, w2 nsubj.
        let s = sentence(&[Some(1), None, Some(1)], &["det", "root", "nsubj"]);
        let a = attention(vec![vec![one_hot_to(&[1, 0, 1], 3)]]);
        let acc = head_accuracy(&[s.clone()], &[a.clone()], 0, 0, "det", Direction::DepToParent).unwrap();
        assert_eq!(acc, Some(1.0));
        let acc = head_accuracy(&[s], &[a], 0, 0, "obj", Direction::DepToParent).unwrap();
        assert_eq!(acc, None);
    }

    #[test]
    fn uniform_attention_hits_only_the_first_eligible_column() {
        // chain 0 <- 1 <- 2 <- 3 <- 4 with root 4
        let s = sentence(
            &[Some(1), Some(2), Some(3), Some(4), None],
            &["dep", "dep", "dep", "dep", "root"],
        );
        let a = attention(vec![vec![Array2::from_elem((5, 5), 0.2)]]);
        // argmax of row d is 0 (or 1 for d = 0); only d = 0 with head 1 hits.
        let acc = head_accuracy(&[s], &[a], 0, 0, "dep", Direction::DepToParent).unwrap();
        assert_eq!(acc, Some(0.25));
    }

    #[test]
    fn monotone_rescaling_keeps_accuracy() {
        let s = sentence(&[Some(2), Some(2), None, Some(2)], &["det", "amod", "root", "punct"]);
        let m = array![
            [0.1, 0.2, 0.6, 0.1],
            [0.5, 0.1, 0.3, 0.1],
            [0.3, 0.3, 0.2, 0.2],
            [0.1, 0.1, 0.7, 0.1]
        ];
        let squashed = m.mapv(|v: f64| (3.0 * v).exp());
        for label in ["det", "amod", "punct"] {
            for dir in Direction::BOTH {
                let a = head_accuracy(&[s.clone()], &[attention(vec![vec![m.clone()]])], 0, 0, label, dir).unwrap();
                let b = head_accuracy(&[s.clone()], &[attention(vec![vec![squashed.clone()]])], 0, 0, label, dir)
                    .unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn selects_the_one_hot_head() {
        let s = sentence(&[Some(1), None, Some(1)], &["det", "root", "nsubj"]);
        // points every dependent away from its head
        let noise = one_hot_to(&[2, 2, 0], 3);
        let mut layer2 = vec![noise.clone(); 8];
        layer2[7] = one_hot_to(&[1, 2, 1], 3);
        let a = attention(vec![vec![noise.clone()], vec![noise.clone()], layer2]);
        let inv = select_heads(&[s], &[a], &[0, 1, 2], 8, None);
        // layers 0 and 1 only have one head
        assert!(matches!(inv, Err(HeadSelError::MissingHead { .. })));

        let s = sentence(&[Some(1), None, Some(1)], &["det", "root", "nsubj"]);
        let mut layer0 = vec![noise.clone(); 8];
        layer0[2] = one_hot_to(&[2, 0, 0], 3);
        let mut layer2 = vec![noise.clone(); 8];
        layer2[7] = one_hot_to(&[1, 2, 1], 3);
        let a = attention(vec![layer0, vec![noise; 8], layer2]);
        let inv = select_heads(&[s], &[a], &[0, 1, 2], 8, None).unwrap();
        let det = inv.get("det", Direction::DepToParent).unwrap();
        assert_eq!((det.layer, det.head, det.accuracy), (2, 7, 1.0));
        assert_eq!(inv.selection_size, 1);
        assert_eq!(inv.entries.len(), 4);
        let back = HeadInventory::from_json(&inv.to_json().unwrap()).unwrap();
        assert_eq!(back, inv);
    }

    #[test]
    fn single_head_model_selects_it_everywhere() {
        let s = sentence(&[Some(1), None, Some(1)], &["det", "root", "nsubj"]);
        let a = attention(vec![vec![Array2::from_elem((3, 3), 1.0 / 3.0)]]);
        let inv = select_heads(&[s], &[a], &[0], 1, None).unwrap();
        assert!(inv.entries.iter().all(|e| (e.layer, e.head) == (0, 0)));
    }

    #[test]
    fn induce_directed_recovers_one_hot_relation() {
        // w1 root, w0 det of w1, w2 nsubj of w1
        let a = attention(vec![vec![one_hot_to(&[1, 0, 1], 3)]]);
        let inv = HeadInventory {
            entries: vec![HeadEntry {
                label: "det".into(),
                direction: Direction::DepToParent,
                layer: 0,
                head: 0,
                accuracy: 1.0,
            }],
            selection_size: 1,
        };
        let tree = induce_directed(&inv, &a, 3, RootChoice::Fixed(1)).unwrap();
        assert_eq!(tree.heads, vec![Some(1), None, Some(1)]);
        assert_eq!(
            tree.labels,
            vec![Some("det".into()), Some("root".into()), Some("det".into())]
        );
        tree.validate().unwrap();
    }

    #[test]
    fn winning_relation_labels_the_arc() {
        let dep = one_hot_to(&[1, 0, 1], 3);
        let mut par = Array2::zeros((3, 3));
        par[(1, 2)] = 2.0;
        let a = attention(vec![vec![dep, par]]);
        let entry = |label: &str, direction, head| HeadEntry {
            label: label.into(),
            direction,
            layer: 0,
            head,
            accuracy: 1.0,
        };
        let inv = HeadInventory {
            entries: vec![
                entry("det", Direction::DepToParent, 0),
                entry("nsubj", Direction::ParentToDep, 1),
            ],
            selection_size: 1,
        };
        let tree = induce_directed(&inv, &a, 3, RootChoice::StrongestHead).unwrap();
        assert_eq!(tree.heads, vec![Some(1), None, Some(1)]);
        assert_eq!(tree.labels[2].as_deref(), Some("nsubj"));
        assert_eq!(tree.labels[0].as_deref(), Some("det"));
        assert!(matches!(
            induce_directed(
                &HeadInventory {
                    entries: vec![],
                    selection_size: 0
                },
                &a,
                3,
                RootChoice::StrongestHead
            ),
            Err(HeadSelError::EmptyInventory)
        ));
    }

    #[test]
    fn mean_heads_averages_per_head() {
        let t = attention(vec![vec![one_hot_to(&[1, 0], 2), one_hot_to(&[0, 1], 2)]]);
        let v = attention(vec![vec![one_hot_to(&[0, 1], 2), one_hot_to(&[0, 1], 2)]]);
        let m = mean_heads(&t, &[v.clone()], true).unwrap();
        assert_eq!(m[&0][0].values(), &array![[0.5, 0.5], [0.5, 0.5]]);
        assert_eq!(m[&0][1].values(), &array![[1.0, 0.0], [0.0, 1.0]]);
        let only = mean_heads(&t, &[v], false).unwrap();
        assert_eq!(only[&0][0].values(), &array![[1.0, 0.0], [0.0, 1.0]]);
    }
}
