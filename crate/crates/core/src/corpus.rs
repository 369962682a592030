//! CoNLL-U treebanks: parsing, serialization, length filtering and UD/SUD
//! alignment.
//!
//! Word indices are 0-based throughout the crate. A head of `None` marks the
//! root attachment (`0` in the HEAD column). Multiword-token ranges (`3-4`)
//! and empty nodes (`5.1`) are skipped and never counted as words.

use std::fmt;
use std::io::{self, BufRead, Write};
use std::num::NonZeroUsize;
use std::str::FromStr;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("line {line}: head `{value}` is not a word index")]
    InvalidHead { line: usize, value: String },
    #[error("sentence {index}: {reason}")]
    Misaligned { index: usize, reason: String },
    #[error("maximum sentence length must be at least 1")]
    InvalidFilter,
}

/// Annotation scheme of a gold file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Scheme {
    #[default]
    UD,
    SUD,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::UD => f.write_str("UD"),
            Scheme::SUD => f.write_str("SUD"),
        }
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "UD" => Ok(Scheme::UD),
            "SUD" => Ok(Scheme::SUD),
            other => Err(format!("unknown annotation scheme `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub index: usize,
    pub form: String,
    pub upos: String,
    /// `None` for the root word.
    pub gold_head: Option<usize>,
    pub gold_deprel: String,
    pub is_punct: bool,
}

impl Token {
    pub fn new(
        index: usize,
        form: impl Into<String>,
        upos: impl Into<String>,
        gold_head: Option<usize>,
        gold_deprel: impl Into<String>,
    ) -> Self {
        let upos = upos.into();
        Token {
            index,
            form: form.into(),
            is_punct: upos == "PUNCT",
            upos,
            gold_head,
            gold_deprel: gold_deprel.into(),
        }
    }
}

/// A labeled gold arc. `head` is `None` for the root attachment.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GoldArc {
    pub head: Option<usize>,
    pub dependent: usize,
    pub label: String,
}

/// Why a gold tree cannot be used for evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TreeDefect {
    NoRoot,
    MultipleRoots(Vec<usize>),
    Cycle(Vec<usize>),
    HeadOutOfRange { dependent: usize, head: usize },
}

impl fmt::Display for TreeDefect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TreeDefect::NoRoot => f.write_str("no root word"),
            TreeDefect::MultipleRoots(roots) => write!(f, "multiple root words {roots:?}"),
            TreeDefect::Cycle(nodes) => write!(f, "cycle through words {nodes:?}"),
            TreeDefect::HeadOutOfRange { dependent, head } => {
                write!(f, "word {dependent} has out-of-range head {head}")
            }
        }
    }
}

/// Gold dependency structure of one sentence: one arc per word, the root
/// word's arc having no head.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldTree {
    pub arcs: Vec<GoldArc>,
    pub scheme: Scheme,
}

impl GoldTree {
    pub fn from_heads(heads: &[Option<usize>], labels: &[String], scheme: Scheme) -> Self {
        assert_eq!(heads.len(), labels.len());
        let arcs = heads
            .iter()
            .zip(labels)
            .enumerate()
            .map(|(dependent, (&head, label))| GoldArc {
                head,
                dependent,
                label: label.clone(),
            })
            .collect();
        GoldTree { arcs, scheme }
    }

    pub fn len(&self) -> usize {
        self.arcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arcs.is_empty()
    }

    pub fn heads(&self) -> Vec<Option<usize>> {
        self.arcs.iter().map(|a| a.head).collect()
    }

    /// Arcs between two words, i.e. every arc except the root attachment.
    pub fn word_arcs(&self) -> impl Iterator<Item = (usize, usize, &str)> + '_ {
        self.arcs
            .iter()
            .filter_map(|a| a.head.map(|h| (h, a.dependent, a.label.as_str())))
    }

    pub fn root(&self) -> Option<usize> {
        let mut roots = self.arcs.iter().filter(|a| a.head.is_none());
        match (roots.next(), roots.next()) {
            (Some(a), None) => Some(a.dependent),
            _ => None,
        }
    }

    /// Checks that the arcs form a single rooted tree over all words.
    pub fn validate(&self) -> Result<(), TreeDefect> {
        let n = self.arcs.len();
        for a in &self.arcs {
            if let Some(h) = a.head {
                if h >= n {
                    return Err(TreeDefect::HeadOutOfRange {
                        dependent: a.dependent,
                        head: h,
                    });
                }
            }
        }
        let roots: Vec<usize> = self
            .arcs
            .iter()
            .filter(|a| a.head.is_none())
            .map(|a| a.dependent)
            .collect();
        match roots.len() {
            0 if n > 0 => return Err(TreeDefect::NoRoot),
            0 | 1 => {}
            _ => return Err(TreeDefect::MultipleRoots(roots)),
        }
        let heads = self.heads();
        if let Some(cycle) = find_cycle(&heads) {
            return Err(TreeDefect::Cycle(cycle));
        }
        Ok(())
    }
}

/// Returns the words on some cycle of the head function, if there is one.
pub(crate) fn find_cycle(heads: &[Option<usize>]) -> Option<Vec<usize>> {
    // 0 = unvisited, 1 = on current path, 2 = finished
    let mut state = vec![0u8; heads.len()];
    for start in 0..heads.len() {
        let mut path = Vec::new();
        let mut node = start;
        loop {
            match state[node] {
                2 => break,
                1 => {
                    let pos = path.iter().position(|&p| p == node).unwrap();
                    return Some(path[pos..].to_vec());
                }
                _ => {}
            }
            state[node] = 1;
            path.push(node);
            match heads[node] {
                Some(h) if h < heads.len() => node = h,
                _ => break,
            }
        }
        for p in path {
            state[p] = 2;
        }
    }
    None
}

/// A treebank sentence with its gold annotation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub id: Option<String>,
    pub comments: Vec<String>,
    pub tokens: Vec<Token>,
    pub gold: GoldTree,
    /// False when the gold arcs do not form a tree; such sentences are kept
    /// but skipped by evaluation.
    pub usable: bool,
}

impl AnnotatedSentence {
    pub fn from_tokens(id: Option<String>, tokens: Vec<Token>, scheme: Scheme) -> Self {
        let heads: Vec<Option<usize>> = tokens.iter().map(|t| t.gold_head).collect();
        let labels: Vec<String> = tokens.iter().map(|t| t.gold_deprel.clone()).collect();
        let gold = GoldTree::from_heads(&heads, &labels, scheme);
        let usable = gold.validate().is_ok();
        AnnotatedSentence {
            id,
            comments: Vec::new(),
            tokens,
            gold,
            usable,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn words(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.form.clone()).collect()
    }

    pub fn upos(&self) -> Vec<String> {
        self.tokens.iter().map(|t| t.upos.clone()).collect()
    }

    pub fn punct_mask(&self) -> Vec<bool> {
        self.tokens.iter().map(|t| t.is_punct).collect()
    }

    pub fn text(&self) -> String {
        self.words().join(" ")
    }
}

fn malformed(line: usize, reason: impl Into<String>) -> CorpusError {
    CorpusError::Malformed {
        line,
        reason: reason.into(),
    }
}

struct BlockBuilder {
    first_line: usize,
    comments: Vec<String>,
    tokens: Vec<Token>,
}

impl BlockBuilder {
    fn finish(self, scheme: Scheme) -> AnnotatedSentence {
        let id = self.comments.iter().find_map(|c| {
            c.strip_prefix("sent_id")
                .and_then(|rest| rest.trim_start().strip_prefix('='))
                .map(|v| v.trim().to_string())
        });
        let mut sentence = AnnotatedSentence::from_tokens(id, self.tokens, scheme);
        sentence.comments = self.comments;
        if let Err(defect) = sentence.gold.validate() {
            warn!(
                "sentence starting at line {}: {defect}; marked unusable for evaluation",
                self.first_line
            );
        }
        sentence
    }
}

/// Parses a CoNLL-U stream. Sentences whose gold arcs do not form a tree are
/// returned with `usable == false` and a logged warning.
pub fn parse_conllu<R: BufRead>(
    reader: R,
    scheme: Scheme,
) -> Result<Vec<AnnotatedSentence>, CorpusError> {
    let mut sentences = Vec::new();
    let mut block: Option<BlockBuilder> = None;

    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if let Some(b) = block.take() {
                sentences.push(b.finish(scheme));
            }
            continue;
        }
        let b = block.get_or_insert_with(|| BlockBuilder {
            first_line: lineno,
            comments: Vec::new(),
            tokens: Vec::new(),
        });
        if let Some(comment) = line.strip_prefix('#') {
            if !b.tokens.is_empty() {
                return Err(malformed(lineno, "comment line inside token lines"));
            }
            b.comments.push(comment.trim().to_string());
            continue;
        }

        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 10 {
            return Err(malformed(
                lineno,
                format!("expected 10 tab-separated columns, found {}", cols.len()),
            ));
        }
        let id = cols[0];
        if id.contains('-') || id.contains('.') {
            // multiword token range or empty node
            continue;
        }
        let id: usize = id
            .parse()
            .map_err(|_| malformed(lineno, format!("invalid token id `{id}`")))?;
        if id != b.tokens.len() + 1 {
            return Err(malformed(
                lineno,
                format!("token id {id} out of sequence, expected {}", b.tokens.len() + 1),
            ));
        }
        let head: usize = cols[6].parse().map_err(|_| CorpusError::InvalidHead {
            line: lineno,
            value: cols[6].to_string(),
        })?;
        let gold_head = head.checked_sub(1);
        b.tokens
            .push(Token::new(id - 1, cols[1], cols[3], gold_head, cols[7]));
    }
    if let Some(b) = block.take() {
        sentences.push(b.finish(scheme));
    }

    // Heads pointing past the end of their sentence.
    for s in &sentences {
        let n = s.tokens.len();
        if let Some(t) = s.tokens.iter().find(|t| t.gold_head.is_some_and(|h| h >= n)) {
            return Err(CorpusError::InvalidHead {
                line: 0,
                value: format!(
                    "{} (sentence {:?}, word {}, only {n} words)",
                    t.gold_head.unwrap() + 1,
                    s.id,
                    t.index + 1
                ),
            });
        }
    }
    // Blocks made only of comments carry no sentence.
    sentences.retain(|s| !s.tokens.is_empty());
    Ok(sentences)
}

pub fn parse_conllu_str(text: &str, scheme: Scheme) -> Result<Vec<AnnotatedSentence>, CorpusError> {
    parse_conllu(text.as_bytes(), scheme)
}

/// Writes sentences as CoNLL-U. Only ID, FORM, UPOS, HEAD and DEPREL carry
/// information; the other columns are `_`.
pub fn write_conllu<W: Write>(mut out: W, sentences: &[AnnotatedSentence]) -> io::Result<()> {
    for s in sentences {
        for c in &s.comments {
            writeln!(out, "# {c}")?;
        }
        for t in &s.tokens {
            let head = t.gold_head.map_or(0, |h| h + 1);
            writeln!(
                out,
                "{}\t{}\t_\t{}\t_\t_\t{}\t{}\t_\t_",
                t.index + 1,
                t.form,
                t.upos,
                head,
                t.gold_deprel
            )?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusFilter {
    /// `None` keeps sentences of any length.
    pub max_length: Option<NonZeroUsize>,
    pub count_punct_in_length: bool,
}

impl Default for CorpusFilter {
    fn default() -> Self {
        CorpusFilter {
            max_length: None,
            count_punct_in_length: true,
        }
    }
}

impl CorpusFilter {
    pub fn max_length(max_length: usize) -> Result<Self, CorpusError> {
        let max_length = NonZeroUsize::new(max_length).ok_or(CorpusError::InvalidFilter)?;
        Ok(CorpusFilter {
            max_length: Some(max_length),
            ..CorpusFilter::default()
        })
    }

    pub fn length_of(&self, sentence: &AnnotatedSentence) -> usize {
        if self.count_punct_in_length {
            sentence.len()
        } else {
            sentence.tokens.iter().filter(|t| !t.is_punct).count()
        }
    }

    pub fn keeps(&self, sentence: &AnnotatedSentence) -> bool {
        self.max_length
            .is_none_or(|max| self.length_of(sentence) <= max.get())
    }
}

pub fn filter_corpus(corpus: Vec<AnnotatedSentence>, filter: &CorpusFilter) -> Vec<AnnotatedSentence> {
    corpus.into_iter().filter(|s| filter.keeps(s)).collect()
}

/// Checks that two annotations of one treebank cover the same sentences in
/// the same order with identical word forms.
pub fn check_alignment(
    first: &[AnnotatedSentence],
    second: &[AnnotatedSentence],
) -> Result<(), CorpusError> {
    if first.len() != second.len() {
        return Err(CorpusError::Misaligned {
            index: first.len().min(second.len()),
            reason: format!("sentence counts differ: {} vs {}", first.len(), second.len()),
        });
    }
    for (index, (a, b)) in first.iter().zip(second).enumerate() {
        if a.words() != b.words() {
            return Err(CorpusError::Misaligned {
                index,
                reason: format!("word forms differ: `{}` vs `{}`", a.text(), b.text()),
            });
        }
    }
    Ok(())
}
