//! Attachment scores for induced trees.
//!
//! Scores are kept as integer counts and turned into ratios only when read;
//! percentages are rounded to one decimal only when rendered.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{AnnotatedSentence, GoldTree, Scheme};
use crate::induction::{DirectedTree, UndirectedTree};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("predicted tree has {predicted} words, gold has {gold}")]
    Length { predicted: usize, gold: usize },
    #[error("{predicted} predicted trees for {gold} gold sentences")]
    Count { predicted: usize, gold: usize },
    #[error("no metric enabled")]
    NoMetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Uuas,
    Uas,
    Las,
    RelationRecall,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Total matched over total counted, corpus-wide.
    #[default]
    Micro,
    /// Mean of per-sentence ratios, skipping sentences with nothing counted.
    Macro,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub exclude_punct: bool,
    pub scheme: Scheme,
    pub metrics: BTreeSet<Metric>,
    pub averaging: Averaging,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            exclude_punct: true,
            scheme: Scheme::UD,
            metrics: [Metric::Uuas, Metric::RelationRecall].into(),
            averaging: Averaging::Micro,
        }
    }
}

impl EvalConfig {
    pub fn directed() -> Self {
        EvalConfig {
            metrics: [Metric::Uas, Metric::Las].into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.metrics.is_empty() {
            return Err(EvalError::NoMetric);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub matched: usize,
    pub total: usize,
}

impl Counts {
    pub fn new(matched: usize, total: usize) -> Self {
        Counts { matched, total }
    }

    /// `None` when nothing was counted.
    pub fn ratio(&self) -> Option<f64> {
        (self.total > 0).then(|| self.matched as f64 / self.total as f64)
    }
}

impl Add for Counts {
    type Output = Counts;
    fn add(self, other: Counts) -> Counts {
        Counts::new(self.matched + other.matched, self.total + other.total)
    }
}

impl AddAssign for Counts {
    fn add_assign(&mut self, other: Counts) {
        *self = *self + other;
    }
}

impl std::iter::Sum for Counts {
    fn sum<I: Iterator<Item = Counts>>(iter: I) -> Counts {
        iter.fold(Counts::default(), Add::add)
    }
}

fn check_len(predicted: usize, gold: usize) -> Result<(), EvalError> {
    if predicted != gold {
        return Err(EvalError::Length { predicted, gold });
    }
    Ok(())
}

fn counted(h: usize, d: usize, punct: &[bool], cfg: &EvalConfig) -> bool {
    !(cfg.exclude_punct && (punct[h] || punct[d]))
}

/// Gold word edges recovered by `predicted` as unordered pairs. With
/// `exclude_punct`, gold edges touching a punctuation word are not counted.
pub fn uuas(
    predicted: &UndirectedTree,
    gold: &GoldTree,
    punct: &[bool],
    cfg: &EvalConfig,
) -> Result<Counts, EvalError> {
    check_len(predicted.n(), gold.len())?;
    check_len(punct.len(), gold.len())?;
    let mut c = Counts::default();
    for (h, d, _) in gold.word_arcs() {
        if counted(h, d, punct, cfg) {
            c.total += 1;
            c.matched += usize::from(predicted.contains(h, d));
        }
    }
    Ok(c)
}

/// Per-label recall of gold edges in one sentence, added into `into`.
pub fn add_relation_recall(
    predicted: &UndirectedTree,
    gold: &GoldTree,
    punct: &[bool],
    cfg: &EvalConfig,
    into: &mut BTreeMap<String, Counts>,
) -> Result<(), EvalError> {
    check_len(predicted.n(), gold.len())?;
    check_len(punct.len(), gold.len())?;
    for (h, d, label) in gold.word_arcs() {
        if counted(h, d, punct, cfg) {
            let c = into.entry(label.to_string()).or_default();
            c.total += 1;
            c.matched += usize::from(predicted.contains(h, d));
        }
    }
    Ok(())
}

/// Per-label recall over a corpus. Labels that never occur are absent.
pub fn relation_recall(
    predicted: &[UndirectedTree],
    gold: &[AnnotatedSentence],
    cfg: &EvalConfig,
) -> Result<BTreeMap<String, Counts>, EvalError> {
    check_count(predicted.len(), gold.len())?;
    let mut out = BTreeMap::new();
    for (p, g) in predicted.iter().zip(gold).filter(|(_, g)| g.usable) {
        add_relation_recall(p, &g.gold, &g.punct_mask(), cfg, &mut out)?;
    }
    Ok(out)
}

/// Unlabeled and labeled attachment counts over the words that are not
/// excluded punctuation. The root word is correct when it is predicted as
/// root.
pub fn uas_las(
    predicted: &DirectedTree,
    gold: &GoldTree,
    punct: &[bool],
    cfg: &EvalConfig,
) -> Result<(Counts, Counts), EvalError> {
    check_len(predicted.n(), gold.len())?;
    check_len(punct.len(), gold.len())?;
    let mut uas = Counts::default();
    let mut las = Counts::default();
    for arc in &gold.arcs {
        let d = arc.dependent;
        if cfg.exclude_punct && punct[d] {
            continue;
        }
        uas.total += 1;
        las.total += 1;
        if predicted.heads[d] == arc.head {
            uas.matched += 1;
            if predicted.labels[d].as_deref() == Some(arc.label.as_str()) {
                las.matched += 1;
            }
        }
    }
    Ok((uas, las))
}

fn check_count(predicted: usize, gold: usize) -> Result<(), EvalError> {
    if predicted != gold {
        return Err(EvalError::Count { predicted, gold });
    }
    Ok(())
}

/// Scores of one sentence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SentenceScore {
    pub index: usize,
    pub id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uuas: Option<Counts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uas: Option<Counts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub las: Option<Counts>,
}

/// Corpus-level ratios in `[0, 1]`, with the counts they come from.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    pub counts: Counts,
    pub score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: BTreeMap<String, String>,
    pub config: EvalConfig,
    pub evaluated: usize,
    pub skipped: Vec<usize>,
    pub corpus: BTreeMap<Metric, CorpusScore>,
    pub relations: BTreeMap<String, Counts>,
    pub sentences: Vec<SentenceScore>,
}

fn corpus_score(per_sentence: &[Counts], averaging: Averaging) -> CorpusScore {
    let counts: Counts = per_sentence.iter().copied().sum();
    let score = match averaging {
        Averaging::Micro => counts.ratio(),
        Averaging::Macro => {
            let ratios: Vec<f64> = per_sentence.iter().filter_map(Counts::ratio).collect();
            (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64)
        }
    };
    CorpusScore { counts, score }
}

/// What was predicted for one sentence.
#[derive(Clone, Copy, Debug)]
pub enum Prediction<'a> {
    Undirected(&'a UndirectedTree),
    Directed(&'a DirectedTree),
}

/// Scores predictions against a treebank. Sentences whose gold annotation is
/// unusable are listed in `skipped`. Directed predictions also count for
/// UUAS and relation recall through their undirected edges.
pub fn evaluate(
    predicted: &[Prediction<'_>],
    gold: &[AnnotatedSentence],
    cfg: &EvalConfig,
    metadata: BTreeMap<String, String>,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    check_count(predicted.len(), gold.len())?;
    let mut report = EvalReport {
        metadata,
        config: cfg.clone(),
        ..Default::default()
    };
    let mut uuas_all = Vec::new();
    let mut uas_all = Vec::new();
    let mut las_all = Vec::new();
    for (i, (p, g)) in predicted.iter().zip(gold).enumerate() {
        if !g.usable {
            report.skipped.push(i);
            continue;
        }
        let punct = g.punct_mask();
        let mut score = SentenceScore {
            index: i,
            id: g.id.clone(),
            ..Default::default()
        };
        let undirected;
        let tree = match p {
            Prediction::Undirected(t) => *t,
            Prediction::Directed(t) => {
                undirected = t.to_undirected();
                &undirected
            }
        };
        if cfg.metrics.contains(&Metric::Uuas) {
            let c = uuas(tree, &g.gold, &punct, cfg)?;
            uuas_all.push(c);
            score.uuas = Some(c);
        }
        if cfg.metrics.contains(&Metric::RelationRecall) {
            add_relation_recall(tree, &g.gold, &punct, cfg, &mut report.relations)?;
        }
        let wants_directed = cfg.metrics.contains(&Metric::Uas) || cfg.metrics.contains(&Metric::Las);
        if let (true, Prediction::Directed(t)) = (wants_directed, p) {
            let (u, l) = uas_las(t, &g.gold, &punct, cfg)?;
            if cfg.metrics.contains(&Metric::Uas) {
                uas_all.push(u);
                score.uas = Some(u);
            }
            if cfg.metrics.contains(&Metric::Las) {
                las_all.push(l);
                score.las = Some(l);
            }
        }
        report.sentences.push(score);
        report.evaluated += 1;
    }
    for (metric, all) in [(Metric::Uuas, &uuas_all), (Metric::Uas, &uas_all), (Metric::Las, &las_all)] {
        if cfg.metrics.contains(&metric) && !all.is_empty() {
            report.corpus.insert(metric, corpus_score(all, cfg.averaging));
        }
    }
    Ok(report)
}

/// Percentage with one decimal, or `-` when undefined.
pub fn percent(score: Option<f64>) -> String {
    match score {
        Some(s) => format!("{:.1}", s * 100.0),
        None => "-".to_string(),
    }
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Uuas => "uuas",
        Metric::Uas => "uas",
        Metric::Las => "las",
        Metric::RelationRecall => "relation_recall",
    }
}

impl EvalReport {
    pub fn score(&self, metric: Metric) -> Option<f64> {
        self.corpus.get(&metric).and_then(|c| c.score)
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    /// Tab-separated report: metadata comments, corpus scores, relation
    /// recall and per-sentence counts.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            let _ = writeln!(out, "# {k}\t{v}");
        }
        let _ = writeln!(
            out,
            "# exclude_punct\t{}\n# scheme\t{}\n# averaging\t{}",
            self.config.exclude_punct,
            self.config.scheme,
            match self.config.averaging {
                Averaging::Micro => "micro",
                Averaging::Macro => "macro",
            }
        );
        let _ = writeln!(out, "metric\tscore\tmatched\ttotal");
        for (m, c) in &self.corpus {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}",
                metric_name(*m),
                percent(c.score),
                c.counts.matched,
                c.counts.total
            );
        }
        if !self.relations.is_empty() {
            let _ = writeln!(out, "\nrelation\trecall\tmatched\ttotal");
            for (label, c) in &self.relations {
                let _ = writeln!(out, "{label}\t{}\t{}\t{}", percent(c.ratio()), c.matched, c.total);
            }
        }
        let _ = writeln!(out, "\nsentence\tid\tmetric\tscore\tmatched\ttotal");
        for s in &self.sentences {
            let id = s.id.as_deref().unwrap_or("-");
            for (m, c) in [(Metric::Uuas, s.uuas), (Metric::Uas, s.uas), (Metric::Las, s.las)] {
                if let Some(c) = c {
                    let _ = writeln!(
                        out,
                        "{}\t{id}\t{}\t{}\t{}\t{}",
                        s.index,
                        metric_name(m),
                        percent(c.ratio()),
                        c.matched,
                        c.total
                    );
                }
            }
        }
        for i in &self.skipped {
            let _ = writeln!(out, "# skipped\t{i}");
        }
        out
    }
}

/// One cell of a layer by k sweep.
pub type SweepCell = Result<EvalReport, String>;

/// Reports for every (layer, k) pair. Failed cells keep their error message.
#[derive(Clone, Debug, Default)]
pub struct SweepTable {
    pub metric: Option<Metric>,
    pub layers: Vec<usize>,
    pub ks: Vec<usize>,
    pub cells: BTreeMap<(usize, usize), SweepCell>,
}

impl SweepTable {
    /// Runs `cell` for every pair, layers outermost. A failing cell does not
    /// stop the sweep.
    pub fn run<F, E>(layers: &[usize], ks: &[usize], metric: Metric, mut cell: F) -> SweepTable
    where
        F: FnMut(usize, usize) -> Result<EvalReport, E>,
        E: std::fmt::Display,
    {
        let mut cells = BTreeMap::new();
        for &layer in layers {
            for &k in ks {
                cells.insert((layer, k), cell(layer, k).map_err(|e| e.to_string()));
            }
        }
        SweepTable {
            metric: Some(metric),
            layers: layers.to_vec(),
            ks: ks.to_vec(),
            cells,
        }
    }

    pub fn score(&self, layer: usize, k: usize) -> Option<f64> {
        let metric = self.metric?;
        self.cells.get(&(layer, k))?.as_ref().ok()?.score(metric)
    }

    /// Difference to the target-only cell of the same layer, in percentage
    /// points after rounding both to one decimal.
    pub fn delta(&self, layer: usize, k: usize) -> Option<f64> {
        let round = |s: f64| (s * 1000.0).round() / 10.0;
        Some(round(self.score(layer, k)?) - round(self.score(layer, 0)?))
    }

    /// Layers as rows, `T.` for k = 0 then one column per k with its delta.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("layer");
        for &k in &self.ks {
            if k == 0 {
                out.push_str("\tT.");
            } else {
                let _ = write!(out, "\tk={k}");
                if self.ks.contains(&0) {
                    let _ = write!(out, "\tΔ(k={k})");
                }
            }
        }
        out.push('\n');
        for &layer in &self.layers {
            let _ = write!(out, "{layer}");
            for &k in &self.ks {
                let cell = match self.cells.get(&(layer, k)) {
                    Some(Err(_)) => "ERR".to_string(),
                    _ => percent(self.score(layer, k)),
                };
                let _ = write!(out, "\t{cell}");
                if k != 0 && self.ks.contains(&0) {
                    let d = self.delta(layer, k).map_or("-".to_string(), |d| format!("{d:.1}"));
                    let _ = write!(out, "\t{d}");
                }
            }
            out.push('\n');
        }
        let errors: Vec<_> = self
            .cells
            .iter()
            .filter_map(|((l, k), c)| c.as_ref().err().map(|e| (l, k, e)))
            .collect();
        for (l, k, e) in errors {
            let _ = writeln!(out, "# layer {l} k={k} failed: {e}");
        }
        out
    }
}
