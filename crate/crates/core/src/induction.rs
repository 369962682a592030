//! Tree decoding from attention.
//!
//! Attention matrices of a target sentence and of its substitution variants
//! are averaged elementwise, symmetrized and decoded with Prim's maximum
//! spanning tree. Directed trees (used with head selection) are decoded with
//! Chu-Liu-Edmonds.

use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{
    layer_average, reduce_to_words, symmetrize_values, AttentionError, AttentionMatrix,
    FromWordMode, SymmetrizeMode, WordAttention,
};
use crate::provider::{Provider, ProviderError, ProviderExt};
use crate::substitution::SubstitutionSet;

#[derive(Debug, Error)]
pub enum InductionError {
    #[error("nothing to aggregate: no target and no variants")]
    EmptyInput,
    #[error("cannot decode an empty sentence")]
    EmptySentence,
    #[error("score ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
    #[error("score matrix is not symmetric at ({row}, {col})")]
    NotSymmetric { row: usize, col: usize },
    #[error("expected a {expected}x{expected} matrix, found {rows}x{cols}")]
    Dimension {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("root {root} outside a {n}-word sentence")]
    RootOutOfRange { root: usize, n: usize },
    #[error("layer {0} not available")]
    MissingLayer(usize),
    #[error("head {head} not available in layer {layer}")]
    MissingHead { layer: usize, head: usize },
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error("sentence {sentence}: {source}")]
    Sentence {
        sentence: String,
        source: Box<InductionError>,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    Mean,
}

/// How the heads of a layer become one matrix for undirected decoding.
/// Per-relation head inventories are handled by [`crate::headsel`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadMode {
    #[default]
    LayerAverage,
    SingleHead(usize),
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AggregationSpec {
    pub mode: AggregationMode,
    pub include_target: bool,
    pub layer: usize,
    pub head_mode: HeadMode,
    pub symmetrize: SymmetrizeMode,
}

impl AggregationSpec {
    pub fn new(layer: usize) -> Self {
        AggregationSpec {
            mode: AggregationMode::Mean,
            include_target: true,
            layer,
            head_mode: HeadMode::LayerAverage,
            symmetrize: SymmetrizeMode::Avg,
        }
    }
}

/// Pairwise word scores. Symmetric matrices have a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    values: Array2<f64>,
    symmetric: bool,
}

impl ScoreMatrix {
    /// Wraps a symmetric matrix, zeroing its diagonal.
    pub fn symmetric(mut values: Array2<f64>) -> Result<Self, InductionError> {
        check_finite_square(&values)?;
        let n = values.nrows();
        for i in 0..n {
            for j in (i + 1)..n {
                if values[(i, j)] != values[(j, i)] {
                    return Err(InductionError::NotSymmetric { row: i, col: j });
                }
            }
        }
        values.diag_mut().fill(0.0);
        Ok(ScoreMatrix {
            values,
            symmetric: true,
        })
    }

    /// Wraps an asymmetric matrix where `values[(h, d)]` scores the arc from
    /// head `h` to dependent `d`.
    pub fn directed(values: Array2<f64>) -> Result<Self, InductionError> {
        check_finite_square(&values)?;
        Ok(ScoreMatrix {
            values,
            symmetric: false,
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[(i, j)]
    }

    /// Word with the largest total score; ties go to the smaller index.
    pub fn strongest_word(&self) -> usize {
        let mut best = 0;
        let mut best_total = f64::NEG_INFINITY;
        for (i, row) in self.values.rows().into_iter().enumerate() {
            let total: f64 = row
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, v)| v)
                .sum();
            if total > best_total {
                best_total = total;
                best = i;
            }
        }
        best
    }
}

fn check_finite_square(values: &Array2<f64>) -> Result<(), InductionError> {
    if values.nrows() != values.ncols() {
        return Err(InductionError::Dimension {
            expected: values.nrows(),
            rows: values.nrows(),
            cols: values.ncols(),
        });
    }
    if let Some(((row, col), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
        return Err(InductionError::NonFinite { row, col });
    }
    Ok(())
}

/// An undirected spanning tree; edges are stored as `(i, j)` with `i < j`,
/// sorted.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct UndirectedTree {
    n: usize,
    edges: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("{found} edges for {n} words")]
    EdgeCount { n: usize, found: usize },
    #[error("edge ({0}, {1}) is invalid")]
    BadEdge(usize, usize),
    #[error("edges do not connect all words")]
    Disconnected,
    #[error("{0} roots")]
    Roots(usize),
    #[error("cycle through word {0}")]
    Cycle(usize),
}

impl UndirectedTree {
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self, TreeError> {
        let mut edges: Vec<(usize, usize)> = edges
            .into_iter()
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        let tree = UndirectedTree { n, edges };
        tree.validate()?;
        Ok(tree)
    }

    pub fn from_heads(heads: &[Option<usize>]) -> Result<Self, TreeError> {
        Self::new(
            heads.len(),
            heads.iter().enumerate().filter_map(|(d, h)| h.map(|h| (h, d))),
        )
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.edges.binary_search(&(a.min(b), a.max(b))).is_ok()
    }

    /// Sum of edge scores, accumulated in edge order.
    pub fn weight(&self, scores: &ScoreMatrix) -> f64 {
        self.edges.iter().map(|&(i, j)| scores.get(i, j)).sum()
    }

    /// Checks `n − 1` distinct in-range edges connecting all words.
    pub fn validate(&self) -> Result<(), TreeError> {
        let expected = self.n.saturating_sub(1);
        if self.edges.len() != expected {
            return Err(TreeError::EdgeCount {
                n: self.n,
                found: self.edges.len(),
            });
        }
        let mut parent: Vec<usize> = (0..self.n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        for &(a, b) in &self.edges {
            if a == b || b >= self.n {
                return Err(TreeError::BadEdge(a, b));
            }
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra == rb {
                // n − 1 edges with a cycle cannot connect n words
                return Err(TreeError::Disconnected);
            }
            parent[ra] = rb;
        }
        Ok(())
    }

    /// Head of every word when the tree hangs from `root`.
    pub fn orient(&self, root: usize) -> Vec<Option<usize>> {
        let mut adjacency = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        let mut heads = vec![None; self.n];
        let mut seen = vec![false; self.n];
        let mut stack = vec![root];
        seen[root] = true;
        while let Some(u) = stack.pop() {
            for &v in &adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    heads[v] = Some(u);
                    stack.push(v);
                }
            }
        }
        heads
    }
}

/// A rooted directed tree: `heads[d]` is the head of word `d`, `None` for
/// the root. Arcs may carry relation labels.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DirectedTree {
    pub heads: Vec<Option<usize>>,
    pub labels: Vec<Option<String>>,
}

impl DirectedTree {
    pub fn unlabeled(heads: Vec<Option<usize>>) -> Self {
        let labels = vec![None; heads.len()];
        DirectedTree { heads, labels }
    }

    pub fn n(&self) -> usize {
        self.heads.len()
    }

    pub fn root(&self) -> Option<usize> {
        self.heads.iter().position(Option::is_none)
    }

    /// Sum of `scores[(head, dep)]` over non-root words in index order.
    pub fn weight(&self, scores: &Array2<f64>) -> f64 {
        self.heads
            .iter()
            .enumerate()
            .filter_map(|(d, h)| h.map(|h| scores[(h, d)]))
            .sum()
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        let roots = self.heads.iter().filter(|h| h.is_none()).count();
        if roots != 1 {
            return Err(TreeError::Roots(roots));
        }
        for (d, h) in self.heads.iter().enumerate() {
            if let Some(h) = *h {
                if h >= self.n() || h == d {
                    return Err(TreeError::BadEdge(h, d));
                }
            }
        }
        match crate::corpus::find_cycle(&self.heads) {
            Some(c) => Err(TreeError::Cycle(c[0])),
            None => Ok(()),
        }
    }

    pub fn to_undirected(&self) -> UndirectedTree {
        UndirectedTree::from_heads(&self.heads).expect("a valid arborescence is a spanning tree")
    }
}

/// Elementwise mean of same-sized matrices, without symmetrization.
pub fn mean_matrix<'a, I>(mats: I) -> Result<Array2<f64>, InductionError>
where
    I: IntoIterator<Item = &'a AttentionMatrix>,
{
    let mut iter = mats.into_iter();
    let first = iter.next().ok_or(InductionError::EmptyInput)?;
    let n = first.n();
    let mut sum = first.values().clone();
    let mut count = 1usize;
    for m in iter {
        if m.n() != n {
            return Err(InductionError::Dimension {
                expected: n,
                rows: m.n(),
                cols: m.n(),
            });
        }
        sum += m.values();
        count += 1;
    }
    sum /= count as f64;
    Ok(sum)
}

/// Averages the target matrix (when `spec.include_target`, or when there
/// are no variants) and the variant matrices, then symmetrizes with a zero
/// diagonal.
pub fn aggregate(
    target: &AttentionMatrix,
    variants: &[AttentionMatrix],
    spec: &AggregationSpec,
) -> Result<ScoreMatrix, InductionError> {
    let pool = (spec.include_target || variants.is_empty())
        .then_some(target)
        .into_iter()
        .chain(variants.iter());
    let mean = match spec.mode {
        AggregationMode::Mean => mean_matrix(pool)?,
    };
    if mean.nrows() != target.n() {
        return Err(InductionError::Dimension {
            expected: target.n(),
            rows: mean.nrows(),
            cols: mean.ncols(),
        });
    }
    ScoreMatrix::symmetric(symmetrize_values(&mean, spec.symmetrize))
}

/// Maximum spanning tree by Prim's algorithm from word 0. Among crossing
/// edges of equal weight the lexicographically smallest `(min, max)` pair
/// wins, so results are deterministic.
pub fn prim_mst(scores: &ScoreMatrix) -> Result<UndirectedTree, InductionError> {
    let n = scores.n();
    if n == 0 {
        return Err(InductionError::EmptySentence);
    }
    check_finite_square(scores.values())?;

    let better = |w: f64, key: (usize, usize), than: Option<(f64, (usize, usize))>| match than {
        None => true,
        Some((bw, bk)) => w > bw || (w == bw && key < bk),
    };
    let key = |a: usize, b: usize| (a.min(b), a.max(b));

    let mut in_tree = vec![false; n];
    // best crossing edge into each outside word: (weight, key, tree endpoint)
    let mut best: Vec<Option<(f64, (usize, usize))>> = vec![None; n];
    let mut edges = Vec::with_capacity(n - 1);
    in_tree[0] = true;
    for (v, b) in best.iter_mut().enumerate().skip(1) {
        *b = Some((scores.get(0, v), key(0, v)));
    }
    for _ in 1..n {
        let mut pick: Option<usize> = None;
        for v in 0..n {
            if in_tree[v] {
                continue;
            }
            let (w, k) = best[v].expect("every outside word has a crossing edge");
            if pick.is_none_or(|p| better(w, k, best[p])) {
                pick = Some(v);
            }
        }
        let v = pick.expect("an outside word remains");
        in_tree[v] = true;
        edges.push(best[v].unwrap().1);
        for u in 0..n {
            if !in_tree[u] {
                let w = scores.get(v, u);
                let k = key(v, u);
                if better(w, k, best[u]) {
                    best[u] = Some((w, k));
                }
            }
        }
    }
    let tree = UndirectedTree::new(n, edges).expect("Prim yields a spanning tree");
    debug_assert!(tree.validate().is_ok());
    Ok(tree)
}

/// Maximum spanning arborescence rooted at `root`; `scores[(h, d)]` scores
/// the arc `h → d`. Self-loops and arcs into the root are ignored.
pub fn chu_liu_edmonds(scores: &Array2<f64>, root: usize) -> Result<DirectedTree, InductionError> {
    check_finite_square(scores)?;
    let n = scores.nrows();
    if n == 0 {
        return Err(InductionError::EmptySentence);
    }
    if root >= n {
        return Err(InductionError::RootOutOfRange { root, n });
    }
    let mut graph = scores.clone();
    for v in 0..n {
        graph[(v, v)] = f64::NEG_INFINITY;
        graph[(v, root)] = f64::NEG_INFINITY;
    }
    let parents = cle_parents(&graph, root);
    let heads = parents
        .into_iter()
        .enumerate()
        .map(|(v, p)| (v != root).then_some(p))
        .collect();
    let tree = DirectedTree::unlabeled(heads);
    debug_assert!(tree.validate().is_ok());
    Ok(tree)
}

// Recursive contraction over a dense graph in which absent arcs are
// NEG_INFINITY. Returns the parent of every node (the root's entry is
// meaningless).
fn cle_parents(graph: &Array2<f64>, root: usize) -> Vec<usize> {
    let n = graph.nrows();
    let mut parent = vec![root; n];
    for v in 0..n {
        if v == root {
            continue;
        }
        let mut best = f64::NEG_INFINITY;
        for u in 0..n {
            if graph[(u, v)] > best {
                best = graph[(u, v)];
                parent[v] = u;
            }
        }
    }

    let Some(cycle) = find_parent_cycle(&parent, root) else {
        return parent;
    };
    let mut in_cycle = vec![false; n];
    for &v in &cycle {
        in_cycle[v] = true;
    }

    // contracted graph: surviving nodes keep their order, the cycle becomes
    // the last node
    let mut map = vec![0usize; n];
    let mut back = Vec::new();
    for v in 0..n {
        if !in_cycle[v] {
            map[v] = back.len();
            back.push(v);
        }
    }
    let c = back.len();
    for &v in &cycle {
        map[v] = c;
    }
    let m = c + 1;
    let mut sub = Array2::from_elem((m, m), f64::NEG_INFINITY);
    let mut enter_at = vec![usize::MAX; n];
    let mut leave_from = vec![usize::MAX; n];
    for u in 0..n {
        for v in 0..n {
            let s = graph[(u, v)];
            if u == v || s == f64::NEG_INFINITY {
                continue;
            }
            match (in_cycle[u], in_cycle[v]) {
                (false, false) => sub[(map[u], map[v])] = s,
                (false, true) => {
                    let adjusted = s - graph[(parent[v], v)];
                    if adjusted > sub[(map[u], c)] {
                        sub[(map[u], c)] = adjusted;
                        enter_at[u] = v;
                    }
                }
                (true, false) => {
                    if s > sub[(c, map[v])] {
                        sub[(c, map[v])] = s;
                        leave_from[v] = u;
                    }
                }
                (true, true) => {}
            }
        }
    }

    let sub_parent = cle_parents(&sub, map[root]);
    let mut result = parent;
    for v in 0..n {
        if in_cycle[v] || v == root {
            continue;
        }
        let p = sub_parent[map[v]];
        result[v] = if p == c { leave_from[v] } else { back[p] };
    }
    let entry_head = back[sub_parent[c]];
    result[enter_at[entry_head]] = entry_head;
    result
}

fn find_parent_cycle(parent: &[usize], root: usize) -> Option<Vec<usize>> {
    let n = parent.len();
    let mut state = vec![0u8; n];
    state[root] = 2;
    for start in 0..n {
        let mut path = Vec::new();
        let mut v = start;
        while state[v] == 0 {
            state[v] = 1;
            path.push(v);
            v = parent[v];
        }
        if state[v] == 1 {
            let pos = path.iter().position(|&p| p == v).unwrap();
            return Some(path[pos..].to_vec());
        }
        for p in path {
            state[p] = 2;
        }
    }
    None
}

/// One matrix for `layer` according to `head_mode`.
pub fn collapse_heads(
    attention: &WordAttention,
    layer: usize,
    head_mode: HeadMode,
) -> Result<AttentionMatrix, InductionError> {
    let heads = attention.get(&layer).ok_or(InductionError::MissingLayer(layer))?;
    match head_mode {
        HeadMode::LayerAverage => Ok(layer_average(heads)?),
        HeadMode::SingleHead(h) => heads
            .get(h)
            .cloned()
            .ok_or(InductionError::MissingHead { layer, head: h }),
    }
}

#[derive(Debug, Error)]
pub enum SourceError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error("no stored attention for `{0}`")]
    Missing(String),
    #[error("attention cache: {0}")]
    Cache(String),
}

/// Word-level attention for arbitrary sentences.
pub trait AttentionSource: Sync {
    fn word_attention(&self, words: &[String]) -> Result<WordAttention, SourceError>;
}

/// Queries a provider and reduces the result to words.
pub struct ProviderSource<'a, P: ?Sized> {
    pub provider: &'a P,
    pub layers: Vec<usize>,
    pub from_word_mode: FromWordMode,
}

impl<P: Provider + ?Sized> AttentionSource for ProviderSource<'_, P> {
    fn word_attention(&self, words: &[String]) -> Result<WordAttention, SourceError> {
        let payload = self.provider.attention(words, &self.layers)?;
        Ok(reduce_to_words(&payload, words.len(), self.from_word_mode)?)
    }
}

/// Result of inducing one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct Induced {
    pub tree: UndirectedTree,
    pub scores: ScoreMatrix,
}

impl Induced {
    /// Heads when the tree hangs from the word with the largest total score.
    pub fn oriented_heads(&self) -> Vec<Option<usize>> {
        self.tree.orient(self.scores.strongest_word())
    }
}

/// Fetches attention for the target and every variant, collapses heads,
/// aggregates and decodes.
pub fn induce<S: AttentionSource + ?Sized>(
    set: &SubstitutionSet,
    spec: &AggregationSpec,
    source: &S,
) -> Result<Induced, InductionError> {
    let with_id = |e: InductionError| InductionError::Sentence {
        sentence: set.target.join(" "),
        source: Box::new(e),
    };
    let run = || -> Result<Induced, InductionError> {
        let target = collapse_heads(&source.word_attention(&set.target)?, spec.layer, spec.head_mode)?;
        let variants = set
            .variants
            .iter()
            .map(|v| collapse_heads(&source.word_attention(&v.words)?, spec.layer, spec.head_mode))
            .collect::<Result<Vec<_>, _>>()?;
        let scores = aggregate(&target, &variants, spec)?;
        let tree = prim_mst(&scores)?;
        Ok(Induced { tree, scores })
    };
    run().map_err(with_id)
}

/// Bracketed rendering of a rooted tree, e.g. `(cooks (pilot the) .)`.
pub fn render_brackets(words: &[String], heads: &[Option<usize>]) -> String {
    struct Node<'a> {
        words: &'a [String],
        children: &'a [Vec<usize>],
        at: usize,
    }
    impl fmt::Display for Node<'_> {
        fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
            let kids = &self.children[self.at];
            if kids.is_empty() {
                return f.write_str(&self.words[self.at]);
            }
            write!(f, "({}", self.words[self.at])?;
            for &k in kids {
                write!(f, " {}", Node { at: k, ..*self })?;
            }
            f.write_str(")")
        }
    }
    let mut children = vec![Vec::new(); heads.len()];
    let mut roots = Vec::new();
    for (d, h) in heads.iter().enumerate() {
        match h {
            Some(h) => children[*h].push(d),
            None => roots.push(d),
        }
    }
    roots
        .iter()
        .map(|&r| {
            Node {
                words,
                children: &children,
                at: r,
            }
            .to_string()
        })
        .collect::<Vec<_>>()
        .join(" ")
}
