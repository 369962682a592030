//! Word-level attention matrices.
//!
//! Subword attention from the model is reduced to words by summing the
//! columns of each word's subwords (attention *to* the word) and averaging
//! its subword rows (attention *from* the word). Special tokens are dropped
//! and every row is renormalized. All arithmetic is in `f64`.

pub mod archive;

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::provider::AttentionPayload;

/// Tolerance for row sums of model-produced attention.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum AttentionError {
    #[error("word {word} has no subwords")]
    UnalignedWord { word: usize },
    #[error("subword {subword} maps to word {word}, but the sentence has {n} words")]
    WordIdOutOfRange { subword: usize, word: usize, n: usize },
    #[error("{what}: expected {expected}, found {found}")]
    Shape {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("entry ({row}, {col}) is {value}; attention must be finite and non-negative")]
    InvalidEntry { row: usize, col: usize, value: f64 },
    #[error("row {row} sums to {sum}, not 1")]
    NotRowStochastic { row: usize, sum: f64 },
    #[error("cannot average an empty set of matrices")]
    Empty,
    #[error("matrices disagree: {0}")]
    Mismatch(String),
}

/// Which attention head a matrix came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum HeadId {
    Head(usize),
    Averaged,
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadId::Head(h) => write!(f, "{h}"),
            HeadId::Averaged => f.write_str("avg"),
        }
    }
}

/// How a word's outgoing distribution is formed from its subword rows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FromWordMode {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetrizeMode {
    /// `(M + Mᵀ) / 2`
    #[default]
    Avg,
    /// elementwise `max(M, Mᵀ)`
    Max,
}

/// An `n × n` word-level attention matrix. Row `i` is the distribution of
/// word `i` over all words.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix {
    pub layer: usize,
    pub head: HeadId,
    values: Array2<f64>,
    row_stochastic: bool,
}

impl AttentionMatrix {
    /// Builds a row-stochastic matrix, checking entries and row sums.
    pub fn new(layer: usize, head: HeadId, values: Array2<f64>) -> Result<Self, AttentionError> {
        check_square(&values)?;
        check_entries(&values)?;
        check_row_sums(&values, ROW_SUM_TOLERANCE)?;
        Ok(AttentionMatrix {
            layer,
            head,
            values,
            row_stochastic: true,
        })
    }

    /// Builds a matrix with finite non-negative entries and no row-sum
    /// requirement.
    pub fn scores(layer: usize, head: HeadId, values: Array2<f64>) -> Result<Self, AttentionError> {
        check_square(&values)?;
        check_entries(&values)?;
        Ok(AttentionMatrix {
            layer,
            head,
            values,
            row_stochastic: false,
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn is_row_stochastic(&self) -> bool {
        self.row_stochastic
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[(row, col)]
    }
}

fn check_square(values: &Array2<f64>) -> Result<(), AttentionError> {
    if values.nrows() != values.ncols() {
        return Err(AttentionError::Shape {
            what: "columns of a square matrix",
            expected: values.nrows(),
            found: values.ncols(),
        });
    }
    Ok(())
}

fn check_entries(values: &Array2<f64>) -> Result<(), AttentionError> {
    for ((row, col), &value) in values.indexed_iter() {
        if !value.is_finite() || value < 0.0 {
            return Err(AttentionError::InvalidEntry { row, col, value });
        }
    }
    Ok(())
}

pub(crate) fn check_row_sums(values: &Array2<f64>, tolerance: f64) -> Result<(), AttentionError> {
    for (row, r) in values.rows().into_iter().enumerate() {
        let sum = r.sum();
        if (sum - 1.0).abs() > tolerance {
            return Err(AttentionError::NotRowStochastic { row, sum });
        }
    }
    Ok(())
}

/// Word-level matrices of one sentence, per layer, indexed by head.
pub type WordAttention = BTreeMap<usize, Vec<AttentionMatrix>>;

/// Reduces subword attention to word attention for every returned layer and
/// head. `n_words` is the word count of the sentence the payload belongs to.
pub fn reduce_to_words(
    payload: &AttentionPayload,
    n_words: usize,
    mode: FromWordMode,
) -> Result<WordAttention, AttentionError> {
    let t = payload.word_ids.len();
    if payload.subword_forms.len() != t {
        return Err(AttentionError::Shape {
            what: "subword forms",
            expected: t,
            found: payload.subword_forms.len(),
        });
    }
    let mut subwords_of: Vec<Vec<usize>> = vec![Vec::new(); n_words];
    for (subword, word) in payload.word_ids.iter().enumerate() {
        if let Some(word) = *word {
            if word >= n_words {
                return Err(AttentionError::WordIdOutOfRange {
                    subword,
                    word,
                    n: n_words,
                });
            }
            subwords_of[word].push(subword);
        }
    }
    if let Some(word) = subwords_of.iter().position(Vec::is_empty) {
        return Err(AttentionError::UnalignedWord { word });
    }

    let mut out = WordAttention::new();
    for (&layer, heads) in &payload.attention {
        let mut mats = Vec::with_capacity(heads.len());
        for (head, rows) in heads.iter().enumerate() {
            let values = reduce_matrix(rows, &subwords_of, mode)?;
            mats.push(AttentionMatrix {
                layer,
                head: HeadId::Head(head),
                values,
                row_stochastic: true,
            });
        }
        out.insert(layer, mats);
    }
    Ok(out)
}

fn reduce_matrix(
    rows: &[Vec<f64>],
    subwords_of: &[Vec<usize>],
    mode: FromWordMode,
) -> Result<Array2<f64>, AttentionError> {
    let t = rows.len();
    let n = subwords_of.len();
    let expected_t: usize = subwords_of.iter().map(Vec::len).sum();
    if t < expected_t {
        return Err(AttentionError::Shape {
            what: "subword rows",
            expected: expected_t,
            found: t,
        });
    }
    for (row, r) in rows.iter().enumerate() {
        if r.len() != t {
            return Err(AttentionError::Shape {
                what: "subword columns",
                expected: t,
                found: r.len(),
            });
        }
        for (col, &value) in r.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(AttentionError::InvalidEntry { row, col, value });
            }
        }
    }

    let mut words = Array2::<f64>::zeros((n, n));
    for (from, from_subwords) in subwords_of.iter().enumerate() {
        for (to, to_subwords) in subwords_of.iter().enumerate() {
            let mut total = 0.0;
            for &s in from_subwords {
                for &c in to_subwords {
                    total += rows[s][c];
                }
            }
            words[(from, to)] = match mode {
                FromWordMode::Mean => total / from_subwords.len() as f64,
                FromWordMode::Sum => total,
            };
        }
    }
    for mut row in words.rows_mut() {
        let sum = row.sum();
        if sum > 0.0 {
            row.mapv_inplace(|v| v / sum);
        } else {
            // all mass was on special tokens
            row.fill(1.0 / n as f64);
        }
    }
    Ok(words)
}

/// Elementwise mean over the heads of one layer.
pub fn layer_average(mats: &[AttentionMatrix]) -> Result<AttentionMatrix, AttentionError> {
    let first = mats.first().ok_or(AttentionError::Empty)?;
    let mut sum = Array2::<f64>::zeros(first.values.raw_dim());
    for m in mats {
        if m.layer != first.layer {
            return Err(AttentionError::Mismatch(format!(
                "layers {} and {}",
                first.layer, m.layer
            )));
        }
        if m.n() != first.n() {
            return Err(AttentionError::Mismatch(format!(
                "sizes {} and {}",
                first.n(),
                m.n()
            )));
        }
        sum += &m.values;
    }
    sum /= mats.len() as f64;
    Ok(AttentionMatrix {
        layer: first.layer,
        head: HeadId::Averaged,
        values: sum,
        row_stochastic: mats.iter().all(|m| m.row_stochastic),
    })
}

/// Symmetric version of `m` with a zero diagonal.
pub fn symmetrize(m: &AttentionMatrix, mode: SymmetrizeMode) -> AttentionMatrix {
    let values = symmetrize_values(&m.values, mode);
    AttentionMatrix {
        layer: m.layer,
        head: m.head,
        values,
        row_stochastic: false,
    }
}

pub(crate) fn symmetrize_values(values: &Array2<f64>, mode: SymmetrizeMode) -> Array2<f64> {
    let t = values.t();
    let mut out = Array2::zeros(values.raw_dim());
    Zip::from(&mut out)
        .and(values)
        .and(&t)
        .for_each(|o, &a, &b| {
            *o = match mode {
                SymmetrizeMode::Avg => (a + b) / 2.0,
                SymmetrizeMode::Max => a.max(b),
            }
        });
    out.diag_mut().fill(0.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn payload(word_ids: Vec<Option<usize>>, heads: Vec<Vec<Vec<f64>>>) -> AttentionPayload {
        let forms = word_ids.iter().map(|_| "x".to_string()).collect();
        let mut attention = BTreeMap::new();
        attention.insert(0, heads);
        AttentionPayload {
            subword_forms: forms,
            word_ids,
            attention,
        }
    }

    #[test]
    fn single_word_normalizes() {
        let p = payload(vec![Some(0)], vec![vec![vec![1.0]]]);
        let w = reduce_to_words(&p, 1, FromWordMode::Mean).unwrap();
        assert_eq!(w[&0][0].values(), &array![[1.0]]);
    }

    #[test]
    fn no_split_no_special_is_identity() {
        let rows = vec![
            vec![0.5, 0.3, 0.2],
            vec![0.1, 0.1, 0.8],
            vec![0.25, 0.25, 0.5],
        ];
        let p = payload(vec![Some(0), Some(1), Some(2)], vec![rows.clone()]);
        let w = reduce_to_words(&p, 3, FromWordMode::Mean).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(w[&0][0].get(i, j), rows[i][j], epsilon = 1e-15);
            }
        }
    }

    // Hand-applied sum/mean/renormalize, word 1 split into subwords 1 and 2.
    #[test]
    fn split_word_uniform_rows() {
        let rows = vec![vec![0.25; 4]; 4];
        let p = payload(vec![Some(0), Some(1), Some(1), Some(2)], vec![rows]);
        let w = reduce_to_words(&p, 3, FromWordMode::Mean).unwrap();
        let expected = array![
            [0.25, 0.5, 0.25],
            [0.25, 0.5, 0.25],
            [0.25, 0.5, 0.25]
        ];
        for (a, b) in w[&0][0].values().iter().zip(expected.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    // Non-uniform case with special tokens, worked out by hand:
    // subwords [CLS] w0 w1a w1b [SEP]
    #[test]
    fn split_word_with_specials() {
        let rows = vec![
            vec![0.2, 0.2, 0.2, 0.2, 0.2],
            vec![0.5, 0.1, 0.2, 0.1, 0.1],
            vec![0.1, 0.3, 0.1, 0.1, 0.4],
            vec![0.0, 0.5, 0.25, 0.25, 0.0],
            vec![0.2, 0.2, 0.2, 0.2, 0.2],
        ];
        let p = payload(vec![None, Some(0), Some(1), Some(1), None], vec![rows]);
        let w = reduce_to_words(&p, 2, FromWordMode::Mean).unwrap();
        // row 0: to w0 = 0.1, to w1 = 0.3 -> [0.25, 0.75]
        // row 1: mean of [0.3, 0.2] and [0.5, 0.5] = [0.4, 0.35] -> [8/15, 7/15]
        let m = &w[&0][0];
        assert_abs_diff_eq!(m.get(0, 0), 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(m.get(0, 1), 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(m.get(1, 0), 8.0 / 15.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.get(1, 1), 7.0 / 15.0, epsilon = 1e-12);

        // sum mode: row 1 = [0.8, 0.7] -> same after renormalization here
        let s = reduce_to_words(&p, 2, FromWordMode::Sum).unwrap();
        assert_abs_diff_eq!(s[&0][0].get(1, 0), 8.0 / 15.0, epsilon = 1e-12);
    }

    #[test]
    fn word_without_subwords_is_an_error() {
        let p = payload(vec![Some(0), Some(2)], vec![vec![vec![0.5, 0.5]; 2]]);
        assert_eq!(
            reduce_to_words(&p, 3, FromWordMode::Mean),
            Err(AttentionError::UnalignedWord { word: 1 })
        );
    }

    #[test]
    fn out_of_range_word_id() {
        let p = payload(vec![Some(0), Some(5)], vec![vec![vec![0.5, 0.5]; 2]]);
        assert!(matches!(
            reduce_to_words(&p, 2, FromWordMode::Mean),
            Err(AttentionError::WordIdOutOfRange { word: 5, .. })
        ));
    }

    fn mat(values: Array2<f64>) -> AttentionMatrix {
        AttentionMatrix::new(3, HeadId::Head(0), values).unwrap()
    }

    #[test]
    fn layer_average_cases() {
        let a = mat(array![[0.2, 0.8], [0.6, 0.4]]);
        let b = mat(array![[0.4, 0.6], [0.0, 1.0]]);
        assert_eq!(layer_average(&[a.clone()]).unwrap().values(), a.values());
        let avg = layer_average(&[a.clone(), b]).unwrap();
        assert_eq!(avg.head, HeadId::Averaged);
        assert_abs_diff_eq!(avg.get(0, 0), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(avg.get(1, 0), 0.3, epsilon = 1e-15);
        assert!(avg.is_row_stochastic());
        let twelve = vec![a.clone(); 12];
        let avg = layer_average(&twelve).unwrap();
        for (x, y) in avg.values().iter().zip(a.values().iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
        assert_eq!(layer_average(&[]), Err(AttentionError::Empty));
        let c = mat(array![[1.0]]);
        assert!(matches!(layer_average(&[a, c]), Err(AttentionError::Mismatch(_))));
    }

    #[test]
    fn symmetrize_cases() {
        let m = AttentionMatrix::scores(
            0,
            HeadId::Head(0),
            array![[0.5, 0.2, 0.3], [0.4, 0.1, 0.5], [0.3, 0.5, 0.2]],
        )
        .unwrap();
        let avg = symmetrize(&m, SymmetrizeMode::Avg);
        assert_abs_diff_eq!(avg.get(0, 1), 0.3, epsilon = 1e-15);
        assert_abs_diff_eq!(avg.get(1, 0), 0.3, epsilon = 1e-15);
        assert_eq!(avg.get(0, 0), 0.0);
        assert!(!avg.is_row_stochastic());
        let max = symmetrize(&m, SymmetrizeMode::Max);
        assert_eq!(max.get(0, 1), 0.4);
        assert_eq!(max.get(1, 0), 0.4);

        let sym = AttentionMatrix::scores(0, HeadId::Head(0), array![[0.7, 0.3], [0.3, 0.9]])
            .unwrap();
        assert_eq!(
            symmetrize(&sym, SymmetrizeMode::Avg).values(),
            &array![[0.0, 0.3], [0.3, 0.0]]
        );
    }

    #[test]
    fn constructor_rejects_bad_rows() {
        assert!(matches!(
            AttentionMatrix::new(0, HeadId::Head(0), array![[0.5, 0.4], [0.5, 0.5]]),
            Err(AttentionError::NotRowStochastic { row: 0, .. })
        ));
        assert!(matches!(
            AttentionMatrix::scores(0, HeadId::Head(0), array![[f64::NAN]]),
            Err(AttentionError::InvalidEntry { .. })
        ));
    }

    fn arb_square(n: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(0.0f64..1.0, n * n)
            .prop_map(move |v| Array2::from_shape_vec((n, n), v).unwrap())
    }

    proptest! {
        #[test]
        fn symmetrize_is_idempotent(m in (1usize..8).prop_flat_map(arb_square)) {
            for mode in [SymmetrizeMode::Avg, SymmetrizeMode::Max] {
                let once = symmetrize_values(&m, mode);
                let twice = symmetrize_values(&once, mode);
                for (a, b) in once.iter().zip(twice.iter()) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn reduction_rows_sum_to_one(
            n in 1usize..6,
            splits in proptest::collection::vec(1usize..4, 6),
            seed in proptest::collection::vec(0.0f64..1.0, 400),
        ) {
            let mut word_ids = vec![None];
            for (w, &s) in splits.iter().take(n).enumerate() {
                word_ids.extend(std::iter::repeat_n(Some(w), s));
            }
            word_ids.push(None);
            let t = word_ids.len();
            let rows: Vec<Vec<f64>> = (0..t)
                .map(|i| {
                    let raw: Vec<f64> = (0..t).map(|j| seed[(i * t + j) % seed.len()] + 1e-3).collect();
                    let s: f64 = raw.iter().sum();
                    raw.into_iter().map(|v| v / s).collect()
                })
                .collect();
            let p = payload(word_ids, vec![rows]);
            for mode in [FromWordMode::Mean, FromWordMode::Sum] {
                let w = reduce_to_words(&p, n, mode).unwrap();
                for row in w[&0][0].values().rows() {
                    prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
                }
            }
        }
    }
}
