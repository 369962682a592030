//! Binary archive of word-level attention tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DSMA"            magic
//! u16               format version
//! u32 + bytes       JSON header
//! per record:
//!   u32 + bytes     JSON sentence header {"key", "words"}
//!   f32 * L*H*n*n   tensor, row-major [layer][head][row][col]
//!   u32             CRC32 of sentence header bytes followed by tensor bytes
//! ```

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{AttentionMatrix, HeadId, WordAttention, ROW_SUM_TOLERANCE};

pub const MAGIC: &[u8; 4] = b"DSMA";
pub const FORMAT_VERSION: u16 = 1;
const MAX_RECORD_HEADER: usize = 1 << 24;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("not an attention archive (bad magic bytes)")]
    BadMagic,
    #[error("unsupported archive version {found} (expected {FORMAT_VERSION})")]
    Version { found: u16 },
    #[error("invalid archive header: {0}")]
    Header(serde_json::Error),
    #[error("record {record}: truncated")]
    Truncated { record: usize },
    #[error("record {record}: checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum {
        record: usize,
        stored: u32,
        computed: u32,
    },
    #[error("record {record}: invalid sentence header: {source}")]
    RecordHeader {
        record: usize,
        source: serde_json::Error,
    },
    #[error("record {record}: layer {layer} head {head} row {row} sums to {sum}")]
    NotRowStochastic {
        record: usize,
        layer: usize,
        head: usize,
        row: usize,
        sum: f64,
    },
    #[error("record {record}: {reason}")]
    Invalid { record: usize, reason: String },
    #[error("header declares {declared} records, found {found}")]
    CountMismatch { declared: usize, found: usize },
}

impl ArchiveError {
    /// Index of the record the error was detected in, if any.
    pub fn record(&self) -> Option<usize> {
        match self {
            ArchiveError::Truncated { record }
            | ArchiveError::Checksum { record, .. }
            | ArchiveError::RecordHeader { record, .. }
            | ArchiveError::NotRowStochastic { record, .. }
            | ArchiveError::Invalid { record, .. } => Some(*record),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub format_version: u16,
    pub model: String,
    pub layers: Vec<usize>,
    pub heads: usize,
    pub sentence_count: usize,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl ArchiveHeader {
    pub fn new(model: impl Into<String>, layers: Vec<usize>, heads: usize) -> Self {
        ArchiveHeader {
            format_version: FORMAT_VERSION,
            model: model.into(),
            layers,
            heads,
            sentence_count: 0,
            metadata: BTreeMap::new(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    key: String,
    words: Vec<String>,
}

/// One sentence: its word forms and the `[layer][head][n][n]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchiveRecord {
    pub key: String,
    pub words: Vec<String>,
    pub tensor: Vec<f32>,
}

impl ArchiveRecord {
    /// Packs the given layers of `attention` into a float32 tensor.
    pub fn from_word_attention(
        key: impl Into<String>,
        words: Vec<String>,
        attention: &WordAttention,
        layers: &[usize],
        heads: usize,
    ) -> Result<Self, String> {
        let n = words.len();
        let mut tensor = Vec::with_capacity(layers.len() * heads * n * n);
        for layer in layers {
            let mats = attention
                .get(layer)
                .ok_or_else(|| format!("layer {layer} missing"))?;
            if mats.len() != heads {
                return Err(format!("layer {layer} has {} heads, expected {heads}", mats.len()));
            }
            for m in mats {
                if m.n() != n {
                    return Err(format!("matrix is {}x{}, sentence has {n} words", m.n(), m.n()));
                }
                tensor.extend(m.values().iter().map(|&v| v as f32));
            }
        }
        Ok(ArchiveRecord {
            key: key.into(),
            words,
            tensor,
        })
    }

    /// Unpacks the tensor into `f64` matrices.
    pub fn to_word_attention(&self, layers: &[usize], heads: usize) -> WordAttention {
        let n = self.words.len();
        let mut out = WordAttention::new();
        for (li, &layer) in layers.iter().enumerate() {
            let mats = (0..heads)
                .map(|h| {
                    let start = (li * heads + h) * n * n;
                    let values = Array2::from_shape_fn((n, n), |(r, c)| {
                        self.tensor[start + r * n + c] as f64
                    });
                    AttentionMatrix::new(layer, HeadId::Head(h), values)
                        .expect("archive rows are validated on load")
                })
                .collect();
            out.insert(layer, mats);
        }
        out
    }
}

fn tensor_bytes(tensor: &[f32]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(tensor.len() * 4);
    for v in tensor {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn write_block<W: Write>(out: &mut W, bytes: &[u8]) -> io::Result<()> {
    let len = u32::try_from(bytes.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "block exceeds 4 GiB"))?;
    out.write_all(&len.to_le_bytes())?;
    out.write_all(bytes)
}

/// Writes an archive. `header.sentence_count` is set from `records`.
pub fn write_archive<W: Write>(
    mut out: W,
    header: &ArchiveHeader,
    records: &[ArchiveRecord],
) -> Result<(), ArchiveError> {
    let per_cell = header.layers.len() * header.heads;
    let mut header = header.clone();
    header.format_version = FORMAT_VERSION;
    header.sentence_count = records.len();

    out.write_all(MAGIC)?;
    out.write_all(&FORMAT_VERSION.to_le_bytes())?;
    write_block(&mut out, &serde_json::to_vec(&header).map_err(ArchiveError::Header)?)?;
    for (index, rec) in records.iter().enumerate() {
        let n = rec.words.len();
        if rec.tensor.len() != per_cell * n * n {
            return Err(ArchiveError::Invalid {
                record: index,
                reason: format!(
                    "tensor has {} values, expected {}",
                    rec.tensor.len(),
                    per_cell * n * n
                ),
            });
        }
        let json = serde_json::to_vec(&RecordHeader {
            key: rec.key.clone(),
            words: rec.words.clone(),
        })
        .map_err(ArchiveError::Header)?;
        let payload = tensor_bytes(&rec.tensor);
        let mut crc = crc32fast::Hasher::new();
        crc.update(&json);
        crc.update(&payload);
        write_block(&mut out, &json)?;
        out.write_all(&payload)?;
        out.write_all(&crc.finalize().to_le_bytes())?;
    }
    Ok(())
}

/// Fills `buf` completely, or reports how many bytes were available.
fn read_full<R: Read>(input: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match input.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(k) => filled += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

fn read_exact_or<R: Read>(input: &mut R, buf: &mut [u8], err: ArchiveError) -> Result<(), ArchiveError> {
    if read_full(input, buf)? == buf.len() {
        Ok(())
    } else {
        Err(err)
    }
}

/// Reads and validates an archive: magic, version, per-record checksums,
/// row-stochasticity of every stored row and the declared record count.
pub fn read_archive<R: Read>(mut input: R) -> Result<(ArchiveHeader, Vec<ArchiveRecord>), ArchiveError> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut input, &mut magic, ArchiveError::BadMagic)?;
    if &magic != MAGIC {
        return Err(ArchiveError::BadMagic);
    }
    let mut word = [0u8; 2];
    read_exact_or(&mut input, &mut word, ArchiveError::BadMagic)?;
    let version = u16::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(ArchiveError::Version { found: version });
    }
    let mut len = [0u8; 4];
    read_exact_or(&mut input, &mut len, ArchiveError::Truncated { record: 0 })?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    read_exact_or(&mut input, &mut json, ArchiveError::Truncated { record: 0 })?;
    let header: ArchiveHeader = serde_json::from_slice(&json).map_err(ArchiveError::Header)?;
    let per_cell = header.layers.len() * header.heads;

    let mut records = Vec::with_capacity(header.sentence_count);
    loop {
        let record = records.len();
        let got = read_full(&mut input, &mut len)?;
        if got == 0 {
            break;
        }
        if got < 4 {
            return Err(ArchiveError::Truncated { record });
        }
        if record >= header.sentence_count {
            return Err(ArchiveError::CountMismatch {
                declared: header.sentence_count,
                found: record + 1,
            });
        }
        let json_len = u32::from_le_bytes(len) as usize;
        if json_len > MAX_RECORD_HEADER {
            return Err(ArchiveError::Invalid {
                record,
                reason: format!("sentence header length {json_len} exceeds {MAX_RECORD_HEADER}"),
            });
        }
        let mut json = vec![0u8; json_len];
        read_exact_or(&mut input, &mut json, ArchiveError::Truncated { record })?;

        // the tensor size depends on the word count stored in the JSON block
        let rh: RecordHeader = serde_json::from_slice(&json)
            .map_err(|source| ArchiveError::RecordHeader { record, source })?;
        let n = rh.words.len();
        let mut payload = vec![0u8; per_cell * n * n * 4];
        read_exact_or(&mut input, &mut payload, ArchiveError::Truncated { record })?;
        let mut crc_bytes = [0u8; 4];
        read_exact_or(&mut input, &mut crc_bytes, ArchiveError::Truncated { record })?;
        let stored = u32::from_le_bytes(crc_bytes);
        let mut crc = crc32fast::Hasher::new();
        crc.update(&json);
        crc.update(&payload);
        let computed = crc.finalize();
        if stored != computed {
            return Err(ArchiveError::Checksum {
                record,
                stored,
                computed,
            });
        }

        let tensor: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        validate_tensor(record, &header, n, &tensor)?;
        records.push(ArchiveRecord {
            key: rh.key,
            words: rh.words,
            tensor,
        });
    }
    if records.len() != header.sentence_count {
        return Err(ArchiveError::CountMismatch {
            declared: header.sentence_count,
            found: records.len(),
        });
    }
    Ok((header, records))
}

fn validate_tensor(
    record: usize,
    header: &ArchiveHeader,
    n: usize,
    tensor: &[f32],
) -> Result<(), ArchiveError> {
    if n == 0 {
        return Ok(());
    }
    for (row_index, row) in tensor.chunks_exact(n).enumerate() {
        if let Some(v) = row.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(ArchiveError::Invalid {
                record,
                reason: format!("entry {v} is not a finite non-negative weight"),
            });
        }
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            let cell = row_index / n;
            return Err(ArchiveError::NotRowStochastic {
                record,
                layer: header.layers[cell / header.heads],
                head: cell % header.heads,
                row: row_index % n,
                sum,
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(key: &str, n: usize, cells: usize) -> ArchiveRecord {
        let mut tensor = Vec::new();
        for c in 0..cells {
            for r in 0..n {
                // a distinct row-stochastic row per (cell, row)
                let raw: Vec<f32> = (0..n).map(|j| 1.0 + ((c * 7 + r * 3 + j) % 5) as f32).collect();
                let s: f32 = raw.iter().sum();
                tensor.extend(raw.iter().map(|v| v / s));
            }
        }
        ArchiveRecord {
            key: key.to_string(),
            words: (0..n).map(|i| format!("w{i}")).collect(),
            tensor,
        }
    }

    fn header() -> ArchiveHeader {
        ArchiveHeader::new("fixture", vec![3, 10], 2)
    }

    #[test]
    fn empty_archive_is_header_only() {
        let mut buf = Vec::new();
        write_archive(&mut buf, &header(), &[]).unwrap();
        let (h, recs) = read_archive(&buf[..]).unwrap();
        assert_eq!(h.sentence_count, 0);
        assert!(recs.is_empty());
        assert_eq!(&buf[..4], MAGIC);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let recs = vec![record("a b c", 3, 4), record("d", 1, 4), record("ü x", 2, 4)];
        let mut buf = Vec::new();
        write_archive(&mut buf, &header(), &recs).unwrap();
        let (h, back) = read_archive(&buf[..]).unwrap();
        assert_eq!(h.sentence_count, 3);
        assert_eq!(back.len(), 3);
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(a.words, b.words);
            assert_eq!(a.key, b.key);
            let bits_a: Vec<u32> = a.tensor.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.tensor.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn corrupted_tensor_byte_names_record() {
        let recs = vec![record("a b", 2, 4), record("c d e", 3, 4)];
        let mut buf = Vec::new();
        write_archive(&mut buf, &header(), &recs).unwrap();
        let last = buf.len() - 10;
        buf[last] ^= 0x40;
        match read_archive(&buf[..]) {
            Err(ArchiveError::Checksum { record, .. }) => assert_eq!(record, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_and_magic_checked() {
        let mut buf = Vec::new();
        write_archive(&mut buf, &header(), &[]).unwrap();
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_archive(&bad[..]), Err(ArchiveError::Version { found: 9 })));
        let mut bad = buf;
        bad[0] = b'X';
        assert!(matches!(read_archive(&bad[..]), Err(ArchiveError::BadMagic)));
    }

    #[test]
    fn truncation_detected() {
        let recs = vec![record("a b", 2, 4)];
        let mut buf = Vec::new();
        write_archive(&mut buf, &header(), &recs).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_archive(&buf[..]),
            Err(ArchiveError::Truncated { record: 0 })
        ));
    }

    #[test]
    fn non_stochastic_rows_rejected_on_load() {
        let mut rec = record("a b", 2, 4);
        rec.tensor[0] = 0.9;
        rec.tensor[1] = 0.9;
        let mut buf = Vec::new();
        write_archive(&mut buf, &header(), &[rec]).unwrap();
        assert!(matches!(
            read_archive(&buf[..]),
            Err(ArchiveError::NotRowStochastic { record: 0, layer: 3, head: 0, row: 0, .. })
        ));
    }

    #[test]
    fn word_attention_conversion() {
        let rec = record("a b c", 3, 4);
        let wa = rec.to_word_attention(&[3, 10], 2);
        assert_eq!(wa.len(), 2);
        assert_eq!(wa[&10][1].head, HeadId::Head(1));
        let back = ArchiveRecord::from_word_attention("a b c", rec.words.clone(), &wa, &[3, 10], 2)
            .unwrap();
        assert_eq!(back, rec);
    }
}
