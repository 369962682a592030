//! Batch runs driven by one TOML configuration file.
//!
//! Every command reads its inputs from and writes its outputs to
//! `output_dir`. Outputs embed the configuration hash and the model
//! handshake. A command whose configuration, inputs and outputs are
//! unchanged since its last run does nothing.
//!
//! Masked-LM candidates and word-level attention are cached in `cache_dir`,
//! keyed by model fingerprint and sentence content, so sweeps and repeated
//! runs never query the model twice for the same thing.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agreement::{agreement_recall, generate_agreement, AgreementItem, AgreementKind};
use crate::attention::archive::{read_archive, write_archive, ArchiveError, ArchiveHeader, ArchiveRecord};
use crate::attention::{FromWordMode, SymmetrizeMode, WordAttention};
use crate::corpus::{
    check_alignment, parse_conllu_str, write_conllu, AnnotatedSentence, CorpusError, CorpusFilter, Scheme,
    Token,
};
use crate::evaluation::{evaluate, percent, Counts, EvalConfig, EvalError, EvalReport, Metric, Prediction, SweepTable};
use crate::headsel::{induce_directed, mean_heads, Direction, HeadInventory, HeadSelError, RootChoice, SelectionTally};
use crate::induction::{
    induce, render_brackets, AggregationMode, AggregationSpec, AttentionSource, DirectedTree, HeadMode,
    InductionError, ProviderSource, SourceError, UndirectedTree,
};
use crate::provider::{
    FixtureConfig, FixtureProvider, ModelInfo, Provider, ProviderError, ProviderExt, SidecarClient,
};
use crate::substitution::{generate, CandidateCache, SubstitutionConfig, SubstitutionError, SubstitutionSet};

pub const ENV_CACHE_DIR: &str = "DSM_CACHE_DIR";
pub const ENV_SIDECAR_CMD: &str = "DSM_SIDECAR_CMD";

pub const SUBSTITUTIONS_FILE: &str = "substitutions.json";
pub const ATTENTION_FILE: &str = "attention.dsma";
pub const INDUCED_FILE: &str = "induced.conllu";
pub const CANDIDATE_CACHE_FILE: &str = "candidates.jsonl";

const STAMP_DIR: &str = ".stamps";
const META_PREFIX: &str = "dsm.";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{} not found; run `dsm {producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("{}: {source}", path.display())]
    Corpus { path: PathBuf, source: CorpusError },
    #[error("{}: {source}", path.display())]
    Archive { path: PathBuf, source: ArchiveError },
    #[error(transparent)]
    Substitution(#[from] SubstitutionError),
    #[error(transparent)]
    Induction(#[from] InductionError),
    #[error(transparent)]
    HeadSel(#[from] HeadSelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("{0}")]
    Data(String),
}

fn induction_is_provider(e: &InductionError) -> bool {
    match e {
        InductionError::Source(SourceError::Provider(_)) => true,
        InductionError::Sentence { source, .. } => induction_is_provider(source),
        _ => false,
    }
}

impl ExperimentError {
    /// Process exit status for this failure class.
    pub fn exit_code(&self) -> u8 {
        match self {
            ExperimentError::Config(_) => 2,
            ExperimentError::MissingArtifact { .. } => 3,
            ExperimentError::Provider(_) | ExperimentError::Substitution(SubstitutionError::Provider(_)) => 4,
            ExperimentError::Induction(e) if induction_is_provider(e) => 4,
            ExperimentError::HeadSel(HeadSelError::Induction(e)) if induction_is_provider(e) => 4,
            ExperimentError::Corpus { .. }
            | ExperimentError::Archive { .. }
            | ExperimentError::Json { .. }
            | ExperimentError::Data(_) => 5,
            ExperimentError::Io { .. } => 6,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    Fixture(FixtureConfig),
    Sidecar {
        command: String,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: u64,
    },
}

fn default_timeout_secs() -> u64 {
    crate::provider::DEFAULT_TIMEOUT.as_secs()
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Fixture(FixtureConfig::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// CoNLL-U file whose sentences are parsed.
    pub path: PathBuf,
    /// The same sentences annotated in SUD, for rescoring.
    pub sud_path: Option<PathBuf>,
    pub max_length: Option<usize>,
    pub count_punct_in_length: bool,
    /// Keep only the first `limit` sentences after filtering.
    pub limit: Option<usize>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            path: PathBuf::from("corpus.conllu"),
            sud_path: None,
            max_length: None,
            count_punct_in_length: true,
            limit: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UposSource {
    /// Tags from the corpus.
    #[default]
    Gold,
    /// Tags from the provider's tagger.
    Provider,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregationConfig {
    pub include_target: bool,
    pub symmetrize: SymmetrizeMode,
    pub from_word: FromWordMode,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        AggregationConfig {
            include_target: true,
            symmetrize: SymmetrizeMode::Avg,
            from_word: FromWordMode::Mean,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub layers: Vec<usize>,
    pub k: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            layers: vec![6, 7, 8, 9, 10],
            k: vec![0, 1, 3, 5, 10],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgreementConfig {
    pub kinds: Vec<AgreementKind>,
    pub count: usize,
    pub seed: u64,
    pub k: Vec<usize>,
}

impl Default for AgreementConfig {
    fn default() -> Self {
        AgreementConfig {
            kinds: AgreementKind::ALL.to_vec(),
            count: 1000,
            seed: 0,
            k: vec![0, 1, 3, 5, 10],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadSelConfig {
    /// Gold treebank used only for choosing heads.
    pub selection_path: Option<PathBuf>,
    pub selection_size: usize,
    /// Searched layers; empty means every layer of the model.
    pub layers: Vec<usize>,
    /// Searched labels; empty means every label of the selection corpus.
    pub labels: Vec<String>,
    pub report_labels: Vec<String>,
    pub k: Vec<usize>,
    /// Root directed trees at the gold root instead of the strongest head.
    pub gold_root: bool,
}

impl Default for HeadSelConfig {
    fn default() -> Self {
        HeadSelConfig {
            selection_path: None,
            selection_size: 1000,
            layers: Vec::new(),
            labels: Vec::new(),
            report_labels: ["nsubj", "obj", "det", "case"].map(String::from).to_vec(),
            k: vec![0, 1, 3, 5],
            gold_root: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub provider: ProviderConfig,
    pub corpus: CorpusConfig,
    /// Layer used by `induce`, `eval` and `agreement`.
    pub layer: usize,
    /// Substitutions per position used by `induce` and `eval`.
    pub k: usize,
    pub head_mode: HeadMode,
    pub upos_source: UposSource,
    pub substitution: SubstitutionConfig,
    pub aggregation: AggregationConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub agreement: AgreementConfig,
    pub headsel: HeadSelConfig,
    pub cache_dir: PathBuf,
    pub output_dir: PathBuf,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "dsm".into(),
            provider: ProviderConfig::default(),
            corpus: CorpusConfig::default(),
            layer: 10,
            k: 10,
            head_mode: HeadMode::LayerAverage,
            upos_source: UposSource::Gold,
            substitution: SubstitutionConfig::default(),
            aggregation: AggregationConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            agreement: AgreementConfig::default(),
            headsel: HeadSelConfig::default(),
            cache_dir: PathBuf::from(".dsm-cache"),
            output_dir: PathBuf::from("dsm-out"),
            workers: 0,
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), ExperimentError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|p| !p.is_empty()).ok_or_else(|| {
        ExperimentError::Config(format!("empty key in override `{key}`"))
    })?;
    let mut at = table;
    for p in parts {
        let entry = at
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        at = entry
            .as_table_mut()
            .ok_or_else(|| ExperimentError::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    at.insert(last.to_string(), value);
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn file_name(p: &Path) -> PathBuf {
    p.file_name().map_or_else(|| p.to_path_buf(), PathBuf::from)
}

impl ExperimentConfig {
    /// Parses TOML, applying `key=value` overrides (dotted keys, TOML
    /// values; bare words are taken as strings) before deserializing.
    pub fn from_toml(text: &str, overrides: &[(String, String)]) -> Result<Self, ExperimentError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        for (k, v) in overrides {
            set_dotted(&mut table, k, parse_override_value(v))?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))
    }

    /// Reads a config file. Relative paths in it are taken relative to the
    /// file's directory.
    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut config = Self::from_toml(&text, overrides)?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus.path);
        if let Some(p) = self.corpus.sud_path.as_mut() {
            fix(p);
        }
        if let Some(p) = self.headsel.selection_path.as_mut() {
            fix(p);
        }
        fix(&mut self.cache_dir);
        fix(&mut self.output_dir);
    }

    /// Applies `DSM_CACHE_DIR` and `DSM_SIDECAR_CMD`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(dir) = var(ENV_CACHE_DIR).filter(|d| !d.is_empty()) {
            self.cache_dir = PathBuf::from(dir);
        }
        if let Some(command) = var(ENV_SIDECAR_CMD).filter(|c| !c.is_empty()) {
            let timeout_secs = match &self.provider {
                ProviderConfig::Sidecar { timeout_secs, .. } => *timeout_secs,
                ProviderConfig::Fixture(_) => default_timeout_secs(),
            };
            self.provider = ProviderConfig::Sidecar { command, timeout_secs };
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.eval.validate()?;
        let bad = |m: &str| Err(ExperimentError::Config(m.to_string()));
        if self.sweep.layers.is_empty() || self.sweep.k.is_empty() {
            return bad("sweep.layers and sweep.k must not be empty");
        }
        if self.agreement.k.is_empty() || self.headsel.k.is_empty() {
            return bad("agreement.k and headsel.k must not be empty");
        }
        if self.corpus.max_length == Some(0) {
            return bad("corpus.max_length must be positive");
        }
        if let ProviderConfig::Sidecar { command, .. } = &self.provider {
            if command.trim().is_empty() {
                return bad("provider.command is empty");
            }
        }
        Ok(())
    }

    /// Hash of everything that affects results. Output and cache
    /// locations, worker count and the directories of input files are left
    /// out.
    pub fn config_hash(&self) -> String {
        let mut view = self.clone();
        view.cache_dir = PathBuf::new();
        view.output_dir = PathBuf::new();
        view.workers = 0;
        view.corpus.path = file_name(&view.corpus.path);
        view.corpus.sud_path = view.corpus.sud_path.as_deref().map(file_name);
        view.headsel.selection_path = view.headsel.selection_path.as_deref().map(file_name);
        let json = serde_json::to_vec(&view).expect("config serializes to JSON");
        sha256_hex(&json)[..16].to_string()
    }

    /// Hash of the settings `command` depends on. Stages before `eval` do
    /// not see the evaluation settings, so rescoring under another scheme
    /// leaves their outputs current.
    pub fn stage_hash(&self, command: &str) -> String {
        match command {
            "substitute" | "extract" | "induce" => {
                let mut view = self.clone();
                view.eval = EvalConfig::default();
                view.corpus.sud_path = None;
                view.config_hash()
            }
            _ => self.config_hash(),
        }
    }
}

/// What a command did.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran(Vec<PathBuf>),
    UpToDate(Vec<PathBuf>),
}

impl Outcome {
    pub fn files(&self) -> &[PathBuf] {
        match self {
            Outcome::Ran(f) | Outcome::UpToDate(f) => f,
        }
    }
}

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Stamp {
    config_hash: String,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
}

fn digest_file(path: &Path) -> Option<String> {
    fs::read(path).ok().map(|b| sha256_hex(&b))
}

fn digests(paths: &[PathBuf]) -> BTreeMap<String, String> {
    paths
        .iter()
        .map(|p| {
            let d = digest_file(p).unwrap_or_else(|| "missing".into());
            (p.display().to_string(), d)
        })
        .collect()
}

/// Writes `bytes` unless the file already holds exactly them.
fn write_output(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    if fs::read(path).is_ok_and(|old| old == bytes) {
        return Ok(());
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ExperimentError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| ExperimentError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_output(path, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, producer: &'static str) -> Result<T, ExperimentError> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => ExperimentError::MissingArtifact {
            path: path.to_path_buf(),
            producer,
        },
        _ => ExperimentError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    serde_json::from_str(&text).map_err(|source| ExperimentError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Key of a sentence inside attention archives.
pub fn sentence_key(words: &[String]) -> String {
    words.join(" ")
}

/// The output of `substitute`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubstitutionFile {
    pub metadata: BTreeMap<String, String>,
    pub k: usize,
    pub ids: Vec<Option<String>>,
    pub sets: Vec<SubstitutionSet>,
}

/// Attention read from an archive written by `extract`.
pub struct AttentionStore {
    pub header: ArchiveHeader,
    records: BTreeMap<String, ArchiveRecord>,
}

impl AttentionStore {
    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let file = fs::File::open(path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => ExperimentError::MissingArtifact {
                path: path.to_path_buf(),
                producer: "extract",
            },
            _ => ExperimentError::Io {
                path: path.to_path_buf(),
                source: e,
            },
        })?;
        let (header, records) = read_archive(BufReader::new(file)).map_err(|source| ExperimentError::Archive {
            path: path.to_path_buf(),
            source,
        })?;
        let records = records.into_iter().map(|r| (r.key.clone(), r)).collect();
        Ok(AttentionStore { header, records })
    }

    pub fn covers(&self, layers: &[usize]) -> bool {
        layers.iter().all(|l| self.header.layers.contains(l))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

impl AttentionSource for AttentionStore {
    fn word_attention(&self, words: &[String]) -> Result<WordAttention, SourceError> {
        let key = sentence_key(words);
        match self.records.get(&key) {
            Some(r) if r.words == words => Ok(r.to_word_attention(&self.header.layers, self.header.heads)),
            _ => Err(SourceError::Missing(key)),
        }
    }
}

/// Provider-backed attention with an on-disk cache of one small archive per
/// sentence. Values always pass through float32, so cached and fresh
/// results are identical.
pub struct CachedAttention<'a> {
    provider: &'a dyn Provider,
    fingerprint: &'a str,
    layers: Vec<usize>,
    heads: usize,
    from_word: FromWordMode,
    dir: Option<PathBuf>,
}

impl CachedAttention<'_> {
    fn entry_path(&self, words: &[String]) -> Option<PathBuf> {
        let mut h = Sha256::new();
        h.update(self.fingerprint.as_bytes());
        h.update(serde_json::to_vec(&(&self.layers, self.from_word, words)).expect("key serializes"));
        let key = hex::encode(h.finalize());
        self.dir
            .as_ref()
            .map(|d| d.join("attention").join(&key[..2]).join(format!("{key}.dsma")))
    }

    fn read_entry(&self, path: &Path, words: &[String]) -> Option<WordAttention> {
        let file = fs::File::open(path).ok()?;
        match read_archive(BufReader::new(file)) {
            Ok((header, records)) if header.layers == self.layers && header.heads == self.heads => {
                match records.into_iter().next() {
                    Some(r) if r.words == words => Some(r.to_word_attention(&self.layers, self.heads)),
                    _ => None,
                }
            }
            Ok(_) => None,
            Err(e) => {
                warn!("discarding unreadable cache entry {}: {e}", path.display());
                None
            }
        }
    }
}

impl AttentionSource for CachedAttention<'_> {
    fn word_attention(&self, words: &[String]) -> Result<WordAttention, SourceError> {
        let path = self.entry_path(words);
        if let Some(hit) = path.as_deref().and_then(|p| self.read_entry(p, words)) {
            return Ok(hit);
        }
        let source = ProviderSource {
            provider: self.provider,
            layers: self.layers.clone(),
            from_word_mode: self.from_word,
        };
        let fetched = source.word_attention(words)?;
        let record = ArchiveRecord::from_word_attention(sentence_key(words), words.to_vec(), &fetched, &self.layers, self.heads)
            .map_err(SourceError::Cache)?;
        if let Some(path) = path {
            let header = ArchiveHeader::new(self.fingerprint, self.layers.clone(), self.heads);
            let mut bytes = Vec::new();
            write_archive(&mut bytes, &header, std::slice::from_ref(&record))
                .map_err(|e| SourceError::Cache(e.to_string()))?;
            if let Err(e) = write_output(&path, &bytes) {
                warn!("could not cache attention: {e}");
            }
        }
        Ok(record.to_word_attention(&self.layers, self.heads))
    }
}

struct Connected {
    provider: Box<dyn Provider>,
    info: ModelInfo,
    fingerprint: String,
}

/// A configured experiment.
pub struct Experiment {
    config: ExperimentConfig,
    config_hash: String,
    connected: OnceLock<Connected>,
    pool: rayon::ThreadPool,
}

fn fingerprint(config: &ProviderConfig, info: &ModelInfo) -> String {
    let backend = match config {
        ProviderConfig::Fixture(f) => serde_json::to_string(f).expect("fixture config serializes"),
        ProviderConfig::Sidecar { .. } => "sidecar".to_string(),
    };
    let mut h = Sha256::new();
    h.update(backend.as_bytes());
    h.update(serde_json::to_vec(info).expect("model info serializes"));
    format!("{}-{}", info.model, &hex::encode(h.finalize())[..12])
}

fn max_k(ks: &[usize]) -> usize {
    ks.iter().copied().max().unwrap_or(0)
}

fn k_header(ks: &[usize]) -> Vec<String> {
    ks.iter()
        .map(|&k| if k == 0 { "T.".to_string() } else { format!("k={k}") })
        .collect()
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self, ExperimentError> {
        config.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| ExperimentError::Config(format!("worker pool: {e}")))?;
        Ok(Experiment {
            config_hash: config.config_hash(),
            config,
            connected: OnceLock::new(),
            pool,
        })
    }

    /// Uses `provider` instead of the configured one.
    pub fn with_provider(config: ExperimentConfig, provider: Box<dyn Provider>) -> Result<Self, ExperimentError> {
        let exp = Self::new(config)?;
        let info = provider.hello()?;
        let fingerprint = fingerprint(&exp.config.provider, &info);
        let _ = exp.connected.set(Connected {
            provider,
            info,
            fingerprint,
        });
        Ok(exp)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn connect(&self) -> Result<&Connected, ExperimentError> {
        if let Some(c) = self.connected.get() {
            return Ok(c);
        }
        let provider: Box<dyn Provider> = match &self.config.provider {
            ProviderConfig::Fixture(f) => Box::new(FixtureProvider::new(f.clone())),
            ProviderConfig::Sidecar { command, timeout_secs } => {
                info!("starting sidecar `{command}`");
                Box::new(SidecarClient::spawn_command_line(command, Duration::from_secs(*timeout_secs))?)
            }
        };
        let info = provider.hello()?;
        info!("model {} ({} layers, {} heads)", info.model, info.layers, info.heads);
        let fingerprint = fingerprint(&self.config.provider, &info);
        let _ = self.connected.set(Connected {
            provider,
            info,
            fingerprint,
        });
        Ok(self.connected.get().expect("just set"))
    }

    fn out(&self, name: &str) -> PathBuf {
        self.config.output_dir.join(name)
    }

    fn metadata(&self, command: &str, conn: Option<&Connected>) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("tool".into(), format!("dsm {}", env!("CARGO_PKG_VERSION")));
        m.insert("command".into(), command.into());
        m.insert("experiment".into(), self.config.name.clone());
        m.insert("config_hash".into(), self.config.stage_hash(command));
        if let Some(c) = conn {
            m.insert("model".into(), c.info.model.clone());
            m.insert("model_layers".into(), c.info.layers.to_string());
            m.insert("model_heads".into(), c.info.heads.to_string());
            m.insert("model_fingerprint".into(), c.fingerprint.clone());
        }
        m
    }

    fn corpus_metadata(&self, m: &mut BTreeMap<String, String>) {
        let p = &self.config.corpus.path;
        m.insert("corpus".into(), file_name(p).display().to_string());
        if let Some(d) = digest_file(p) {
            m.insert("corpus_sha256".into(), d);
        }
    }

    fn stamp_path(&self, command: &str) -> PathBuf {
        self.config.output_dir.join(STAMP_DIR).join(format!("{command}.json"))
    }

    fn current_stamp(&self, command: &str, inputs: &[PathBuf], outputs: &[PathBuf]) -> Stamp {
        Stamp {
            config_hash: self.config.stage_hash(command),
            inputs: digests(inputs),
            outputs: digests(outputs),
        }
    }

    /// Runs `body` unless the last run of `command` saw the same
    /// configuration and inputs and its outputs are untouched.
    fn stamped(
        &self,
        command: &str,
        inputs: &[PathBuf],
        outputs: &[PathBuf],
        body: impl FnOnce() -> Result<(), ExperimentError>,
    ) -> Result<Outcome, ExperimentError> {
        let stamp_path = self.stamp_path(command);
        let previous: Option<Stamp> = fs::read_to_string(&stamp_path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        if previous.is_some_and(|p| p == self.current_stamp(command, inputs, outputs)) {
            info!("{command}: up to date");
            return Ok(Outcome::UpToDate(outputs.to_vec()));
        }
        body()?;
        write_json(&stamp_path, &self.current_stamp(command, inputs, outputs))?;
        Ok(Outcome::Ran(outputs.to_vec()))
    }

    fn parse_corpus(path: &Path, scheme: Scheme) -> Result<Vec<AnnotatedSentence>, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => ExperimentError::Config(format!("corpus file {} not found", path.display())),
            _ => ExperimentError::Io {
                path: path.to_path_buf(),
                source: e,
            },
        })?;
        parse_conllu_str(&text, scheme).map_err(|source| ExperimentError::Corpus {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Configured corpus sentences in `scheme`. Filtering and the limit
    /// are decided on the main file so every scheme sees the same
    /// sentences.
    pub fn load_corpus(&self, scheme: Scheme) -> Result<Vec<AnnotatedSentence>, ExperimentError> {
        let c = &self.config.corpus;
        let main = Self::parse_corpus(&c.path, Scheme::UD)?;
        let filter = CorpusFilter {
            max_length: c.max_length.and_then(std::num::NonZeroUsize::new),
            count_punct_in_length: c.count_punct_in_length,
        };
        let keep: Vec<usize> = main
            .iter()
            .enumerate()
            .filter(|(_, s)| filter.keeps(s))
            .map(|(i, _)| i)
            .take(c.limit.unwrap_or(usize::MAX))
            .collect();
        let source = match scheme {
            Scheme::UD => main,
            Scheme::SUD => {
                let path = c
                    .sud_path
                    .as_ref()
                    .ok_or_else(|| ExperimentError::Config("eval.scheme is SUD but corpus.sud_path is unset".into()))?;
                let sud = Self::parse_corpus(path, Scheme::SUD)?;
                check_alignment(&main, &sud).map_err(|source| ExperimentError::Corpus {
                    path: path.clone(),
                    source,
                })?;
                sud
            }
        };
        let mut source: Vec<Option<AnnotatedSentence>> = source.into_iter().map(Some).collect();
        Ok(keep.iter().map(|&i| source[i].take().expect("indices are unique")).collect())
    }

    fn corpus_inputs(&self, scheme: Scheme) -> Vec<PathBuf> {
        let mut v = vec![self.config.corpus.path.clone()];
        if scheme == Scheme::SUD {
            v.extend(self.config.corpus.sud_path.clone());
        }
        v
    }

    fn candidate_cache(&self) -> Result<CandidateCache, ExperimentError> {
        let path = self.config.cache_dir.join(CANDIDATE_CACHE_FILE);
        match fs::File::open(&path) {
            Ok(f) => CandidateCache::load(BufReader::new(f)).or_else(|e| {
                warn!("ignoring unreadable candidate cache {}: {e}", path.display());
                Ok(CandidateCache::new())
            }),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(CandidateCache::new()),
            Err(e) => Err(ExperimentError::Io { path, source: e }),
        }
    }

    fn save_candidate_cache(&self, cache: &CandidateCache) -> Result<(), ExperimentError> {
        let path = self.config.cache_dir.join(CANDIDATE_CACHE_FILE);
        let mut bytes = Vec::new();
        cache.save(&mut bytes).map_err(io_err(&path))?;
        write_output(&path, &bytes)
    }

    /// Substitution sets with up to `k` variants per position.
    fn generate_sets(&self, items: &[(Vec<String>, Vec<String>)], k: usize) -> Result<Vec<SubstitutionSet>, ExperimentError> {
        let conn = self.connect()?;
        let cache = self.candidate_cache()?;
        let provider = conn.provider.as_ref();
        let sets = self.pool.install(|| {
            items
                .par_iter()
                .map(|(words, gold_upos)| {
                    let upos = match self.config.upos_source {
                        UposSource::Gold => gold_upos.clone(),
                        UposSource::Provider => provider.upos(words)?,
                    };
                    Ok(generate(
                        words,
                        &upos,
                        k,
                        provider,
                        &self.config.substitution,
                        Some((&cache, &conn.fingerprint)),
                    )?)
                })
                .collect::<Result<Vec<_>, ExperimentError>>()
        })?;
        self.save_candidate_cache(&cache)?;
        Ok(sets)
    }

    fn cached_source<'a>(&'a self, conn: &'a Connected, layers: &[usize]) -> Result<CachedAttention<'a>, ExperimentError> {
        if let Some(l) = layers.iter().find(|&&l| l >= conn.info.layers) {
            return Err(ExperimentError::Config(format!(
                "layer {l} requested but {} has {} layers",
                conn.info.model, conn.info.layers
            )));
        }
        let mut layers = layers.to_vec();
        layers.sort_unstable();
        layers.dedup();
        Ok(CachedAttention {
            provider: conn.provider.as_ref(),
            fingerprint: &conn.fingerprint,
            layers,
            heads: conn.info.heads,
            from_word: self.config.aggregation.from_word,
            dir: Some(self.config.cache_dir.clone()),
        })
    }

    fn spec(&self, layer: usize) -> AggregationSpec {
        AggregationSpec {
            mode: AggregationMode::Mean,
            include_target: self.config.aggregation.include_target,
            layer,
            head_mode: self.config.head_mode,
            symmetrize: self.config.aggregation.symmetrize,
        }
    }

    fn induce_all<S: AttentionSource + ?Sized>(
        &self,
        sets: &[SubstitutionSet],
        k: usize,
        layer: usize,
        source: &S,
    ) -> Result<Vec<crate::induction::Induced>, ExperimentError> {
        let spec = self.spec(layer);
        self.pool.install(|| {
            sets.par_iter()
                .map(|s| Ok(induce(&s.truncated(k), &spec, source)?))
                .collect()
        })
    }

    fn read_substitutions(&self, k: usize) -> Result<SubstitutionFile, ExperimentError> {
        let file: SubstitutionFile = read_json(&self.out(SUBSTITUTIONS_FILE), "substitute")?;
        if file.k < k {
            return Err(ExperimentError::Config(format!(
                "{SUBSTITUTIONS_FILE} holds k = {} but k = {k} is needed; re-run `dsm substitute`",
                file.k
            )));
        }
        Ok(file)
    }

    /// Largest k any corpus command needs.
    fn corpus_k(&self) -> usize {
        self.config.k.max(max_k(&self.config.sweep.k))
    }

    fn extract_layers(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .config
            .sweep
            .layers
            .iter()
            .copied()
            .chain([self.config.layer])
            .collect();
        set.into_iter().collect()
    }

    /// Builds substitution sets for the corpus.
    pub fn substitute(&self) -> Result<Outcome, ExperimentError> {
        let out = self.out(SUBSTITUTIONS_FILE);
        self.stamped("substitute", &self.corpus_inputs(Scheme::UD), std::slice::from_ref(&out), || {
            let corpus = self.load_corpus(Scheme::UD)?;
            let k = self.corpus_k();
            let items: Vec<_> = corpus.iter().map(|s| (s.words(), s.upos())).collect();
            let sets = self.generate_sets(&items, k)?;
            let short: usize = sets.iter().map(|s| s.shortfall.len()).sum();
            if short > 0 {
                info!("{short} positions got fewer than {k} substitutes");
            }
            let mut metadata = self.metadata("substitute", self.connected.get());
            self.corpus_metadata(&mut metadata);
            let file = SubstitutionFile {
                metadata,
                k,
                ids: corpus.iter().map(|s| s.id.clone()).collect(),
                sets,
            };
            write_json(&out, &file)
        })
    }

    /// Fetches word-level attention for every target and variant.
    pub fn extract(&self) -> Result<Outcome, ExperimentError> {
        let input = self.out(SUBSTITUTIONS_FILE);
        let out = self.out(ATTENTION_FILE);
        self.stamped("extract", std::slice::from_ref(&input), std::slice::from_ref(&out), || {
            let file = self.read_substitutions(0)?;
            let conn = self.connect()?;
            let layers = self.extract_layers();
            let source = self.cached_source(conn, &layers)?;
            let mut seen = HashSet::new();
            let mut sentences: Vec<&Vec<String>> = Vec::new();
            for set in &file.sets {
                for words in std::iter::once(&set.target).chain(set.variants.iter().map(|v| &v.words)) {
                    if seen.insert(sentence_key(words)) {
                        sentences.push(words);
                    }
                }
            }
            info!("extracting attention for {} sentences", sentences.len());
            let records = self.pool.install(|| {
                sentences
                    .par_iter()
                    .map(|words| {
                        let a = source.word_attention(words).map_err(InductionError::from)?;
                        ArchiveRecord::from_word_attention(sentence_key(words), words.to_vec(), &a, &source.layers, source.heads)
                            .map_err(ExperimentError::Data)
                    })
                    .collect::<Result<Vec<_>, _>>()
            })?;
            let mut header = ArchiveHeader::new(conn.info.model.clone(), source.layers.clone(), source.heads);
            header.metadata = self.metadata("extract", Some(conn));
            let mut bytes = Vec::new();
            write_archive(&mut bytes, &header, &records).map_err(|source| ExperimentError::Archive {
                path: out.clone(),
                source,
            })?;
            write_output(&out, &bytes)
        })
    }

    /// Decodes one tree per corpus sentence at the configured layer and k.
    pub fn induce(&self) -> Result<Outcome, ExperimentError> {
        let inputs = [self.out(SUBSTITUTIONS_FILE), self.out(ATTENTION_FILE)];
        let out = self.out(INDUCED_FILE);
        self.stamped("induce", &inputs, std::slice::from_ref(&out), || {
            let (k, layer) = (self.config.k, self.config.layer);
            let file = self.read_substitutions(k)?;
            let store = AttentionStore::load(&inputs[1])?;
            if !store.covers(&[layer]) {
                return Err(ExperimentError::Config(format!(
                    "layer {layer} is not in {ATTENTION_FILE}; re-run `dsm extract`"
                )));
            }
            let induced = self.induce_all(&file.sets, k, layer, &store)?;
            let mut meta = self.metadata("induce", None);
            for key in ["model", "model_layers", "model_heads", "model_fingerprint"] {
                if let Some(v) = file.metadata.get(key) {
                    meta.insert(key.into(), v.clone());
                }
            }
            meta.insert("layer".into(), layer.to_string());
            meta.insert("k".into(), k.to_string());
            let mut sentences = Vec::with_capacity(induced.len());
            for (i, (set, ind)) in file.sets.iter().zip(&induced).enumerate() {
                let heads = ind.oriented_heads();
                let tokens = set
                    .target
                    .iter()
                    .zip(&set.upos)
                    .zip(&heads)
                    .enumerate()
                    .map(|(j, ((w, u), h))| Token::new(j, w.as_str(), u.as_str(), *h, if h.is_some() { "dep" } else { "root" }))
                    .collect();
                let id = file.ids.get(i).cloned().flatten().unwrap_or_else(|| (i + 1).to_string());
                let mut s = AnnotatedSentence::from_tokens(Some(id.clone()), tokens, Scheme::UD);
                if i == 0 {
                    s.comments
                        .extend(meta.iter().map(|(k, v)| format!("{META_PREFIX}{k} = {v}")));
                }
                s.comments.push(format!("sent_id = {id}"));
                s.comments.push(format!("text = {}", set.target.join(" ")));
                s.comments.push(format!("brackets = {}", render_brackets(&set.target, &heads)));
                sentences.push(s);
            }
            let mut bytes = Vec::new();
            write_conllu(&mut bytes, &sentences).map_err(io_err(&out))?;
            write_output(&out, &bytes)
        })
    }

    fn eval_paths(&self) -> (PathBuf, PathBuf) {
        let scheme = self.config.eval.scheme.to_string().to_lowercase();
        (
            self.out(&format!("eval-{scheme}.tsv")),
            self.out(&format!("eval-{scheme}.json")),
        )
    }

    /// Scores the induced trees against the gold corpus in `eval.scheme`.
    pub fn eval(&self) -> Result<Outcome, ExperimentError> {
        let scheme = self.config.eval.scheme;
        let induced_path = self.out(INDUCED_FILE);
        let mut inputs = vec![induced_path.clone()];
        inputs.extend(self.corpus_inputs(scheme));
        let (tsv, json) = self.eval_paths();
        let command = format!("eval-{}", scheme.to_string().to_lowercase());
        self.stamped(&command, &inputs, &[tsv.clone(), json.clone()], || {
            let text = fs::read_to_string(&induced_path).map_err(|e| match e.kind() {
                io::ErrorKind::NotFound => ExperimentError::MissingArtifact {
                    path: induced_path.clone(),
                    producer: "induce",
                },
                _ => ExperimentError::Io {
                    path: induced_path.clone(),
                    source: e,
                },
            })?;
            let predicted = parse_conllu_str(&text, Scheme::UD).map_err(|source| ExperimentError::Corpus {
                path: induced_path.clone(),
                source,
            })?;
            let gold = self.load_corpus(scheme)?;
            check_alignment(&predicted, &gold).map_err(|source| ExperimentError::Corpus {
                path: induced_path.clone(),
                source,
            })?;
            let trees = predicted
                .iter()
                .map(|s| UndirectedTree::from_heads(&s.gold.heads()))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| ExperimentError::Data(format!("{}: {e}", induced_path.display())))?;
            let mut meta = self.metadata("eval", None);
            if let Some(first) = predicted.first() {
                for c in &first.comments {
                    let Some((k, v)) = c.strip_prefix(META_PREFIX).and_then(|r| r.split_once(" = ")) else {
                        continue;
                    };
                    if !meta.contains_key(k) {
                        meta.insert(k.to_string(), v.to_string());
                    } else if k == "config_hash" {
                        meta.insert("induce_config_hash".into(), v.to_string());
                    }
                }
            }
            self.corpus_metadata(&mut meta);
            let preds: Vec<Prediction<'_>> = trees.iter().map(Prediction::Undirected).collect();
            let report = evaluate(&preds, &gold, &self.config.eval, meta)?;
            // UUAS under the other punctuation convention, for comparison
            let other = EvalConfig {
                exclude_punct: !self.config.eval.exclude_punct,
                metrics: [Metric::Uuas].into(),
                ..self.config.eval.clone()
            };
            let alternate = evaluate(&preds, &gold, &other, BTreeMap::new())?;
            let alt = alternate.corpus.get(&Metric::Uuas).cloned();
            let mut text = report.to_tsv();
            if let Some(alt) = &alt {
                text.push_str(&format!(
                    "\n# exclude_punct\t{}\nmetric\tscore\tmatched\ttotal\nuuas\t{}\t{}\t{}\n",
                    other.exclude_punct,
                    percent(alt.score),
                    alt.counts.matched,
                    alt.counts.total
                ));
            }
            write_output(&tsv, text.as_bytes())?;
            write_json(
                &json,
                &serde_json::json!({
                    "report": report,
                    "alternate_punct": { "exclude_punct": other.exclude_punct, "uuas": alt },
                }),
            )
        })
    }

    /// Runs substitute, extract, induce and eval in order.
    pub fn pipeline(&self) -> Result<Vec<Outcome>, ExperimentError> {
        Ok(vec![self.substitute()?, self.extract()?, self.induce()?, self.eval()?])
    }

    /// UUAS for every configured layer and k.
    pub fn sweep(&self) -> Result<Outcome, ExperimentError> {
        let scheme = self.config.eval.scheme;
        let mut inputs = vec![self.out(SUBSTITUTIONS_FILE)];
        inputs.extend(self.corpus_inputs(scheme));
        let (tsv, json) = (self.out("sweep.tsv"), self.out("sweep.json"));
        self.stamped("sweep", &inputs, &[tsv.clone(), json.clone()], || {
            let sw = &self.config.sweep;
            let file = self.read_substitutions(max_k(&sw.k))?;
            let gold = self.load_corpus(scheme)?;
            let targets: Vec<AnnotatedSentence> = file
                .sets
                .iter()
                .map(|s| {
                    let tokens = s.target.iter().enumerate().map(|(i, w)| Token::new(i, w.as_str(), "X", None, "_")).collect();
                    AnnotatedSentence::from_tokens(None, tokens, scheme)
                })
                .collect();
            check_alignment(&targets, &gold).map_err(|source| ExperimentError::Corpus {
                path: self.out(SUBSTITUTIONS_FILE),
                source,
            })?;
            let conn = self.connect()?;
            let source = self.cached_source(conn, &sw.layers)?;
            let cfg = EvalConfig {
                metrics: [Metric::Uuas].into(),
                ..self.config.eval.clone()
            };
            let table = SweepTable::run(&sw.layers, &sw.k, Metric::Uuas, |layer, k| {
                let induced = self.induce_all(&file.sets, k, layer, &source)?;
                let preds: Vec<Prediction<'_>> = induced.iter().map(|i| Prediction::Undirected(&i.tree)).collect();
                let mut meta = BTreeMap::new();
                meta.insert("layer".to_string(), layer.to_string());
                meta.insert("k".to_string(), k.to_string());
                Ok::<_, ExperimentError>(evaluate(&preds, &gold, &cfg, meta)?)
            });
            let mut meta = self.metadata("sweep", Some(conn));
            self.corpus_metadata(&mut meta);
            meta.insert("scheme".into(), scheme.to_string());
            let mut text = String::new();
            for (k, v) in &meta {
                text.push_str(&format!("# {k}\t{v}\n"));
            }
            text.push_str(&format!("# UUAS ({scheme}) by layer and substitutions per position\n"));
            text.push_str(&table.to_tsv());
            write_output(&tsv, text.as_bytes())?;

            #[derive(Serialize)]
            struct Cell {
                layer: usize,
                k: usize,
                #[serde(skip_serializing_if = "Option::is_none")]
                uuas: Option<f64>,
                #[serde(skip_serializing_if = "Option::is_none")]
                counts: Option<Counts>,
                #[serde(skip_serializing_if = "Option::is_none")]
                delta: Option<f64>,
                #[serde(skip_serializing_if = "Option::is_none")]
                error: Option<String>,
            }
            let cells: Vec<Cell> = table
                .cells
                .iter()
                .map(|(&(layer, k), c)| Cell {
                    layer,
                    k,
                    uuas: table.score(layer, k),
                    counts: c.as_ref().ok().and_then(|r| r.corpus.get(&Metric::Uuas)).map(|s| s.counts),
                    delta: (k != 0).then(|| table.delta(layer, k)).flatten(),
                    error: c.as_ref().err().cloned(),
                })
                .collect();
            write_json(&json, &serde_json::json!({ "metadata": meta, "cells": cells }))
        })
    }

    /// Subject-verb edge recall on generated relative-clause sentences.
    pub fn agreement(&self) -> Result<Outcome, ExperimentError> {
        let ag = &self.config.agreement;
        let mut outputs = vec![self.out("agreement.tsv"), self.out("agreement.json")];
        outputs.extend(ag.kinds.iter().map(|k| self.out(&format!("agreement-{k}.conllu"))));
        self.stamped("agreement", &[], &outputs, || {
            let conn = self.connect()?;
            let layer = self.config.layer;
            let source = self.cached_source(conn, &[layer])?;
            let mut rows: Vec<(AgreementKind, Vec<Counts>)> = Vec::new();
            for (i, &kind) in ag.kinds.iter().enumerate() {
                let items: Vec<AgreementItem> = generate_agreement(kind, ag.count, ag.seed);
                let pairs: Vec<_> = items.iter().map(|it| (it.sentence.words(), it.sentence.upos())).collect();
                let sets = self.generate_sets(&pairs, max_k(&ag.k))?;
                let mut recalls = Vec::new();
                for &k in &ag.k {
                    let induced = self.induce_all(&sets, k, layer, &source)?;
                    let trees: Vec<UndirectedTree> = induced.into_iter().map(|i| i.tree).collect();
                    recalls.push(agreement_recall(&trees, &items));
                }
                rows.push((kind, recalls));
                let sentences: Vec<AnnotatedSentence> = items.into_iter().map(|it| it.sentence).collect();
                let mut bytes = Vec::new();
                write_conllu(&mut bytes, &sentences).map_err(io_err(&outputs[2 + i]))?;
                write_output(&outputs[2 + i], &bytes)?;
            }
            let mut meta = self.metadata("agreement", Some(conn));
            meta.insert("layer".into(), layer.to_string());
            meta.insert("count".into(), ag.count.to_string());
            meta.insert("seed".into(), ag.seed.to_string());
            let mut text = String::new();
            for (k, v) in &meta {
                text.push_str(&format!("# {k}\t{v}\n"));
            }
            text.push_str("# subject-verb edge recall\n");
            text.push_str(&format!("template\tmethod\t{}\n", k_header(&ag.k).join("\t")));
            for (kind, recalls) in &rows {
                let cells: Vec<String> = recalls.iter().map(|c| percent(c.ratio())).collect();
                text.push_str(&format!("{kind}\tDSM\t{}\n", cells.join("\t")));
                let mut zh = vec!["-".to_string(); ag.k.len()];
                if let Some(t) = ag.k.iter().position(|&k| k == 0) {
                    zh[t] = format!("{:.1}", kind.zh_recall());
                }
                text.push_str(&format!("{kind}\tZ+H\t{}\n", zh.join("\t")));
            }
            write_output(&outputs[0], text.as_bytes())?;
            let json_rows: Vec<_> = rows
                .iter()
                .map(|(kind, recalls)| {
                    serde_json::json!({
                        "template": kind,
                        "title": kind.title(),
                        "reference_zh": kind.zh_recall(),
                        "recall": ag.k.iter().zip(recalls).map(|(k, c)| serde_json::json!({
                            "k": k, "matched": c.matched, "total": c.total, "recall": c.ratio(),
                        })).collect::<Vec<_>>(),
                    })
                })
                .collect();
            write_json(&outputs[1], &serde_json::json!({ "metadata": meta, "rows": json_rows }))
        })
    }

    fn dsm_heads<S: AttentionSource + ?Sized>(&self, set: &SubstitutionSet, source: &S) -> Result<WordAttention, ExperimentError> {
        let get = |w: &[String]| source.word_attention(w).map_err(|e| ExperimentError::Induction(e.into()));
        let target = get(&set.target)?;
        let variants = set.variants.iter().map(|v| get(&v.words)).collect::<Result<Vec<_>, _>>()?;
        Ok(mean_heads(&target, &variants, self.config.aggregation.include_target)?)
    }

    /// Per-relation head selection on the selection corpus and directed
    /// parsing of the main corpus, for every configured k.
    pub fn headsel(&self) -> Result<Outcome, ExperimentError> {
        let hs = &self.config.headsel;
        let selection_path = hs
            .selection_path
            .clone()
            .ok_or_else(|| ExperimentError::Config("headsel.selection_path is unset".into()))?;
        let inputs = [selection_path.clone(), self.config.corpus.path.clone()];
        let mut outputs = vec![self.out("headsel.tsv"), self.out("headsel.json")];
        outputs.extend(hs.k.iter().map(|k| self.out(&format!("inventory-k{k}.json"))));
        self.stamped("headsel", &inputs, &outputs, || {
            let selection: Vec<AnnotatedSentence> = Self::parse_corpus(&selection_path, Scheme::UD)?
                .into_iter()
                .filter(|s| s.usable)
                .take(hs.selection_size)
                .collect();
            let evaluation = self.load_corpus(Scheme::UD)?;
            let eval_texts: HashSet<String> = evaluation.iter().map(|s| s.text()).collect();
            let shared = selection.iter().filter(|s| eval_texts.contains(&s.text())).count();
            if shared > 0 {
                return Err(ExperimentError::Config(format!(
                    "selection corpus shares {shared} sentences with the evaluation corpus"
                )));
            }
            let conn = self.connect()?;
            let layers: Vec<usize> = if hs.layers.is_empty() {
                (0..conn.info.layers).collect()
            } else {
                hs.layers.clone()
            };
            let source = self.cached_source(conn, &layers)?;
            let kmax = max_k(&hs.k);
            let pairs = |c: &[AnnotatedSentence]| c.iter().map(|s| (s.words(), s.upos())).collect::<Vec<_>>();
            let sel_sets = self.generate_sets(&pairs(&selection), kmax)?;
            let eval_sets = self.generate_sets(&pairs(&evaluation), kmax)?;
            let labels: Option<BTreeSet<String>> = (!hs.labels.is_empty()).then(|| hs.labels.iter().cloned().collect());
            let eval_cfg = EvalConfig {
                metrics: [Metric::Uas, Metric::Las].into(),
                scheme: Scheme::UD,
                ..self.config.eval.clone()
            };

            let mut accuracy: BTreeMap<String, Vec<Option<f64>>> = BTreeMap::new();
            let mut reports: Vec<EvalReport> = Vec::new();
            for (ki, &k) in hs.k.iter().enumerate() {
                let tally = self.pool.install(|| {
                    sel_sets
                        .par_iter()
                        .zip(&selection)
                        .enumerate()
                        .try_fold(
                            || SelectionTally::new(&layers, conn.info.heads),
                            |mut t, (i, (set, s))| {
                                let a = self.dsm_heads(&set.truncated(k), &source)?;
                                t.add(i, s, &a)?;
                                Ok::<_, ExperimentError>(t)
                            },
                        )
                        .try_reduce(|| SelectionTally::new(&layers, conn.info.heads), |a, b| Ok(a.merge(b)))
                })?;
                let inventory: HeadInventory = tally.select(labels.as_ref());
                write_json(&outputs[2 + ki], &inventory)?;
                for label in &hs.report_labels {
                    let acc = inventory.get(label, Direction::DepToParent).map(|e| e.accuracy);
                    accuracy.entry(label.clone()).or_default().push(acc);
                }
                let trees: Vec<DirectedTree> = self.pool.install(|| {
                    eval_sets
                        .par_iter()
                        .zip(&evaluation)
                        .map(|(set, s)| {
                            let a = self.dsm_heads(&set.truncated(k), &source)?;
                            let root = match (hs.gold_root, s.gold.root()) {
                                (true, Some(r)) => RootChoice::Fixed(r),
                                _ => RootChoice::StrongestHead,
                            };
                            Ok(induce_directed(&inventory, &a, s.len(), root)?)
                        })
                        .collect::<Result<Vec<_>, ExperimentError>>()
                })?;
                let preds: Vec<Prediction<'_>> = trees.iter().map(Prediction::Directed).collect();
                let mut meta = BTreeMap::new();
                meta.insert("k".to_string(), k.to_string());
                reports.push(evaluate(&preds, &evaluation, &eval_cfg, meta)?);
            }

            let mut meta = self.metadata("headsel", Some(conn));
            self.corpus_metadata(&mut meta);
            meta.insert("selection_corpus".into(), file_name(&selection_path).display().to_string());
            meta.insert("selection_size".into(), selection.len().to_string());
            let header = k_header(&hs.k).join("\t");
            let t_index = hs.k.iter().position(|&k| k == 0);
            let round = |s: f64| (s * 1000.0).round() / 10.0;
            let delta = |row: &[Option<f64>]| -> String {
                let t = t_index.and_then(|i| row[i]);
                let best = hs
                    .k
                    .iter()
                    .zip(row)
                    .filter(|(k, _)| **k != 0)
                    .filter_map(|(_, v)| *v)
                    .fold(None, |m: Option<f64>, v| Some(m.map_or(v, |m| m.max(v))));
                match (t, best) {
                    (Some(t), Some(b)) => format!("{:.1}", round(b) - round(t)),
                    _ => "-".into(),
                }
            };
            let mut text = String::new();
            for (k, v) in &meta {
                text.push_str(&format!("# {k}\t{v}\n"));
            }
            text.push_str("# dependent-to-parent head selection accuracy\n");
            text.push_str(&format!("label\t{header}\tΔ(DSM, T.)\n"));
            for (label, row) in &accuracy {
                let cells: Vec<String> = row.iter().map(|v| percent(*v)).collect();
                text.push_str(&format!("{label}\t{}\t{}\n", cells.join("\t"), delta(row)));
            }
            text.push_str("# tree induction scores\n");
            text.push_str(&format!("metric\t{header}\tΔ(DSM, T.)\n"));
            for (name, metric) in [("UAS", Metric::Uas), ("LAS", Metric::Las)] {
                let row: Vec<Option<f64>> = reports.iter().map(|r| r.score(metric)).collect();
                let cells: Vec<String> = row.iter().map(|v| percent(*v)).collect();
                text.push_str(&format!("{name}\t{}\t{}\n", cells.join("\t"), delta(&row)));
            }
            write_output(&outputs[0], text.as_bytes())?;
            let per_k: Vec<_> = hs
                .k
                .iter()
                .zip(&reports)
                .map(|(k, r)| {
                    serde_json::json!({
                        "k": k,
                        "uas": r.corpus.get(&Metric::Uas),
                        "las": r.corpus.get(&Metric::Las),
                    })
                })
                .collect();
            write_json(
                &outputs[1],
                &serde_json::json!({ "metadata": meta, "accuracy": accuracy, "trees": per_k }),
            )
        })
    }
}
