//! Dependency tree induction from transformer attention.
//!
//! Attention matrices are collected for a target sentence and for a set of
//! variants in which single open-class words are replaced by masked-LM
//! substitutes. The matrices are averaged over the whole set and decoded with
//! a maximum spanning tree (undirected) or a maximum arborescence (directed,
//! with supervised head selection). Induced trees are scored against CoNLL-U
//! treebanks and against generated subject-verb agreement constructions.
//!
//! All model-dependent queries go through [`provider::Provider`], which has a
//! deterministic offline implementation ([`provider::FixtureProvider`]) and a
//! JSON-lines client for an external model process
//! ([`provider::SidecarClient`]).

pub mod agreement;
pub mod attention;
pub mod corpus;
pub mod evaluation;
pub mod experiment;
pub mod headsel;
pub mod induction;
pub mod provider;
pub mod substitution;

pub use attention::{AttentionMatrix, HeadId, SymmetrizeMode};
pub use corpus::{AnnotatedSentence, GoldTree, Scheme, Token};
pub use induction::{DirectedTree, ScoreMatrix, UndirectedTree};
pub use provider::{FixtureProvider, Provider};
pub use substitution::SubstitutionSet;

