//! Subject-verb agreement constructions across relative clauses.
//!
//! Two templates are filled from a small lexicon:
//!
//! ```text
//! object_rc   the N1 that the N2 Vt Vi .   (the pilot that the minister likes cooks .)
//! subject_rc  the N1 that Vt the N2 Vi .   (the customer that hates the skater swims .)
//! ```
//!
//! The main verb agrees with N1; the embedded verb agrees with its own
//! subject. Main verbs are intransitive and never copular.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AnnotatedSentence, Scheme, Token};
use crate::evaluation::Counts;
use crate::induction::UndirectedTree;

/// Conditional-MI tree recall quoted for comparison, object relative clauses.
pub const ZH_OBJECT_RC_RECALL: f64 = 8.9;
/// Conditional-MI tree recall quoted for comparison, subject relative clauses.
pub const ZH_SUBJECT_RC_RECALL: f64 = 1.9;

pub const SUBJECT_INDEX: usize = 1;
pub const VERB_INDEX: usize = 6;

/// Singular and plural noun forms.
pub const NOUNS: &[(&str, &str)] = &[
    ("pilot", "pilots"),
    ("minister", "ministers"),
    ("customer", "customers"),
    ("skater", "skaters"),
    ("surgeon", "surgeons"),
    ("senator", "senators"),
    ("author", "authors"),
    ("farmer", "farmers"),
    ("teacher", "teachers"),
    ("officer", "officers"),
    ("dancer", "dancers"),
    ("manager", "managers"),
];

/// Third person singular and plural present forms.
pub const TRANSITIVE_VERBS: &[(&str, &str)] = &[
    ("likes", "like"),
    ("hates", "hate"),
    ("admires", "admire"),
    ("loves", "love"),
    ("knows", "know"),
    ("thanks", "thank"),
    ("blames", "blame"),
    ("helps", "help"),
];

pub const INTRANSITIVE_VERBS: &[(&str, &str)] = &[
    ("cooks", "cook"),
    ("swims", "swim"),
    ("laughs", "laugh"),
    ("smiles", "smile"),
    ("sleeps", "sleep"),
    ("runs", "run"),
    ("talks", "talk"),
    ("writes", "write"),
];

pub const COPULAS: &[&str] = &["is", "are", "was", "were", "be", "been", "being", "am"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementKind {
    ObjectRc,
    SubjectRc,
}

impl AgreementKind {
    pub const ALL: [AgreementKind; 2] = [AgreementKind::ObjectRc, AgreementKind::SubjectRc];

    pub fn zh_recall(self) -> f64 {
        match self {
            AgreementKind::ObjectRc => ZH_OBJECT_RC_RECALL,
            AgreementKind::SubjectRc => ZH_SUBJECT_RC_RECALL,
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            AgreementKind::ObjectRc => "Object Relative Clause",
            AgreementKind::SubjectRc => "Subject Relative Clause",
        }
    }
}

impl fmt::Display for AgreementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgreementKind::ObjectRc => "object_rc",
            AgreementKind::SubjectRc => "subject_rc",
        })
    }
}

impl FromStr for AgreementKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "object_rc" => Ok(AgreementKind::ObjectRc),
            "subject_rc" => Ok(AgreementKind::SubjectRc),
            other => Err(format!("unknown agreement template `{other}`")),
        }
    }
}

/// Lexical choices for one filled template. Indices point into the lexicon
/// lists; `*_plural` select the number of each noun.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Filling {
    pub n1: usize,
    pub n1_plural: bool,
    pub n2: usize,
    pub n2_plural: bool,
    pub vt: usize,
    pub vi: usize,
}

fn form(pair: (&'static str, &'static str), plural: bool) -> &'static str {
    if plural {
        pair.1
    } else {
        pair.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgreementItem {
    pub kind: AgreementKind,
    pub sentence: AnnotatedSentence,
    pub subject: usize,
    pub verb: usize,
}

/// Builds the sentence and its UD tree for one filling.
pub fn fill(kind: AgreementKind, f: &Filling) -> AgreementItem {
    let n1 = form(NOUNS[f.n1], f.n1_plural);
    let n2 = form(NOUNS[f.n2], f.n2_plural);
    let vi = form(INTRANSITIVE_VERBS[f.vi], f.n1_plural);
    let rows: [(&str, &str, Option<usize>, &str); 8] = match kind {
        AgreementKind::ObjectRc => {
            let vt = form(TRANSITIVE_VERBS[f.vt], f.n2_plural);
            [
                ("the", "DET", Some(1), "det"),
                (n1, "NOUN", Some(6), "nsubj"),
                ("that", "PRON", Some(5), "obj"),
                ("the", "DET", Some(4), "det"),
                (n2, "NOUN", Some(5), "nsubj"),
                (vt, "VERB", Some(1), "acl:relcl"),
                (vi, "VERB", None, "root"),
                (".", "PUNCT", Some(6), "punct"),
            ]
        }
        AgreementKind::SubjectRc => {
            let vt = form(TRANSITIVE_VERBS[f.vt], f.n1_plural);
            [
                ("the", "DET", Some(1), "det"),
                (n1, "NOUN", Some(6), "nsubj"),
                ("that", "PRON", Some(3), "nsubj"),
                (vt, "VERB", Some(1), "acl:relcl"),
                ("the", "DET", Some(5), "det"),
                (n2, "NOUN", Some(3), "obj"),
                (vi, "VERB", None, "root"),
                (".", "PUNCT", Some(6), "punct"),
            ]
        }
    };
    let tokens = rows
        .iter()
        .enumerate()
        .map(|(i, (w, u, h, l))| Token::new(i, *w, *u, *h, *l))
        .collect();
    let mut sentence = AnnotatedSentence::from_tokens(None, tokens, Scheme::UD);
    sentence.comments = vec![
        format!("kind = {kind}"),
        format!("subject = {SUBJECT_INDEX}"),
        format!("verb = {VERB_INDEX}"),
        format!("text = {}", sentence.text()),
    ];
    AgreementItem {
        kind,
        sentence,
        subject: SUBJECT_INDEX,
        verb: VERB_INDEX,
    }
}

/// Every filling with two distinct nouns.
pub fn all_fillings() -> Vec<Filling> {
    let mut out = Vec::new();
    for n1 in 0..NOUNS.len() {
        for n2 in (0..NOUNS.len()).filter(|&n2| n2 != n1) {
            for vt in 0..TRANSITIVE_VERBS.len() {
                for vi in 0..INTRANSITIVE_VERBS.len() {
                    for (n1_plural, n2_plural) in [(false, false), (false, true), (true, false), (true, true)] {
                        out.push(Filling {
                            n1,
                            n1_plural,
                            n2,
                            n2_plural,
                            vt,
                            vi,
                        });
                    }
                }
            }
        }
    }
    out
}

/// `count` items: a seeded shuffle of all fillings, then draws with
/// replacement once it is used up.
pub fn generate_agreement(kind: AgreementKind, count: usize, seed: u64) -> Vec<AgreementItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool = all_fillings();
    pool.shuffle(&mut rng);
    let mut picks: Vec<Filling> = pool.iter().take(count).copied().collect();
    while picks.len() < count {
        picks.push(pool[rng.random_range(0..pool.len())]);
    }
    picks
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut item = fill(kind, f);
            item.sentence.id = Some(format!("{kind}-{i}"));
            item.sentence.comments.insert(0, format!("sent_id = {kind}-{i}"));
            item
        })
        .collect()
}

/// Sentences whose tree links subject and main verb.
pub fn agreement_recall(trees: &[UndirectedTree], items: &[AgreementItem]) -> Counts {
    assert_eq!(trees.len(), items.len(), "one tree per item");
    let matched = trees
        .iter()
        .zip(items)
        .filter(|(t, it)| t.contains(it.subject, it.verb))
        .count();
    Counts::new(matched, items.len())
}
