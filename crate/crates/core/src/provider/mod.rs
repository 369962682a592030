//! Model queries: attention tensors, masked-LM top-k candidates and UPOS
//! tags.
//!
//! The wire format is newline-delimited JSON. Requests carry an `id` and an
//! `op` tag; responses echo the `id` and carry the op-specific payload or an
//! `error` string:
//!
//! ```text
//! {"id":1,"op":"attention","words":["the","kids"],"layers":[10]}
//! {"id":1,"subword_forms":["[CLS]","the","kids","[SEP]"],"word_ids":[null,0,1,null],"attention":{"10":[[[..]]]}}
//! {"id":2,"op":"mlm_topk","words":["the","kids"],"position":1,"k":3}
//! {"id":2,"candidates":[["children",-0.9],["boys",-2.1]]}
//! {"id":3,"op":"upos","words":["the","kids"]}
//! {"id":3,"upos":["DET","NOUN"]}
//! {"id":0,"op":"hello"}
//! {"id":0,"model":"bert-base-uncased","layers":12,"heads":12}
//! ```

mod fixture;
mod server;
mod sidecar;

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::ROW_SUM_TOLERANCE;

pub use fixture::{fixture_attention, fixture_tag, FixtureConfig, FixtureProvider};
pub use server::serve;
pub use sidecar::{SidecarClient, DEFAULT_TIMEOUT};

#[derive(Clone, Debug, Error, PartialEq)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("no response within {0:?}")]
    Timeout(Duration),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Query {
    Hello,
    Attention {
        words: Vec<String>,
        layers: Vec<usize>,
    },
    MlmTopk {
        words: Vec<String>,
        position: usize,
        k: usize,
    },
    Upos {
        words: Vec<String>,
    },
}

impl Query {
    pub fn validate(&self) -> Result<(), ProviderError> {
        let invalid = |m: String| Err(ProviderError::InvalidRequest(m));
        match self {
            Query::Hello => Ok(()),
            Query::Attention { words, layers } => {
                if layers.is_empty() {
                    return invalid("attention request without layers".into());
                }
                if words.is_empty() {
                    return invalid("empty sentence".into());
                }
                Ok(())
            }
            Query::MlmTopk { words, position, k } => {
                if *position >= words.len() {
                    return invalid(format!(
                        "position {position} outside a {}-word sentence",
                        words.len()
                    ));
                }
                if *k == 0 {
                    return invalid("k must be positive".into());
                }
                Ok(())
            }
            Query::Upos { .. } => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelRequest {
    #[serde(default)]
    pub id: u64,
    #[serde(flatten)]
    pub query: Query,
}

/// A masked-LM candidate with its log-probability. Serialized as a
/// `[word, log_prob]` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "(String, f64)", into = "(String, f64)")]
pub struct Candidate {
    pub word: String,
    pub log_prob: f64,
}

impl From<(String, f64)> for Candidate {
    fn from((word, log_prob): (String, f64)) -> Self {
        Candidate { word, log_prob }
    }
}

impl From<Candidate> for (String, f64) {
    fn from(c: Candidate) -> Self {
        (c.word, c.log_prob)
    }
}

/// Subword-level attention for one sentence. `attention[layer][head]` is a
/// `T × T` matrix over the subwords.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionPayload {
    pub subword_forms: Vec<String>,
    pub word_ids: Vec<Option<usize>>,
    pub attention: BTreeMap<usize, Vec<Vec<Vec<f64>>>>,
}

/// Model metadata returned by the handshake.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub model: String,
    pub layers: usize,
    pub heads: usize,
}

/// One response line. Only the fields belonging to the request's op are
/// present.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subword_forms: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_ids: Option<Vec<Option<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attention: Option<BTreeMap<usize, Vec<Vec<Vec<f64>>>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<Candidate>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub upos: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ModelResponse {
    pub fn error(id: u64, message: impl Into<String>) -> Self {
        ModelResponse {
            id,
            error: Some(message.into()),
            ..Default::default()
        }
    }

    pub fn hello(id: u64, info: &ModelInfo) -> Self {
        ModelResponse {
            id,
            model: Some(info.model.clone()),
            layers: Some(info.layers),
            heads: Some(info.heads),
            ..Default::default()
        }
    }

    pub fn attention(id: u64, payload: AttentionPayload) -> Self {
        ModelResponse {
            id,
            subword_forms: Some(payload.subword_forms),
            word_ids: Some(payload.word_ids),
            attention: Some(payload.attention),
            ..Default::default()
        }
    }

    pub fn candidates(id: u64, candidates: Vec<Candidate>) -> Self {
        ModelResponse {
            id,
            candidates: Some(candidates),
            ..Default::default()
        }
    }

    pub fn upos(id: u64, upos: Vec<String>) -> Self {
        ModelResponse {
            id,
            upos: Some(upos),
            ..Default::default()
        }
    }
}

/// A source of model responses. Implementations must be usable from several
/// worker threads at once.
pub trait Provider: Send + Sync {
    fn request(&self, query: &Query) -> Result<ModelResponse, ProviderError>;
}

impl<P: Provider + ?Sized> Provider for &P {
    fn request(&self, query: &Query) -> Result<ModelResponse, ProviderError> {
        (**self).request(query)
    }
}

impl<P: Provider + ?Sized> Provider for Box<P> {
    fn request(&self, query: &Query) -> Result<ModelResponse, ProviderError> {
        (**self).request(query)
    }
}

fn missing(field: &str) -> ProviderError {
    ProviderError::Protocol(format!("response lacks `{field}`"))
}

fn checked(resp: ModelResponse) -> Result<ModelResponse, ProviderError> {
    match resp.error {
        Some(message) => Err(ProviderError::Backend(message)),
        None => Ok(resp),
    }
}

/// Typed, validated queries on top of [`Provider::request`]. Responses that
/// violate the protocol invariants (row sums, alignment lengths, candidate
/// counts) are rejected here.
pub trait ProviderExt: Provider {
    fn hello(&self) -> Result<ModelInfo, ProviderError> {
        let resp = checked(self.request(&Query::Hello)?)?;
        Ok(ModelInfo {
            model: resp.model.ok_or_else(|| missing("model"))?,
            layers: resp.layers.ok_or_else(|| missing("layers"))?,
            heads: resp.heads.ok_or_else(|| missing("heads"))?,
        })
    }

    fn attention(&self, words: &[String], layers: &[usize]) -> Result<AttentionPayload, ProviderError> {
        let query = Query::Attention {
            words: words.to_vec(),
            layers: layers.to_vec(),
        };
        query.validate()?;
        let resp = checked(self.request(&query)?)?;
        let payload = AttentionPayload {
            subword_forms: resp.subword_forms.ok_or_else(|| missing("subword_forms"))?,
            word_ids: resp.word_ids.ok_or_else(|| missing("word_ids"))?,
            attention: resp.attention.ok_or_else(|| missing("attention"))?,
        };
        validate_attention(&payload, words.len(), layers)?;
        Ok(payload)
    }

    fn mlm_topk(&self, words: &[String], position: usize, k: usize) -> Result<Vec<Candidate>, ProviderError> {
        let query = Query::MlmTopk {
            words: words.to_vec(),
            position,
            k,
        };
        query.validate()?;
        let resp = checked(self.request(&query)?)?;
        let candidates = resp.candidates.ok_or_else(|| missing("candidates"))?;
        if candidates.len() > k {
            return Err(ProviderError::Protocol(format!(
                "{} candidates returned for k = {k}",
                candidates.len()
            )));
        }
        if candidates.windows(2).any(|w| w[0].log_prob < w[1].log_prob) {
            return Err(ProviderError::Protocol(
                "candidates not sorted by descending log-probability".into(),
            ));
        }
        Ok(candidates)
    }

    fn upos(&self, words: &[String]) -> Result<Vec<String>, ProviderError> {
        let query = Query::Upos {
            words: words.to_vec(),
        };
        let resp = checked(self.request(&query)?)?;
        let upos = resp.upos.ok_or_else(|| missing("upos"))?;
        if upos.len() != words.len() {
            return Err(ProviderError::Protocol(format!(
                "{} tags for {} words",
                upos.len(),
                words.len()
            )));
        }
        Ok(upos)
    }
}

impl<P: Provider + ?Sized> ProviderExt for P {}

/// Checks alignment lengths and row-stochasticity of a subword payload.
pub fn validate_attention(
    payload: &AttentionPayload,
    n_words: usize,
    layers: &[usize],
) -> Result<(), ProviderError> {
    let t = payload.word_ids.len();
    if payload.subword_forms.len() != t {
        return Err(ProviderError::Protocol(format!(
            "{} subword forms but {t} word ids",
            payload.subword_forms.len()
        )));
    }
    if let Some(w) = payload.word_ids.iter().flatten().find(|&&w| w >= n_words) {
        return Err(ProviderError::Protocol(format!(
            "word id {w} outside a {n_words}-word sentence"
        )));
    }
    for layer in layers {
        let heads = payload
            .attention
            .get(layer)
            .ok_or_else(|| ProviderError::Protocol(format!("layer {layer} missing")))?;
        for (h, rows) in heads.iter().enumerate() {
            if rows.len() != t || rows.iter().any(|r| r.len() != t) {
                return Err(ProviderError::Protocol(format!(
                    "layer {layer} head {h} is not {t}x{t}"
                )));
            }
            for (i, r) in rows.iter().enumerate() {
                if r.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(ProviderError::Protocol(format!(
                        "layer {layer} head {h} row {i} has invalid weights"
                    )));
                }
                let sum: f64 = r.iter().sum();
                if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                    return Err(ProviderError::Protocol(format!(
                        "layer {layer} head {h} row {i} sums to {sum}"
                    )));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn request_wire_format() {
        let req = ModelRequest {
            id: 7,
            query: Query::MlmTopk {
                words: vec!["a".into(), "b".into()],
                position: 1,
                k: 3,
            },
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"id":7,"op":"mlm_topk","words":["a","b"],"position":1,"k":3}"#
        );
        let hello: ModelRequest = serde_json::from_str(r#"{"op":"hello"}"#).unwrap();
        assert_eq!(hello.query, Query::Hello);
        assert_eq!(hello.id, 0);
    }

    #[test]
    fn response_wire_format() {
        let resp = ModelResponse::candidates(
            2,
            vec![Candidate {
                word: "figured".into(),
                log_prob: -0.5,
            }],
        );
        assert_eq!(
            serde_json::to_string(&resp).unwrap(),
            r#"{"id":2,"candidates":[["figured",-0.5]]}"#
        );
        let attn: ModelResponse = serde_json::from_str(
            r#"{"id":1,"subword_forms":["ok"],"word_ids":[0],"attention":{"0":[[[1.0]]]}}"#,
        )
        .unwrap();
        assert_eq!(attn.attention.unwrap()[&0], vec![vec![vec![1.0]]]);
        let hello = ModelResponse::hello(
            0,
            &ModelInfo {
                model: "bert-base-uncased".into(),
                layers: 12,
                heads: 12,
            },
        );
        assert_eq!(
            serde_json::to_string(&hello).unwrap(),
            r#"{"id":0,"model":"bert-base-uncased","layers":12,"heads":12}"#
        );
    }

    #[test]
    fn request_validation() {
        let words = vec!["a".to_string()];
        assert!(Query::MlmTopk { words: words.clone(), position: 1, k: 1 }.validate().is_err());
        assert!(Query::MlmTopk { words: words.clone(), position: 0, k: 0 }.validate().is_err());
        assert!(Query::Attention { words, layers: vec![] }.validate().is_err());
    }

    struct Canned(ModelResponse);

    impl Provider for Canned {
        fn request(&self, _: &Query) -> Result<ModelResponse, ProviderError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn client_boundary_rejects_bad_rows() {
        let mut attention = BTreeMap::new();
        attention.insert(0, vec![vec![vec![0.5, 0.4], vec![0.5, 0.5]]]);
        let p = Canned(ModelResponse::attention(
            1,
            AttentionPayload {
                subword_forms: vec!["a".into(), "b".into()],
                word_ids: vec![Some(0), Some(1)],
                attention,
            },
        ));
        let err = p.attention(&["a".into(), "b".into()], &[0]).unwrap_err();
        assert!(matches!(err, ProviderError::Protocol(m) if m.contains("sums to")));
    }

    #[test]
    fn backend_errors_surface_message() {
        let p = Canned(ModelResponse::error(1, "sequence too long"));
        assert_eq!(
            p.upos(&["a".into()]),
            Err(ProviderError::Backend("sequence too long".into()))
        );
    }

    #[test]
    fn too_many_candidates_rejected() {
        let c = |w: &str, lp| Candidate { word: w.into(), log_prob: lp };
        let p = Canned(ModelResponse::candidates(1, vec![c("x", -1.0), c("y", -2.0)]));
        assert!(p.mlm_topk(&["a".into()], 0, 1).is_err());
        assert_eq!(p.mlm_topk(&["a".into()], 0, 2).unwrap().len(), 2);
        let p = Canned(ModelResponse::candidates(1, vec![c("x", -3.0), c("y", -2.0)]));
        assert!(p.mlm_topk(&["a".into()], 0, 2).is_err());
    }

    fn arb_words() -> impl Strategy<Value = Vec<String>> {
        proptest::collection::vec("[a-zA-Z'.,\"\\\\ü]{1,5}", 1..6)
    }

    fn arb_request() -> impl Strategy<Value = ModelRequest> {
        let query = prop_oneof![
            Just(Query::Hello),
            (arb_words(), proptest::collection::vec(0usize..24, 1..4))
                .prop_map(|(words, layers)| Query::Attention { words, layers }),
            (arb_words(), 0usize..6, 1usize..50).prop_map(|(words, position, k)| {
                Query::MlmTopk { position: position % words.len(), words, k }
            }),
            arb_words().prop_map(|words| Query::Upos { words }),
        ];
        (any::<u32>(), query).prop_map(|(id, query)| ModelRequest { id: id as u64, query })
    }

    fn arb_response() -> impl Strategy<Value = ModelResponse> {
        prop_oneof![
            (any::<u32>(), arb_words()).prop_map(|(id, w)| ModelResponse::upos(id as u64, w)),
            (any::<u32>(), "[a-z ]{0,12}").prop_map(|(id, m)| ModelResponse::error(id as u64, m)),
            (any::<u32>(), proptest::collection::vec(("[a-z]{1,6}", -50.0f64..0.0), 0..5))
                .prop_map(|(id, c)| ModelResponse::candidates(
                    id as u64,
                    c.into_iter().map(Candidate::from).collect()
                )),
            (any::<u32>(), 1usize..4, 0.0f64..1.0).prop_map(|(id, t, x)| {
                let row: Vec<f64> = (0..t).map(|j| if j == 0 { x } else { (1.0 - x) / (t - 1) as f64 }).collect();
                let mut attention = BTreeMap::new();
                attention.insert(3, vec![vec![row; t]]);
                ModelResponse::attention(id as u64, AttentionPayload {
                    subword_forms: (0..t).map(|i| format!("s{i}")).collect(),
                    word_ids: (0..t).map(|i| if i == 0 { None } else { Some(i - 1) }).collect(),
                    attention,
                })
            }),
        ]
    }

    proptest! {
        #[test]
        fn request_lines_round_trip(req in arb_request()) {
            let line = serde_json::to_string(&req).unwrap();
            let parsed: ModelRequest = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(&parsed, &req);
            prop_assert_eq!(serde_json::to_string(&parsed).unwrap(), line);
        }

        #[test]
        fn response_lines_round_trip(resp in arb_response()) {
            let line = serde_json::to_string(&resp).unwrap();
            let parsed: ModelResponse = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(serde_json::to_string(&parsed).unwrap(), line);
        }
    }
}
