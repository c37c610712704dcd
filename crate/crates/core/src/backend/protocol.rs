//! Line-delimited JSON wire protocol for external backends.
//!
//! Every request is one JSON object on one line carrying the protocol version
//! `v` and an `op`. Every response is one line:
//! `{"v":1,"ok":true,"result":...}` or
//! `{"v":1,"ok":false,"error":"<code>","message":"..."}`.
//!
//! Floats are written in shortest round-trip decimal form, which preserves
//! every bit of an `f64` (up to 17 significant digits).

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{BackendCapabilities, ClozeExample, MlmBackend, MlmExample, ParamSnapshot, ScoreConvention, SoftExample};
use crate::error::PetError;
use crate::pvp::MaskedSequence;
use crate::vocab::TokenId;

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestEnvelope {
    pub v: u32,
    #[serde(flatten)]
    pub request: Request,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    Capabilities,
    Vocab,
    Tokenize {
        text: String,
    },
    Score {
        tokens: Vec<TokenId>,
        mask_pos: usize,
        candidates: Vec<TokenId>,
    },
    TrainCombined {
        labeled: Vec<WireCloze>,
        mlm: Vec<MlmExample>,
        alpha: f64,
        learning_rate: f64,
    },
    InitHead {
        num_labels: usize,
    },
    Classify {
        tokens: Vec<TokenId>,
    },
    TrainSoft {
        batch: Vec<SoftExample>,
        learning_rate: f64,
    },
    Snapshot,
    Restore {
        id: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireCloze {
    pub tokens: Vec<TokenId>,
    pub mask_pos: usize,
    pub label_tokens: Vec<Vec<TokenId>>,
    pub target: usize,
}

impl From<&ClozeExample> for WireCloze {
    fn from(c: &ClozeExample) -> Self {
        WireCloze {
            tokens: c.seq.tokens.clone(),
            mask_pos: c.seq.mask_position,
            label_tokens: c.label_tokens.clone(),
            target: c.target,
        }
    }
}

impl From<WireCloze> for ClozeExample {
    fn from(w: WireCloze) -> Self {
        let n = w.tokens.len();
        ClozeExample {
            seq: MaskedSequence {
                tokens: w.tokens,
                mask_position: w.mask_pos,
                segment_ids: vec![0; n],
            },
            label_tokens: w.label_tokens,
            target: w.target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilitiesResult {
    pub protocol_version: u32,
    pub trainable: bool,
    pub supports_mlm_loss: bool,
    pub supports_classification_head: bool,
    pub supports_snapshot: bool,
    pub score_convention: ScoreConvention,
    #[serde(default)]
    pub remote_tokenizer: bool,
}

impl CapabilitiesResult {
    pub fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            trainable: self.trainable,
            supports_mlm_loss: self.supports_mlm_loss,
            supports_classification_head: self.supports_classification_head,
            supports_snapshot: self.supports_snapshot,
            score_convention: self.score_convention,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VocabResult {
    pub tokens: Vec<String>,
    pub mask_token: String,
    #[serde(default)]
    pub sep_token: Option<String>,
    #[serde(default)]
    pub unk_token: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub v: u32,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
}

impl Response {
    pub fn ok(result: serde_json::Value) -> Self {
        Response {
            v: PROTOCOL_VERSION,
            ok: true,
            result: Some(result),
            error: None,
            message: None,
        }
    }

    pub fn err(code: &str, message: impl Into<String>) -> Self {
        Response {
            v: PROTOCOL_VERSION,
            ok: false,
            result: None,
            error: Some(code.to_string()),
            message: Some(message.into()),
        }
    }
}

/// Protocol error code for a framework error.
pub fn error_code(e: &PetError) -> &'static str {
    match e {
        PetError::UnknownToken(_) | PetError::TokenOutOfRange(_) => "unknown_token",
        PetError::NotTrainable => "not_trainable",
        PetError::HeadNotInitialized => "head_not_initialized",
        PetError::NonFiniteLoss(_) => "non_finite_loss",
        PetError::SnapshotUnsupported => "snapshot_unsupported",
        PetError::Config(_) | PetError::Data(_) | PetError::UnknownLabel(_) => "bad_request",
        _ => "internal",
    }
}

/// Inverse of [`error_code`], used by the client side.
pub fn error_from_code(code: &str, message: &str) -> PetError {
    match code {
        "unknown_token" => PetError::UnknownToken(message.to_string()),
        "not_trainable" => PetError::NotTrainable,
        "head_not_initialized" => PetError::HeadNotInitialized,
        "non_finite_loss" => PetError::NonFiniteLoss(f64::NAN),
        "snapshot_unsupported" => PetError::SnapshotUnsupported,
        _ => PetError::Protocol {
            code: code.to_string(),
            message: message.to_string(),
        },
    }
}

/// Answers protocol requests for `backend` until the reader is exhausted.
/// Malformed requests get an error response; the loop keeps going.
pub fn serve(backend: &mut dyn MlmBackend, reader: impl BufRead, mut writer: impl Write) -> std::io::Result<()> {
    let mut snapshots: HashMap<String, ParamSnapshot> = HashMap::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = handle_line(backend, &mut snapshots, &line);
        serde_json::to_writer(&mut writer, &response)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}

fn handle_line(backend: &mut dyn MlmBackend, snapshots: &mut HashMap<String, ParamSnapshot>, line: &str) -> Response {
    let envelope: RequestEnvelope = match serde_json::from_str(line) {
        Ok(e) => e,
        Err(e) => return Response::err("bad_request", e.to_string()),
    };
    if envelope.v != PROTOCOL_VERSION {
        return Response::err(
            "unsupported_version",
            format!("server speaks v{PROTOCOL_VERSION}, request is v{}", envelope.v),
        );
    }
    match dispatch(backend, snapshots, envelope.request) {
        Ok(v) => Response::ok(v),
        Err(e) => Response::err(error_code(&e), e.to_string()),
    }
}

fn dispatch(
    backend: &mut dyn MlmBackend,
    snapshots: &mut HashMap<String, ParamSnapshot>,
    request: Request,
) -> crate::Result<serde_json::Value> {
    use serde_json::json;
    Ok(match request {
        Request::Capabilities => {
            let c = backend.capabilities();
            serde_json::to_value(CapabilitiesResult {
                protocol_version: PROTOCOL_VERSION,
                trainable: c.trainable,
                supports_mlm_loss: c.supports_mlm_loss,
                supports_classification_head: c.supports_classification_head,
                supports_snapshot: c.supports_snapshot,
                score_convention: c.score_convention,
                remote_tokenizer: false,
            })
            .expect("plain struct")
        }
        Request::Vocab => {
            let tok = backend.tokenizer();
            let vocab = backend.vocabulary().ok_or_else(|| PetError::Protocol {
                code: "unsupported".into(),
                message: "backend has no listable vocabulary".into(),
            })?;
            json!(VocabResult {
                tokens: vocab.tokens().to_vec(),
                mask_token: vocab.token(tok.mask_id())?.to_string(),
                sep_token: tok.sep_id().map(|s| vocab.token(s).map(str::to_string)).transpose()?,
                unk_token: vocab.unk_id().map(|s| vocab.token(s).map(str::to_string)).transpose()?,
            })
        }
        Request::Tokenize { text } => json!(backend.tokenizer().encode(&text)?),
        Request::Score {
            tokens,
            mask_pos,
            candidates,
        } => {
            if mask_pos >= tokens.len() {
                return Err(PetError::Data("mask_pos out of range".into()));
            }
            let n = tokens.len();
            let seq = MaskedSequence {
                tokens,
                mask_position: mask_pos,
                segment_ids: vec![0; n],
            };
            json!(backend.score_candidates(&seq, &candidates)?)
        }
        Request::TrainCombined {
            labeled,
            mlm,
            alpha,
            learning_rate,
        } => {
            let labeled: Vec<ClozeExample> = labeled.into_iter().map(Into::into).collect();
            json!(backend.train_step_combined(&labeled, &mlm, alpha, learning_rate)?)
        }
        Request::InitHead { num_labels } => {
            backend.init_head(num_labels)?;
            json!(null)
        }
        Request::Classify { tokens } => json!(backend.classify(&tokens)?),
        Request::TrainSoft { batch, learning_rate } => json!(backend.train_step_soft(&batch, learning_rate)?),
        Request::Snapshot => {
            let snap = backend.snapshot()?;
            let id = format!("snap-{}", snapshots.len());
            snapshots.insert(id.clone(), snap);
            json!({ "id": id })
        }
        Request::Restore { id } => {
            let snap = snapshots
                .get(&id)
                .ok_or_else(|| PetError::Data(format!("unknown snapshot id {id:?}")))?;
            backend.restore(snap)?;
            json!(null)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_format() {
        let r: RequestEnvelope =
            serde_json::from_str(r#"{"v":1,"op":"score","tokens":[3,0,4],"mask_pos":1,"candidates":[5,6]}"#).unwrap();
        assert_eq!(
            r.request,
            Request::Score {
                tokens: vec![3, 0, 4],
                mask_pos: 1,
                candidates: vec![5, 6]
            }
        );
        let s = serde_json::to_string(&RequestEnvelope {
            v: 1,
            request: Request::Capabilities,
        })
        .unwrap();
        assert_eq!(s, r#"{"v":1,"op":"capabilities"}"#);
    }

    #[test]
    fn floats_round_trip_exactly() {
        let x = 0.1f64 + 0.2;
        let text = serde_json::to_string(&Response::ok(serde_json::json!([x]))).unwrap();
        let back: Response = serde_json::from_str(&text).unwrap();
        assert_eq!(back.result.unwrap()[0].as_f64().unwrap().to_bits(), x.to_bits());
    }

    #[test]
    fn error_codes_round_trip() {
        for e in [PetError::NotTrainable, PetError::HeadNotInitialized, PetError::SnapshotUnsupported] {
            let back = error_from_code(error_code(&e), "");
            assert_eq!(std::mem::discriminant(&back), std::mem::discriminant(&e));
        }
    }
}
