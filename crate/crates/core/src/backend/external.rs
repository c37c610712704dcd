//! Client for backends that live in another process, reached over a child
//! process pipe or a TCP socket.

use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::de::DeserializeOwned;

use super::protocol::{
    error_from_code, CapabilitiesResult, Request, RequestEnvelope, Response, VocabResult, WireCloze,
    PROTOCOL_VERSION,
};
use super::{
    BackendCapabilities, BackendFactory, ClozeExample, LossReport, MlmBackend, MlmExample,
    ParamSnapshot, SoftExample,
};
use crate::error::{PetError, Result};
use crate::pvp::MaskedSequence;
use crate::vocab::{split_words, TokenId, Tokenizer, Vocabulary};

/// Where an external backend listens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `tcp://host:port`
    Tcp(String),
    /// `cmd:<shell command>`; the command speaks the protocol on stdin/stdout.
    Command(String),
}

impl Endpoint {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(addr) = s.strip_prefix("tcp://") {
            Ok(Endpoint::Tcp(addr.to_string()))
        } else if let Some(cmd) = s.strip_prefix("cmd:") {
            Ok(Endpoint::Command(cmd.to_string()))
        } else {
            Err(PetError::Config(format!(
                "endpoint {s:?} must start with tcp:// or cmd:"
            )))
        }
    }
}

enum Transport {
    Child {
        child: Child,
        stdin: ChildStdin,
        stdout: BufReader<ChildStdout>,
    },
    Tcp {
        writer: TcpStream,
        reader: BufReader<TcpStream>,
    },
}

impl Transport {
    fn open(endpoint: &Endpoint) -> Result<Self> {
        let unavailable = |e: std::io::Error| PetError::BackendUnavailable(e.to_string());
        match endpoint {
            Endpoint::Tcp(addr) => {
                let writer = TcpStream::connect(addr).map_err(unavailable)?;
                let reader = BufReader::new(writer.try_clone().map_err(unavailable)?);
                Ok(Transport::Tcp { writer, reader })
            }
            Endpoint::Command(cmd) => {
                let mut child = Command::new("sh")
                    .arg("-c")
                    .arg(cmd)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()
                    .map_err(unavailable)?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
                Ok(Transport::Child { child, stdin, stdout })
            }
        }
    }

    fn round_trip(&mut self, line: &str) -> Result<String> {
        let (w, r): (&mut dyn Write, &mut dyn BufRead) = match self {
            Transport::Child { stdin, stdout, .. } => (stdin, stdout),
            Transport::Tcp { writer, reader } => (writer, reader),
        };
        let io = |e: std::io::Error| PetError::BackendUnavailable(e.to_string());
        w.write_all(line.as_bytes()).map_err(io)?;
        w.write_all(b"\n").map_err(io)?;
        w.flush().map_err(io)?;
        let mut reply = String::new();
        if r.read_line(&mut reply).map_err(io)? == 0 {
            return Err(PetError::BackendUnavailable("backend closed the connection".into()));
        }
        Ok(reply)
    }
}

impl Drop for Transport {
    fn drop(&mut self) {
        if let Transport::Child { child, .. } = self {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// A backend reached over the wire protocol. Requests are serialized through
/// one connection; the remote side owns the model state.
pub struct ExternalBackend {
    transport: Mutex<Transport>,
    capabilities: BackendCapabilities,
    remote_tokenizer: bool,
    vocab: Vocabulary,
}

impl std::fmt::Debug for ExternalBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalBackend")
            .field("capabilities", &self.capabilities)
            .field("vocab", &self.vocab.len())
            .finish()
    }
}

fn call_on<T: DeserializeOwned>(transport: &Mutex<Transport>, request: Request) -> Result<T> {
    let line = serde_json::to_string(&RequestEnvelope {
        v: PROTOCOL_VERSION,
        request,
    })
    .expect("requests always serialize");
    let reply = transport
        .lock()
        .map_err(|_| PetError::BackendUnavailable("connection poisoned".into()))?
        .round_trip(&line)?;
    let response: Response = serde_json::from_str(&reply).map_err(|e| PetError::Protocol {
        code: "bad_response".into(),
        message: e.to_string(),
    })?;
    if !response.ok {
        return Err(error_from_code(
            response.error.as_deref().unwrap_or("unknown"),
            response.message.as_deref().unwrap_or(""),
        ));
    }
    serde_json::from_value(response.result.unwrap_or(serde_json::Value::Null)).map_err(|e| PetError::Protocol {
        code: "bad_response".into(),
        message: e.to_string(),
    })
}

impl ExternalBackend {
    pub fn connect(endpoint: &Endpoint) -> Result<Self> {
        let transport = Mutex::new(Transport::open(endpoint)?);
        let caps: CapabilitiesResult = call_on(&transport, Request::Capabilities)?;
        if caps.protocol_version != PROTOCOL_VERSION {
            return Err(PetError::Protocol {
                code: "unsupported_version".into(),
                message: format!("backend speaks v{}, client v{PROTOCOL_VERSION}", caps.protocol_version),
            });
        }
        let v: VocabResult = call_on(&transport, Request::Vocab)?;
        let vocab = Vocabulary::from_tokens(v.tokens, &v.mask_token, v.sep_token.as_deref(), v.unk_token.as_deref())?;
        Ok(ExternalBackend {
            transport,
            capabilities: caps.capabilities(),
            remote_tokenizer: caps.remote_tokenizer,
            vocab,
        })
    }

    fn call<T: DeserializeOwned>(&self, request: Request) -> Result<T> {
        call_on(&self.transport, request)
    }
}

impl Tokenizer for ExternalBackend {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        if self.remote_tokenizer {
            self.call(Request::Tokenize { text: text.to_string() })
        } else {
            self.vocab.encode(text)
        }
    }

    fn mask_id(&self) -> TokenId {
        self.vocab.mask_id()
    }

    fn sep_id(&self) -> Option<TokenId> {
        self.vocab.sep_id()
    }

    fn single_token(&self, word: &str) -> Result<TokenId> {
        if !self.remote_tokenizer {
            return self.vocab.single_token(word);
        }
        let ids = self.encode(word)?;
        match ids.as_slice() {
            [id] if *id != self.mask_id() => Ok(*id),
            _ => Err(PetError::Verbalizer(format!(
                "{word:?} is not a single token for this backend ({} pieces)",
                split_words(word).len().max(ids.len())
            ))),
        }
    }
}

impl MlmBackend for ExternalBackend {
    fn capabilities(&self) -> BackendCapabilities {
        self.capabilities
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        self
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        Some(&self.vocab)
    }

    fn score_candidates(&self, seq: &MaskedSequence, candidates: &[TokenId]) -> Result<Vec<f64>> {
        let scores: Vec<f64> = self.call(Request::Score {
            tokens: seq.tokens.clone(),
            mask_pos: seq.mask_position,
            candidates: candidates.to_vec(),
        })?;
        if scores.len() != candidates.len() {
            return Err(PetError::Protocol {
                code: "bad_response".into(),
                message: format!("{} scores for {} candidates", scores.len(), candidates.len()),
            });
        }
        Ok(scores)
    }

    fn train_step_combined(
        &mut self,
        labeled: &[ClozeExample],
        mlm: &[MlmExample],
        alpha: f64,
        learning_rate: f64,
    ) -> Result<LossReport> {
        if !self.capabilities.trainable {
            return Err(PetError::NotTrainable);
        }
        self.call(Request::TrainCombined {
            labeled: labeled.iter().map(WireCloze::from).collect(),
            mlm: mlm.to_vec(),
            alpha,
            learning_rate,
        })
    }

    fn init_head(&mut self, num_labels: usize) -> Result<()> {
        let _: serde_json::Value = self.call(Request::InitHead { num_labels })?;
        Ok(())
    }

    fn classify(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        self.call(Request::Classify { tokens: tokens.to_vec() })
    }

    fn train_step_soft(&mut self, batch: &[SoftExample], learning_rate: f64) -> Result<f64> {
        self.call(Request::TrainSoft {
            batch: batch.to_vec(),
            learning_rate,
        })
    }

    fn snapshot(&mut self) -> Result<ParamSnapshot> {
        if !self.capabilities.supports_snapshot {
            return Err(PetError::SnapshotUnsupported);
        }
        #[derive(serde::Deserialize)]
        struct Id {
            id: String,
        }
        let Id { id } = self.call(Request::Snapshot)?;
        Ok(ParamSnapshot::Remote { id })
    }

    fn restore(&mut self, snapshot: &ParamSnapshot) -> Result<()> {
        match snapshot {
            ParamSnapshot::Remote { id } if self.capabilities.supports_snapshot => {
                let _: serde_json::Value = self.call(Request::Restore { id: id.clone() })?;
                Ok(())
            }
            _ => Err(PetError::SnapshotUnsupported),
        }
    }
}

/// Opens a new connection (and, for commands, a new process) per model.
#[derive(Debug, Clone)]
pub struct ExternalFactory {
    pub endpoint: Endpoint,
}

impl BackendFactory for ExternalFactory {
    fn create(&self) -> Result<Box<dyn MlmBackend>> {
        Ok(Box::new(ExternalBackend::connect(&self.endpoint)?))
    }

    fn describe(&self) -> String {
        match &self.endpoint {
            Endpoint::Tcp(a) => format!("external(tcp://{a})"),
            Endpoint::Command(c) => format!("external(cmd:{c})"),
        }
    }
}
