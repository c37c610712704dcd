//! Non-trainable backend whose scores come from a fixed function. Used by
//! tests and bookkeeping checks where the model's output must be known exactly.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use super::{
    BackendCapabilities, BackendFactory, ClozeExample, LossReport, MlmBackend, MlmExample,
    ParamSnapshot, ScoreConvention, SoftExample,
};
use crate::error::{PetError, Result};
use crate::pvp::MaskedSequence;
use crate::vocab::{TokenId, Tokenizer, Vocabulary};

pub type ScoreFn = dyn Fn(&MaskedSequence, TokenId) -> f64 + Send + Sync;

#[derive(Clone)]
pub struct OracleBackend {
    vocab: Vocabulary,
    scorer: Arc<ScoreFn>,
}

impl fmt::Debug for OracleBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OracleBackend").field("vocab", &self.vocab.len()).finish()
    }
}

impl OracleBackend {
    pub fn new(vocab: Vocabulary, scorer: Arc<ScoreFn>) -> Self {
        OracleBackend { vocab, scorer }
    }

    /// Context-independent distribution: scores are `ln p(token)`, and tokens
    /// absent from `probs` score negative infinity.
    pub fn from_distribution(vocab: Vocabulary, probs: &[(&str, f64)]) -> Result<Self> {
        let mut table: HashMap<TokenId, f64> = HashMap::new();
        for &(tok, p) in probs {
            let id = vocab.id(tok).ok_or_else(|| PetError::UnknownToken(tok.to_string()))?;
            table.insert(id, p.ln());
        }
        Ok(Self::new(
            vocab,
            Arc::new(move |_, t| table.get(&t).copied().unwrap_or(f64::NEG_INFINITY)),
        ))
    }
}

impl MlmBackend for OracleBackend {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            trainable: false,
            supports_mlm_loss: false,
            supports_classification_head: false,
            supports_snapshot: true,
            score_convention: ScoreConvention::LogProbs,
        }
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.vocab
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        Some(&self.vocab)
    }

    fn score_candidates(&self, seq: &MaskedSequence, candidates: &[TokenId]) -> Result<Vec<f64>> {
        seq.tokens.iter().try_for_each(|&t| self.vocab.check(t))?;
        candidates
            .iter()
            .map(|&t| {
                self.vocab.check(t)?;
                Ok((self.scorer)(seq, t))
            })
            .collect()
    }

    fn train_step_combined(&mut self, _: &[ClozeExample], _: &[MlmExample], _: f64, _: f64) -> Result<LossReport> {
        Err(PetError::NotTrainable)
    }

    fn init_head(&mut self, _: usize) -> Result<()> {
        Err(PetError::NotTrainable)
    }

    fn classify(&self, _: &[TokenId]) -> Result<Vec<f64>> {
        Err(PetError::HeadNotInitialized)
    }

    fn train_step_soft(&mut self, _: &[SoftExample], _: f64) -> Result<f64> {
        Err(PetError::NotTrainable)
    }

    // stateless, so snapshots are trivially exact
    fn snapshot(&mut self) -> Result<ParamSnapshot> {
        Ok(ParamSnapshot::Remote { id: "oracle".into() })
    }

    fn restore(&mut self, _: &ParamSnapshot) -> Result<()> {
        Ok(())
    }
}

impl BackendFactory for OracleBackend {
    fn create(&self) -> Result<Box<dyn MlmBackend>> {
        Ok(Box::new(self.clone()))
    }

    fn describe(&self) -> String {
        "oracle".into()
    }
}
