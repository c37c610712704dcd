//! The masked-LM backend contract and its implementations.
//!
//! A backend scores candidate tokens at the mask position of a
//! [`MaskedSequence`], takes gradient steps on the combined cloze/MLM loss, and
//! carries a sequence-classification head for the distilled classifier.

pub mod external;
pub mod oracle;
pub mod protocol;
pub mod toy;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::math::Rng;
use crate::pvp::MaskedSequence;
use crate::vocab::{TokenId, Tokenizer, Vocabulary};

pub use toy::{ToyConfig, ToyMlm, ToyMlmParams};

/// Whether `score_candidates` returns raw logits or log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreConvention {
    Logits,
    LogProbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCapabilities {
    pub trainable: bool,
    pub supports_mlm_loss: bool,
    pub supports_classification_head: bool,
    pub supports_snapshot: bool,
    pub score_convention: ScoreConvention,
}

/// One labeled cloze question for the cross-entropy term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClozeExample {
    pub seq: MaskedSequence,
    /// Per label, the tokens whose mask scores are averaged into the label score.
    pub label_tokens: Vec<Vec<TokenId>>,
    /// Index of the gold label.
    pub target: usize,
}

/// A sequence with some positions replaced by the mask token; `targets` holds
/// `(position, original token)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlmExample {
    pub tokens: Vec<TokenId>,
    pub targets: Vec<(usize, TokenId)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftExample {
    pub tokens: Vec<TokenId>,
    pub q: Vec<f64>,
}

/// Losses measured before the parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ce: f64,
    pub l_mlm: f64,
    pub l_total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamSnapshot {
    Toy { params: Box<ToyMlmParams> },
    Remote { id: String },
}

pub trait MlmBackend: Send + Sync {
    fn capabilities(&self) -> BackendCapabilities;

    fn tokenizer(&self) -> &dyn Tokenizer;

    /// The token inventory, when the backend can list it.
    fn vocabulary(&self) -> Option<&Vocabulary> {
        None
    }

    /// `M(w | z)` for every candidate `w`, in candidate order.
    fn score_candidates(&self, seq: &MaskedSequence, candidates: &[TokenId]) -> Result<Vec<f64>>;

    /// One SGD step on `(1 - alpha) * L_CE + alpha * L_MLM`. Empty batches
    /// contribute zero to their term.
    fn train_step_combined(
        &mut self,
        labeled: &[ClozeExample],
        mlm: &[MlmExample],
        alpha: f64,
        learning_rate: f64,
    ) -> Result<LossReport>;

    /// Creates a zero-initialized classification head over `num_labels` labels.
    fn init_head(&mut self, num_labels: usize) -> Result<()>;

    fn classify(&self, tokens: &[TokenId]) -> Result<Vec<f64>>;

    /// One SGD step on the soft cross-entropy `-Σ q(l) log p(l|x)`, averaged
    /// over the batch. Returns the loss before the update.
    fn train_step_soft(&mut self, batch: &[SoftExample], learning_rate: f64) -> Result<f64>;

    fn snapshot(&mut self) -> Result<ParamSnapshot>;

    fn restore(&mut self, snapshot: &ParamSnapshot) -> Result<()>;
}

/// Produces fresh, independent backend instances (one per trained model).
pub trait BackendFactory: Send + Sync {
    fn create(&self) -> Result<Box<dyn MlmBackend>>;

    fn describe(&self) -> String;
}

/// Masks each eligible position with probability `prob`. The position
/// `protected` (the pattern's own mask slot) and special tokens are never
/// selected; every selected position is replaced by the mask token.
pub fn mask_for_mlm(
    tokens: &[TokenId],
    protected: Option<usize>,
    is_special: impl Fn(TokenId) -> bool,
    mask_id: TokenId,
    prob: f64,
    rng: &mut Rng,
) -> MlmExample {
    let mut out = tokens.to_vec();
    let mut targets = Vec::new();
    for (i, &t) in tokens.iter().enumerate() {
        if Some(i) == protected || t == mask_id || is_special(t) {
            continue;
        }
        if rng.gen::<f64>() < prob {
            targets.push((i, t));
            out[i] = mask_id;
        }
    }
    MlmExample {
        tokens: out,
        targets,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::rng_from_seed;

    #[test]
    fn masking_never_touches_protected_slot() {
        let mut rng = rng_from_seed(3);
        let tokens: Vec<TokenId> = vec![5, 6, 0, 7, 8, 9];
        for _ in 0..2000 {
            let ex = mask_for_mlm(&tokens, Some(2), |t| t == 1, 0, 0.9, &mut rng);
            assert!(ex.targets.iter().all(|&(p, _)| p != 2));
            for &(p, orig) in &ex.targets {
                assert_eq!(ex.tokens[p], 0);
                assert_eq!(tokens[p], orig);
            }
        }
    }

    #[test]
    fn masking_rate_is_close_to_prob() {
        let mut rng = rng_from_seed(11);
        let tokens: Vec<TokenId> = (10..110).collect();
        let mut hits = 0;
        for _ in 0..200 {
            hits += mask_for_mlm(&tokens, None, |_| false, 0, 0.15, &mut rng).targets.len();
        }
        let rate = hits as f64 / 20_000.0;
        assert!((rate - 0.15).abs() < 0.01, "{rate}");
    }
}
