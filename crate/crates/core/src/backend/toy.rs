//! Built-in trainable log-linear masked LM.
//!
//! The score of token `w` at a mask position is `u_w · h + b_w`, where `h` is
//! the mean input embedding of the tokens within `window` positions of the
//! mask (mask tokens excluded). The classification head applies a linear
//! layer to the mean embedding of the whole sequence.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{
    mask_for_mlm, BackendCapabilities, BackendFactory, ClozeExample, LossReport, MlmBackend,
    MlmExample, ParamSnapshot, ScoreConvention, SoftExample,
};
use crate::error::{PetError, Result};
use crate::math::{self, rng_from_seed};
use crate::pvp::MaskedSequence;
use crate::vocab::{TokenId, Tokenizer, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    pub dim: usize,
    pub window: usize,
    pub init_seed: u64,
    /// Initial weights are uniform in `[-init_scale, init_scale]`.
    pub init_scale: f64,
    /// MLM-only steps on the unlabeled pool before any task training; the toy
    /// analog of a pretrained model. Zero keeps the raw initialization.
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_learning_rate: f64,
    pub pretrain_mask_prob: f64,
    /// Multiplies the base learning rate; the toy model needs far larger steps
    /// than a transformer.
    pub lr_multiplier: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            dim: 32,
            window: 64,
            init_seed: 0,
            init_scale: 0.1,
            pretrain_steps: 3000,
            pretrain_batch: 8,
            pretrain_learning_rate: 0.5,
            pretrain_mask_prob: 0.15,
            lr_multiplier: 1000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    pub num_labels: usize,
    /// `num_labels × dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyMlmParams {
    pub vocab_size: usize,
    pub dim: usize,
    pub window: usize,
    /// `vocab_size × dim`, row-major.
    pub embeddings: Vec<f64>,
    /// `vocab_size × dim`, row-major.
    pub output: Vec<f64>,
    pub bias: Vec<f64>,
    pub head: Option<ClassifierHead>,
}

impl ToyMlmParams {
    pub fn zeros(vocab_size: usize, dim: usize, window: usize) -> Self {
        ToyMlmParams {
            vocab_size,
            dim,
            window,
            embeddings: vec![0.0; vocab_size * dim],
            output: vec![0.0; vocab_size * dim],
            bias: vec![0.0; vocab_size],
            head: None,
        }
    }

    /// Embeddings and output weights uniform in [-0.1, 0.1], zero bias.
    pub fn random(vocab_size: usize, dim: usize, window: usize, seed: u64) -> Self {
        Self::random_scaled(vocab_size, dim, window, seed, 0.1)
    }

    pub fn random_scaled(vocab_size: usize, dim: usize, window: usize, seed: u64, scale: f64) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut p = Self::zeros(vocab_size, dim, window);
        for x in p.embeddings.iter_mut().chain(p.output.iter_mut()) {
            *x = rng.gen_range(-scale..=scale);
        }
        p
    }

    fn validate(&self) -> Result<()> {
        let ok = self.dim >= 1
            && self.window >= 1
            && self.embeddings.len() == self.vocab_size * self.dim
            && self.output.len() == self.vocab_size * self.dim
            && self.bias.len() == self.vocab_size
            && self.head.as_ref().is_none_or(|h| {
                h.weights.len() == h.num_labels * self.dim && h.bias.len() == h.num_labels
            });
        if !ok {
            return Err(PetError::Vocabulary("toy parameter shapes are inconsistent".into()));
        }
        if !self.slices().iter().all(|s| s.iter().all(|x| x.is_finite())) {
            return Err(PetError::NonFiniteLoss(f64::NAN));
        }
        Ok(())
    }

    fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.embeddings, &self.output, &self.bias];
        if let Some(h) = &self.head {
            v.push(&h.weights);
            v.push(&h.bias);
        }
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![&mut self.embeddings, &mut self.output, &mut self.bias];
        if let Some(h) = &mut self.head {
            v.push(&mut h.weights);
            v.push(&mut h.bias);
        }
        v
    }

    pub fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn get_flat(&self, mut i: usize) -> f64 {
        for s in self.slices() {
            if i < s.len() {
                return s[i];
            }
            i -= s.len();
        }
        panic!("parameter index out of range")
    }

    fn set_flat(&mut self, mut i: usize, value: f64) {
        for s in self.slices_mut() {
            if i < s.len() {
                s[i] = value;
                return;
            }
            i -= s.len();
        }
        panic!("parameter index out of range")
    }

    fn zeros_like(&self) -> Self {
        let mut g = Self::zeros(self.vocab_size, self.dim, self.window);
        g.head = self.head.as_ref().map(|h| ClassifierHead {
            num_labels: h.num_labels,
            weights: vec![0.0; h.weights.len()],
            bias: vec![0.0; h.bias.len()],
        });
        g
    }

    /// `self -= lr * grad`
    fn sgd(&mut self, grad: &Self, lr: f64) {
        for (p, g) in self.slices_mut().into_iter().zip(grad.slices()) {
            for (x, d) in p.iter_mut().zip(g) {
                *x -= lr * d;
            }
        }
    }

    fn row(m: &[f64], dim: usize, i: TokenId) -> &[f64] {
        &m[i as usize * dim..(i as usize + 1) * dim]
    }
}

/// Positions that feed the context vector of the mask at `pos`.
fn context_positions(tokens: &[TokenId], pos: usize, window: usize, mask: TokenId) -> Vec<usize> {
    let lo = pos.saturating_sub(window);
    let hi = (pos + window).min(tokens.len().saturating_sub(1));
    (lo..=hi)
        .filter(|&i| i != pos && tokens[i] != mask)
        .collect()
}

#[derive(Debug, Clone)]
pub struct ToyMlm {
    vocab: Vocabulary,
    params: ToyMlmParams,
}

impl ToyMlm {
    pub fn new(vocab: Vocabulary, params: ToyMlmParams) -> Result<Self> {
        if params.vocab_size != vocab.len() {
            return Err(PetError::Vocabulary(format!(
                "parameters cover {} tokens, vocabulary has {}",
                params.vocab_size,
                vocab.len()
            )));
        }
        params.validate()?;
        Ok(ToyMlm { vocab, params })
    }

    pub fn random(vocab: Vocabulary, dim: usize, window: usize, seed: u64) -> Result<Self> {
        let params = ToyMlmParams::random(vocab.len(), dim, window, seed);
        Self::new(vocab, params)
    }

    pub fn params(&self) -> &ToyMlmParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ToyMlmParams {
        &mut self.params
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        tokens.iter().try_for_each(|&t| self.vocab.check(t))
    }

    /// Mean embedding over `positions`; zero when empty.
    fn mean_embedding(&self, tokens: &[TokenId], positions: &[usize]) -> Vec<f64> {
        let d = self.params.dim;
        let mut h = vec![0.0; d];
        if positions.is_empty() {
            return h;
        }
        for &i in positions {
            for (a, b) in h.iter_mut().zip(ToyMlmParams::row(&self.params.embeddings, d, tokens[i])) {
                *a += b;
            }
        }
        let n = positions.len() as f64;
        h.iter_mut().for_each(|x| *x /= n);
        h
    }

    fn token_score(&self, h: &[f64], w: TokenId) -> f64 {
        let d = self.params.dim;
        math::dot(ToyMlmParams::row(&self.params.output, d, w), h) + self.params.bias[w as usize]
    }

    /// Adds `scale * dh / |positions|` to the embedding rows of the context tokens.
    fn backprop_context(grad: &mut ToyMlmParams, tokens: &[TokenId], positions: &[usize], dh: &[f64], scale: f64) {
        if positions.is_empty() {
            return;
        }
        let d = grad.dim;
        let f = scale / positions.len() as f64;
        for &i in positions {
            let t = tokens[i] as usize;
            for (g, x) in grad.embeddings[t * d..(t + 1) * d].iter_mut().zip(dh) {
                *g += f * x;
            }
        }
    }

    fn classify_positions(&self, tokens: &[TokenId]) -> Vec<usize> {
        let mask = self.vocab.mask_id();
        (0..tokens.len()).filter(|&i| tokens[i] != mask).collect()
    }

    /// Combined loss and its gradient with respect to every parameter.
    pub fn combined_loss_and_grad(
        &self,
        labeled: &[ClozeExample],
        mlm: &[MlmExample],
        alpha: f64,
    ) -> Result<(LossReport, ToyMlmParams)> {
        let d = self.params.dim;
        let mask = self.vocab.mask_id();
        let mut grad = self.params.zeros_like();

        let mut l_ce = 0.0;
        if !labeled.is_empty() {
            let scale = (1.0 - alpha) / labeled.len() as f64;
            for ex in labeled {
                self.check_tokens(&ex.seq.tokens)?;
                if ex.target >= ex.label_tokens.len() {
                    return Err(PetError::UnknownLabel(ex.target.to_string()));
                }
                let ctx = context_positions(&ex.seq.tokens, ex.seq.mask_position, self.params.window, mask);
                let h = self.mean_embedding(&ex.seq.tokens, &ctx);
                let mut scores = Vec::with_capacity(ex.label_tokens.len());
                for group in &ex.label_tokens {
                    self.check_tokens(group)?;
                    let s: f64 = group.iter().map(|&t| self.token_score(&h, t)).sum::<f64>() / group.len() as f64;
                    scores.push(s);
                }
                let logp = math::log_softmax(&scores);
                l_ce -= logp[ex.target];
                let mut dh = vec![0.0; d];
                for (l, group) in ex.label_tokens.iter().enumerate() {
                    let g = logp[l].exp() - if l == ex.target { 1.0 } else { 0.0 };
                    let gt = scale * g / group.len() as f64;
                    for &t in group {
                        let t = t as usize;
                        grad.bias[t] += gt;
                        for k in 0..d {
                            grad.output[t * d + k] += gt * h[k];
                            dh[k] += gt * self.params.output[t * d + k];
                        }
                    }
                }
                Self::backprop_context(&mut grad, &ex.seq.tokens, &ctx, &dh, 1.0);
            }
            l_ce /= labeled.len() as f64;
        }

        let mut l_mlm = 0.0;
        let n_targets: usize = mlm.iter().map(|m| m.targets.len()).sum();
        if n_targets > 0 {
            let scale = alpha / n_targets as f64;
            let v = self.params.vocab_size;
            for ex in mlm {
                self.check_tokens(&ex.tokens)?;
                for &(pos, orig) in &ex.targets {
                    self.vocab.check(orig)?;
                    let ctx = context_positions(&ex.tokens, pos, self.params.window, mask);
                    let h = self.mean_embedding(&ex.tokens, &ctx);
                    let scores: Vec<f64> = (0..v as TokenId).map(|w| self.token_score(&h, w)).collect();
                    let logp = math::log_softmax(&scores);
                    l_mlm -= logp[orig as usize];
                    if scale == 0.0 {
                        continue;
                    }
                    let mut dh = vec![0.0; d];
                    for w in 0..v {
                        let g = scale * (logp[w].exp() - if w == orig as usize { 1.0 } else { 0.0 });
                        grad.bias[w] += g;
                        let urow = &self.params.output[w * d..(w + 1) * d];
                        let grow = &mut grad.output[w * d..(w + 1) * d];
                        for k in 0..d {
                            grow[k] += g * h[k];
                            dh[k] += g * urow[k];
                        }
                    }
                    Self::backprop_context(&mut grad, &ex.tokens, &ctx, &dh, 1.0);
                }
            }
            l_mlm /= n_targets as f64;
        }

        let l_total = (1.0 - alpha) * l_ce + alpha * l_mlm;
        Ok((LossReport { l_ce, l_mlm, l_total }, grad))
    }

    fn head(&self) -> Result<&ClassifierHead> {
        self.params.head.as_ref().ok_or(PetError::HeadNotInitialized)
    }

    fn head_logits(&self, head: &ClassifierHead, h: &[f64]) -> Vec<f64> {
        let d = self.params.dim;
        (0..head.num_labels)
            .map(|l| math::dot(&head.weights[l * d..(l + 1) * d], h) + head.bias[l])
            .collect()
    }

    pub fn soft_loss_and_grad(&self, batch: &[SoftExample]) -> Result<(f64, ToyMlmParams)> {
        let head = self.head()?;
        let d = self.params.dim;
        let mut grad = self.params.zeros_like();
        if batch.is_empty() {
            return Ok((0.0, grad));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for ex in batch {
            self.check_tokens(&ex.tokens)?;
            if ex.q.len() != head.num_labels {
                return Err(PetError::Data(format!(
                    "soft label has {} entries, head has {} labels",
                    ex.q.len(),
                    head.num_labels
                )));
            }
            let pos = self.classify_positions(&ex.tokens);
            let h = self.mean_embedding(&ex.tokens, &pos);
            let logp = math::log_softmax(&self.head_logits(head, &h));
            loss -= ex.q.iter().zip(&logp).filter(|(q, _)| **q != 0.0).map(|(q, lp)| q * lp).sum::<f64>();
            let gh = grad.head.as_mut().expect("grad mirrors params");
            let mut dh = vec![0.0; d];
            for l in 0..head.num_labels {
                let g = scale * (logp[l].exp() - ex.q[l]);
                gh.bias[l] += g;
                for k in 0..d {
                    gh.weights[l * d + k] += g * h[k];
                    dh[k] += g * head.weights[l * d + k];
                }
            }
            Self::backprop_context(&mut grad, &ex.tokens, &pos, &dh, 1.0);
        }
        Ok((loss * scale, grad))
    }

    /// MLM-only training on raw token sequences.
    pub fn pretrain_mlm(&mut self, texts: &[Vec<TokenId>], config: &ToyConfig) -> Result<()> {
        if texts.is_empty() || config.pretrain_steps == 0 {
            return Ok(());
        }
        let mut rng = rng_from_seed(math::derive_seed(config.init_seed, &["pretrain"]));
        let mask = self.vocab.mask_id();
        let vocab = self.vocab.clone();
        for _ in 0..config.pretrain_steps {
            let batch: Vec<MlmExample> = (0..config.pretrain_batch)
                .map(|_| {
                    let t = &texts[rng.gen_range(0..texts.len())];
                    mask_for_mlm(t, None, |x| vocab.is_special(x), mask, config.pretrain_mask_prob, &mut rng)
                })
                .collect();
            self.train_step_combined(&[], &batch, 1.0, config.pretrain_learning_rate)?;
        }
        Ok(())
    }

    /// Compares analytic gradients with central finite differences.
    ///
    /// Checks every parameter when there are at most `max_entries`, otherwise
    /// a seeded random subset of that size. Relative error is
    /// `|a - n| / max(|a|, |n|, 1e-6)`, so gradients below 1e-6 are compared
    /// in absolute terms.
    pub fn gradient_check(&self, case: &GradientCase, epsilon: f64, max_entries: usize, seed: u64) -> Result<f64> {
        if epsilon <= 0.0 {
            return Err(PetError::Config("epsilon must be positive".into()));
        }
        let loss = |m: &ToyMlm| -> Result<f64> {
            match case {
                GradientCase::Combined { labeled, mlm, alpha } => {
                    Ok(m.combined_loss_and_grad(labeled, mlm, *alpha)?.0.l_total)
                }
                GradientCase::Soft { batch } => Ok(m.soft_loss_and_grad(batch)?.0),
            }
        };
        let analytic = match case {
            GradientCase::Combined { labeled, mlm, alpha } => self.combined_loss_and_grad(labeled, mlm, *alpha)?.1,
            GradientCase::Soft { batch } => self.soft_loss_and_grad(batch)?.1,
        };
        let n = self.params.num_params();
        let indices: Vec<usize> = if n <= max_entries {
            (0..n).collect()
        } else {
            sample(&mut rng_from_seed(seed), n, max_entries).into_vec()
        };
        let mut probe = self.clone();
        let mut worst = 0.0f64;
        for i in indices {
            let orig = self.params.get_flat(i);
            probe.params.set_flat(i, orig + epsilon);
            let plus = loss(&probe)?;
            probe.params.set_flat(i, orig - epsilon);
            let minus = loss(&probe)?;
            probe.params.set_flat(i, orig);
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.get_flat(i);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
        Ok(worst)
    }

    /// Flattened analytic gradient, in parameter order (embeddings, output,
    /// bias, head weights, head bias).
    pub fn flat_gradient(grad: &ToyMlmParams) -> Vec<f64> {
        grad.slices().concat()
    }
}

/// Loss whose gradient [`ToyMlm::gradient_check`] verifies.
#[derive(Debug, Clone)]
pub enum GradientCase {
    Combined {
        labeled: Vec<ClozeExample>,
        mlm: Vec<MlmExample>,
        alpha: f64,
    },
    Soft {
        batch: Vec<SoftExample>,
    },
}

impl MlmBackend for ToyMlm {
    fn capabilities(&self) -> BackendCapabilities {
        BackendCapabilities {
            trainable: true,
            supports_mlm_loss: true,
            supports_classification_head: true,
            supports_snapshot: true,
            score_convention: ScoreConvention::Logits,
        }
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.vocab
    }

    fn vocabulary(&self) -> Option<&Vocabulary> {
        Some(&self.vocab)
    }

    fn score_candidates(&self, seq: &MaskedSequence, candidates: &[TokenId]) -> Result<Vec<f64>> {
        self.check_tokens(&seq.tokens)?;
        self.check_tokens(candidates)?;
        if seq.tokens.get(seq.mask_position) != Some(&self.vocab.mask_id()) {
            return Err(PetError::Data("mask position does not hold the mask token".into()));
        }
        let ctx = context_positions(&seq.tokens, seq.mask_position, self.params.window, self.vocab.mask_id());
        let h = self.mean_embedding(&seq.tokens, &ctx);
        Ok(candidates.iter().map(|&w| self.token_score(&h, w)).collect())
    }

    fn train_step_combined(
        &mut self,
        labeled: &[ClozeExample],
        mlm: &[MlmExample],
        alpha: f64,
        learning_rate: f64,
    ) -> Result<LossReport> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(PetError::Config(format!("alpha {alpha} outside [0, 1]")));
        }
        let (report, grad) = self.combined_loss_and_grad(labeled, mlm, alpha)?;
        if !report.l_total.is_finite() {
            return Err(PetError::NonFiniteLoss(report.l_total));
        }
        self.params.sgd(&grad, learning_rate);
        Ok(report)
    }

    fn init_head(&mut self, num_labels: usize) -> Result<()> {
        self.params.head = Some(ClassifierHead {
            num_labels,
            weights: vec![0.0; num_labels * self.params.dim],
            bias: vec![0.0; num_labels],
        });
        Ok(())
    }

    fn classify(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let head = self.head()?;
        self.check_tokens(tokens)?;
        let pos = self.classify_positions(tokens);
        let h = self.mean_embedding(tokens, &pos);
        Ok(math::softmax(&self.head_logits(head, &h)))
    }

    fn train_step_soft(&mut self, batch: &[SoftExample], learning_rate: f64) -> Result<f64> {
        let (loss, grad) = self.soft_loss_and_grad(batch)?;
        if !loss.is_finite() {
            return Err(PetError::NonFiniteLoss(loss));
        }
        self.params.sgd(&grad, learning_rate);
        Ok(loss)
    }

    fn snapshot(&mut self) -> Result<ParamSnapshot> {
        Ok(ParamSnapshot::Toy {
            params: Box::new(self.params.clone()),
        })
    }

    fn restore(&mut self, snapshot: &ParamSnapshot) -> Result<()> {
        match snapshot {
            ParamSnapshot::Toy { params } => {
                if params.vocab_size != self.vocab.len() {
                    return Err(PetError::Vocabulary("snapshot vocabulary size differs".into()));
                }
                params.validate()?;
                self.params = (**params).clone();
                Ok(())
            }
            ParamSnapshot::Remote { .. } => Err(PetError::SnapshotUnsupported),
        }
    }
}

/// Hands out clones of one initial toy model.
#[derive(Debug, Clone)]
pub struct ToyFactory {
    pub initial: ToyMlm,
}

impl ToyFactory {
    /// Random initialization followed by optional MLM pretraining on `pool`.
    pub fn build(vocab: Vocabulary, config: &ToyConfig, pool: &[Vec<TokenId>]) -> Result<Self> {
        let params = ToyMlmParams::random_scaled(vocab.len(), config.dim, config.window, config.init_seed, config.init_scale);
        let mut model = ToyMlm::new(vocab, params)?;
        model.pretrain_mlm(pool, config)?;
        Ok(ToyFactory { initial: model })
    }
}

impl BackendFactory for ToyFactory {
    fn create(&self) -> Result<Box<dyn MlmBackend>> {
        Ok(Box::new(self.initial.clone()))
    }

    fn describe(&self) -> String {
        format!(
            "toy(dim={}, window={}, vocab={})",
            self.initial.params.dim,
            self.initial.params.window,
            self.initial.params.vocab_size
        )
    }
}
