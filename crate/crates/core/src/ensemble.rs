//! Ensembling PVP models, soft labeling with temperature, and distillation
//! into a sequence classifier.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendFactory, MlmBackend, ScoreConvention, SoftExample};
use crate::error::{PetError, Result};
use crate::math::{self, derive_seed, rng_from_seed};
use crate::pvp::{truncate_longest_first, TextInput};
use crate::training::{gold_labels, pvp_label_scores, EpochCycler, TrainedPvpModel};
use crate::vocab::{TokenId, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    #[default]
    Weighted,
}

impl std::str::FromStr for Weighting {
    type Err = PetError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "weighted" => Ok(Weighting::Weighted),
            _ => Err(PetError::Config(format!("unknown weighting {s:?} (uniform | weighted)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub weighting: Weighting,
    pub temperature: f64,
    /// Also put the labeled examples (with their ensemble soft labels) into
    /// the distillation set.
    pub include_train: bool,
    pub max_seq_length: usize,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            weighting: Weighting::Weighted,
            temperature: 2.0,
            include_train: false,
            max_seq_length: 256,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PetError::Config(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PvpWeight {
    pub model: String,
    pub w: f64,
}

pub fn compute_weights(models: &[TrainedPvpModel], weighting: Weighting) -> Result<Vec<PvpWeight>> {
    models
        .iter()
        .map(|m| {
            let w = match weighting {
                Weighting::Uniform => 1.0,
                Weighting::Weighted => m
                    .initial_train_accuracy
                    .ok_or_else(|| PetError::SnapshotUnavailable(m.name()))?,
            };
            Ok(PvpWeight { model: m.name(), w })
        })
        .collect()
}

/// Fails when the models disagree on the score convention; logits and
/// log-probabilities cannot be averaged meaningfully.
pub fn check_conventions(models: &[TrainedPvpModel]) -> Result<Option<ScoreConvention>> {
    let mut conv = None;
    for m in models {
        let c = m.backend.capabilities().score_convention;
        match conv {
            None => conv = Some(c),
            Some(prev) if prev != c => return Err(PetError::MixedScoreConventions(format!("{prev:?} vs {c:?}"))),
            _ => {}
        }
    }
    Ok(conv)
}

/// `Σ w(p) s_p(l | x) / Σ w(p)` from precomputed per-model score vectors.
pub fn combine_scores(per_model: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if per_model.len() != weights.len() {
        return Err(PetError::LengthMismatch(per_model.len(), weights.len()));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(PetError::Config("ensemble weights must be finite and non-negative".into()));
    }
    let z: f64 = weights.iter().sum();
    if z <= 0.0 {
        return Err(PetError::ZeroTotalWeight);
    }
    let n = per_model.first().map_or(0, Vec::len);
    let mut out = vec![0.0; n];
    for (s, &w) in per_model.iter().zip(weights) {
        if s.len() != n {
            return Err(PetError::LengthMismatch(s.len(), n));
        }
        if w == 0.0 {
            continue;
        }
        for (o, v) in out.iter_mut().zip(s) {
            *o += w * v;
        }
    }
    out.iter_mut().for_each(|o| *o /= z);
    Ok(out)
}

/// Unnormalized ensemble scores `s_M(· | x)`.
pub fn ensemble_scores(
    models: &[TrainedPvpModel],
    weights: &[PvpWeight],
    x: &TextInput,
    max_seq_length: usize,
) -> Result<Vec<f64>> {
    let per_model = models
        .iter()
        .zip(weights)
        .map(|(m, w)| {
            if w.w == 0.0 {
                // skip the forward pass; zero weight contributes nothing
                Ok(vec![0.0; m.pvp.num_labels()])
            } else {
                pvp_label_scores(m.backend.as_ref(), &m.pvp, x, max_seq_length)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let ws: Vec<f64> = weights.iter().map(|w| w.w).collect();
    combine_scores(&per_model, &ws)
}

pub fn soft_label(scores: &[f64], temperature: f64) -> Vec<f64> {
    math::softmax_with_temperature(scores, temperature)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftLabeledExample {
    pub segments: Vec<Vec<TokenId>>,
    pub q: Vec<f64>,
}

impl SoftLabeledExample {
    pub fn input(&self) -> TextInput {
        TextInput {
            segments: self.segments.clone(),
            label: None,
        }
    }
}

/// Annotates every unlabeled example with `softmax(s_M / T)`.
pub fn build_soft_dataset(
    models: &[TrainedPvpModel],
    weights: &[PvpWeight],
    unlabeled: &[TextInput],
    config: &EnsembleConfig,
) -> Result<Vec<SoftLabeledExample>> {
    config.validate()?;
    if unlabeled.is_empty() {
        return Err(PetError::EmptyUnlabeled);
    }
    check_conventions(models)?;
    unlabeled
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let s = ensemble_scores(models, weights, x, config.max_seq_length).map_err(|e| PetError::at_example(i, e))?;
            let q = soft_label(&s, config.temperature);
            if q.iter().any(|v| !v.is_finite()) {
                return Err(PetError::at_example(i, PetError::NonFiniteScore(format!("{s:?}"))));
            }
            Ok(SoftLabeledExample {
                segments: x.segments.clone(),
                q,
            })
        })
        .collect()
}

pub fn write_soft_dataset(path: &Path, soft: &[SoftLabeledExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| PetError::io(format!("creating {}", path.display()), e))?,
    );
    for ex in soft {
        serde_json::to_writer(&mut f, ex).expect("soft examples serialize");
        f.write_all(b"\n").map_err(|e| PetError::io("writing soft dataset", e))?;
    }
    f.flush().map_err(|e| PetError::io("writing soft dataset", e))
}

pub fn read_soft_dataset(path: &Path) -> Result<Vec<SoftLabeledExample>> {
    let f = std::fs::File::open(path).map_err(|e| PetError::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| PetError::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: SoftLabeledExample = serde_json::from_str(&line).map_err(|e| PetError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_multiplier: f64,
    pub seed: u64,
    pub max_seq_length: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            steps: 5000,
            batch_size: 4,
            learning_rate: 1e-5,
            lr_multiplier: 1.0,
            seed: 42,
            max_seq_length: 256,
        }
    }
}

impl ClassifierConfig {
    /// Defaults for the supervised baseline: 250 steps.
    pub fn supervised() -> Self {
        ClassifierConfig {
            steps: 250,
            ..Default::default()
        }
    }
}

/// Plain classifier input: segments joined by the separator token (when the
/// backend has one), truncated longest-first to `max_seq_length`.
pub fn classifier_tokens(input: &TextInput, tokenizer: &dyn Tokenizer, max_seq_length: usize) -> Vec<TokenId> {
    let sep = tokenizer.sep_id();
    let n = input.segments.len();
    let overhead = if sep.is_some() { n.saturating_sub(1) } else { 0 };
    let mut lengths: Vec<usize> = input.segments.iter().map(Vec::len).collect();
    truncate_longest_first(&mut lengths, &vec![1; n], max_seq_length.saturating_sub(overhead));
    let mut out = Vec::new();
    for (i, (seg, &len)) in input.segments.iter().zip(&lengths).enumerate() {
        if i > 0 {
            if let Some(s) = sep {
                out.push(s);
            }
        }
        out.extend_from_slice(&seg[..len]);
    }
    out
}

/// Trains a fresh backend's classification head (and body) on soft targets.
pub fn train_final_classifier(
    soft: &[SoftLabeledExample],
    factory: &dyn BackendFactory,
    config: &ClassifierConfig,
) -> Result<Box<dyn MlmBackend>> {
    if soft.is_empty() {
        return Err(PetError::EmptySoftDataset);
    }
    if config.batch_size == 0 {
        return Err(PetError::Config("batch_size must be at least 1".into()));
    }
    let num_labels = soft[0].q.len();
    if soft.iter().any(|s| s.q.len() != num_labels) {
        return Err(PetError::Data("soft labels of different lengths".into()));
    }
    let mut backend = factory.create()?;
    backend.init_head(num_labels)?;
    let examples: Vec<SoftExample> = soft
        .iter()
        .map(|s| SoftExample {
            tokens: classifier_tokens(&s.input(), backend.tokenizer(), config.max_seq_length),
            q: s.q.clone(),
        })
        .collect();
    let mut rng = rng_from_seed(derive_seed(config.seed, &["classifier"]));
    let mut cycler = EpochCycler::new(examples.len());
    let lr = config.learning_rate * config.lr_multiplier;
    for _ in 0..config.steps {
        let batch: Vec<SoftExample> = (0..config.batch_size.min(examples.len()))
            .map(|_| examples[cycler.next(&mut rng)].clone())
            .collect();
        let loss = backend.train_step_soft(&batch, lr)?;
        if !loss.is_finite() {
            return Err(PetError::NonFiniteLoss(loss));
        }
    }
    Ok(backend)
}

/// Supervised baseline: the classifier trained on one-hot labels of 𝒯.
pub fn train_supervised(
    train: &[TextInput],
    num_labels: usize,
    factory: &dyn BackendFactory,
    config: &ClassifierConfig,
) -> Result<Box<dyn MlmBackend>> {
    if train.is_empty() {
        return Err(PetError::EmptyTrainSet);
    }
    let gold = gold_labels(train)?;
    let soft: Vec<SoftLabeledExample> = train
        .iter()
        .zip(gold)
        .map(|(x, y)| {
            let mut q = vec![0.0; num_labels];
            q[y] = 1.0;
            SoftLabeledExample {
                segments: x.segments.clone(),
                q,
            }
        })
        .collect();
    train_final_classifier(&soft, factory, config)
}

pub fn classifier_predict(backend: &dyn MlmBackend, inputs: &[TextInput], max_seq_length: usize) -> Result<Vec<usize>> {
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let tokens = classifier_tokens(x, backend.tokenizer(), max_seq_length);
            backend
                .classify(&tokens)
                .map(|p| math::argmax(&p))
                .map_err(|e| PetError::at_example(i, e))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::oracle::OracleBackend;
    use crate::backend::toy::ToyMlm;
    use crate::pvp::{CompiledPvp, LabelSet, Pattern, Pvp, Verbalizer};
    use crate::vocab::Vocabulary;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["great bad pizza awful good"], [])
    }

    fn pvp(v: &Vocabulary) -> CompiledPvp {
        let labels = LabelSet::new(["+1", "-1"]).unwrap();
        Pvp::new(
            "p",
            Pattern::parse("{0} {mask}").unwrap(),
            Verbalizer::single(&labels, ["great", "bad"]).unwrap(),
        )
        .compile(v)
        .unwrap()
    }

    /// Oracle model whose label scores are the fixed pair `(a, b)`.
    fn model(v: &Vocabulary, a: f64, b: f64, acc: Option<f64>) -> TrainedPvpModel {
        let great = v.id("great").unwrap();
        TrainedPvpModel {
            pvp: pvp(v),
            repetition: 0,
            backend: Box::new(OracleBackend::new(
                v.clone(),
                Arc::new(move |_, t| if t == great { a } else { b }),
            )),
            train_log: vec![],
            seed: 0,
            initial_train_accuracy: acc,
        }
    }

    fn x(v: &Vocabulary) -> TextInput {
        TextInput::new(vec![v.encode("pizza").unwrap()], None).unwrap()
    }

    #[test]
    fn uniform_weights_are_one() {
        let v = vocab();
        let ms: Vec<_> = (0..4).map(|_| model(&v, 0.0, 0.0, None)).collect();
        let w = compute_weights(&ms, Weighting::Uniform).unwrap();
        assert_eq!(w.iter().map(|w| w.w).collect::<Vec<_>>(), vec![1.0; 4]);
    }

    #[test]
    fn weighted_uses_initial_accuracy() {
        let v = vocab();
        let ms = vec![model(&v, 1.0, 0.0, Some(0.9)), model(&v, 0.0, 1.0, Some(0.5))];
        let w = compute_weights(&ms, Weighting::Weighted).unwrap();
        assert_eq!((w[0].w, w[1].w), (0.9, 0.5));
        let s = ensemble_scores(&ms, &w, &x(&v), 256).unwrap();
        assert!((s[0] - 0.642857).abs() < 1e-6 && (s[1] - 0.357143).abs() < 1e-6);
        let missing = vec![model(&v, 1.0, 0.0, None)];
        assert!(matches!(
            compute_weights(&missing, Weighting::Weighted),
            Err(PetError::SnapshotUnavailable(_))
        ));
    }

    #[test]
    fn weighted_accuracy_comes_from_the_untrained_model() {
        use crate::backend::toy::ToyFactory;
        use crate::training::{evaluate_pvp, finetune_pvp, TrainConfig};
        let v = vocab();
        let p = pvp(&v);
        let factory = ToyFactory {
            initial: ToyMlm::random(v.clone(), 4, 8, 1).unwrap(),
        };
        let train = vec![
            TextInput::new(vec![v.encode("good pizza").unwrap()], Some(0)).unwrap(),
            TextInput::new(vec![v.encode("awful pizza").unwrap()], Some(1)).unwrap(),
        ];
        let before = evaluate_pvp(&factory.initial, &p, &train, 256).unwrap();
        let cfg = TrainConfig { steps: 50, lr_multiplier: 50_000.0, ..Default::default() };
        let m = finetune_pvp(&p, 0, &train, &[], &cfg, &factory).unwrap();
        assert_eq!(compute_weights(&[m], Weighting::Weighted).unwrap()[0].w, before);
    }

    #[test]
    fn combination_arithmetic() {
        assert_eq!(combine_scores(&[vec![1.0, 3.0], vec![3.0, 1.0]], &[1.0, 1.0]).unwrap(), vec![2.0, 2.0]);
        assert_eq!(combine_scores(&[vec![0.3, -7.0], vec![9.0, 1.0]], &[2.0, 0.0]).unwrap(), vec![0.3, -7.0]);
        assert!(matches!(combine_scores(&[vec![1.0]], &[0.0]), Err(PetError::ZeroTotalWeight)));
        assert!(combine_scores(&[vec![1.0]], &[-1.0]).is_err());
    }

    #[test]
    fn soft_label_values() {
        assert_eq!(soft_label(&[0.0, 0.0], 3.0), vec![0.5, 0.5]);
        let q = soft_label(&[2.0, 0.0], 2.0);
        assert!((q[0] - 0.731059).abs() < 1e-6 && (q[1] - 0.268941).abs() < 1e-6);
        let q = soft_label(&[5.0, -5.0], 1e6);
        assert!((q[0] - 0.5).abs() < 1e-5);
    }

    #[test]
    fn soft_dataset_schema_and_errors() {
        let v = vocab();
        let ms = vec![model(&v, 0.8f64.ln(), 0.2f64.ln(), Some(1.0))];
        let w = compute_weights(&ms, Weighting::Uniform).unwrap();
        let cfg = EnsembleConfig { temperature: 1.0, ..Default::default() };
        let soft = build_soft_dataset(&ms, &w, &[x(&v)], &cfg).unwrap();
        assert!((soft[0].q[0] - 0.8).abs() < 1e-12);
        assert_eq!(soft[0].segments, x(&v).segments);
        assert!(matches!(build_soft_dataset(&ms, &w, &[], &cfg), Err(PetError::EmptyUnlabeled)));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tc.jsonl");
        write_soft_dataset(&path, &soft).unwrap();
        assert_eq!(read_soft_dataset(&path).unwrap(), soft);
        let line = std::fs::read_to_string(&path).unwrap();
        assert!(line.starts_with("{\"segments\":[["));
    }

    #[test]
    fn mixed_conventions_are_rejected() {
        let v = vocab();
        let toy = TrainedPvpModel {
            backend: Box::new(ToyMlm::random(v.clone(), 2, 2, 0).unwrap()),
            ..model(&v, 0.0, 0.0, Some(1.0))
        };
        let ms = vec![model(&v, 0.0, 0.0, Some(1.0)), toy];
        let w = compute_weights(&ms, Weighting::Uniform).unwrap();
        assert!(matches!(
            build_soft_dataset(&ms, &w, &[x(&v)], &EnsembleConfig::default()),
            Err(PetError::MixedScoreConventions(_))
        ));
    }

    #[test]
    fn scoring_errors_name_the_example() {
        let v = vocab();
        let ms = vec![model(&v, 0.0, 0.0, Some(1.0))];
        let w = compute_weights(&ms, Weighting::Uniform).unwrap();
        // the pattern carries this id to the oracle, which rejects it
        let bad = TextInput::new(vec![vec![9999]], None).unwrap();
        match build_soft_dataset(&ms, &w, &[x(&v), bad], &EnsembleConfig::default()) {
            Err(PetError::AtExample { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_steps_give_uniform_classifier() {
        let v = vocab();
        let f = OracleFree(ToyMlm::random(v.clone(), 3, 3, 0).unwrap());
        let soft = vec![SoftLabeledExample { segments: x(&v).segments, q: vec![1.0, 0.0] }];
        let cfg = ClassifierConfig { steps: 0, ..Default::default() };
        let c = train_final_classifier(&soft, &f, &cfg).unwrap();
        assert_eq!(c.classify(&x(&v).segments[0]).unwrap(), vec![0.5, 0.5]);
        assert!(matches!(train_final_classifier(&[], &f, &cfg), Err(PetError::EmptySoftDataset)));
    }

    struct OracleFree(ToyMlm);

    impl BackendFactory for OracleFree {
        fn create(&self) -> Result<Box<dyn MlmBackend>> {
            Ok(Box::new(self.0.clone()))
        }
        fn describe(&self) -> String {
            "toy".into()
        }
    }

    #[test]
    fn classifier_tokens_join_and_truncate() {
        let v = Vocabulary::build(["a b c d e"], [crate::vocab::SEP_TOKEN]);
        let sep = v.sep_id().unwrap();
        let x = TextInput::new(vec![vec![5, 6, 7], vec![8]], None).unwrap();
        assert_eq!(classifier_tokens(&x, &v, 10), vec![5, 6, 7, sep, 8]);
        assert_eq!(classifier_tokens(&x, &v, 4), vec![5, 6, sep, 8]);
    }

    proptest! {
        #[test]
        fn ensemble_laws(
            scores in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 1..5),
            raw_w in prop::collection::vec(0.01f64..1.0, 5),
            scale in 0.01f64..100.0,
            shift in -50.0f64..50.0,
            t in 0.1f64..10.0,
        ) {
            let n = scores.len();
            let w = &raw_w[..n];
            // uniform is the arithmetic mean
            let u = combine_scores(&scores, &vec![1.0; n]).unwrap();
            for l in 0..3 {
                let mean = scores.iter().map(|s| s[l]).sum::<f64>() / n as f64;
                prop_assert!((u[l] - mean).abs() < 1e-12);
            }
            // weight scaling leaves scores unchanged
            let a = combine_scores(&scores, w).unwrap();
            let scaled: Vec<f64> = w.iter().map(|x| x * scale).collect();
            let b = combine_scores(&scores, &scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            // shifting every score leaves q unchanged
            let shifted: Vec<Vec<f64>> = scores.iter().map(|s| s.iter().map(|v| v + shift).collect()).collect();
            let qa = soft_label(&a, t);
            let qs = soft_label(&combine_scores(&shifted, w).unwrap(), t);
            for (x, y) in qa.iter().zip(&qs) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            prop_assert!((qa.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
