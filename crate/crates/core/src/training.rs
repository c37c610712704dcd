//! Finetuning one backend per PVP on the labeled set with auxiliary MLM.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{
    mask_for_mlm, BackendFactory, ClozeExample, LossReport, MlmBackend, MlmExample, ParamSnapshot,
};
use crate::error::{PetError, Result};
use crate::math::{self, derive_seed, rng_from_seed, Rng};
use crate::pvp::{CompiledPvp, TextInput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    pub steps: usize,
    pub labeled_per_batch: usize,
    pub unlabeled_per_batch: usize,
    /// Base learning rate before the backend multiplier.
    pub learning_rate: f64,
    pub lr_multiplier: f64,
    pub mlm_mask_prob: f64,
    pub seed: u64,
    pub max_seq_length: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1e-4,
            steps: 1000,
            labeled_per_batch: 1,
            unlabeled_per_batch: 3,
            learning_rate: 1e-5,
            lr_multiplier: 1.0,
            mlm_mask_prob: 0.15,
            seed: 42,
            max_seq_length: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PetError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.mlm_mask_prob) {
            return bad(format!("mlm_mask_prob {} outside [0, 1]", self.mlm_mask_prob));
        }
        if self.labeled_per_batch == 0 {
            return bad("labeled_per_batch must be at least 1".into());
        }
        if !(self.learning_rate * self.lr_multiplier).is_finite() || self.learning_rate < 0.0 {
            return bad("learning rate must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn effective_learning_rate(&self) -> f64 {
        self.learning_rate * self.lr_multiplier
    }
}

/// One finetuned PVP model.
pub struct TrainedPvpModel {
    pub pvp: CompiledPvp,
    pub repetition: usize,
    pub backend: Box<dyn MlmBackend>,
    pub train_log: Vec<LossReport>,
    pub seed: u64,
    /// Accuracy of `q_p` on the labeled set before finetuning, when known.
    pub initial_train_accuracy: Option<f64>,
}

impl std::fmt::Debug for TrainedPvpModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainedPvpModel")
            .field("pvp", &self.pvp.id)
            .field("repetition", &self.repetition)
            .field("steps", &self.train_log.len())
            .field("seed", &self.seed)
            .finish()
    }
}

impl TrainedPvpModel {
    pub fn name(&self) -> String {
        format!("{}-r{}", self.pvp.id, self.repetition)
    }
}

/// `s_p(l | x)`: per label, the mean backend score of its verbalizer tokens
/// at the mask position of `P(x)`.
pub fn pvp_label_scores(
    backend: &dyn MlmBackend,
    pvp: &CompiledPvp,
    input: &TextInput,
    max_seq_length: usize,
) -> Result<Vec<f64>> {
    let seq = pvp.pattern.apply(input, max_seq_length)?;
    let flat: Vec<_> = pvp.label_tokens.iter().flatten().copied().collect();
    let raw = backend.score_candidates(&seq, &flat)?;
    let mut out = Vec::with_capacity(pvp.label_tokens.len());
    let mut i = 0;
    for group in &pvp.label_tokens {
        let s: f64 = raw[i..i + group.len()].iter().sum();
        out.push(s / group.len() as f64);
        i += group.len();
    }
    Ok(out)
}

/// `q_p(l | x)`.
pub fn pvp_label_probs(
    backend: &dyn MlmBackend,
    pvp: &CompiledPvp,
    input: &TextInput,
    max_seq_length: usize,
) -> Result<Vec<f64>> {
    Ok(math::softmax(&pvp_label_scores(backend, pvp, input, max_seq_length)?))
}

pub fn predict_pvp(
    backend: &dyn MlmBackend,
    pvp: &CompiledPvp,
    inputs: &[TextInput],
    max_seq_length: usize,
) -> Result<Vec<usize>> {
    inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            pvp_label_scores(backend, pvp, x, max_seq_length)
                .map(|s| math::argmax(&s))
                .map_err(|e| PetError::at_example(i, e))
        })
        .collect()
}

/// Accuracy of `argmax_l q_p(l | x)` with ties going to the first label.
pub fn evaluate_pvp(
    backend: &dyn MlmBackend,
    pvp: &CompiledPvp,
    inputs: &[TextInput],
    max_seq_length: usize,
) -> Result<f64> {
    let gold = gold_labels(inputs)?;
    crate::data::accuracy(&predict_pvp(backend, pvp, inputs, max_seq_length)?, &gold)
}

pub fn gold_labels(inputs: &[TextInput]) -> Result<Vec<usize>> {
    inputs
        .iter()
        .enumerate()
        .map(|(i, x)| x.label.ok_or_else(|| PetError::Data(format!("example {i} is unlabeled"))))
        .collect()
}

/// Deterministic labeled-example order: a fresh shuffle every epoch.
pub(crate) struct EpochCycler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochCycler {
    pub(crate) fn new(n: usize) -> Self {
        EpochCycler {
            order: (0..n).collect(),
            pos: n,
        }
    }

    pub(crate) fn next(&mut self, rng: &mut Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Builds the MLM part of one step: pattern-formatted unlabeled examples
/// drawn with replacement, with the pattern's own mask slot protected.
pub fn mlm_batch(
    backend: &dyn MlmBackend,
    pvp: &CompiledPvp,
    unlabeled: &[TextInput],
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<Vec<MlmExample>> {
    if unlabeled.is_empty() {
        return Ok(Vec::new());
    }
    let tok = backend.tokenizer();
    let mask = tok.mask_id();
    let sep = tok.sep_id();
    let vocab = backend.vocabulary();
    (0..config.unlabeled_per_batch)
        .map(|_| {
            let x = &unlabeled[rng.gen_range(0..unlabeled.len())];
            let seq = pvp.pattern.apply(x, config.max_seq_length)?;
            let special = |t| Some(t) == sep || vocab.is_some_and(|v| v.is_special(t));
            Ok(mask_for_mlm(
                &seq.tokens,
                Some(seq.mask_position),
                special,
                mask,
                config.mlm_mask_prob,
                rng,
            ))
        })
        .collect()
}

/// Finetunes a fresh backend on the combined cloze/MLM loss.
pub fn finetune_pvp(
    pvp: &CompiledPvp,
    repetition: usize,
    train: &[TextInput],
    unlabeled: &[TextInput],
    config: &TrainConfig,
    factory: &dyn BackendFactory,
) -> Result<TrainedPvpModel> {
    config.validate()?;
    if train.is_empty() {
        return Err(PetError::EmptyTrainSet);
    }
    let gold = gold_labels(train)?;
    let mut backend = factory.create()?;
    let seed = derive_seed(config.seed, &["pvp", &pvp.id, &repetition.to_string()]);
    let mut rng = rng_from_seed(seed);
    let labeled: Vec<ClozeExample> = train
        .iter()
        .zip(&gold)
        .map(|(x, &target)| {
            Ok(ClozeExample {
                seq: pvp.pattern.apply(x, config.max_seq_length)?,
                label_tokens: pvp.label_tokens.clone(),
                target,
            })
        })
        .collect::<Result<_>>()?;
    let initial_train_accuracy = evaluate_pvp(backend.as_ref(), pvp, train, config.max_seq_length)?;
    let lr = config.effective_learning_rate();
    let mut cycler = EpochCycler::new(labeled.len());
    let mut train_log = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch: Vec<ClozeExample> = (0..config.labeled_per_batch)
            .map(|_| labeled[cycler.next(&mut rng)].clone())
            .collect();
        let mlm = mlm_batch(backend.as_ref(), pvp, unlabeled, config, &mut rng)?;
        train_log.push(backend.train_step_combined(&batch, &mlm, config.alpha, lr)?);
    }
    Ok(TrainedPvpModel {
        pvp: pvp.clone(),
        repetition,
        backend,
        train_log,
        seed,
        initial_train_accuracy: Some(initial_train_accuracy),
    })
}

/// Trains `repetitions` models per PVP on up to `jobs` threads. The result
/// order is PVP-major and independent of scheduling.
pub fn train_model_set(
    pvps: &[CompiledPvp],
    repetitions: usize,
    train: &[TextInput],
    unlabeled: &[TextInput],
    config: &TrainConfig,
    factory: &dyn BackendFactory,
    jobs: usize,
) -> Result<Vec<TrainedPvpModel>> {
    let work: Vec<(&CompiledPvp, usize)> = pvps
        .iter()
        .flat_map(|p| (0..repetitions).map(move |r| (p, r)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| PetError::Config(e.to_string()))?;
    pool.install(|| {
        work.par_iter()
            .map(|&(p, r)| finetune_pvp(p, r, train, unlabeled, config, factory))
            .collect()
    })
}

/// A trained model on disk: its snapshot plus training metadata.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub pvp_id: String,
    pub repetition: usize,
    pub seed: u64,
    pub initial_train_accuracy: Option<f64>,
    pub train_log: Vec<LossReport>,
    pub snapshot: ParamSnapshot,
}

pub fn save_model(model: &mut TrainedPvpModel, path: &Path) -> Result<()> {
    let saved = SavedModel {
        pvp_id: model.pvp.id.clone(),
        repetition: model.repetition,
        seed: model.seed,
        initial_train_accuracy: model.initial_train_accuracy,
        train_log: model.train_log.clone(),
        snapshot: model.backend.snapshot()?,
    };
    let text = serde_json::to_string(&saved).expect("saved models serialize");
    std::fs::write(path, text).map_err(|e| PetError::io(format!("writing {}", path.display()), e))
}

/// Restores a saved model into a fresh backend from `factory`.
pub fn load_model(path: &Path, pvp: &CompiledPvp, factory: &dyn BackendFactory) -> Result<TrainedPvpModel> {
    let text = std::fs::read_to_string(path).map_err(|e| PetError::io(format!("reading {}", path.display()), e))?;
    let saved: SavedModel = serde_json::from_str(&text).map_err(|e| PetError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if saved.pvp_id != pvp.id {
        return Err(PetError::Data(format!(
            "{} holds a model for PVP {}, expected {}",
            path.display(),
            saved.pvp_id,
            pvp.id
        )));
    }
    let mut backend = factory.create()?;
    backend.restore(&saved.snapshot)?;
    Ok(TrainedPvpModel {
        pvp: pvp.clone(),
        repetition: saved.repetition,
        backend,
        train_log: saved.train_log,
        seed: saved.seed,
        initial_train_accuracy: saved.initial_train_accuracy,
    })
}

/// One line per step: `{"step", "l_ce", "l_mlm", "l_total"}`.
pub fn write_train_log(path: &Path, log: &[LossReport]) -> Result<()> {
    #[derive(Serialize)]
    struct Line {
        step: usize,
        #[serde(flatten)]
        report: LossReport,
    }
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| PetError::io(format!("creating {}", path.display()), e))?,
    );
    for (step, report) in log.iter().enumerate() {
        serde_json::to_writer(&mut f, &Line { step, report: *report }).expect("numbers serialize");
        f.write_all(b"\n").map_err(|e| PetError::io("writing train log", e))?;
    }
    f.flush().map_err(|e| PetError::io("writing train log", e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::oracle::OracleBackend;
    use crate::backend::toy::{ToyFactory, ToyMlm};
    use crate::pvp::{Pattern, Pvp, Verbalizer, LabelSet};
    use crate::vocab::{Tokenizer, Vocabulary};
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["best pizza ever great bad it was . yummy awful"], [])
    }

    fn pvp(v: &Vocabulary, words: [&str; 2]) -> CompiledPvp {
        let labels = LabelSet::new(["+1", "-1"]).unwrap();
        Pvp::new(
            "p1",
            Pattern::parse("It was {mask}. {0}").unwrap(),
            Verbalizer::single(&labels, words).unwrap(),
        )
        .compile(v)
        .unwrap()
    }

    fn input(v: &Vocabulary, text: &str, label: Option<usize>) -> TextInput {
        TextInput::new(vec![v.encode(text).unwrap()], label).unwrap()
    }

    #[test]
    fn figure_one_scores_predict_positive() {
        let v = vocab();
        let o = OracleBackend::from_distribution(v.clone(), &[("great", 0.8), ("bad", 0.2)]).unwrap();
        let p = pvp(&v, ["great", "bad"]);
        let x = input(&v, "Best pizza ever!", Some(0));
        let q = pvp_label_probs(&o, &p, &x, 256).unwrap();
        assert!((q[0] - 0.8).abs() < 1e-12 && (q[1] - 0.2).abs() < 1e-12);
        assert_eq!(evaluate_pvp(&o, &p, std::slice::from_ref(&x), 256).unwrap(), 1.0);
        // inverted verbalizer gets everything wrong
        let inv = pvp(&v, ["bad", "great"]);
        assert_eq!(evaluate_pvp(&o, &inv, &[x], 256).unwrap(), 0.0);
    }

    #[test]
    fn ties_go_to_first_label() {
        let v = vocab();
        let o = OracleBackend::from_distribution(v.clone(), &[("great", 0.5), ("bad", 0.5)]).unwrap();
        let p = pvp(&v, ["great", "bad"]);
        let xs = [input(&v, "pizza", Some(0)), input(&v, "pizza", Some(1))];
        assert_eq!(predict_pvp(&o, &p, &xs, 256).unwrap(), vec![0, 0]);
    }

    #[test]
    fn multi_token_label_score_is_mean() {
        let v = vocab();
        let labels = LabelSet::new(["+1", "-1"]).unwrap();
        let p = Pvp::new(
            "m",
            Pattern::parse("{0} {mask}").unwrap(),
            Verbalizer::multi(&labels, vec![vec!["great".into(), "yummy".into()], vec!["bad".into()]]).unwrap(),
        )
        .compile(&v)
        .unwrap();
        let o = OracleBackend::from_distribution(v.clone(), &[("great", 0.4), ("yummy", 0.1), ("bad", 0.3)]).unwrap();
        let s = pvp_label_scores(&o, &p, &input(&v, "pizza", None), 256).unwrap();
        assert!((s[0] - (0.4f64.ln() + 0.1f64.ln()) / 2.0).abs() < 1e-15);
        assert_eq!(s[1], 0.3f64.ln());
    }

    fn toy_setup() -> (Vocabulary, ToyFactory, CompiledPvp, Vec<TextInput>, Vec<TextInput>) {
        let v = vocab();
        let factory = ToyFactory {
            initial: ToyMlm::random(v.clone(), 6, 16, 3).unwrap(),
        };
        let p = pvp(&v, ["great", "bad"]);
        let train = vec![
            input(&v, "best pizza yummy", Some(0)),
            input(&v, "awful pizza", Some(1)),
            input(&v, "yummy yummy", Some(0)),
        ];
        let unl = vec![input(&v, "pizza ever", None), input(&v, "awful it was", None)];
        (v, factory, p, train, unl)
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let (_, factory, p, train, unl) = toy_setup();
        let cfg = TrainConfig { steps: 0, ..Default::default() };
        let mut m = finetune_pvp(&p, 0, &train, &unl, &cfg, &factory).unwrap();
        assert!(m.train_log.is_empty());
        let ParamSnapshot::Toy { params } = m.backend.snapshot().unwrap() else { panic!() };
        assert_eq!(*params, *factory.initial.params());
    }

    #[test]
    fn empty_train_set_is_rejected() {
        let (_, factory, p, _, unl) = toy_setup();
        assert!(matches!(
            finetune_pvp(&p, 0, &[], &unl, &TrainConfig::default(), &factory),
            Err(PetError::EmptyTrainSet)
        ));
    }

    #[test]
    fn runs_are_deterministic_and_log_every_step() {
        let (_, factory, p, train, unl) = toy_setup();
        let cfg = TrainConfig {
            steps: 30,
            lr_multiplier: 1000.0,
            ..Default::default()
        };
        let a = finetune_pvp(&p, 0, &train, &unl, &cfg, &factory).unwrap();
        let b = finetune_pvp(&p, 0, &train, &unl, &cfg, &factory).unwrap();
        assert_eq!(a.train_log.len(), 30);
        assert_eq!(a.train_log, b.train_log);
        let c = finetune_pvp(&p, 1, &train, &unl, &cfg, &factory).unwrap();
        assert_ne!(a.seed, c.seed);
    }

    #[test]
    fn alpha_zero_without_unlabeled_is_plain_cloze_training() {
        let (_, factory, p, train, unl) = toy_setup();
        let cfg = TrainConfig {
            steps: 20,
            alpha: 0.0,
            unlabeled_per_batch: 0,
            lr_multiplier: 1000.0,
            ..Default::default()
        };
        let with_pool = finetune_pvp(&p, 0, &train, &unl, &cfg, &factory).unwrap();
        let without = finetune_pvp(&p, 0, &train, &[], &cfg, &factory).unwrap();
        for (a, b) in with_pool.train_log.iter().zip(&without.train_log) {
            assert!((a.l_total - b.l_total).abs() < 1e-12);
            assert_eq!(a.l_mlm, 0.0);
        }
    }

    #[test]
    fn training_fits_the_labeled_set() {
        let (_, factory, p, train, unl) = toy_setup();
        let cfg = TrainConfig {
            steps: 200,
            lr_multiplier: 50_000.0,
            ..Default::default()
        };
        let m = finetune_pvp(&p, 0, &train, &unl, &cfg, &factory).unwrap();
        assert_eq!(evaluate_pvp(m.backend.as_ref(), &p, &train, 256).unwrap(), 1.0);
        let first = m.train_log[0].l_ce;
        assert!(m.train_log.last().unwrap().l_ce < first);
    }

    #[test]
    fn model_set_order_is_independent_of_jobs() {
        let (v, factory, p, train, unl) = toy_setup();
        let labels = LabelSet::new(["+1", "-1"]).unwrap();
        let p2 = Pvp::new(
            "p2",
            Pattern::parse("{0} {mask}!").unwrap(),
            Verbalizer::single(&labels, ["yummy", "awful"]).unwrap(),
        )
        .compile(&v)
        .unwrap();
        let cfg = TrainConfig { steps: 10, lr_multiplier: 1000.0, ..Default::default() };
        let seq = train_model_set(&[p.clone(), p2.clone()], 2, &train, &unl, &cfg, &factory, 1).unwrap();
        let par = train_model_set(&[p, p2], 2, &train, &unl, &cfg, &factory, 4).unwrap();
        let names: Vec<String> = seq.iter().map(|m| m.name()).collect();
        assert_eq!(names, vec!["p1-r0", "p1-r1", "p2-r0", "p2-r1"]);
        for (a, b) in seq.iter().zip(&par) {
            assert_eq!(a.name(), b.name());
            assert_eq!(a.train_log, b.train_log);
        }
    }

    #[test]
    fn mask_slot_is_never_an_mlm_target() {
        let (_, factory, p, _, unl) = toy_setup();
        let backend = factory.create().unwrap();
        let cfg = TrainConfig { mlm_mask_prob: 1.0, ..Default::default() };
        let mut rng = rng_from_seed(0);
        for _ in 0..200 {
            for ex in mlm_batch(backend.as_ref(), &p, &unl, &cfg, &mut rng).unwrap() {
                let slot = unl
                    .iter()
                    .map(|x| p.pattern.apply(x, 256).unwrap())
                    .find(|s| s.tokens.len() == ex.tokens.len())
                    .unwrap()
                    .mask_position;
                assert!(ex.targets.iter().all(|&(pos, _)| pos != slot));
                assert!(ex.targets.iter().all(|&(_, t)| t != backend.tokenizer().mask_id()));
            }
        }
    }

    proptest! {
        #[test]
        fn label_probs_sum_to_one_and_ignore_shifts(
            a in -30.0f64..30.0, b in -30.0f64..30.0, shift in -100.0f64..100.0,
        ) {
            let v = vocab();
            let p = pvp(&v, ["great", "bad"]);
            let great = v.id("great").unwrap();
            let mk = |c: f64| {
                OracleBackend::new(v.clone(), std::sync::Arc::new(move |_, t| if t == great { a + c } else { b + c }))
            };
            let x = input(&v, "pizza", None);
            let q = pvp_label_probs(&mk(0.0), &p, &x, 256).unwrap();
            let qs = pvp_label_probs(&mk(shift), &p, &x, 256).unwrap();
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for (u, w) in q.iter().zip(&qs) {
                prop_assert!((u - w).abs() < 1e-9);
            }
            prop_assert_eq!(math::argmax(&q), math::argmax(&qs));
        }
    }

    #[test]
    fn saved_models_restore_exactly() {
        let (v, factory, p, train, unl) = toy_setup();
        let cfg = TrainConfig { steps: 15, lr_multiplier: 50_000.0, ..Default::default() };
        let mut m = finetune_pvp(&p, 2, &train, &unl, &cfg, &factory).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        save_model(&mut m, &path).unwrap();
        let back = load_model(&path, &p, &factory).unwrap();
        assert_eq!(back.train_log, m.train_log);
        assert_eq!(back.repetition, 2);
        let x = input(&v, "awful pizza", None);
        assert_eq!(
            pvp_label_scores(back.backend.as_ref(), &p, &x, 256).unwrap(),
            pvp_label_scores(m.backend.as_ref(), &p, &x, 256).unwrap()
        );
    }

    #[test]
    fn train_log_is_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        write_train_log(&path, &[LossReport { l_ce: 1.0, l_mlm: 2.0, l_total: 1.5 }]).unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text.trim(), r#"{"step":0,"l_ce":1.0,"l_mlm":2.0,"l_total":1.5}"#);
    }
}
