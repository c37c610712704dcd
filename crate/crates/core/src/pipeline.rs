//! End-to-end pipelines over in-memory data: PET, iPET, supervised baseline
//! and verbalizer search, plus the run configuration they share.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::avs::{search_verbalizer, AvsConfig, AvsOutcome};
use crate::backend::external::{Endpoint, ExternalBackend, ExternalFactory};
use crate::backend::toy::ToyFactory;
use crate::backend::{BackendFactory, MlmBackend, ToyConfig};
use crate::data::{accuracy, macro_f1, Dataset};
use crate::ensemble::{
    build_soft_dataset, classifier_predict, compute_weights, train_final_classifier, train_supervised,
    ClassifierConfig, EnsembleConfig, SoftLabeledExample,
};
use crate::error::{PetError, Result};
use crate::ipet::{run_ipet, GenerationReport, IpetConfig, IpetInputs};
use crate::math::derive_seed;
use crate::pvp::{CompiledPvp, LabelSet, TextInput};
use crate::task::TaskConfig;
use crate::training::{predict_pvp, train_model_set, TrainConfig, TrainedPvpModel};
use crate::vocab::{Tokenizer, Vocabulary};

/// `toy` or `external:<endpoint>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BackendSpec {
    Toy,
    External(String),
}

impl std::str::FromStr for BackendSpec {
    type Err = PetError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "toy" {
            Ok(BackendSpec::Toy)
        } else if let Some(e) = s.strip_prefix("external:") {
            Endpoint::parse(e)?;
            Ok(BackendSpec::External(e.to_string()))
        } else {
            Err(PetError::Config(format!("backend {s:?} is neither toy nor external:<endpoint>")))
        }
    }
}

impl TryFrom<String> for BackendSpec {
    type Error = PetError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BackendSpec> for String {
    fn from(b: BackendSpec) -> String {
        match b {
            BackendSpec::Toy => "toy".into(),
            BackendSpec::External(e) => format!("external:{e}"),
        }
    }
}

/// Every tunable of a run, one section per module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub backend: BackendSpec,
    /// Models trained per PVP.
    pub repetitions: usize,
    pub toy: ToyConfig,
    pub train: TrainConfig,
    pub ensemble: EnsembleConfig,
    pub classifier: ClassifierConfig,
    pub supervised: ClassifierConfig,
    pub ipet: IpetConfig,
    pub avs: AvsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let toy = ToyConfig::default();
        RunConfig {
            backend: BackendSpec::Toy,
            repetitions: 3,
            train: TrainConfig {
                lr_multiplier: toy.lr_multiplier,
                ..TrainConfig::default()
            },
            classifier: ClassifierConfig {
                lr_multiplier: toy.lr_multiplier,
                ..ClassifierConfig::default()
            },
            supervised: ClassifierConfig {
                lr_multiplier: toy.lr_multiplier,
                ..ClassifierConfig::supervised()
            },
            toy,
            ensemble: EnsembleConfig::default(),
            ipet: IpetConfig::default(),
            avs: AvsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| PetError::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PetError::Config(format!("reading run config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Sets every module seed from one master seed.
    pub fn reseed(&mut self, seed: u64) {
        self.toy.init_seed = derive_seed(seed, &["toy"]);
        self.train.seed = derive_seed(seed, &["train"]);
        self.classifier.seed = derive_seed(seed, &["classifier"]);
        self.supervised.seed = derive_seed(seed, &["supervised"]);
        self.ipet.seed = derive_seed(seed, &["ipet"]);
        self.avs.seed = derive_seed(seed, &["avs"]);
    }

    /// Applies one maximum sequence length to every module.
    pub fn set_max_seq_length(&mut self, n: usize) {
        self.train.max_seq_length = n;
        self.ensemble.max_seq_length = n;
        self.classifier.max_seq_length = n;
        self.supervised.max_seq_length = n;
        self.avs.max_seq_length = n;
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(PetError::Config("repetitions must be at least 1".into()));
        }
        self.train.validate()?;
        self.ensemble.validate()?;
        self.ipet.validate()?;
        self.avs.validate()
    }
}

/// Encoded data plus a backend factory, ready for any pipeline.
pub struct Prepared {
    pub task: TaskConfig,
    pub label_set: LabelSet,
    pub pvps: Vec<CompiledPvp>,
    pub factory: Box<dyn BackendFactory>,
    pub train: Vec<TextInput>,
    pub unlabeled: Vec<TextInput>,
    pub test: Option<Vec<TextInput>>,
    /// Token inventory with unlabeled-set frequencies, when the backend lists one.
    pub vocab: Option<Vocabulary>,
}

impl std::fmt::Debug for Prepared {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Prepared")
            .field("task", &self.task.name)
            .field("backend", &self.factory.describe())
            .field("train", &self.train.len())
            .field("unlabeled", &self.unlabeled.len())
            .finish()
    }
}

fn check_labels(task: &TaskConfig, data: &Dataset) -> Result<()> {
    if data.label_set.labels() != task.labels.as_slice() {
        return Err(PetError::Data(format!(
            "dataset {} has labels {:?}, task {} expects {:?}",
            data.name,
            data.label_set.labels(),
            task.name,
            task.labels
        )));
    }
    Ok(())
}

fn token_counts(inputs: &[TextInput], size: usize) -> Vec<u64> {
    let mut counts = vec![0u64; size];
    for t in inputs.iter().flat_map(|x| x.segments.iter().flatten()) {
        if let Some(c) = counts.get_mut(*t as usize) {
            *c += 1;
        }
    }
    counts
}

/// Builds the backend and encodes the data.
///
/// The toy vocabulary covers the labeled and unlabeled texts plus every
/// pattern and verbalizer word; the toy model is pretrained on the unlabeled
/// texts. Test words outside that vocabulary map to the unknown token.
pub fn prepare(
    task: &TaskConfig,
    config: &RunConfig,
    train: &Dataset,
    unlabeled: &Dataset,
    test: Option<&Dataset>,
) -> Result<Prepared> {
    task.validate()?;
    config.validate()?;
    for d in [Some(train), Some(unlabeled), test].into_iter().flatten() {
        check_labels(task, d)?;
    }
    let label_set = task.label_set()?;
    let (factory, tokenizer): (Box<dyn BackendFactory>, Box<dyn Tokenizer>) = match &config.backend {
        BackendSpec::Toy => {
            let literals = task.literal_words();
            let vocab = Vocabulary::build(
                train.texts().chain(unlabeled.texts()),
                literals.iter().map(String::as_str),
            );
            let pool: Vec<Vec<u32>> = unlabeled
                .encode(&vocab)?
                .into_iter()
                .map(|x| x.segments.concat())
                .collect();
            let factory = ToyFactory::build(vocab.clone(), &config.toy, &pool)?;
            (Box::new(factory), Box::new(vocab))
        }
        BackendSpec::External(e) => {
            let endpoint = Endpoint::parse(e)?;
            let probe = ExternalBackend::connect(&endpoint)?;
            (Box::new(ExternalFactory { endpoint }), Box::new(probe))
        }
    };
    let pvps = task
        .build_pvps()?
        .iter()
        .map(|p| p.compile(tokenizer.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let train_inputs = train.encode(tokenizer.as_ref())?;
    let unlabeled_inputs = unlabeled.encode(tokenizer.as_ref())?;
    let test_inputs = test.map(|d| d.encode(tokenizer.as_ref())).transpose()?;
    let probe = factory.create()?;
    let vocab = probe.vocabulary().cloned().map(|mut v| {
        let counts = token_counts(&unlabeled_inputs, v.len());
        v.set_frequencies(counts).expect("one count per token");
        v
    });
    Ok(Prepared {
        task: task.clone(),
        label_set,
        pvps,
        factory,
        train: train_inputs,
        unlabeled: unlabeled_inputs.iter().map(TextInput::unlabeled).collect(),
        test: test_inputs,
        vocab,
    })
}

/// Accuracy and macro-F1 of predictions on a labeled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub accuracy: f64,
    pub macro_f1: f64,
}

impl Score {
    pub fn of(pred: &[usize], gold: &[usize], f1_labels: &[usize]) -> Result<Score> {
        Ok(Score {
            accuracy: accuracy(pred, gold)?,
            macro_f1: macro_f1(pred, gold, f1_labels)?,
        })
    }
}

impl Prepared {
    fn score(&self, pred: &[usize], eval: &[TextInput]) -> Result<Score> {
        let gold = crate::training::gold_labels(eval)?;
        Score::of(pred, &gold, &self.task.f1_label_indices()?)
    }

    pub fn score_pvp_model(&self, model: &TrainedPvpModel, eval: &[TextInput], max_seq_length: usize) -> Result<Score> {
        let pred = predict_pvp(model.backend.as_ref(), &model.pvp, eval, max_seq_length)?;
        self.score(&pred, eval)
    }

    pub fn score_classifier(&self, classifier: &dyn MlmBackend, eval: &[TextInput], max_seq_length: usize) -> Result<Score> {
        let pred = classifier_predict(classifier, eval, max_seq_length)?;
        self.score(&pred, eval)
    }
}

/// Soft-labeling and the final classifier.
pub struct Distilled {
    pub soft: Vec<SoftLabeledExample>,
    pub classifier: Box<dyn MlmBackend>,
    pub score: Option<Score>,
}

pub struct PetOutcome {
    pub models: Vec<TrainedPvpModel>,
    /// Per-model test scores, in model order.
    pub model_scores: Vec<Score>,
    pub distilled: Distilled,
}

pub fn distill(p: &Prepared, config: &RunConfig, models: &[TrainedPvpModel]) -> Result<Distilled> {
    let weights = compute_weights(models, config.ensemble.weighting)?;
    let mut pool = p.unlabeled.clone();
    if config.ensemble.include_train {
        pool.extend(p.train.iter().map(TextInput::unlabeled));
    }
    let soft = build_soft_dataset(models, &weights, &pool, &config.ensemble)?;
    let classifier = train_final_classifier(&soft, p.factory.as_ref(), &config.classifier)?;
    let score = p
        .test
        .as_deref()
        .map(|t| p.score_classifier(classifier.as_ref(), t, config.classifier.max_seq_length))
        .transpose()?;
    Ok(Distilled { soft, classifier, score })
}

fn score_models(p: &Prepared, models: &[TrainedPvpModel], max_seq_length: usize) -> Result<Vec<Score>> {
    match &p.test {
        Some(t) => models.iter().map(|m| p.score_pvp_model(m, t, max_seq_length)).collect(),
        None => Ok(Vec::new()),
    }
}

/// Finetunes every PVP, labels the unlabeled set with the ensemble and
/// trains the final classifier.
pub fn run_pet(p: &Prepared, config: &RunConfig, jobs: usize) -> Result<PetOutcome> {
    let models = train_model_set(
        &p.pvps,
        config.repetitions,
        &p.train,
        &p.unlabeled,
        &config.train,
        p.factory.as_ref(),
        jobs,
    )?;
    let model_scores = score_models(p, &models, config.train.max_seq_length)?;
    let distilled = distill(p, config, &models)?;
    Ok(PetOutcome {
        models,
        model_scores,
        distilled,
    })
}

pub struct SupervisedOutcome {
    pub classifier: Box<dyn MlmBackend>,
    pub score: Option<Score>,
}

/// The baseline: a classification head trained on the labeled set only.
pub fn run_supervised(p: &Prepared, config: &RunConfig) -> Result<SupervisedOutcome> {
    let classifier = train_supervised(&p.train, p.label_set.len(), p.factory.as_ref(), &config.supervised)?;
    let score = p
        .test
        .as_deref()
        .map(|t| p.score_classifier(classifier.as_ref(), t, config.supervised.max_seq_length))
        .transpose()?;
    Ok(SupervisedOutcome { classifier, score })
}

pub struct IpetPipelineOutcome {
    pub models: Vec<TrainedPvpModel>,
    pub model_scores: Vec<Score>,
    pub generations: Vec<GenerationReport>,
    pub distilled: Distilled,
}

/// iPET generations followed by distillation of the last generation.
pub fn run_ipet_pipeline(
    p: &Prepared,
    config: &RunConfig,
    jobs: usize,
    run_dir: Option<&Path>,
    resume: bool,
) -> Result<IpetPipelineOutcome> {
    let inputs = IpetInputs {
        pvps: &p.pvps,
        repetitions: config.repetitions,
        train: &p.train,
        unlabeled: &p.unlabeled,
        eval: p.test.as_deref(),
        train_config: &config.train,
        factory: p.factory.as_ref(),
        jobs,
        run_dir,
        resume,
    };
    let outcome = run_ipet(&inputs, &config.ipet)?;
    let model_scores = score_models(p, &outcome.models, config.train.max_seq_length)?;
    let distilled = distill(p, config, &outcome.models)?;
    Ok(IpetPipelineOutcome {
        models: outcome.models,
        model_scores,
        generations: outcome.reports,
        distilled,
    })
}

/// Verbalizer search with the task's patterns on the labeled set.
pub fn run_avs(p: &Prepared, config: &RunConfig) -> Result<AvsOutcome> {
    let vocab = p
        .vocab
        .as_ref()
        .ok_or_else(|| PetError::Config("verbalizer search needs a backend that lists its vocabulary".into()))?;
    let frequencies = vocab.frequencies().expect("prepare sets frequencies");
    let backend = p.factory.create()?;
    let mut patterns = Vec::new();
    for pvp in &p.pvps {
        if !patterns.contains(&pvp.pattern) {
            patterns.push(pvp.pattern.clone());
        }
    }
    search_verbalizer(
        backend.as_ref(),
        vocab,
        frequencies,
        &patterns,
        &p.train,
        &p.label_set,
        &config.avs,
    )
}

/// Mean of a score field over models.
pub fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}
