//! Run directories: every command writes
//!
//! ```text
//! <out>/manifest.json      command, task, resolved config, input hashes
//! <out>/models/            vocabulary, trained models, soft labels
//! <out>/generations/       iPET generations (gen-0, gen-1, ...)
//! <out>/reports/           metrics.json, optional metrics.csv, train logs
//! ```
//!
//! `rerun` re-executes a manifest into a new directory and compares the
//! metrics report byte for byte.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::avs::AvsReport;
use crate::backend::external::{Endpoint, ExternalFactory};
use crate::backend::toy::ToyFactory;
use crate::backend::{BackendFactory, MlmBackend, ToyMlm, ToyMlmParams};
use crate::data::Dataset;
use crate::ensemble::{build_soft_dataset, compute_weights, read_soft_dataset, train_final_classifier, write_soft_dataset};
use crate::error::{PetError, Result};
use crate::ipet::GenerationReport;
use crate::pipeline::{
    mean, prepare, run_avs, run_ipet_pipeline, run_pet, run_supervised, BackendSpec, Prepared, RunConfig,
    Score,
};
use crate::pvp::TextInput;
use crate::task::TaskConfig;
use crate::training::{load_model, save_model, write_train_log, TrainedPvpModel};
use crate::vocab::{Tokenizer, Vocabulary};

pub const MANIFEST: &str = "manifest.json";
pub const METRICS: &str = "reports/metrics.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    pub unlabeled: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
}

/// What a run does, with every input path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    Pet {
        data: DataPaths,
    },
    Ipet {
        data: DataPaths,
        #[serde(default)]
        resume: bool,
    },
    Supervised {
        data: DataPaths,
    },
    Avs {
        data: DataPaths,
    },
    /// Scores a saved model of another run on a labeled file.
    Eval {
        run: PathBuf,
        data: PathBuf,
        model: String,
    },
    /// Soft-labels a file with the PVP models of another run.
    Label {
        run: PathBuf,
        unlabeled: PathBuf,
    },
    /// Trains a classifier on a soft-labeled file, with the backend of
    /// another run.
    Distill {
        run: PathBuf,
        soft: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Pet { .. } => "pet",
            Command::Ipet { .. } => "ipet",
            Command::Supervised { .. } => "supervised",
            Command::Avs { .. } => "avs",
            Command::Eval { .. } => "eval",
            Command::Label { .. } => "label",
            Command::Distill { .. } => "distill",
        }
    }

    fn input_paths(&self) -> Vec<&Path> {
        fn data(d: &DataPaths) -> Vec<&Path> {
            let mut v = vec![d.train.as_path(), d.unlabeled.as_path()];
            v.extend(d.test.as_deref());
            v
        }
        match self {
            Command::Pet { data: d }
            | Command::Ipet { data: d, .. }
            | Command::Supervised { data: d }
            | Command::Avs { data: d } => data(d),
            Command::Eval { data, .. } => vec![data.as_path()],
            Command::Label { unlabeled, .. } => vec![unlabeled.as_path()],
            Command::Distill { soft, test, .. } => {
                let mut v = vec![soft.as_path()];
                v.extend(test.as_deref());
                v
            }
        }
    }

    fn absolutize(&mut self) -> Result<()> {
        let abs = |p: &mut PathBuf| -> Result<()> {
            *p = std::fs::canonicalize(&*p)
                .map_err(|e| PetError::Config(format!("input {} is not readable: {e}", p.display())))?;
            Ok(())
        };
        let data = |d: &mut DataPaths| -> Result<()> {
            abs(&mut d.train)?;
            abs(&mut d.unlabeled)?;
            d.test.as_mut().map(abs).transpose()?;
            Ok(())
        };
        match self {
            Command::Pet { data: d }
            | Command::Ipet { data: d, .. }
            | Command::Supervised { data: d }
            | Command::Avs { data: d } => data(d),
            Command::Eval { run, data, .. } => {
                abs(run)?;
                abs(data)
            }
            Command::Label { run, unlabeled } => {
                abs(run)?;
                abs(unlabeled)
            }
            Command::Distill { run, soft, test } => {
                abs(run)?;
                abs(soft)?;
                test.as_mut().map(abs).transpose()?;
                Ok(())
            }
        }
    }
}

/// Everything needed to re-execute a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub command: Command,
    pub task: TaskConfig,
    pub config: RunConfig,
    /// SHA-256 of every input file, by path.
    pub inputs: BTreeMap<PathBuf, String>,
    /// Parallelism used; results do not depend on it.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    /// `pvp`, `pvp-mean`, `final`, `supervised`, `generation-<j>`, `eval`.
    pub stage: String,
    pub model: String,
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    /// Total loss of the last training step, when the row is a trained model.
    pub final_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub command: String,
    pub task: String,
    pub rows: Vec<MetricRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generations: Vec<GenerationReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbalizer: Option<AvsReport>,
}

impl MetricsReport {
    pub fn row(&self, stage: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.stage == stage)
    }

    pub fn to_csv(&self) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("stage,model,accuracy,macro_f1,final_loss\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.stage,
                r.model,
                opt(r.accuracy),
                opt(r.macro_f1),
                opt(r.final_loss)
            ));
        }
        out
    }
}

fn row(stage: &str, model: &str, score: Option<Score>, final_loss: Option<f64>) -> MetricRow {
    MetricRow {
        stage: stage.into(),
        model: model.into(),
        accuracy: score.map(|s| s.accuracy),
        macro_f1: score.map(|s| s.macro_f1),
        final_loss,
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| PetError::io(format!("opening {}", path.display()), e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| PetError::io(format!("reading {}", path.display()), e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| PetError::io(format!("creating {}", path.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    std::fs::write(path, text + "\n").map_err(|e| PetError::io(format!("writing {}", path.display()), e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| PetError::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| PetError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn read_manifest(run_dir: &Path) -> Result<Manifest> {
    read_json(&run_dir.join(MANIFEST))
}

pub fn read_metrics(run_dir: &Path) -> Result<MetricsReport> {
    read_json(&run_dir.join(METRICS))
}

/// Options that shape output but not results.
#[derive(Debug, Clone, Default)]
pub struct OutputOptions {
    pub csv: bool,
}

/// Validates inputs, writes the manifest and executes the command.
pub fn execute(
    mut command: Command,
    task: TaskConfig,
    config: RunConfig,
    out: &Path,
    jobs: usize,
    options: &OutputOptions,
) -> Result<MetricsReport> {
    task.validate()?;
    config.validate()?;
    command.absolutize()?;
    let mut inputs = BTreeMap::new();
    for p in command.input_paths() {
        inputs.insert(p.to_path_buf(), sha256_file(p)?);
    }
    let manifest = Manifest {
        format: 1,
        command,
        task,
        config,
        inputs,
        jobs: jobs.max(1),
    };
    run_manifest(&manifest, out, options)
}

/// Executes a manifest into `out`, writing the manifest first.
pub fn run_manifest(manifest: &Manifest, out: &Path, options: &OutputOptions) -> Result<MetricsReport> {
    for sub in ["models", "generations", "reports"] {
        create_dir(&out.join(sub))?;
    }
    write_json(&out.join(MANIFEST), manifest)?;
    let report = dispatch(manifest, out)?;
    write_json(&out.join(METRICS), &report)?;
    if options.csv {
        std::fs::write(out.join("reports/metrics.csv"), report.to_csv())
            .map_err(|e| PetError::io("writing metrics.csv", e))?;
    }
    Ok(report)
}

/// Re-executes the run in `run_dir` into `out` and checks that the metrics
/// report is byte-identical.
pub fn rerun(run_dir: &Path, out: &Path, options: &OutputOptions) -> Result<MetricsReport> {
    let manifest = read_manifest(run_dir)?;
    for (path, hash) in &manifest.inputs {
        let now = sha256_file(path)?;
        if &now != hash {
            return Err(PetError::Data(format!("input {} changed since the original run", path.display())));
        }
    }
    let mut manifest = manifest;
    if let Command::Ipet { resume, .. } = &mut manifest.command {
        *resume = false;
    }
    let report = run_manifest(&manifest, out, options)?;
    let before = std::fs::read(run_dir.join(METRICS)).map_err(|e| PetError::io("reading original metrics", e))?;
    let after = std::fs::read(out.join(METRICS)).map_err(|e| PetError::io("reading rerun metrics", e))?;
    if before != after {
        return Err(PetError::Data(format!(
            "rerun metrics differ from {}",
            run_dir.join(METRICS).display()
        )));
    }
    Ok(report)
}

fn load_data(task: &TaskConfig, d: &DataPaths) -> Result<(Dataset, Dataset, Option<Dataset>)> {
    let labels = task.label_set()?;
    let train = Dataset::load_jsonl(&d.train, &labels)?;
    let unlabeled = Dataset::load_jsonl(&d.unlabeled, &labels)?.without_labels();
    let test = d.test.as_deref().map(|p| Dataset::load_jsonl(p, &labels)).transpose()?;
    Ok((train, unlabeled, test))
}

fn save_vocab(p: &Prepared, out: &Path) -> Result<()> {
    match &p.vocab {
        Some(v) => write_json(&out.join("models/vocab.json"), v),
        None => Ok(()),
    }
}

/// A factory that restores into the backend of a finished run.
fn saved_factory(config: &RunConfig, run: &Path) -> Result<Box<dyn BackendFactory>> {
    match &config.backend {
        BackendSpec::Toy => {
            let vocab: Vocabulary = read_json(&run.join("models/vocab.json"))?;
            let params = ToyMlmParams::zeros(vocab.len(), config.toy.dim, config.toy.window);
            Ok(Box::new(ToyFactory {
                initial: ToyMlm::new(vocab, params)?,
            }))
        }
        BackendSpec::External(e) => Ok(Box::new(ExternalFactory {
            endpoint: Endpoint::parse(e)?,
        })),
    }
}

fn save_models(models: &mut [TrainedPvpModel], dir: &Path, out: &Path) -> Result<()> {
    for m in models.iter_mut() {
        save_model(m, &dir.join(format!("{}.json", m.name())))?;
        write_train_log(&out.join(format!("reports/train-{}.jsonl", m.name())), &m.train_log)?;
    }
    Ok(())
}

fn save_classifier(backend: &mut dyn MlmBackend, path: &Path) -> Result<()> {
    write_json(path, &backend.snapshot()?)
}

fn pvp_rows(models: &[TrainedPvpModel], scores: &[Score]) -> Vec<MetricRow> {
    let mut rows: Vec<MetricRow> = models
        .iter()
        .enumerate()
        .map(|(i, m)| row("pvp", &m.name(), scores.get(i).copied(), m.train_log.last().map(|l| l.l_total)))
        .collect();
    if !scores.is_empty() {
        rows.push(MetricRow {
            stage: "pvp-mean".into(),
            model: "all".into(),
            accuracy: Some(mean(scores.iter().map(|s| s.accuracy))),
            macro_f1: Some(mean(scores.iter().map(|s| s.macro_f1))),
            final_loss: None,
        });
    }
    rows
}

fn report(manifest: &Manifest, rows: Vec<MetricRow>) -> MetricsReport {
    MetricsReport {
        command: manifest.command.name().into(),
        task: manifest.task.name.clone(),
        rows,
        generations: Vec::new(),
        verbalizer: None,
    }
}

fn dispatch(manifest: &Manifest, out: &Path) -> Result<MetricsReport> {
    let task = &manifest.task;
    let config = &manifest.config;
    let jobs = manifest.jobs;
    match &manifest.command {
        Command::Pet { data } => {
            let (train, unlabeled, test) = load_data(task, data)?;
            let p = prepare(task, config, &train, &unlabeled, test.as_ref())?;
            save_vocab(&p, out)?;
            let mut outcome = run_pet(&p, config, jobs)?;
            save_models(&mut outcome.models, &out.join("models"), out)?;
            write_soft_dataset(&out.join("models/soft_labels.jsonl"), &outcome.distilled.soft)?;
            save_classifier(outcome.distilled.classifier.as_mut(), &out.join("models/classifier.json"))?;
            let mut rows = pvp_rows(&outcome.models, &outcome.model_scores);
            rows.push(row("final", "classifier", outcome.distilled.score, None));
            Ok(report(manifest, rows))
        }
        Command::Ipet { data, resume } => {
            let (train, unlabeled, test) = load_data(task, data)?;
            let p = prepare(task, config, &train, &unlabeled, test.as_ref())?;
            save_vocab(&p, out)?;
            let mut outcome = run_ipet_pipeline(&p, config, jobs, Some(out), *resume)?;
            save_models(&mut outcome.models, &out.join("models"), out)?;
            write_soft_dataset(&out.join("models/soft_labels.jsonl"), &outcome.distilled.soft)?;
            save_classifier(outcome.distilled.classifier.as_mut(), &out.join("models/classifier.json"))?;
            let mut rows: Vec<MetricRow> = outcome
                .generations
                .iter()
                .map(|g| MetricRow {
                    stage: format!("generation-{}", g.generation),
                    model: "all".into(),
                    accuracy: g.mean_accuracy,
                    macro_f1: None,
                    final_loss: None,
                })
                .collect();
            rows.extend(pvp_rows(&outcome.models, &outcome.model_scores));
            rows.push(row("final", "classifier", outcome.distilled.score, None));
            let mut r = report(manifest, rows);
            r.generations = outcome.generations;
            Ok(r)
        }
        Command::Supervised { data } => {
            let (train, unlabeled, test) = load_data(task, data)?;
            let p = prepare(task, config, &train, &unlabeled, test.as_ref())?;
            save_vocab(&p, out)?;
            let mut outcome = run_supervised(&p, config)?;
            save_classifier(outcome.classifier.as_mut(), &out.join("models/supervised.json"))?;
            Ok(report(manifest, vec![row("supervised", "classifier", outcome.score, None)]))
        }
        Command::Avs { data } => {
            let (train, unlabeled, test) = load_data(task, data)?;
            let p = prepare(task, config, &train, &unlabeled, test.as_ref())?;
            save_vocab(&p, out)?;
            let outcome = run_avs(&p, config)?;
            let words = outcome.verbalizer.words().to_vec();
            let searched = task.with_verbalizer(&words)?;
            std::fs::write(
                out.join("reports/avs_task.toml"),
                toml::to_string(&searched).expect("task configs serialize"),
            )
            .map_err(|e| PetError::io("writing avs_task.toml", e))?;
            std::fs::write(out.join("reports/avs.txt"), format!("{}\n", outcome.report))
                .map_err(|e| PetError::io("writing avs.txt", e))?;
            let mut r = report(manifest, Vec::new());
            r.verbalizer = Some(outcome.report);
            Ok(r)
        }
        Command::Eval { run, data, model } => {
            let source = read_manifest(run)?;
            let factory = saved_factory(&source.config, run)?;
            let labels = source.task.label_set()?;
            let dataset = Dataset::load_jsonl(data, &labels)?;
            let probe = factory.create()?;
            let inputs = dataset.encode(probe.tokenizer())?;
            let f1 = source.task.f1_label_indices()?;
            let gold = crate::training::gold_labels(&inputs)?;
            let pred = if model == "classifier" || model == "supervised" {
                let c = SavedClassifier::load(run, model)?;
                crate::ensemble::classifier_predict(c.backend.as_ref(), &inputs, c.max_seq_length)?
            } else {
                let m = load_named_model(&source, run, factory.as_ref(), model)?;
                crate::training::predict_pvp(m.backend.as_ref(), &m.pvp, &inputs, source.config.train.max_seq_length)?
            };
            let score = Score::of(&pred, &gold, &f1)?;
            Ok(report(manifest, vec![row("eval", model, Some(score), None)]))
        }
        Command::Label { run, unlabeled } => {
            let source = read_manifest(run)?;
            let factory = saved_factory(&source.config, run)?;
            let models = load_run_models(&source, run, factory.as_ref())?;
            let labels = source.task.label_set()?;
            let probe = factory.create()?;
            let inputs: Vec<TextInput> = Dataset::load_jsonl(unlabeled, &labels)?
                .encode(probe.tokenizer())?
                .iter()
                .map(TextInput::unlabeled)
                .collect();
            let weights = compute_weights(&models, source.config.ensemble.weighting)?;
            let soft = build_soft_dataset(&models, &weights, &inputs, &source.config.ensemble)?;
            write_soft_dataset(&out.join("models/soft_labels.jsonl"), &soft)?;
            copy_vocab(run, out)?;
            Ok(report(manifest, Vec::new()))
        }
        Command::Distill { run, soft, test } => {
            let source = read_manifest(run)?;
            let factory = saved_factory(&source.config, run)?;
            let soft = read_soft_dataset(soft)?;
            let mut classifier = train_final_classifier(&soft, factory.as_ref(), &config.classifier)?;
            save_classifier(classifier.as_mut(), &out.join("models/classifier.json"))?;
            copy_vocab(run, out)?;
            let score = match test {
                Some(path) => {
                    let labels = source.task.label_set()?;
                    let inputs = Dataset::load_jsonl(path, &labels)?.encode(classifier.tokenizer())?;
                    let gold = crate::training::gold_labels(&inputs)?;
                    let pred =
                        crate::ensemble::classifier_predict(classifier.as_ref(), &inputs, config.classifier.max_seq_length)?;
                    Some(Score::of(&pred, &gold, &source.task.f1_label_indices()?)?)
                }
                None => None,
            };
            Ok(report(manifest, vec![row("final", "classifier", score, None)]))
        }
    }
}

fn copy_vocab(run: &Path, out: &Path) -> Result<()> {
    let from = run.join("models/vocab.json");
    if from.exists() {
        std::fs::copy(&from, out.join("models/vocab.json")).map_err(|e| PetError::io("copying vocabulary", e))?;
    }
    Ok(())
}

fn compiled_pvps(task: &TaskConfig, tokenizer: &dyn Tokenizer) -> Result<Vec<crate::pvp::CompiledPvp>> {
    task.build_pvps()?.iter().map(|p| p.compile(tokenizer)).collect()
}

/// The PVP models a run saved under `models/`, in PVP-major order.
pub fn load_run_models(source: &Manifest, run: &Path, factory: &dyn BackendFactory) -> Result<Vec<TrainedPvpModel>> {
    let probe = factory.create()?;
    let pvps = compiled_pvps(&source.task, probe.tokenizer())?;
    let mut models = Vec::new();
    for pvp in &pvps {
        for r in 0..source.config.repetitions {
            models.push(load_model(&run.join(format!("models/{}-r{r}.json", pvp.id)), pvp, factory)?);
        }
    }
    Ok(models)
}

fn load_named_model(source: &Manifest, run: &Path, factory: &dyn BackendFactory, name: &str) -> Result<TrainedPvpModel> {
    let probe = factory.create()?;
    let pvps = compiled_pvps(&source.task, probe.tokenizer())?;
    let (id, _) = name
        .rsplit_once("-r")
        .ok_or_else(|| PetError::Config(format!("model {name:?} is not classifier, supervised or <pvp>-r<rep>")))?;
    let pvp = pvps
        .iter()
        .find(|p| p.id == id)
        .ok_or_else(|| PetError::Config(format!("run has no PVP {id:?}")))?;
    load_model(&run.join(format!("models/{name}.json")), pvp, factory)
}

/// The final or supervised classifier of a finished run.
pub struct SavedClassifier {
    pub task: TaskConfig,
    backend: Box<dyn MlmBackend>,
    max_seq_length: usize,
}

impl SavedClassifier {
    /// `name` is `classifier` or `supervised`.
    pub fn load(run: &Path, name: &str) -> Result<Self> {
        if name != "classifier" && name != "supervised" {
            return Err(PetError::Config(format!("{name:?} is not classifier or supervised")));
        }
        let source = read_manifest(run)?;
        let path = run.join(format!("models/{name}.json"));
        if !path.exists() {
            return Err(PetError::Config(format!("run {} has no {name}", run.display())));
        }
        let mut backend = saved_factory(&source.config, run)?.create()?;
        backend.restore(&read_json(&path)?)?;
        Ok(SavedClassifier {
            task: source.task,
            backend,
            max_seq_length: source.config.classifier.max_seq_length,
        })
    }

    /// Label probabilities for one input, given as its text segments.
    pub fn predict(&self, segments: &[&str]) -> Result<Vec<f64>> {
        if segments.len() != self.task.arity {
            return Err(PetError::Data(format!(
                "task {} takes {} segments, got {}",
                self.task.name,
                self.task.arity,
                segments.len()
            )));
        }
        let tok = self.backend.tokenizer();
        let encoded = segments
            .iter()
            .map(|s| tok.encode(&crate::data::preprocess(s)))
            .collect::<Result<Vec<_>>>()?;
        let input = TextInput::new(encoded, None)?;
        self.backend
            .classify(&crate::ensemble::classifier_tokens(&input, tok, self.max_seq_length))
    }
}

/// Writes train/unlabeled/test JSONL files for a synthetic task.
pub fn write_synthetic(
    spec: &crate::synthetic::SyntheticTaskSpec,
    n_train: usize,
    n_unlabeled: usize,
    n_test: usize,
    out: &Path,
) -> Result<()> {
    let task = crate::synthetic::generate_synthetic_task(spec, n_train, n_unlabeled, n_test)?;
    create_dir(out)?;
    task.train.dataset.save_jsonl(&out.join("train.jsonl"))?;
    task.unlabeled.dataset.save_jsonl(&out.join("unlabeled.jsonl"))?;
    task.test.dataset.save_jsonl(&out.join("test.jsonl"))?;
    let bayes = crate::data::accuracy(&task.test.bayes, &task.test.gold).ok();
    write_json(
        &out.join("spec.json"),
        &serde_json::json!({ "spec": spec, "test_bayes_accuracy": bayes }),
    )
}
