//! Iterative PET: generations of models trained on training sets grown with
//! labels from random subsets of the previous generation.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::BackendFactory;
use crate::error::{PetError, Result};
use crate::math::{self, derive_seed, rng_from_seed, Rng};
use crate::pvp::{CompiledPvp, TextInput};
use crate::training::{
    evaluate_pvp, finetune_pvp, gold_labels, load_model, pvp_label_scores, save_model, TrainConfig,
    TrainedPvpModel,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IpetConfig {
    pub lambda: f64,
    pub d: usize,
    pub target_examples: usize,
    pub zero_shot: bool,
    pub seed: u64,
    /// Generations to train, in increasing order. Each one is annotated by
    /// the previous entry's models, so `[1, 4]` jumps straight from the
    /// first generation to the fourth generation's sizes. Defaults to
    /// every generation up to the computed count.
    pub schedule: Option<Vec<usize>>,
    /// Size of the per-label candidate pool in zero-shot mode.
    pub zero_shot_pool: usize,
    /// Total first-generation size in zero-shot mode, split evenly over labels.
    pub zero_shot_examples: usize,
}

impl Default for IpetConfig {
    fn default() -> Self {
        IpetConfig {
            lambda: 0.25,
            d: 5,
            target_examples: 1000,
            zero_shot: false,
            seed: 42,
            schedule: None,
            zero_shot_pool: 100,
            zero_shot_examples: 10,
        }
    }
}

impl IpetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PetError::Config(m));
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad(format!("lambda {} outside (0, 1]", self.lambda));
        }
        if self.d < 1 {
            return bad("d must be at least 1".into());
        }
        if let Some(s) = &self.schedule {
            if s.is_empty() || s[0] == 0 || s.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("schedule {s:?} must be strictly increasing generation indices ≥ 1"));
            }
        }
        if self.zero_shot && (self.zero_shot_pool == 0 || self.zero_shot_examples == 0) {
            return bad("zero-shot pool and example counts must be positive".into());
        }
        Ok(())
    }

    pub fn zero_shot_per_label(&self, num_labels: usize) -> usize {
        self.zero_shot_examples.div_ceil(num_labels)
    }
}

/// Smallest `k` with `t · d^k ≥ target`; zero when `t ≥ target`.
pub fn num_generations(t: usize, target: usize, d: usize) -> Result<usize> {
    if t == 0 {
        return Err(PetError::EmptyTrainSet);
    }
    if t >= target {
        return Ok(0);
    }
    if d < 2 {
        return Err(PetError::Config("d must be at least 2 to reach the target size".into()));
    }
    let mut k = 0;
    let mut size = t as u128;
    while size < target as u128 {
        size *= d as u128;
        k += 1;
    }
    Ok(k)
}

/// `⌈λ (n − 1)⌉`, at least one.
pub fn annotator_count(n: usize, lambda: f64) -> usize {
    let raw = lambda * (n - 1) as f64;
    // guard against products like 0.25 * 4 landing a hair above an integer
    let rounded = raw.round();
    let c = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (c as usize).clamp(1, n - 1)
}

/// Distinct indices of `⌈λ (n − 1)⌉` models from `0..n`, never `exclude`,
/// sorted ascending.
pub fn select_annotators(n: usize, exclude: usize, lambda: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(PetError::TooFewModels(n));
    }
    let others: Vec<usize> = (0..n).filter(|&j| j != exclude).collect();
    let mut chosen: Vec<usize> = others
        .choose_multiple(rng, annotator_count(n, lambda))
        .copied()
        .collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Per-example label scores of one model over the unlabeled pool.
pub type ScoreMatrix = Vec<Vec<f64>>;

pub fn score_pool(models: &[TrainedPvpModel], pool: &[TextInput], max_seq_length: usize) -> Result<Vec<ScoreMatrix>> {
    models
        .iter()
        .map(|m| {
            pool.par_iter()
                .enumerate()
                .map(|(i, x)| {
                    pvp_label_scores(m.backend.as_ref(), &m.pvp, x, max_seq_length).map_err(|e| PetError::at_example(i, e))
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub label: usize,
    /// Softmax probability of `label` under the combined scores.
    pub confidence: f64,
    /// Combined scores `s_N(· | x)`.
    pub scores: Vec<f64>,
}

/// Labels every pool example with the argmax of the uniform mean of the
/// annotators' scores.
pub fn annotate_pool(annotators: &[&ScoreMatrix]) -> Result<Vec<Annotation>> {
    let first = annotators
        .first()
        .ok_or_else(|| PetError::Config("annotator set is empty".into()))?;
    let ones = vec![1.0; annotators.len()];
    (0..first.len())
        .map(|i| {
            let per: Vec<Vec<f64>> = annotators.iter().map(|m| m[i].clone()).collect();
            let scores = crate::ensemble::combine_scores(&per, &ones)?;
            let q = math::softmax(&scores);
            let label = math::argmax(&scores);
            Ok(Annotation {
                label,
                confidence: q[label],
                scores,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "from", content = "index", rename_all = "snake_case")]
pub enum Source {
    Train(usize),
    Pool(usize),
}

/// One example of a generation's training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationExample {
    #[serde(flatten)]
    pub source: Source,
    pub label: usize,
    /// Sampling weight for pool examples.
    pub confidence: Option<f64>,
}

fn label_counts(labels: impl IntoIterator<Item = usize>, n: usize) -> Vec<usize> {
    let mut c = vec![0; n];
    for l in labels {
        c[l] += 1;
    }
    c
}

/// Draws `amount` distinct items from `candidates` with probability
/// proportional to `weight`, one at a time without replacement.
fn weighted_draw(candidates: &[usize], weight: impl Fn(usize) -> f64, amount: usize, rng: &mut Rng) -> Vec<usize> {
    if amount >= candidates.len() {
        return candidates.to_vec();
    }
    candidates
        .choose_multiple_weighted(rng, amount, |&i| weight(i).max(f64::MIN_POSITIVE))
        .expect("weights are positive and finite")
        .copied()
        .collect()
}

/// Highest `s_N(l | ·)` first, index order on ties.
fn by_label_score(annotations: &[Annotation], l: usize, candidates: &mut [usize]) {
    candidates.sort_by(|&a, &b| {
        annotations[b].scores[l]
            .total_cmp(&annotations[a].scores[l])
            .then(a.cmp(&b))
    });
}

/// Builds `T ∪ ⋃_l T_N(l)` with exactly `targets[l]` examples of label `l`.
///
/// For every label, `targets[l] − c_0(l)` pool examples whose pseudo-label is
/// `l` are drawn without replacement with probability proportional to their
/// confidence. If there are too few, the rest come from the unused pool
/// examples with the highest `s_N(l | x)`, regardless of their argmax.
pub fn grow_training_set(
    train_labels: &[usize],
    annotations: &[Annotation],
    targets: &[usize],
    rng: &mut Rng,
) -> Result<Vec<GenerationExample>> {
    let n_labels = targets.len();
    let c0 = label_counts(train_labels.iter().copied(), n_labels);
    let mut out: Vec<GenerationExample> = train_labels
        .iter()
        .enumerate()
        .map(|(i, &label)| GenerationExample {
            source: Source::Train(i),
            label,
            confidence: None,
        })
        .collect();
    let mut used = vec![false; annotations.len()];
    for l in 0..n_labels {
        let need = targets[l].checked_sub(c0[l]).ok_or_else(|| {
            PetError::Config(format!("target {} for label {l} is below the labeled count {}", targets[l], c0[l]))
        })?;
        if need == 0 {
            continue;
        }
        let argmax_l: Vec<usize> = (0..annotations.len())
            .filter(|&i| !used[i] && annotations[i].label == l)
            .collect();
        let mut drawn = weighted_draw(&argmax_l, |i| annotations[i].confidence, need, rng);
        if drawn.len() < need {
            let mut rest: Vec<usize> = (0..annotations.len())
                .filter(|&i| !used[i] && annotations[i].label != l)
                .collect();
            by_label_score(annotations, l, &mut rest);
            drawn.extend(rest.into_iter().take(need - drawn.len()));
        }
        if drawn.len() < need {
            return Err(PetError::InsufficientExamples {
                label: l.to_string(),
                available: drawn.len(),
                needed: need,
            });
        }
        for i in drawn {
            used[i] = true;
            out.push(GenerationExample {
                source: Source::Pool(i),
                label: l,
                confidence: Some(math::softmax(&annotations[i].scores)[l]),
            });
        }
    }
    Ok(out)
}

/// First-generation sets in zero-shot mode: for every label, `per_label`
/// examples drawn (weighted by `q_N(l | x)`) from the `pool_size` pool
/// examples with the highest `s_N(l | x)`, even where `l` is not the argmax.
pub fn bootstrap_zero_shot(
    annotations: &[Annotation],
    n_labels: usize,
    per_label: usize,
    pool_size: usize,
    rng: &mut Rng,
) -> Result<Vec<GenerationExample>> {
    if annotations.len() < pool_size {
        return Err(PetError::UnlabeledTooSmall(annotations.len()));
    }
    let mut used = vec![false; annotations.len()];
    let mut out = Vec::with_capacity(per_label * n_labels);
    for l in 0..n_labels {
        let mut all: Vec<usize> = (0..annotations.len()).collect();
        by_label_score(annotations, l, &mut all);
        let top: Vec<usize> = all.into_iter().take(pool_size).filter(|&i| !used[i]).collect();
        let prob = |i: usize| math::softmax(&annotations[i].scores)[l];
        let drawn = weighted_draw(&top, prob, per_label, rng);
        if drawn.len() < per_label {
            return Err(PetError::UnlabeledTooSmall(annotations.len()));
        }
        for i in drawn {
            used[i] = true;
            out.push(GenerationExample {
                source: Source::Pool(i),
                label: l,
                confidence: Some(prob(i)),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub generation: usize,
    /// Per-label counts of every model's training set.
    pub label_counts: Vec<usize>,
    pub size: usize,
    /// Per-model accuracy on the evaluation set.
    pub model_accuracy: Vec<f64>,
    pub mean_accuracy: Option<f64>,
}

/// Everything iPET needs besides its own config.
pub struct IpetInputs<'a> {
    pub pvps: &'a [CompiledPvp],
    pub repetitions: usize,
    pub train: &'a [TextInput],
    pub unlabeled: &'a [TextInput],
    pub eval: Option<&'a [TextInput]>,
    pub train_config: &'a TrainConfig,
    pub factory: &'a dyn BackendFactory,
    pub jobs: usize,
    /// Where generation artifacts go; with `resume`, completed generations
    /// found there are loaded instead of retrained.
    pub run_dir: Option<&'a Path>,
    pub resume: bool,
}

pub struct IpetOutcome {
    /// Models of the last generation.
    pub models: Vec<TrainedPvpModel>,
    pub reports: Vec<GenerationReport>,
}

fn generation_dir(run_dir: &Path, j: usize) -> PathBuf {
    run_dir.join("generations").join(format!("gen-{j}"))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| PetError::io(format!("creating {}", path.display()), e))?,
    );
    for r in rows {
        serde_json::to_writer(&mut f, &r).expect("records serialize");
        f.write_all(b"\n").map_err(|e| PetError::io(format!("writing {}", path.display()), e))?;
    }
    f.flush().map_err(|e| PetError::io(format!("writing {}", path.display()), e))
}

/// Model slots in PVP-major order.
fn slots(inputs: &IpetInputs) -> Vec<(usize, usize)> {
    (0..inputs.pvps.len())
        .flat_map(|p| (0..inputs.repetitions).map(move |r| (p, r)))
        .collect()
}

fn try_resume(inputs: &IpetInputs, j: usize) -> Result<Option<(Vec<TrainedPvpModel>, GenerationReport)>> {
    let Some(run_dir) = inputs.run_dir.filter(|_| inputs.resume) else {
        return Ok(None);
    };
    let dir = generation_dir(run_dir, j);
    let report_path = dir.join("report.json");
    if !report_path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&report_path).map_err(|e| PetError::io("reading generation report", e))?;
    let report: GenerationReport = serde_json::from_str(&text).map_err(|e| PetError::Parse {
        path: report_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let models = slots(inputs)
        .into_iter()
        .map(|(p, r)| {
            let pvp = &inputs.pvps[p];
            load_model(&dir.join(format!("{}-r{r}.json", pvp.id)), pvp, inputs.factory)
        })
        .collect::<Result<Vec<_>>>()?;
    log::info!("resumed generation {j} from {}", dir.display());
    Ok(Some((models, report)))
}

fn persist_generation(
    inputs: &IpetInputs,
    j: usize,
    models: &mut [TrainedPvpModel],
    datasets: &[Vec<GenerationExample>],
    report: &GenerationReport,
) -> Result<()> {
    let Some(run_dir) = inputs.run_dir else {
        return Ok(());
    };
    let dir = generation_dir(run_dir, j);
    std::fs::create_dir_all(&dir).map_err(|e| PetError::io(format!("creating {}", dir.display()), e))?;
    #[derive(Serialize)]
    struct Row<'a> {
        model: String,
        #[serde(flatten)]
        example: &'a GenerationExample,
    }
    let rows = models
        .iter()
        .zip(datasets)
        .flat_map(|(m, ds)| ds.iter().map(move |e| Row { model: m.name(), example: e }));
    write_jsonl(&dir.join("datasets.jsonl"), rows)?;
    for m in models.iter_mut() {
        save_model(m, &dir.join(format!("{}.json", m.name())))?;
    }
    // the report is written last and marks the generation complete
    let text = serde_json::to_string_pretty(report).expect("reports serialize");
    std::fs::write(dir.join("report.json"), text).map_err(|e| PetError::io("writing generation report", e))
}

fn evaluate(models: &[TrainedPvpModel], eval: Option<&[TextInput]>, max_len: usize) -> Result<(Vec<f64>, Option<f64>)> {
    let Some(eval) = eval else {
        return Ok((Vec::new(), None));
    };
    let acc = models
        .iter()
        .map(|m| evaluate_pvp(m.backend.as_ref(), &m.pvp, eval, max_len))
        .collect::<Result<Vec<_>>>()?;
    let mean = acc.iter().sum::<f64>() / acc.len().max(1) as f64;
    Ok((acc, Some(mean)))
}

fn untrained_models(inputs: &IpetInputs) -> Result<Vec<TrainedPvpModel>> {
    slots(inputs)
        .into_iter()
        .map(|(p, r)| {
            Ok(TrainedPvpModel {
                pvp: inputs.pvps[p].clone(),
                repetition: r,
                backend: inputs.factory.create()?,
                train_log: Vec::new(),
                seed: 0,
                initial_train_accuracy: None,
            })
        })
        .collect()
}

/// Runs generation 0 (plain PET, or untrained models in zero-shot mode) and
/// then every scheduled generation. Each generation trains fresh models from
/// the factory.
pub fn run_ipet(inputs: &IpetInputs, config: &IpetConfig) -> Result<IpetOutcome> {
    config.validate()?;
    inputs.train_config.validate()?;
    let n_labels = inputs
        .pvps
        .first()
        .ok_or_else(|| PetError::Config("no PVPs".into()))?
        .num_labels();
    let n_models = inputs.pvps.len() * inputs.repetitions;
    if n_models < 2 {
        return Err(PetError::TooFewModels(n_models));
    }
    let max_len = inputs.train_config.max_seq_length;
    let train_labels = gold_labels(inputs.train)?;
    let c0 = label_counts(train_labels.iter().copied(), n_labels);

    let (base, k) = if config.zero_shot {
        if !inputs.train.is_empty() {
            return Err(PetError::Config("zero-shot mode requires an empty labeled set".into()));
        }
        if inputs.unlabeled.len() < config.zero_shot_pool {
            return Err(PetError::UnlabeledTooSmall(inputs.unlabeled.len()));
        }
        let per = config.zero_shot_per_label(n_labels);
        let k = 1 + num_generations(per * n_labels, config.target_examples, config.d)?;
        (vec![per; n_labels], k)
    } else {
        (c0.clone(), num_generations(inputs.train.len(), config.target_examples, config.d)?)
    };
    // per-label size of generation j
    let targets_for = |j: usize| -> Vec<usize> {
        let power = if config.zero_shot { j - 1 } else { j };
        base.iter().map(|&c| c * config.d.pow(power as u32)).collect()
    };
    let schedule: Vec<usize> = config.schedule.clone().unwrap_or_else(|| (1..=k).collect());
    if let Some(&last) = schedule.last() {
        let grown: usize = targets_for(last).iter().sum::<usize>() - inputs.train.len();
        if grown > inputs.unlabeled.len() {
            return Err(PetError::InsufficientExamples {
                label: "*".into(),
                available: inputs.unlabeled.len(),
                needed: grown,
            });
        }
    }

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(inputs.jobs.max(1))
        .build()
        .map_err(|e| PetError::Config(e.to_string()))?;
    pool.install(|| {
        let mut reports = Vec::new();
        let mut models = match try_resume(inputs, 0)? {
            Some((m, r)) => {
                reports.push(r);
                m
            }
            None => {
                let mut models = if config.zero_shot {
                    untrained_models(inputs)?
                } else {
                    crate::training::train_model_set(
                        inputs.pvps,
                        inputs.repetitions,
                        inputs.train,
                        inputs.unlabeled,
                        inputs.train_config,
                        inputs.factory,
                        inputs.jobs,
                    )?
                };
                let (model_accuracy, mean_accuracy) = evaluate(&models, inputs.eval, max_len)?;
                let report = GenerationReport {
                    generation: 0,
                    label_counts: c0.clone(),
                    size: inputs.train.len(),
                    model_accuracy,
                    mean_accuracy,
                };
                let ds: Vec<Vec<GenerationExample>> = vec![Vec::new(); models.len()];
                if !config.zero_shot {
                    persist_generation(inputs, 0, &mut models, &ds, &report)?;
                }
                reports.push(report);
                models
            }
        };
        // weights stay tied to the untrained model's accuracy on the labeled set
        let initial_acc: Vec<Option<f64>> = models.iter().map(|m| m.initial_train_accuracy).collect();

        for (step, &j) in schedule.iter().enumerate() {
            if let Some((m, r)) = try_resume(inputs, j)? {
                models = m;
                reports.push(r);
                continue;
            }
            let matrices = score_pool(&models, inputs.unlabeled, max_len)?;
            let targets = targets_for(j);
            let datasets: Vec<Vec<GenerationExample>> = (0..n_models)
                .map(|i| {
                    let mut rng = rng_from_seed(derive_seed(config.seed, &["ipet", &j.to_string(), &i.to_string()]));
                    let chosen = select_annotators(n_models, i, config.lambda, &mut rng)?;
                    let refs: Vec<&ScoreMatrix> = chosen.iter().map(|&a| &matrices[a]).collect();
                    let ann = annotate_pool(&refs)?;
                    if config.zero_shot && step == 0 {
                        bootstrap_zero_shot(&ann, n_labels, targets[0], config.zero_shot_pool, &mut rng)
                    } else {
                        grow_training_set(&train_labels, &ann, &targets, &mut rng)
                    }
                })
                .collect::<Result<_>>()?;
            let gen_config = TrainConfig {
                seed: derive_seed(inputs.train_config.seed, &["generation", &j.to_string()]),
                ..inputs.train_config.clone()
            };
            let work: Vec<(usize, (usize, usize))> = slots(inputs).into_iter().enumerate().collect();
            let mut next: Vec<TrainedPvpModel> = work
                .par_iter()
                .map(|&(i, (p, r))| {
                    let set: Vec<TextInput> = datasets[i]
                        .iter()
                        .map(|e| {
                            let x = match e.source {
                                Source::Train(t) => &inputs.train[t],
                                Source::Pool(u) => &inputs.unlabeled[u],
                            };
                            TextInput {
                                segments: x.segments.clone(),
                                label: Some(e.label),
                            }
                        })
                        .collect();
                    let mut m = finetune_pvp(&inputs.pvps[p], r, &set, inputs.unlabeled, &gen_config, inputs.factory)?;
                    if !config.zero_shot {
                        m.initial_train_accuracy = initial_acc[i];
                    }
                    Ok(m)
                })
                .collect::<Result<_>>()?;
            let (model_accuracy, mean_accuracy) = evaluate(&next, inputs.eval, max_len)?;
            let report = GenerationReport {
                generation: j,
                label_counts: targets.clone(),
                size: targets.iter().sum(),
                model_accuracy,
                mean_accuracy,
            };
            persist_generation(inputs, j, &mut next, &datasets, &report)?;
            log::info!("generation {j}: {} examples per model, mean accuracy {:?}", report.size, report.mean_accuracy);
            reports.push(report);
            models = next;
        }
        Ok(IpetOutcome { models, reports })
    })
}
