//! Dataset loading, preprocessing, few-shot splits and metrics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PetError, Result};
use crate::pvp::{LabelSet, TextInput};
use crate::vocab::Tokenizer;

/// One raw example: text segments plus an optional label name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawExample {
    pub segments: Vec<String>,
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub label_set: LabelSet,
    pub examples: Vec<RawExample>,
}

/// Replaces the two-character sequence `\n` with a single space.
pub fn preprocess(text: &str) -> String {
    text.replace("\\n", " ")
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonlRecord {
    text_a: String,
    #[serde(default)]
    text_b: Option<String>,
    #[serde(default)]
    label: Option<serde_json::Value>,
}

fn label_string(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::Null => None,
        serde_json::Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

impl Dataset {
    pub fn new(name: impl Into<String>, label_set: LabelSet, examples: Vec<RawExample>) -> Result<Self> {
        for ex in &examples {
            if let Some(l) = &ex.label {
                label_set.index_of(l)?;
            }
            if ex.segments.is_empty() {
                return Err(PetError::Data("example without text".into()));
            }
        }
        Ok(Dataset {
            name: name.into(),
            label_set,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Reads `{"text_a": ..., "text_b": ..., "label": ...}` records, one per line.
    pub fn load_jsonl(path: &Path, label_set: &LabelSet) -> Result<Self> {
        let file = File::open(path).map_err(|e| PetError::io(format!("opening {}", path.display()), e))?;
        let mut examples = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| PetError::io(format!("reading {}", path.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| PetError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message,
            };
            let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let mut segments = vec![preprocess(&rec.text_a)];
            if let Some(b) = rec.text_b {
                segments.push(preprocess(&b));
            }
            let label = rec.label.as_ref().and_then(label_string);
            if let Some(l) = &label {
                label_set.index_of(l).map_err(|_| parse_err(format!("unknown label {l:?}")))?;
            }
            examples.push(RawExample { segments, label });
        }
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(Dataset {
            name,
            label_set: label_set.clone(),
            examples,
        })
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| PetError::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        for ex in &self.examples {
            let mut rec = serde_json::Map::new();
            rec.insert("text_a".into(), ex.segments[0].clone().into());
            if let Some(b) = ex.segments.get(1) {
                rec.insert("text_b".into(), b.clone().into());
            }
            if let Some(l) = &ex.label {
                rec.insert("label".into(), l.clone().into());
            }
            serde_json::to_writer(&mut w, &rec).expect("map of strings");
            w.write_all(b"\n").map_err(|e| PetError::io("writing dataset", e))?;
        }
        w.flush().map_err(|e| PetError::io("writing dataset", e))
    }

    pub fn label_indices(&self) -> Result<Vec<Option<usize>>> {
        self.examples
            .iter()
            .map(|e| e.label.as_deref().map(|l| self.label_set.index_of(l)).transpose())
            .collect()
    }

    /// Gold label indices; fails if any example is unlabeled.
    pub fn gold(&self) -> Result<Vec<usize>> {
        self.label_indices()?
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| PetError::Data(format!("example {i} of {} is unlabeled", self.name))))
            .collect()
    }

    pub fn encode(&self, tokenizer: &dyn Tokenizer) -> Result<Vec<TextInput>> {
        let labels = self.label_indices()?;
        self.examples
            .iter()
            .zip(labels)
            .map(|(ex, label)| {
                let segments = ex
                    .segments
                    .iter()
                    .map(|s| tokenizer.encode(s))
                    .collect::<Result<Vec<_>>>()?;
                TextInput::new(segments, label)
            })
            .collect()
    }

    pub fn without_labels(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            label_set: self.label_set.clone(),
            examples: self
                .examples
                .iter()
                .map(|e| RawExample {
                    segments: e.segments.clone(),
                    label: None,
                })
                .collect(),
        }
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().flat_map(|e| e.segments.iter().map(String::as_str))
    }
}

/// Few-shot construction: the labeled set takes the first `t / |L|` examples
/// of every label in file order; the unlabeled set takes the next
/// `unlabeled_per_label` examples of every label, with labels removed.
pub fn build_few_shot_split(full: &Dataset, t: usize, unlabeled_per_label: usize) -> Result<(Dataset, Dataset)> {
    let n_labels = full.label_set.len();
    if !t.is_multiple_of(n_labels) {
        return Err(PetError::Config(format!(
            "training set size {t} is not divisible by {n_labels} labels"
        )));
    }
    let per_label = t / n_labels;
    let labels = full.gold()?;
    let mut taken = vec![0usize; n_labels];
    let mut train = Vec::new();
    let mut unlabeled = Vec::new();
    for (ex, &l) in full.examples.iter().zip(&labels) {
        let k = taken[l];
        if k < per_label {
            train.push(ex.clone());
        } else if k < per_label + unlabeled_per_label {
            unlabeled.push(RawExample {
                segments: ex.segments.clone(),
                label: None,
            });
        } else {
            continue;
        }
        taken[l] += 1;
    }
    for (l, &k) in taken.iter().enumerate() {
        let needed = per_label + unlabeled_per_label;
        if k < needed {
            return Err(PetError::InsufficientExamples {
                label: full.label_set.name(l).to_string(),
                available: k,
                needed,
            });
        }
    }
    Ok((
        Dataset {
            name: format!("{}-train{t}", full.name),
            label_set: full.label_set.clone(),
            examples: train,
        },
        Dataset {
            name: format!("{}-unlabeled", full.name),
            label_set: full.label_set.clone(),
            examples: unlabeled,
        },
    ))
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(PetError::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.is_empty() {
        return Err(PetError::Data("accuracy of an empty set".into()));
    }
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Mean per-label F1 over `labels`. A label that is neither predicted nor
/// present has F1 0.
pub fn macro_f1(pred: &[usize], gold: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(PetError::LengthMismatch(pred.len(), gold.len()));
    }
    if pred.is_empty() || labels.is_empty() {
        return Err(PetError::Data("macro-F1 of an empty set".into()));
    }
    let mut total = 0.0;
    for &l in labels {
        let tp = pred.iter().zip(gold).filter(|(p, g)| **p == l && **g == l).count() as f64;
        let fp = pred.iter().zip(gold).filter(|(p, g)| **p == l && **g != l).count() as f64;
        let fneg = pred.iter().zip(gold).filter(|(p, g)| **p != l && **g == l).count() as f64;
        let denom = 2.0 * tp + fp + fneg;
        total += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    Ok(total / labels.len() as f64)
}
