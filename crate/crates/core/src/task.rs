//! Task files: label set, input arity and the PVP list.
//!
//! ```toml
//! name = "yelp"
//! labels = ["1", "2", "3", "4", "5"]
//! arity = 1
//!
//! [[pvp]]
//! id = "p1"
//! pattern = "It was {mask}. {0}"
//! verbalizer = { "1" = "terrible", "2" = "bad", "3" = "okay", "4" = "good", "5" = "great" }
//! ```
//!
//! A verbalizer entry may also be a list of words (multi-token verbalizer).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PetError, Result};
use crate::pvp::{LabelSet, Pattern, PatternElement, Pvp, Verbalizer};
use crate::vocab::split_words;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VerbalizerWords {
    One(String),
    Many(Vec<String>),
}

impl VerbalizerWords {
    fn to_vec(&self) -> Vec<String> {
        match self {
            VerbalizerWords::One(w) => vec![w.clone()],
            VerbalizerWords::Many(ws) => ws.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PvpSpec {
    pub id: String,
    pub pattern: Pattern,
    pub verbalizer: BTreeMap<String, VerbalizerWords>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    pub name: String,
    pub labels: Vec<String>,
    #[serde(default = "one")]
    pub arity: usize,
    /// Labels averaged by macro-F1; all labels when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1_labels: Option<Vec<String>>,
    #[serde(rename = "pvp")]
    pub pvps: Vec<PvpSpec>,
}

fn one() -> usize {
    1
}

impl TaskConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let task: TaskConfig = toml::from_str(text).map_err(|e| PetError::Config(format!("task config: {e}")))?;
        task.validate()?;
        Ok(task)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PetError::Config(format!("reading task config {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            PetError::Config(m) => PetError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn label_set(&self) -> Result<LabelSet> {
        LabelSet::new(self.labels.iter().cloned())
    }

    pub fn validate(&self) -> Result<()> {
        let labels = self.label_set()?;
        if self.pvps.is_empty() {
            return Err(PetError::Config(format!("task {} declares no PVPs", self.name)));
        }
        let mut ids: Vec<&str> = self.pvps.iter().map(|p| p.id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(PetError::Config("PVP ids must be unique".into()));
        }
        for p in &self.pvps {
            if p.pattern.arity() > self.arity {
                return Err(PetError::Config(format!(
                    "PVP {} uses {} segments but the task has arity {}",
                    p.id,
                    p.pattern.arity(),
                    self.arity
                )));
            }
            self.verbalizer(p, &labels)?;
        }
        if let Some(f1) = &self.f1_labels {
            for l in f1 {
                labels.index_of(l)?;
            }
        }
        Ok(())
    }

    fn verbalizer(&self, pvp: &PvpSpec, labels: &LabelSet) -> Result<Verbalizer> {
        for key in pvp.verbalizer.keys() {
            labels
                .index_of(key)
                .map_err(|_| PetError::Config(format!("PVP {}: verbalizer names unknown label {key:?}", pvp.id)))?;
        }
        let words = labels
            .labels()
            .iter()
            .map(|l| {
                pvp.verbalizer
                    .get(l)
                    .map(VerbalizerWords::to_vec)
                    .ok_or_else(|| PetError::Config(format!("PVP {}: no verbalization for label {l:?}", pvp.id)))
            })
            .collect::<Result<Vec<_>>>()?;
        Verbalizer::multi(labels, words)
    }

    pub fn build_pvps(&self) -> Result<Vec<Pvp>> {
        let labels = self.label_set()?;
        self.pvps
            .iter()
            .map(|p| Ok(Pvp::new(p.id.clone(), p.pattern.clone(), self.verbalizer(p, &labels)?)))
            .collect()
    }

    /// Label indices used for macro-F1.
    pub fn f1_label_indices(&self) -> Result<Vec<usize>> {
        let labels = self.label_set()?;
        match &self.f1_labels {
            Some(f1) => f1.iter().map(|l| labels.index_of(l)).collect(),
            None => Ok((0..labels.len()).collect()),
        }
    }

    /// Every word that patterns and verbalizers add beyond the data, in
    /// declaration order.
    pub fn literal_words(&self) -> Vec<String> {
        let mut out = Vec::new();
        for p in &self.pvps {
            for el in p.pattern.elements() {
                if let PatternElement::Literal(text) = el {
                    out.extend(split_words(text).into_iter().map(str::to_string));
                }
            }
            for l in &self.labels {
                if let Some(ws) = p.verbalizer.get(l) {
                    out.extend(ws.to_vec());
                }
            }
        }
        out
    }

    /// Replaces every PVP's verbalizer with the same word table.
    pub fn with_verbalizer(&self, words: &[Vec<String>]) -> Result<TaskConfig> {
        if words.len() != self.labels.len() {
            return Err(PetError::Config(format!(
                "verbalizer has {} entries for {} labels",
                words.len(),
                self.labels.len()
            )));
        }
        let table: BTreeMap<String, VerbalizerWords> = self
            .labels
            .iter()
            .zip(words)
            .map(|(l, w)| (l.clone(), VerbalizerWords::Many(w.clone())))
            .collect();
        let mut task = self.clone();
        for p in &mut task.pvps {
            p.verbalizer = table.clone();
        }
        task.validate()?;
        Ok(task)
    }
}
