//! Seeded synthetic classification tasks with a known Bayes-optimal labeling.
//!
//! Every segment is `segment_length` filler words, of which `signal_slots`
//! randomly chosen positions are overwritten by signal words. A signal slot
//! draws its label from the example's own label with probability
//! `1 - noise` and uniformly from all labels otherwise; within a label, signal
//! words follow a Zipf law (rank r has weight `1 / (r + 1)`). The posterior
//! therefore depends only on how many signal words of each label occur, and
//! the Bayes-optimal prediction is the label with the most signal words (ties
//! go to the lowest label index).

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RawExample};
use crate::error::{PetError, Result};
use crate::math::{derive_seed, rng_from_seed, Rng};
use crate::pvp::LabelSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub labels: Vec<String>,
    /// Number of filler words.
    pub vocab_size: usize,
    pub signal_tokens_per_label: usize,
    pub noise: f64,
    #[serde(default = "one")]
    pub arity: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_segment_length")]
    pub segment_length: usize,
    #[serde(default = "default_signal_slots")]
    pub signal_slots: usize,
    /// Explicit signal words per label, most frequent first. Missing words
    /// are generated.
    #[serde(default)]
    pub signal_words: Vec<Vec<String>>,
    /// Label-independent topics. Each example draws one topic uniformly and
    /// fills `topic_slots` positions per segment with its words.
    #[serde(default)]
    pub topics: usize,
    #[serde(default)]
    pub topic_slots: usize,
    #[serde(default = "default_topic_words")]
    pub topic_words_per_topic: usize,
    /// Probability that a topic slot draws from a uniformly random topic
    /// instead of the example's own.
    #[serde(default)]
    pub topic_noise: f64,
}

fn default_topic_words() -> usize {
    8
}

fn one() -> usize {
    1
}
fn default_segment_length() -> usize {
    12
}
fn default_signal_slots() -> usize {
    3
}

/// Generated word for index `i`: a lowercase letter string with a fixed
/// prefix, so generated words never collide across kinds.
fn word(prefix: &str, mut i: usize) -> String {
    let mut s = String::from(prefix);
    let mut letters = Vec::new();
    loop {
        letters.push((b'a' + (i % 26) as u8) as char);
        i /= 26;
        if i == 0 {
            break;
        }
    }
    s.extend(letters.iter().rev());
    s
}

impl SyntheticTaskSpec {
    /// Binary sentiment-like task whose strongest signal words are
    /// "terrible" and "great". Five of the twelve positions hold words of one
    /// of four label-independent topics.
    pub fn sentiment_lite() -> Self {
        let neg = ["terrible", "awful", "bad", "horrible", "poor", "worst", "boring", "rude"];
        let pos = ["great", "good", "excellent", "amazing", "tasty", "friendly", "best", "lovely"];
        SyntheticTaskSpec {
            labels: vec!["negative".into(), "positive".into()],
            vocab_size: 200,
            signal_tokens_per_label: 8,
            noise: 0.15,
            arity: 1,
            seed: 0,
            segment_length: 12,
            signal_slots: 3,
            signal_words: vec![
                neg.iter().map(|s| s.to_string()).collect(),
                pos.iter().map(|s| s.to_string()).collect(),
            ],
            topics: 4,
            topic_slots: 5,
            topic_words_per_topic: 4,
            topic_noise: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        LabelSet::new(self.labels.iter().cloned())?;
        let bad = |m: String| Err(PetError::Config(m));
        if !(0.0..1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1)", self.noise));
        }
        if !(0.0..=1.0).contains(&self.topic_noise) {
            return bad(format!("topic_noise {} outside [0, 1]", self.topic_noise));
        }
        if self.arity == 0 || self.signal_tokens_per_label == 0 || self.vocab_size == 0 {
            return bad("arity, vocab_size and signal_tokens_per_label must be positive".into());
        }
        if self.signal_slots == 0 || self.signal_slots + self.topic_slots > self.segment_length {
            return bad(format!(
                "signal_slots {} plus topic_slots {} must be positive and at most segment_length {}",
                self.signal_slots, self.topic_slots, self.segment_length
            ));
        }
        if self.topic_slots > 0 && (self.topics == 0 || self.topic_words_per_topic == 0) {
            return bad("topic_slots needs topics and topic_words_per_topic".into());
        }
        if self.signal_words.len() > self.labels.len() {
            return bad("more signal word lists than labels".into());
        }
        let words = self.signal_table();
        let fillers = self.fillers();
        let topics = self.topic_table();
        let mut all: Vec<&str> = words.iter().flatten().map(String::as_str).collect();
        all.extend(fillers.iter().map(String::as_str));
        all.extend(topics.iter().flatten().map(String::as_str));
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        if all.len() != n {
            return bad("signal words must be distinct across labels and from filler words".into());
        }
        Ok(())
    }

    pub fn label_set(&self) -> Result<LabelSet> {
        LabelSet::new(self.labels.iter().cloned())
    }

    /// Signal words per label, most frequent first.
    pub fn signal_table(&self) -> Vec<Vec<String>> {
        (0..self.labels.len())
            .map(|l| {
                let given = self.signal_words.get(l).cloned().unwrap_or_default();
                let mut out: Vec<String> = given.into_iter().take(self.signal_tokens_per_label).collect();
                let mut i = 0;
                while out.len() < self.signal_tokens_per_label {
                    out.push(word(&format!("sig{}", word("", l)), i));
                    i += 1;
                }
                out
            })
            .collect()
    }

    pub fn fillers(&self) -> Vec<String> {
        (0..self.vocab_size).map(|i| word("fil", i)).collect()
    }

    /// Words of each topic; empty without topic slots.
    pub fn topic_table(&self) -> Vec<Vec<String>> {
        if self.topic_slots == 0 {
            return Vec::new();
        }
        (0..self.topics)
            .map(|t| {
                (0..self.topic_words_per_topic)
                    .map(|i| word(&format!("top{}", word("", t)), i))
                    .collect()
            })
            .collect()
    }

    fn zipf_weights(&self) -> Vec<f64> {
        (0..self.signal_tokens_per_label).map(|r| 1.0 / (r + 1) as f64).collect()
    }

    /// Accuracy of the Bayes-optimal rule on a binary task with one segment.
    pub fn bayes_accuracy_binary(&self) -> Option<f64> {
        if self.labels.len() != 2 {
            return None;
        }
        let s = self.signal_slots * self.arity;
        let a = 1.0 - self.noise / 2.0;
        let binom = |k: usize| -> f64 {
            let mut c = 1.0;
            for i in 0..k {
                c = c * (s - i) as f64 / (i + 1) as f64;
            }
            c * a.powi(k as i32) * (1.0 - a).powi((s - k) as i32)
        };
        let mut acc = 0.0;
        for k in 0..=s {
            if 2 * k > s {
                acc += binom(k);
            } else if 2 * k == s {
                // label 0 wins ties: right for label 0, wrong for label 1
                acc += 0.5 * binom(k);
            }
        }
        Some(acc)
    }
}

/// A generated split with the Bayes-optimal label of every example.
#[derive(Debug, Clone)]
pub struct SyntheticSplit {
    pub dataset: Dataset,
    pub gold: Vec<usize>,
    pub bayes: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub spec: SyntheticTaskSpec,
    pub train: SyntheticSplit,
    pub unlabeled: SyntheticSplit,
    pub test: SyntheticSplit,
}

struct Generator<'a> {
    spec: &'a SyntheticTaskSpec,
    signals: Vec<Vec<String>>,
    fillers: Vec<String>,
    topics: Vec<Vec<String>>,
    zipf: rand::distributions::WeightedIndex<f64>,
}

impl Generator<'_> {
    fn example(&self, y: usize, rng: &mut Rng) -> (Vec<String>, usize) {
        let n_labels = self.spec.labels.len();
        let mut counts = vec![0usize; n_labels];
        let mut segments = Vec::with_capacity(self.spec.arity);
        let topic = (!self.topics.is_empty()).then(|| rng.gen_range(0..self.topics.len()));
        let slots = self.spec.signal_slots + self.spec.topic_slots;
        for _ in 0..self.spec.arity {
            let mut words: Vec<&str> = (0..self.spec.segment_length)
                .map(|_| self.fillers[rng.gen_range(0..self.fillers.len())].as_str())
                .collect();
            let positions = rand::seq::index::sample(rng, self.spec.segment_length, slots).into_vec();
            let (signal, topical) = positions.split_at(self.spec.signal_slots);
            if let Some(t) = topic {
                for &p in topical {
                    let t = if rng.gen::<f64>() < self.spec.topic_noise {
                        rng.gen_range(0..self.topics.len())
                    } else {
                        t
                    };
                    let words_t = &self.topics[t];
                    words[p] = &words_t[rng.gen_range(0..words_t.len())];
                }
            }
            for &p in signal {
                let l = if rng.gen::<f64>() < self.spec.noise {
                    rng.gen_range(0..n_labels)
                } else {
                    y
                };
                counts[l] += 1;
                words[p] = &self.signals[l][rng.sample(&self.zipf)];
            }
            segments.push(words.join(" "));
        }
        (segments, bayes_from_counts(&counts))
    }
}

/// Label with the most signal words; lowest index on ties.
pub fn bayes_from_counts(counts: &[usize]) -> usize {
    let mut best = 0;
    for (l, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = l;
        }
    }
    best
}

/// Counts signal words of each label in a text.
pub fn signal_counts(spec: &SyntheticTaskSpec, segments: &[String]) -> Vec<usize> {
    let table = spec.signal_table();
    let mut counts = vec![0; table.len()];
    for w in segments.iter().flat_map(|s| s.split_whitespace()) {
        if let Some(l) = table.iter().position(|ws| ws.iter().any(|x| x == w)) {
            counts[l] += 1;
        }
    }
    counts
}

/// Training examples cycle through labels so every label gets `n / |L|`
/// examples; unlabeled and test labels are drawn uniformly.
pub fn generate_synthetic_task(
    spec: &SyntheticTaskSpec,
    n_train: usize,
    n_unlabeled: usize,
    n_test: usize,
) -> Result<SyntheticTask> {
    spec.validate()?;
    let label_set = spec.label_set()?;
    let gen = Generator {
        spec,
        signals: spec.signal_table(),
        fillers: spec.fillers(),
        topics: spec.topic_table(),
        zipf: rand::distributions::WeightedIndex::new(spec.zipf_weights()).expect("positive weights"),
    };
    let n_labels = spec.labels.len();
    let make = |split: &str, n: usize, cyclic: bool, keep_labels: bool| -> SyntheticSplit {
        let mut rng = rng_from_seed(derive_seed(spec.seed, &["synthetic", split]));
        let mut ys: Vec<usize> = if cyclic {
            (0..n).map(|i| i % n_labels).collect()
        } else {
            (0..n).map(|_| rng.gen_range(0..n_labels)).collect()
        };
        if cyclic {
            ys.shuffle(&mut rng);
        }
        let mut examples = Vec::with_capacity(n);
        let mut bayes = Vec::with_capacity(n);
        for &y in &ys {
            let (segments, b) = gen.example(y, &mut rng);
            examples.push(RawExample {
                segments,
                label: keep_labels.then(|| spec.labels[y].clone()),
            });
            bayes.push(b);
        }
        SyntheticSplit {
            dataset: Dataset {
                name: format!("synthetic-{split}"),
                label_set: label_set.clone(),
                examples,
            },
            gold: ys,
            bayes,
        }
    };
    Ok(SyntheticTask {
        spec: spec.clone(),
        train: make("train", n_train, true, true),
        unlabeled: make("unlabeled", n_unlabeled, false, false),
        test: make("test", n_test, false, true),
    })
}
