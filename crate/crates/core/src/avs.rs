//! Automatic verbalizer search: finds `m` tokens per label by iterating
//! score-derived distributions over a filtered candidate set.

use rand::distributions::{Distribution as _, WeightedIndex};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::MlmBackend;
use crate::error::{PetError, Result};
use crate::math::{self, derive_seed, rng_from_seed};
use crate::pvp::{CompiledPattern, LabelSet, TextInput, Verbalizer};
use crate::vocab::{TokenId, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AvsConfig {
    pub k: usize,
    pub epsilon: f64,
    pub i_max: usize,
    pub m: usize,
    pub min_alpha_chars: usize,
    pub top_frequent: usize,
    pub seed: u64,
    pub max_seq_length: usize,
}

impl Default for AvsConfig {
    fn default() -> Self {
        AvsConfig {
            k: 250,
            epsilon: 1e-3,
            i_max: 5,
            m: 10,
            min_alpha_chars: 2,
            top_frequent: 10_000,
            seed: 42,
            max_seq_length: 256,
        }
    }
}

impl AvsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 || self.i_max == 0 {
            return Err(PetError::Config("k, m and i_max must be at least 1".into()));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(PetError::Config(format!("epsilon {} must be finite and ≥ 0", self.epsilon)));
        }
        Ok(())
    }
}

/// Tokens with at least `min_alpha_chars` alphabetic characters among the
/// `top_frequent` most frequent tokens of the unlabeled data (ties in
/// vocabulary order). Special tokens and tokens absent from the data are
/// never candidates. The result is in vocabulary order.
pub fn filter_candidates(vocab: &Vocabulary, frequencies: &[u64], config: &AvsConfig) -> Result<Vec<TokenId>> {
    if frequencies.len() != vocab.len() {
        return Err(PetError::LengthMismatch(frequencies.len(), vocab.len()));
    }
    let mut eligible: Vec<TokenId> = (0..vocab.len() as TokenId)
        .filter(|&id| {
            !vocab.is_special(id)
                && frequencies[id as usize] > 0
                && vocab.token(id).is_ok_and(|t| {
                    t.chars().filter(|c| c.is_alphabetic()).count() >= config.min_alpha_chars
                })
        })
        .collect();
    eligible.sort_by(|&a, &b| frequencies[b as usize].cmp(&frequencies[a as usize]).then(a.cmp(&b)));
    eligible.truncate(config.top_frequent);
    eligible.sort_unstable();
    if eligible.is_empty() {
        return Err(PetError::EmptyCandidateSet);
    }
    Ok(eligible)
}

/// Raw mask scores `M(t | P_i(x))` for every candidate, pattern and
/// training example: `scores[i][x][c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCache {
    pub candidates: Vec<TokenId>,
    pub scores: Vec<Vec<Vec<f64>>>,
}

pub fn build_score_cache(
    backend: &dyn MlmBackend,
    patterns: &[CompiledPattern],
    train: &[TextInput],
    candidates: &[TokenId],
    max_seq_length: usize,
) -> Result<ScoreCache> {
    let scores = patterns
        .iter()
        .map(|p| {
            train
                .par_iter()
                .enumerate()
                .map(|(i, x)| {
                    let seq = p.apply(x, max_seq_length).map_err(|e| PetError::at_example(i, e))?;
                    let s = backend.score_candidates(&seq, candidates).map_err(|e| PetError::at_example(i, e))?;
                    if s.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
                        return Err(PetError::at_example(i, PetError::NonFiniteScore("mask score".into())));
                    }
                    Ok(s)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ScoreCache {
        candidates: candidates.to_vec(),
        scores,
    })
}

/// `q_{p[l←t]}(l | x) = e^{M_t} / (e^{M_t} + Σ_{l'≠l} e^{M(v(l'))})`, given
/// `M_t` and the other labels' scores.
pub fn substituted_prob(m_t: f64, others: impl Iterator<Item = f64>) -> Result<f64> {
    let others: Vec<f64> = others.collect();
    if others.is_empty() {
        return Ok(1.0);
    }
    prob_from_log_others(m_t, math::log_sum_exp(&others))
}

fn prob_from_log_others(m_t: f64, log_o: f64) -> Result<f64> {
    if log_o == f64::NEG_INFINITY {
        return Ok(1.0);
    }
    let d = log_o - m_t;
    if d.is_nan() {
        return Err(PetError::NonFiniteScore(format!("M_t = {m_t}, log of others = {log_o}")));
    }
    Ok(1.0 / (1.0 + d.exp()))
}

/// `log Σ_{l'≠l} exp(row[assignment[l']])`; negative infinity with no other labels.
fn other_labels_log_sum(row: &[f64], assignment: &[usize], l: usize) -> f64 {
    let others: Vec<f64> = assignment
        .iter()
        .enumerate()
        .filter(|&(l2, _)| l2 != l)
        .map(|(_, &c)| row[c])
        .collect();
    if others.is_empty() {
        f64::NEG_INFINITY
    } else {
        math::log_sum_exp(&others)
    }
}

/// `mean over T_l − mean over T \ T_l` of per-example probabilities.
fn two_means(probs: &[f64], labels: &[usize], l: usize) -> Result<f64> {
    let (mut in_sum, mut in_n, mut out_sum, mut out_n) = (0.0, 0usize, 0.0, 0usize);
    for (&q, &y) in probs.iter().zip(labels) {
        if y == l {
            in_sum += q;
            in_n += 1;
        } else {
            out_sum += q;
            out_n += 1;
        }
    }
    if in_n == 0 || out_n == 0 {
        return Err(PetError::LabelAbsent(format!(
            "label {l} needs examples both with and without it ({in_n} with, {out_n} without)"
        )));
    }
    Ok(in_sum / in_n as f64 - out_sum / out_n as f64)
}

/// `s_l(t | (P, v))` from cached raw scores. `assignment[l']` is the
/// candidate index verbalizing `l'`; `t` is a candidate index.
pub fn token_score_cached(
    cache: &ScoreCache,
    pattern: usize,
    labels: &[usize],
    assignment: &[usize],
    l: usize,
    t: usize,
) -> Result<f64> {
    let probs = cache.scores[pattern]
        .iter()
        .map(|row| {
            let others = assignment
                .iter()
                .enumerate()
                .filter(|&(l2, _)| l2 != l)
                .map(|(_, &c)| row[c]);
            substituted_prob(row[t], others)
        })
        .collect::<Result<Vec<_>>>()?;
    two_means(&probs, labels, l)
}

/// The same score computed with one backend call per example.
pub fn token_score_uncached(
    backend: &dyn MlmBackend,
    pattern: &CompiledPattern,
    train: &[TextInput],
    labels: &[usize],
    assignment: &[TokenId],
    l: usize,
    t: TokenId,
    max_seq_length: usize,
) -> Result<f64> {
    let probs = train
        .iter()
        .map(|x| {
            let seq = pattern.apply(x, max_seq_length)?;
            let mut cands = vec![t];
            cands.extend(assignment.iter().enumerate().filter(|&(l2, _)| l2 != l).map(|(_, &v)| v));
            let s = backend.score_candidates(&seq, &cands)?;
            substituted_prob(s[0], s[1..].iter().copied())
        })
        .collect::<Result<Vec<_>>>()?;
    two_means(&probs, labels, l)
}

/// `ρ(t | l)` over candidates, one row per label.
pub type Distribution = Vec<Vec<f64>>;

/// The `k` verbalizer assignments of iteration `it`, each label sampled
/// independently from its row of `rho`.
pub fn sample_assignments(rho: &Distribution, config: &AvsConfig, it: usize) -> Result<Vec<Vec<usize>>> {
    let mut rng = rng_from_seed(derive_seed(config.seed, &["avs", &it.to_string()]));
    let samplers = rho
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(|e| PetError::NonFiniteScore(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    Ok((0..config.k)
        .map(|_| samplers.iter().map(|s| s.sample(&mut rng)).collect())
        .collect())
}

/// `ρ_1 … ρ_{i_max}`, starting from the uniform `ρ_0`.
pub fn avs_iterate(cache: &ScoreCache, labels: &[usize], n_labels: usize, config: &AvsConfig) -> Result<Vec<Distribution>> {
    config.validate()?;
    let n_cand = cache.candidates.len();
    if n_cand == 0 {
        return Err(PetError::EmptyCandidateSet);
    }
    for l in 0..n_labels {
        if !labels.contains(&l) {
            return Err(PetError::LabelAbsent(format!("label {l} has no training examples")));
        }
    }
    let n_patterns = cache.scores.len();
    let mut rho: Distribution = vec![vec![1.0 / n_cand as f64; n_cand]; n_labels];
    let mut out = Vec::with_capacity(config.i_max);
    for it in 0..config.i_max {
        let assignments = sample_assignments(&rho, config, it)?;
        let next = (0..n_labels)
            .map(|l| {
                let mut totals = vec![0.0; n_cand];
                for p in 0..n_patterns {
                    for a in &assignments {
                        let log_o: Vec<f64> = cache.scores[p]
                            .iter()
                            .map(|row| other_labels_log_sum(row, a, l))
                            .collect();
                        totals
                            .par_iter_mut()
                            .enumerate()
                            .try_for_each(|(t, total)| -> Result<()> {
                                let probs = cache.scores[p]
                                    .iter()
                                    .zip(&log_o)
                                    .map(|(row, &lo)| prob_from_log_others(row[t], lo))
                                    .collect::<Result<Vec<_>>>()?;
                                *total += two_means(&probs, labels, l)?;
                                Ok(())
                            })?;
                    }
                }
                let sums: Vec<f64> = totals.iter().map(|t| t / (n_patterns * config.k) as f64).collect();
                let floored: Vec<f64> = sums.iter().map(|&s| s.max(config.epsilon)).collect();
                let z: f64 = floored.iter().sum();
                if !(z > 0.0 && z.is_finite()) {
                    return Err(PetError::NonFiniteScore(format!("normalizer {z} for label {l}")));
                }
                Ok(floored.iter().map(|v| v / z).collect())
            })
            .collect::<Result<Distribution>>()?;
        out.push(next.clone());
        rho = next;
    }
    Ok(out)
}

/// Top-`m` candidate indices per label by `ρ`, candidate order on ties.
pub fn extract_multi_verbalizer(rho: &Distribution, m: usize) -> Result<Vec<Vec<usize>>> {
    rho.iter()
        .map(|r| {
            if m > r.len() {
                return Err(PetError::MTooLarge { m, candidates: r.len() });
            }
            let mut idx: Vec<usize> = (0..r.len()).collect();
            idx.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
            idx.truncate(m);
            Ok(idx)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub token: String,
    pub rho: f64,
}

/// Ranked tokens with their final probabilities, per label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AvsReport {
    pub labels: Vec<String>,
    pub candidates: usize,
    pub ranking: Vec<Vec<RankedToken>>,
}

pub struct AvsOutcome {
    pub verbalizer: Verbalizer,
    pub report: AvsReport,
    pub distributions: Vec<Distribution>,
    pub cache: ScoreCache,
}

/// Full search: cache, iterate, extract, and wrap the result as a
/// multi-token verbalizer.
pub fn search_verbalizer(
    backend: &dyn MlmBackend,
    vocab: &Vocabulary,
    frequencies: &[u64],
    patterns: &[CompiledPattern],
    train: &[TextInput],
    label_set: &LabelSet,
    config: &AvsConfig,
) -> Result<AvsOutcome> {
    config.validate()?;
    let labels = crate::training::gold_labels(train)?;
    let candidates = filter_candidates(vocab, frequencies, config)?;
    if config.m > candidates.len() {
        return Err(PetError::MTooLarge {
            m: config.m,
            candidates: candidates.len(),
        });
    }
    let cache = build_score_cache(backend, patterns, train, &candidates, config.max_seq_length)?;
    let distributions = avs_iterate(&cache, &labels, label_set.len(), config)?;
    let last = distributions.last().expect("i_max ≥ 1");
    let top = extract_multi_verbalizer(last, config.m)?;
    let words = top
        .iter()
        .map(|idx| idx.iter().map(|&c| vocab.token(candidates[c]).map(str::to_string)).collect())
        .collect::<Result<Vec<Vec<String>>>>()?;
    let ranking = top
        .iter()
        .zip(last)
        .zip(&words)
        .map(|((idx, r), ws)| {
            idx.iter()
                .zip(ws)
                .map(|(&c, w)| RankedToken {
                    token: w.clone(),
                    rho: r[c],
                })
                .collect()
        })
        .collect();
    Ok(AvsOutcome {
        verbalizer: Verbalizer::multi(label_set, words)?,
        report: AvsReport {
            labels: label_set.labels().to_vec(),
            candidates: candidates.len(),
            ranking,
        },
        distributions,
        cache,
    })
}

impl std::fmt::Display for AvsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "candidates: {}", self.candidates)?;
        for (label, ranked) in self.labels.iter().zip(&self.ranking) {
            let items: Vec<String> = ranked.iter().map(|r| format!("{} ({:.4})", r.token, r.rho)).collect();
            writeln!(f, "{label}: {}", items.join(", "))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::oracle::OracleBackend;
    use crate::pvp::{Pattern, Pvp};
    use crate::training::pvp_label_scores;
    use crate::vocab::Tokenizer;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn cfg() -> AvsConfig {
        AvsConfig::default()
    }

    #[test]
    fn filter_keeps_alphabetic_tokens() {
        let tokens = ["<mask>", "a", "ab", "a1b", "!!", "the"].map(String::from).to_vec();
        let vocab = Vocabulary::from_tokens(tokens, "<mask>", None, None).unwrap();
        let ids = |ws: &[&str]| ws.iter().map(|w| vocab.id(w).unwrap()).collect::<Vec<_>>();
        let mut freq = vec![0u64; vocab.len()];
        for (w, f) in [("a", 9), ("ab", 3), ("a1b", 5), ("!!", 7), ("the", 4)] {
            freq[vocab.id(w).unwrap() as usize] = f;
        }
        assert_eq!(filter_candidates(&vocab, &freq, &cfg()).unwrap(), ids(&["ab", "a1b", "the"]));
        let two = AvsConfig { top_frequent: 2, ..cfg() };
        assert_eq!(filter_candidates(&vocab, &freq, &two).unwrap(), ids(&["a1b", "the"]));
        // ties resolve to the earlier vocabulary entry
        freq[vocab.id("ab").unwrap() as usize] = 4;
        assert_eq!(filter_candidates(&vocab, &freq, &two).unwrap(), ids(&["ab", "a1b"]));
        let none = AvsConfig { min_alpha_chars: 9, ..cfg() };
        assert!(matches!(filter_candidates(&vocab, &freq, &none), Err(PetError::EmptyCandidateSet)));
    }

    fn cache_from(rows: Vec<Vec<f64>>) -> ScoreCache {
        ScoreCache {
            candidates: (0..rows[0].len() as TokenId).collect(),
            scores: vec![rows],
        }
    }

    #[test]
    fn hand_table_matches_direct_arithmetic() {
        // candidates c0, c1, c2; three examples with labels 0, 0, 1
        let rows = vec![vec![2.0, 0.5, -1.0], vec![0.0, 1.0, 0.3], vec![-0.7, 2.2, 0.9]];
        let cache = cache_from(rows.clone());
        let labels = [0, 0, 1];
        // score of c2 for label 0 with label 1 verbalized by c1
        let q = |r: &Vec<f64>| r[2].exp() / (r[2].exp() + r[1].exp());
        let expected = (q(&rows[0]) + q(&rows[1])) / 2.0 - q(&rows[2]);
        let got = token_score_cached(&cache, 0, &labels, &[0, 1], 0, 2).unwrap();
        assert!((got - expected).abs() < 1e-15, "{got} vs {expected}");
    }

    #[test]
    fn score_bounds_and_cancellation() {
        // label-0 examples strongly prefer c0, others strongly prefer c1
        let cache = cache_from(vec![vec![50.0, -50.0], vec![-50.0, 50.0]]);
        let s = token_score_cached(&cache, 0, &[0, 1], &[0, 1], 0, 0).unwrap();
        assert!((s - 1.0).abs() < 1e-12);
        let flat = cache_from(vec![vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(token_score_cached(&flat, 0, &[0, 1], &[0, 1], 0, 0).unwrap(), 0.0);
        assert!(matches!(
            token_score_cached(&flat, 0, &[0, 0], &[0, 1], 0, 0),
            Err(PetError::LabelAbsent(_))
        ));
    }

    proptest! {
        #[test]
        fn scores_stay_in_range(rows in prop::collection::vec(prop::collection::vec(-20.0f64..20.0, 4), 4), t in 0usize..4, a in 0usize..4) {
            let cache = cache_from(rows);
            let s = token_score_cached(&cache, 0, &[0, 1, 0, 1], &[a, t], 1, t).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }

    /// Oracle whose mask scores depend on which example is in the sequence.
    fn oracle_task() -> (Vocabulary, OracleBackend, Vec<TextInput>, CompiledPattern) {
        let vocab = Vocabulary::build(["yay boo meh xa xb xc xd"], []);
        let v2 = vocab.clone();
        let table: Vec<(&str, [f64; 3])> = vec![
            // example word -> scores for (yay, boo, meh)
            ("xa", [2.0, -1.0, 0.1]),
            ("xb", [1.5, 0.2, -0.3]),
            ("xc", [-0.5, 1.7, 0.0]),
            ("xd", [0.3, 2.4, 0.2]),
        ];
        let table: Vec<(TokenId, [f64; 3])> = table.into_iter().map(|(w, s)| (v2.id(w).unwrap(), s)).collect();
        let cands: Vec<TokenId> = ["yay", "boo", "meh"].iter().map(|w| v2.id(w).unwrap()).collect();
        let scorer = move |seq: &crate::pvp::MaskedSequence, t: TokenId| {
            let row = table.iter().find(|(w, _)| seq.tokens.contains(w)).map(|(_, s)| s).unwrap();
            cands.iter().position(|&c| c == t).map_or(-5.0, |i| row[i])
        };
        let backend = OracleBackend::new(vocab.clone(), Arc::new(scorer));
        let train = ["xa", "xb", "xc", "xd"]
            .iter()
            .zip([0, 0, 1, 1])
            .map(|(w, l)| TextInput::new(vec![vocab.encode(w).unwrap()], Some(l)).unwrap())
            .collect();
        let pattern = Pattern::parse("{0} {mask}").unwrap().compile(&vocab).unwrap();
        (vocab, backend, train, pattern)
    }

    #[test]
    fn cached_and_uncached_scores_agree() {
        let (vocab, backend, train, pattern) = oracle_task();
        let cands: Vec<TokenId> = ["yay", "boo", "meh", "xa"].iter().map(|w| vocab.id(w).unwrap()).collect();
        let cache = build_score_cache(&backend, std::slice::from_ref(&pattern), &train, &cands, 256).unwrap();
        let labels = [0, 0, 1, 1];
        for l in 0..2 {
            for t in 0..cands.len() {
                for a0 in 0..cands.len() {
                    for a1 in 0..cands.len() {
                        let c = token_score_cached(&cache, 0, &labels, &[a0, a1], l, t).unwrap();
                        let u = token_score_uncached(
                            &backend,
                            &pattern,
                            &train,
                            &labels,
                            &[cands[a0], cands[a1]],
                            l,
                            cands[t],
                            256,
                        )
                        .unwrap();
                        assert!((c - u).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn known_winner_dominates() {
        // two candidates; label 0 examples always score "yay" above "boo"
        let (vocab, backend, train, pattern) = oracle_task();
        let cands = vec![vocab.id("yay").unwrap(), vocab.id("boo").unwrap()];
        let cache = build_score_cache(&backend, &[pattern], &train, &cands, 256).unwrap();
        let rho = avs_iterate(&cache, &[0, 0, 1, 1], 2, &cfg()).unwrap();
        assert_eq!(rho.len(), 5);
        for r in &rho {
            for row in r {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&p| p > 0.0));
            }
        }
        assert!(rho[4][0][0] > 0.99, "{:?}", rho[4]);
        assert!(rho[4][1][1] > 0.99, "{:?}", rho[4]);
        let top = extract_multi_verbalizer(&rho[4], 1).unwrap();
        assert_eq!(top, vec![vec![0], vec![1]]);
        assert_eq!(extract_multi_verbalizer(&rho[4], 2).unwrap()[0], vec![0, 1]);
        assert!(matches!(extract_multi_verbalizer(&rho[4], 3), Err(PetError::MTooLarge { .. })));
    }

    #[test]
    fn all_negative_scores_give_uniform_first_step() {
        // every candidate scores the same on every example, so every s is 0 < ε
        let cache = cache_from(vec![vec![0.0; 3], vec![0.0; 3]]);
        let rho = avs_iterate(&cache, &[0, 1], 2, &AvsConfig { k: 5, i_max: 1, ..cfg() }).unwrap();
        for row in &rho[0] {
            for &p in row {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn iteration_matches_per_token_scoring() {
        let rows = vec![vec![2.0, 0.5, -1.0, 0.2], vec![0.0, 1.0, 0.3, -0.4], vec![-0.7, 2.2, 0.9, 1.1]];
        let cache = ScoreCache {
            candidates: (0..4).collect(),
            scores: vec![rows.clone(), rows.iter().map(|r| r.iter().map(|v| v * 0.5).collect()).collect()],
        };
        let labels = [0, 1, 1];
        let c = AvsConfig { k: 7, i_max: 2, epsilon: 0.05, ..cfg() };
        let fast = avs_iterate(&cache, &labels, 2, &c).unwrap();
        let mut rho: Distribution = vec![vec![0.25; 4]; 2];
        for (it, got) in fast.iter().enumerate() {
            let assignments = sample_assignments(&rho, &c, it).unwrap();
            let mut next = Vec::new();
            for l in 0..2 {
                let s: Vec<f64> = (0..4)
                    .map(|t| {
                        let mut total = 0.0;
                        for p in 0..2 {
                            for a in &assignments {
                                total += token_score_cached(&cache, p, &labels, a, l, t).unwrap();
                            }
                        }
                        (total / 14.0).max(0.05)
                    })
                    .collect();
                let z: f64 = s.iter().sum();
                next.push(s.iter().map(|v| v / z).collect::<Vec<f64>>());
            }
            for (a, b) in next.iter().flatten().zip(got.iter().flatten()) {
                assert!((a - b).abs() < 1e-12);
            }
            rho = next;
        }
    }

    #[test]
    fn iteration_is_seed_deterministic() {
        let rows = vec![vec![2.0, 0.5, -1.0], vec![0.0, 1.0, 0.3], vec![-0.7, 2.2, 0.9]];
        let cache = cache_from(rows);
        let c = AvsConfig { k: 20, ..cfg() };
        assert_eq!(avs_iterate(&cache, &[0, 0, 1], 2, &c).unwrap(), avs_iterate(&cache, &[0, 0, 1], 2, &c).unwrap());
    }

    #[test]
    fn multi_verbalizer_scoring_is_mean_of_tokens() {
        let (vocab, backend, train, _) = oracle_task();
        let labels = LabelSet::new(["pos", "neg"]).unwrap();
        let mut freq = vec![1u64; vocab.len()];
        freq[vocab.id("meh").unwrap() as usize] = 0;
        let pattern = Pattern::parse("{0} {mask}").unwrap();
        let compiled = pattern.compile(&vocab).unwrap();
        // xa..xd are candidates too; they score -5 everywhere
        let out = search_verbalizer(&backend, &vocab, &freq, &[compiled], &train, &labels, &AvsConfig { m: 2, ..cfg() }).unwrap();
        assert_eq!(out.verbalizer.words()[0][0], "yay");
        assert_eq!(out.verbalizer.words()[1][0], "boo");
        assert!(out.report.to_string().contains("pos: yay"));
        let pvp = Pvp::new("a", pattern, out.verbalizer.clone()).compile(&vocab).unwrap();
        let s = pvp_label_scores(&backend, &pvp, &train[0], 256).unwrap();
        let tok = |w: &str| ["yay", "boo", "meh"].iter().position(|x| *x == w).map_or(-5.0, |i| [2.0, -1.0, 0.1][i]);
        let words = out.verbalizer.words();
        let mean = |ws: &Vec<String>| ws.iter().map(|w| tok(w)).sum::<f64>() / ws.len() as f64;
        assert_eq!(s, vec![mean(&words[0]), mean(&words[1])]);
    }
}
