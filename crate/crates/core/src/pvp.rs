//! Tasks as cloze questions: label sets, patterns, verbalizers and their
//! application to tokenized inputs.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{PetError, Result};
use crate::vocab::{TokenId, Tokenizer};

/// Ordered, duplicate-free set of label identifiers. Declaration order is the
/// canonical order used everywhere ties are broken.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet {
    labels: Vec<String>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(labels: impl IntoIterator<Item = S>) -> Result<Self> {
        let labels: Vec<String> = labels.into_iter().map(Into::into).collect();
        if labels.is_empty() {
            return Err(PetError::LabelSet("label set is empty".into()));
        }
        for (i, l) in labels.iter().enumerate() {
            if labels[..i].contains(l) {
                return Err(PetError::LabelSet(format!("duplicate label {l:?}")));
            }
        }
        Ok(LabelSet { labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn name(&self, index: usize) -> &str {
        &self.labels[index]
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| PetError::UnknownLabel(label.to_string()))
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = PetError;
    fn try_from(v: Vec<String>) -> Result<Self> {
        LabelSet::new(v)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(l: LabelSet) -> Self {
        l.labels
    }
}

/// A tokenized task input `(s_1, ..., s_k)` with an optional label index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextInput {
    pub segments: Vec<Vec<TokenId>>,
    pub label: Option<usize>,
}

impl TextInput {
    pub fn new(segments: Vec<Vec<TokenId>>, label: Option<usize>) -> Result<Self> {
        if segments.is_empty() {
            return Err(PetError::Data("input has no segments".into()));
        }
        Ok(TextInput { segments, label })
    }

    pub fn unlabeled(&self) -> TextInput {
        TextInput {
            segments: self.segments.clone(),
            label: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum PatternElement {
    Literal(String),
    Segment(usize),
    Mask,
    Boundary,
}

/// Cloze template with exactly one mask slot.
///
/// Literals are stored trimmed and adjacent literals are merged, so every
/// pattern has a single normal form that the DSL round-trips.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Pattern {
    elements: Vec<PatternElement>,
}

impl Pattern {
    pub fn new(elements: Vec<PatternElement>) -> Result<Self> {
        let mut normal: Vec<PatternElement> = Vec::with_capacity(elements.len());
        for el in elements {
            match el {
                PatternElement::Literal(text) => {
                    if text.contains(['{', '}']) || text.contains("||") {
                        return Err(PetError::Dsl {
                            position: 0,
                            message: format!("literal {text:?} contains reserved characters"),
                        });
                    }
                    let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
                    if text.is_empty() {
                        continue;
                    }
                    if let Some(PatternElement::Literal(prev)) = normal.last_mut() {
                        prev.push(' ');
                        prev.push_str(&text);
                    } else {
                        normal.push(PatternElement::Literal(text));
                    }
                }
                other => normal.push(other),
            }
        }
        let masks = normal.iter().filter(|e| **e == PatternElement::Mask).count();
        if masks != 1 {
            return Err(PetError::Dsl {
                position: 0,
                message: format!("pattern must contain exactly one mask, found {masks}"),
            });
        }
        Ok(Pattern { elements: normal })
    }

    /// Parses the template notation: `{0}`, `{1}`, ... for input segments,
    /// `{mask}` for the mask slot, `||` for a segment boundary; everything else
    /// is literal text.
    pub fn parse(text: &str) -> Result<Self> {
        let bytes = text.as_bytes();
        let mut elements = Vec::new();
        let mut literal_start = 0;
        let mut mask_at: Option<usize> = None;
        let mut i = 0;
        let flush = |elements: &mut Vec<PatternElement>, from: usize, to: usize| {
            if from < to {
                elements.push(PatternElement::Literal(text[from..to].to_string()));
            }
        };
        while i < bytes.len() {
            match bytes[i] {
                b'{' => {
                    let close = text[i..].find('}').map(|o| i + o).ok_or(PetError::Dsl {
                        position: i,
                        message: "unclosed '{'".into(),
                    })?;
                    let name = &text[i + 1..close];
                    flush(&mut elements, literal_start, i);
                    if name == "mask" {
                        if let Some(first) = mask_at {
                            return Err(PetError::Dsl {
                                position: i,
                                message: format!("second {{mask}} (first at byte {first})"),
                            });
                        }
                        mask_at = Some(i);
                        elements.push(PatternElement::Mask);
                    } else if let Ok(index) = name.parse::<usize>() {
                        elements.push(PatternElement::Segment(index));
                    } else {
                        return Err(PetError::Dsl {
                            position: i,
                            message: format!("unknown placeholder {{{name}}}"),
                        });
                    }
                    i = close + 1;
                    literal_start = i;
                }
                b'}' => {
                    return Err(PetError::Dsl {
                        position: i,
                        message: "unmatched '}'".into(),
                    })
                }
                b'|' if bytes.get(i + 1) == Some(&b'|') => {
                    flush(&mut elements, literal_start, i);
                    elements.push(PatternElement::Boundary);
                    i += 2;
                    literal_start = i;
                }
                _ => i += 1,
            }
        }
        flush(&mut elements, literal_start, bytes.len());
        if mask_at.is_none() {
            return Err(PetError::Dsl {
                position: text.len(),
                message: "pattern has no {mask}".into(),
            });
        }
        Pattern::new(elements).map_err(|e| match e {
            PetError::Dsl { message, .. } => PetError::Dsl {
                position: 0,
                message,
            },
            other => other,
        })
    }

    pub fn elements(&self) -> &[PatternElement] {
        &self.elements
    }

    /// Number of input segments the pattern needs (highest index + 1).
    pub fn arity(&self) -> usize {
        self.elements
            .iter()
            .filter_map(|e| match e {
                PatternElement::Segment(i) => Some(i + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn compile(&self, tokenizer: &dyn Tokenizer) -> Result<CompiledPattern> {
        let mut pieces = Vec::with_capacity(self.elements.len());
        for el in &self.elements {
            pieces.push(match el {
                PatternElement::Literal(text) => Piece::Tokens(tokenizer.encode(text)?),
                PatternElement::Segment(i) => Piece::Segment(*i),
                PatternElement::Mask => Piece::Mask,
                PatternElement::Boundary => Piece::Boundary,
            });
        }
        Ok(CompiledPattern {
            pieces,
            mask: tokenizer.mask_id(),
            sep: tokenizer.sep_id(),
        })
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, el) in self.elements.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            match el {
                PatternElement::Literal(t) => f.write_str(t)?,
                PatternElement::Segment(s) => write!(f, "{{{s}}}")?,
                PatternElement::Mask => f.write_str("{mask}")?,
                PatternElement::Boundary => f.write_str("||")?,
            }
        }
        Ok(())
    }
}

impl TryFrom<String> for Pattern {
    type Error = PetError;
    fn try_from(s: String) -> Result<Self> {
        Pattern::parse(&s)
    }
}

impl From<Pattern> for String {
    fn from(p: Pattern) -> Self {
        p.to_string()
    }
}

pub fn parse_pattern_dsl(text: &str) -> Result<Pattern> {
    Pattern::parse(text)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Tokens(Vec<TokenId>),
    Segment(usize),
    Mask,
    Boundary,
}

/// A pattern with its literals tokenized for one backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompiledPattern {
    pieces: Vec<Piece>,
    mask: TokenId,
    sep: Option<TokenId>,
}

/// Output of a pattern: a token sequence containing the mask token exactly once.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedSequence {
    pub tokens: Vec<TokenId>,
    pub mask_position: usize,
    pub segment_ids: Vec<u32>,
}

impl CompiledPattern {
    /// Tokens the pattern adds on its own: literals, the mask, and one
    /// separator per boundary when the backend uses separators.
    pub fn overhead(&self) -> usize {
        self.pieces
            .iter()
            .map(|p| match p {
                Piece::Tokens(t) => t.len(),
                Piece::Mask => 1,
                Piece::Boundary => usize::from(self.sep.is_some()),
                Piece::Segment(_) => 0,
            })
            .sum()
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask
    }

    /// Builds `P(x)`. Input segments are truncated longest-first so that the
    /// assembled sequence fits in `max_seq_length`; literals are never cut.
    pub fn apply(&self, input: &TextInput, max_seq_length: usize) -> Result<MaskedSequence> {
        let arity = input.segments.len();
        let mut refs = vec![0usize; arity];
        for p in &self.pieces {
            if let Piece::Segment(i) = p {
                if *i >= arity {
                    return Err(PetError::PatternArityMismatch { index: *i, arity });
                }
                refs[*i] += 1;
            }
        }
        let overhead = self.overhead();
        if overhead > max_seq_length {
            return Err(PetError::BudgetExceeded {
                overhead,
                max_seq_length,
            });
        }
        let mut lengths: Vec<usize> = input
            .segments
            .iter()
            .zip(&refs)
            .map(|(s, &r)| if r > 0 { s.len() } else { 0 })
            .collect();
        truncate_longest_first(&mut lengths, &refs, max_seq_length - overhead);

        let mut tokens = Vec::with_capacity(max_seq_length);
        let mut segment_ids = Vec::with_capacity(max_seq_length);
        let mut mask_position = 0;
        let mut segment = 0u32;
        for p in &self.pieces {
            match p {
                Piece::Tokens(t) => {
                    tokens.extend_from_slice(t);
                    segment_ids.extend(std::iter::repeat_n(segment, t.len()));
                }
                Piece::Segment(i) => {
                    let seg = &input.segments[*i][..lengths[*i]];
                    tokens.extend_from_slice(seg);
                    segment_ids.extend(std::iter::repeat_n(segment, seg.len()));
                }
                Piece::Mask => {
                    mask_position = tokens.len();
                    tokens.push(self.mask);
                    segment_ids.push(segment);
                }
                Piece::Boundary => {
                    if let Some(sep) = self.sep {
                        tokens.push(sep);
                        segment_ids.push(segment);
                    }
                    segment += 1;
                }
            }
        }
        Ok(MaskedSequence {
            tokens,
            mask_position,
            segment_ids,
        })
    }
}

pub fn apply_pattern(
    pattern: &CompiledPattern,
    input: &TextInput,
    max_seq_length: usize,
) -> Result<MaskedSequence> {
    pattern.apply(input, max_seq_length)
}

/// Shrinks segment `lengths` until `Σ weights[i]·lengths[i] ≤ budget`,
/// equivalent to repeatedly dropping the final token of the currently longest
/// segment (the last one among equally long segments). Segments with zero
/// weight are ignored.
pub fn truncate_longest_first(lengths: &mut [usize], weights: &[usize], budget: usize) {
    let total = |lens: &[usize], cap: usize| -> usize {
        lens.iter()
            .zip(weights)
            .map(|(&l, &w)| l.min(cap) * w)
            .sum()
    };
    let max = lengths
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0)
        .map(|(&l, _)| l)
        .max()
        .unwrap_or(0);
    if total(lengths, max) <= budget {
        return;
    }
    // largest level whose clamp fits the budget
    let (mut lo, mut hi) = (0usize, max);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if total(lengths, mid) <= budget {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    let level = lo;
    for (l, &w) in lengths.iter_mut().zip(weights) {
        if w > 0 {
            *l = (*l).min(level + 1);
        }
    }
    let mut current = total(lengths, level + 1);
    for i in (0..lengths.len()).rev() {
        if current <= budget {
            break;
        }
        if weights[i] > 0 && lengths[i] == level + 1 {
            lengths[i] = level;
            current -= weights[i];
        }
    }
}

/// Maps every label to one or more vocabulary words.
///
/// Hand-written verbalizers map each label to exactly one word and must be
/// injective. Searched verbalizers may map a label to several words, distinct
/// within the label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verbalizer {
    words: Vec<Vec<String>>,
}

impl Verbalizer {
    /// One word per label, in label order.
    pub fn single<S: Into<String>>(labels: &LabelSet, words: impl IntoIterator<Item = S>) -> Result<Self> {
        let words: Vec<String> = words.into_iter().map(Into::into).collect();
        if words.len() != labels.len() {
            return Err(PetError::Verbalizer(format!(
                "{} words for {} labels",
                words.len(),
                labels.len()
            )));
        }
        for (i, w) in words.iter().enumerate() {
            if words[..i].contains(w) {
                return Err(PetError::Verbalizer(format!(
                    "not injective: {w:?} used for labels {:?} and {:?}",
                    labels.name(words[..i].iter().position(|x| x == w).unwrap()),
                    labels.name(i)
                )));
            }
        }
        Ok(Verbalizer {
            words: words.into_iter().map(|w| vec![w]).collect(),
        })
    }

    pub fn multi(labels: &LabelSet, words: Vec<Vec<String>>) -> Result<Self> {
        if words.len() != labels.len() {
            return Err(PetError::Verbalizer(format!(
                "{} word lists for {} labels",
                words.len(),
                labels.len()
            )));
        }
        for (l, list) in words.iter().enumerate() {
            if list.is_empty() {
                return Err(PetError::Verbalizer(format!(
                    "label {:?} has no verbalization",
                    labels.name(l)
                )));
            }
            for (i, w) in list.iter().enumerate() {
                if list[..i].contains(w) {
                    return Err(PetError::Verbalizer(format!(
                        "{w:?} repeated for label {:?}",
                        labels.name(l)
                    )));
                }
            }
        }
        Ok(Verbalizer { words })
    }

    pub fn words(&self) -> &[Vec<String>] {
        &self.words
    }

    pub fn is_single(&self) -> bool {
        self.words.iter().all(|w| w.len() == 1)
    }

    /// Resolves words to single tokens. Distinct single-word labels must
    /// resolve to distinct tokens.
    pub fn compile(&self, tokenizer: &dyn Tokenizer) -> Result<Vec<Vec<TokenId>>> {
        let ids: Vec<Vec<TokenId>> = self
            .words
            .iter()
            .map(|ws| ws.iter().map(|w| tokenizer.single_token(w)).collect())
            .collect::<Result<_>>()?;
        if self.is_single() {
            for i in 0..ids.len() {
                if ids[..i].iter().any(|o| o[0] == ids[i][0]) {
                    return Err(PetError::Verbalizer(format!(
                        "{:?} shares a token with another label",
                        self.words[i][0]
                    )));
                }
            }
        }
        Ok(ids)
    }
}

/// Pattern-verbalizer pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pvp {
    pub id: String,
    pub pattern: Pattern,
    pub verbalizer: Verbalizer,
}

impl Pvp {
    pub fn new(id: impl Into<String>, pattern: Pattern, verbalizer: Verbalizer) -> Self {
        Pvp {
            id: id.into(),
            pattern,
            verbalizer,
        }
    }

    pub fn compile(&self, tokenizer: &dyn Tokenizer) -> Result<CompiledPvp> {
        Ok(CompiledPvp {
            id: self.id.clone(),
            pattern: self.pattern.compile(tokenizer)?,
            label_tokens: self.verbalizer.compile(tokenizer)?,
        })
    }
}

/// A PVP bound to a backend's token ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompiledPvp {
    pub id: String,
    pub pattern: CompiledPattern,
    /// Per label, the tokens whose mask scores are averaged into the label score.
    pub label_tokens: Vec<Vec<TokenId>>,
}

impl CompiledPvp {
    pub fn num_labels(&self) -> usize {
        self.label_tokens.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{Vocabulary, MASK_TOKEN};
    use proptest::prelude::*;

    fn lit(s: &str) -> PatternElement {
        PatternElement::Literal(s.into())
    }

    #[test]
    fn parses_yelp_p1() {
        let p = Pattern::parse("It was {mask}. {0}").unwrap();
        assert_eq!(
            p.elements(),
            &[lit("It was"), PatternElement::Mask, lit("."), PatternElement::Segment(0)]
        );
    }

    #[test]
    fn parses_bare_mask() {
        assert_eq!(Pattern::parse("{mask}").unwrap().elements(), &[PatternElement::Mask]);
    }

    #[test]
    fn parses_boundary() {
        let p = Pattern::parse("{0} || In summary, the restaurant is {mask}.").unwrap();
        assert_eq!(
            p.elements(),
            &[
                PatternElement::Segment(0),
                PatternElement::Boundary,
                lit("In summary, the restaurant is"),
                PatternElement::Mask,
                lit("."),
            ]
        );
    }

    #[test]
    fn dsl_errors_carry_positions() {
        match Pattern::parse("{mask} and {mask}") {
            Err(PetError::Dsl { position, .. }) => assert_eq!(position, 11),
            other => panic!("{other:?}"),
        }
        assert!(matches!(Pattern::parse("no mask {0}"), Err(PetError::Dsl { .. })));
        match Pattern::parse("{0} {foo} {mask}") {
            Err(PetError::Dsl { position, message }) => {
                assert_eq!(position, 4);
                assert!(message.contains("unknown placeholder"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(Pattern::parse("{mask} {0"), Err(PetError::Dsl { .. })));
        assert!(matches!(Pattern::parse("{mask} }"), Err(PetError::Dsl { .. })));
    }

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            ["It was . Best pizza ever ! In summary , the restaurant is great bad"],
            [],
        )
    }

    fn encode(v: &Vocabulary, s: &str) -> Vec<TokenId> {
        v.encode(s).unwrap()
    }

    #[test]
    fn applies_yelp_p1() {
        let v = vocab();
        let p = Pattern::parse("It was {mask}. {0}").unwrap().compile(&v).unwrap();
        let x = TextInput::new(vec![encode(&v, "Best pizza ever!")], None).unwrap();
        let seq = p.apply(&x, 256).unwrap();
        assert_eq!(seq.tokens, encode(&v, &format!("It was {MASK_TOKEN}. Best pizza ever!")));
        assert_eq!(seq.mask_position, 2);
    }

    #[test]
    fn bare_mask_ignores_input() {
        let v = vocab();
        let p = Pattern::parse("{mask}").unwrap().compile(&v).unwrap();
        let x = TextInput::new(vec![encode(&v, "Best pizza")], None).unwrap();
        let seq = p.apply(&x, 256).unwrap();
        assert_eq!(seq.tokens, vec![v.mask_id()]);
        assert_eq!(seq.mask_position, 0);
    }

    #[test]
    fn boundary_emits_separator_and_new_segment_id() {
        let v = vocab();
        let p = Pattern::parse("{0} || the restaurant is {mask}.").unwrap().compile(&v).unwrap();
        let x = TextInput::new(vec![encode(&v, "Best pizza")], None).unwrap();
        let seq = p.apply(&x, 256).unwrap();
        assert_eq!(seq.tokens[2], v.sep_id().unwrap());
        assert_eq!(seq.segment_ids, vec![0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(p.overhead(), 6);
    }

    #[test]
    fn arity_and_budget_errors() {
        let v = vocab();
        let p = Pattern::parse("{1} {mask}").unwrap().compile(&v).unwrap();
        let x = TextInput::new(vec![encode(&v, "Best")], None).unwrap();
        assert!(matches!(
            p.apply(&x, 10),
            Err(PetError::PatternArityMismatch { index: 1, arity: 1 })
        ));
        let p = Pattern::parse("It was {mask}. {0}").unwrap().compile(&v).unwrap();
        assert!(matches!(p.apply(&x, 3), Err(PetError::BudgetExceeded { overhead: 4, .. })));
        // overhead exactly at the limit: segments vanish, mask remains
        let seq = p.apply(&x, 4).unwrap();
        assert_eq!(seq.tokens.len(), 4);
    }

    /// Drops one token at a time from the currently longest segment.
    fn truncate_oracle(lengths: &mut [usize], weights: &[usize], budget: usize) {
        loop {
            let total: usize = lengths.iter().zip(weights).map(|(l, w)| l * w).sum();
            if total <= budget {
                return;
            }
            let mut best: Option<usize> = None;
            for i in 0..lengths.len() {
                if weights[i] == 0 {
                    continue;
                }
                match best {
                    Some(b) if lengths[i] < lengths[b] => {}
                    _ => best = Some(i),
                }
            }
            lengths[best.unwrap()] -= 1;
        }
    }

    #[test]
    fn two_long_segments_truncate_to_budget() {
        let mut lengths = [200, 200];
        truncate_longest_first(&mut lengths, &[1, 1], 250);
        let mut oracle = [200, 200];
        truncate_oracle(&mut oracle, &[1, 1], 250);
        assert_eq!(lengths, oracle);
        assert_eq!(lengths, [125, 125]);

        let mut lengths = [300, 120];
        truncate_longest_first(&mut lengths, &[1, 1], 250);
        assert_eq!(lengths, [130, 120]);

        let mut lengths = [200, 200];
        truncate_longest_first(&mut lengths, &[1, 1], 249);
        assert_eq!(lengths, [125, 124]);
    }

    #[test]
    fn two_segment_pattern_fits_exactly() {
        let v = vocab();
        // overhead: "Best" + mask + "ever" + "!" + sep + "." = 6
        let p = Pattern::parse("Best {0} {mask} ever ! || {1} .").unwrap().compile(&v).unwrap();
        assert_eq!(p.overhead(), 6);
        let a: Vec<TokenId> = (0..200).map(|i| 3 + (i % 5)).collect();
        let b: Vec<TokenId> = (0..200).map(|i| 4 + (i % 3)).collect();
        let x = TextInput::new(vec![a, b], None).unwrap();
        let seq = p.apply(&x, 256).unwrap();
        assert_eq!(seq.tokens.len(), 256);
        let mut oracle = [200, 200];
        truncate_oracle(&mut oracle, &[1, 1], 250);
        assert_eq!(seq.tokens.iter().filter(|&&t| t == v.mask_id()).count(), 1);
        assert_eq!(oracle, [125, 125]);
    }

    #[test]
    fn verbalizer_must_be_injective() {
        let labels = LabelSet::new(["pos", "neg"]).unwrap();
        assert!(Verbalizer::single(&labels, ["great", "great"]).is_err());
        assert!(Verbalizer::single(&labels, ["great"]).is_err());
        assert!(Verbalizer::single(&labels, ["great", "bad"]).is_ok());
        assert!(Verbalizer::multi(&labels, vec![vec!["a".into(), "a".into()], vec!["b".into()]]).is_err());
    }

    #[test]
    fn label_set_rejects_duplicates_and_empty() {
        assert!(LabelSet::new(Vec::<String>::new()).is_err());
        assert!(LabelSet::new(["a", "b", "a"]).is_err());
        let l = LabelSet::new(["x", "y"]).unwrap();
        assert_eq!(l.index_of("y").unwrap(), 1);
        assert!(matches!(l.index_of("z"), Err(PetError::UnknownLabel(_))));
    }

    fn element() -> impl Strategy<Value = PatternElement> {
        prop_oneof![
            "[a-zA-Z,.!?:\\-\"() ]{1,12}".prop_map(PatternElement::Literal),
            (0usize..3).prop_map(PatternElement::Segment),
            Just(PatternElement::Boundary),
        ]
    }

    fn pattern() -> impl Strategy<Value = Pattern> {
        (prop::collection::vec(element(), 0..8), any::<prop::sample::Index>()).prop_filter_map(
            "needs a valid pattern",
            |(mut els, at)| {
                let pos = at.index(els.len() + 1);
                els.insert(pos, PatternElement::Mask);
                Pattern::new(els).ok()
            },
        )
    }

    proptest! {
        #[test]
        fn dsl_round_trips(p in pattern()) {
            let text = p.to_string();
            prop_assert_eq!(Pattern::parse(&text).unwrap(), p);
        }

        #[test]
        fn exactly_one_mask_after_apply(
            p in pattern(),
            segs in prop::collection::vec(prop::collection::vec(3u32..20, 0..40), 3),
            max_len in 0usize..80,
        ) {
            let v = Vocabulary::build(["a b c d e f g h i j k l m n o p q"], []);
            let compiled = p.compile(&v).unwrap();
            let x = TextInput::new(segs.clone(), None).unwrap();
            match compiled.apply(&x, max_len) {
                Ok(seq) => {
                    prop_assert!(seq.tokens.len() <= max_len);
                    prop_assert_eq!(seq.tokens.iter().filter(|&&t| t == v.mask_id()).count(), 1);
                    prop_assert_eq!(seq.tokens[seq.mask_position], v.mask_id());
                    prop_assert_eq!(seq.segment_ids.len(), seq.tokens.len());
                }
                Err(PetError::BudgetExceeded { overhead, .. }) => prop_assert!(overhead > max_len),
                Err(e) => prop_assert!(false, "unexpected {e}"),
            }
        }

        #[test]
        fn truncation_matches_oracle(
            lengths in prop::collection::vec(0usize..60, 1..5),
            weights in prop::collection::vec(0usize..3, 5),
            budget in 0usize..150,
        ) {
            let weights = &weights[..lengths.len()];
            let mut fast = lengths.clone();
            let mut slow = lengths.clone();
            truncate_longest_first(&mut fast, weights, budget);
            truncate_oracle(&mut slow, weights, budget);
            prop_assert_eq!(fast, slow);
        }

        #[test]
        fn fitting_inputs_are_untouched(
            segs in prop::collection::vec(prop::collection::vec(3u32..20, 0..20), 2),
        ) {
            let v = Vocabulary::build(["a b c d e f g h i j k l m n o p q"], []);
            let p = Pattern::parse("{0} || It {mask} {1}").unwrap().compile(&v).unwrap();
            let x = TextInput::new(segs.clone(), None).unwrap();
            let seq = p.apply(&x, 256).unwrap();
            let expected = segs[0].len() + segs[1].len() + p.overhead();
            prop_assert_eq!(seq.tokens.len(), expected);
            prop_assert_eq!(&seq.tokens[..segs[0].len()], &segs[0][..]);
        }
    }
}
