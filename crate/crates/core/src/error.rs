use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PetError> = std::result::Result<T, E>;

/// Every failure the framework can report.
///
/// Variants are grouped by [`ErrorKind`], which the CLI maps to its exit codes.
#[derive(Debug, Error)]
pub enum PetError {
    // pattern / verbalizer construction
    #[error("pattern references segment {index} but input has {arity} segment(s)")]
    PatternArityMismatch { index: usize, arity: usize },
    #[error("pattern overhead of {overhead} tokens exceeds max_seq_length {max_seq_length}")]
    BudgetExceeded { overhead: usize, max_seq_length: usize },
    #[error("pattern DSL error at byte {position}: {message}")]
    Dsl { position: usize, message: String },
    #[error("invalid verbalizer: {0}")]
    Verbalizer(String),
    #[error("invalid label set: {0}")]
    LabelSet(String),
    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    // backend
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(usize),
    #[error("vocabulary error: {0}")]
    Vocabulary(String),
    #[error("backend is not trainable")]
    NotTrainable,
    #[error("classification head not initialized")]
    HeadNotInitialized,
    #[error("non-finite loss ({0})")]
    NonFiniteLoss(f64),
    #[error("backend does not support snapshots")]
    SnapshotUnsupported,
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend protocol error: {code}: {message}")]
    Protocol { code: String, message: String },
    #[error("models use mixed score conventions ({0})")]
    MixedScoreConventions(String),

    // training / ensembling
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("unlabeled set is empty")]
    EmptyUnlabeled,
    #[error("soft-labeled dataset is empty")]
    EmptySoftDataset,
    #[error("pre-training accuracy unavailable for model {0}")]
    SnapshotUnavailable(String),
    #[error("total ensemble weight is zero")]
    ZeroTotalWeight,
    #[error("example {index}: {source}")]
    AtExample {
        index: usize,
        #[source]
        source: Box<PetError>,
    },
    #[error("need at least two models to select annotators, got {0}")]
    TooFewModels(usize),
    #[error("unlabeled set has {0} examples, zero-shot bootstrap needs at least 100")]
    UnlabeledTooSmall(usize),

    // verbalizer search
    #[error("candidate set is empty after filtering")]
    EmptyCandidateSet,
    #[error("label {0:?} has no training examples")]
    LabelAbsent(String),
    #[error("non-finite verbalizer score for token {0:?}")]
    NonFiniteScore(String),
    #[error("m = {m} exceeds candidate count {candidates}")]
    MTooLarge { m: usize, candidates: usize },

    // data
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("label {label:?} has {available} examples, need {needed}")]
    InsufficientExamples {
        label: String,
        available: usize,
        needed: usize,
    },
    #[error("length mismatch: {0} predictions vs {1} gold labels")]
    LengthMismatch(usize, usize),
    #[error("invalid data: {0}")]
    Data(String),

    #[error("configuration error: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error category, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Backend,
}

impl PetError {
    pub fn kind(&self) -> ErrorKind {
        use PetError::*;
        match self {
            PatternArityMismatch { .. } | BudgetExceeded { .. } | Dsl { .. } | Verbalizer(_)
            | LabelSet(_) | Config(_) | MTooLarge { .. } => ErrorKind::Config,
            UnknownToken(_) | TokenOutOfRange(_) | Vocabulary(_) | NotTrainable
            | HeadNotInitialized | NonFiniteLoss(_) | SnapshotUnsupported
            | BackendUnavailable(_) | Protocol { .. } | MixedScoreConventions(_)
            | NonFiniteScore(_) => ErrorKind::Backend,
            AtExample { source, .. } => source.kind(),
            UnknownLabel(_) | EmptyTrainSet | EmptyUnlabeled | EmptySoftDataset
            | SnapshotUnavailable(_) | ZeroTotalWeight | TooFewModels(_) | UnlabeledTooSmall(_)
            | EmptyCandidateSet | LabelAbsent(_) | Parse { .. } | InsufficientExamples { .. }
            | LengthMismatch(..) | Data(_) | Io { .. } => ErrorKind::Data,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Backend => 4,
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        PetError::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn at_example(index: usize, source: PetError) -> Self {
        PetError::AtExample {
            index,
            source: Box::new(source),
        }
    }
}
