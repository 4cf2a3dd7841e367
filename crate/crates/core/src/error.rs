use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the toolkit. Variants are grouped by the stage that
/// produces them.
#[derive(Debug, Error)]
pub enum Error {
    // corpus
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("duplicate utterance id `{id}` on line {line}")]
    DuplicateUtteranceId { id: String, line: usize },
    #[error("schema violation on line {line}: {reason}")]
    SchemaViolation { line: usize, reason: String },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("empty audio")]
    EmptyAudio,

    // audio / features
    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    RateMismatch { expected: u32, actual: u32 },
    #[error("unsupported audio format: {0}")]
    AudioFormat(String),
    #[error("utterance too short: {n_samples} samples, need at least {needed}")]
    TooShort { n_samples: usize, needed: usize },
    #[error("invalid feature configuration: {0}")]
    InvalidConfig(String),
    #[error("utterance `{id}`: {source}")]
    Utterance {
        id: String,
        #[source]
        source: Box<Error>,
    },
    #[error("corrupt {kind} file: {reason}")]
    CorruptFile { kind: &'static str, reason: String },

    // ubm
    #[error("too few frames: {n_frames} frames for {k} components (need {needed})")]
    TooFewFrames { n_frames: usize, k: usize, needed: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("non-finite likelihood at EM iteration {iteration}")]
    NumericalFailure { iteration: usize },

    // tvspace
    #[error("empty utterance `{0}`")]
    EmptyUtterance(String),
    #[error("too few utterances: {n} utterances for subspace rank {rank}")]
    TooFewUtterances { n: usize, rank: usize },
    #[error("singular system for component {component}")]
    SingularSystem { component: usize },
    #[error("feature configuration mismatch: {0}")]
    ConfigMismatch(String),

    // abx
    #[error("too few speakers: {0}")]
    TooFewSpeakers(String),

    // stats
    #[error("s_same is zero; the LFE score is undefined")]
    DegenerateSame,
    #[error("empty group")]
    EmptyGroup,
    #[error("paired test needs equal lengths ({left} vs {right})")]
    LengthMismatch { left: usize, right: usize },
    #[error("too few resampling units: {0}")]
    TooFewUnits(usize),
    #[error("missing family label for language `{0}`")]
    MissingFamilyLabel(String),
    #[error("family contrast needs both groups non-empty: {0}")]
    MissingContrast(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    // orchestration
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("stage `{stage}` failed for {target} (cache key {key}): {source}")]
    Stage {
        stage: &'static str,
        target: String,
        key: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {context}: {reason}")]
    Parse { context: String, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn for_utterance(self, id: &str) -> Self {
        match self {
            e @ Error::Utterance { .. } => e,
            e => Error::Utterance {
                id: id.to_string(),
                source: Box::new(e),
            },
        }
    }
}
