//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the toolkit.
#[derive(Debug, Error)]
pub enum VseamError {
    #[error("invalid model dimensions: num_heads ({heads}) * head_dim ({head_dim}) != hidden_dim ({hidden})")]
    InvalidDimensions {
        heads: usize,
        head_dim: usize,
        hidden: usize,
    },

    #[error("layer index {layer} out of range (model has {layers} layers)")]
    LayerOutOfRange { layer: usize, layers: usize },

    #[error("head index {head} out of range (model has {heads} heads)")]
    HeadOutOfRange { head: usize, heads: usize },

    #[error("position {position} out of range (sequence length {len})")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("token id {token} out of vocabulary range (vocab size {vocab})")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("sequence length {len} exceeds model maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),

    #[error("duplicate intervention target: {0}")]
    DuplicateTarget(String),

    #[error("negative rescale factor {0} (must be >= 0)")]
    NegativeScale(f64),

    #[error("donor cache shape mismatch: donor is {donor_len}x{donor_dim}, input is {len}x{dim}")]
    DonorShapeMismatch {
        donor_len: usize,
        donor_dim: usize,
        len: usize,
        dim: usize,
    },

    #[error("head masking undefined for a single-head model")]
    SingleHeadMask,

    #[error("attention weights were not captured for this forward pass")]
    AttentionNotCaptured,

    #[error("{path}:{line}: schema error: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("duplicate triple id `{id}` at line {line}")]
    DuplicateId { id: String, line: usize },

    #[error("triple `{id}`: {message}")]
    InvalidTriple { id: String, message: String },

    #[error("triple `{id}` has no edited image reference")]
    MissingEditedImage { id: String },

    #[error("answer `{answer}` does not tokenize to exactly one token")]
    UntokenizableAnswer { answer: String },

    #[error("non-binary answer `{answer}` in triple `{id}` (expected yes/no)")]
    NonBinaryAnswer { id: String, answer: String },

    #[error("unknown semantic type `{0}`")]
    UnknownSemanticType(String),

    #[error("empty corruption index for strategy {strategy} on triple `{id}`")]
    EmptyCorruptionSet { strategy: String, id: String },

    #[error("strategy bbox-patches requires bounding boxes (triple `{id}` has none)")]
    MissingBoxes { id: String },

    #[error("question token counts differ across triples ({0} vs {1}); per-token grids need aligned questions")]
    MisalignedQuestions(usize, usize),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty strategy list")]
    EmptyStrategyList,

    #[error("random-remove sample of {requested} heads exceeds {available} available")]
    RandomSampleTooLarge { requested: usize, available: usize },

    #[error("client `{client}` failed: {message}")]
    Client { client: String, message: String },

    #[error("client `{client}` violated the edit-locality contract: {changed} pixels changed outside the dilated mask")]
    ClientContract { client: String, changed: usize },

    #[error("empty segmentation mask")]
    EmptyMask,

    #[error("edit region out of image bounds")]
    RegionOutOfBounds,

    #[error("zero-norm feature vector in cosine similarity")]
    ZeroNormVector,

    #[error("feature vectors have different lengths ({0} vs {1})")]
    FeatureLengthMismatch(usize, usize),

    #[error("result vectors cover different example ids")]
    MisalignedIds,

    #[error("fold size {fold_size} exceeds population {population}")]
    FoldSizeTooLarge { fold_size: usize, population: usize },

    #[error("empty grid")]
    EmptyGrid,

    #[error("config error: {field}: {message}")]
    Config { field: String, message: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<VseamError>,
    },

    #[error("unsupported model container: {0}")]
    BadContainer(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("{path}: {source}")]
    IoAt {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl VseamError {
    /// Wrap an io::Error with the path it occurred on.
    pub fn io_at(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        VseamError::IoAt {
            path: path.into(),
            source,
        }
    }

    /// Whether this error reflects invalid input rather than a runtime failure.
    /// The CLI maps validation errors to exit code 2 and everything else to 3.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            VseamError::InvalidDimensions { .. }
                | VseamError::LayerOutOfRange { .. }
                | VseamError::HeadOutOfRange { .. }
                | VseamError::PositionOutOfRange { .. }
                | VseamError::TokenOutOfRange { .. }
                | VseamError::SequenceTooLong { .. }
                | VseamError::InvalidSequence(_)
                | VseamError::DuplicateTarget(_)
                | VseamError::NegativeScale(_)
                | VseamError::Schema { .. }
                | VseamError::DuplicateId { .. }
                | VseamError::InvalidTriple { .. }
                | VseamError::MissingEditedImage { .. }
                | VseamError::UntokenizableAnswer { .. }
                | VseamError::NonBinaryAnswer { .. }
                | VseamError::UnknownSemanticType(_)
                | VseamError::MissingBoxes { .. }
                | VseamError::EmptyDataset
                | VseamError::EmptyStrategyList
                | VseamError::Config { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, VseamError>;
