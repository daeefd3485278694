use thiserror::Error;

use crate::types::RowLabel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // batch validation
    #[error("duplicate image id `{0}` in batch")]
    DuplicateImageId(String),
    #[error("sample `{0}` has no query/target pairs")]
    EmptyPairs(String),
    #[error("sample `{image_id}` pair {pair}: {field} text is empty")]
    EmptyText {
        image_id: String,
        pair: usize,
        field: &'static str,
    },

    // templating
    #[error("tokenizer failure: {0}")]
    TokenizerFailure(String),
    #[error("reserved token `{token}` found in user text")]
    ReservedTokenInText { token: String },
    #[error("invalid chat markup: {0}")]
    InvalidMarkup(String),

    // encoder
    #[error("sequence of length {len} exceeds max_seq {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of vocabulary (size {vocab})")]
    TokenOutOfVocab { id: u32, vocab: usize },
    #[error("invalid encoder config: {0}")]
    InvalidEncoderConfig(String),

    // embeddings and losses
    #[error("embedding row {row} has norm {norm}, expected 1")]
    NonUnitEmbedding { row: usize, norm: f64 },
    #[error("embedding shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("query {0:?} has no aligned positive target")]
    MissingAlignedPositive(RowLabel),
    #[error("original/augmented rows are not paired for image {0}")]
    UnpairedAugmentation(usize),
    #[error("row labels do not match the logit spec: {0}")]
    LabelMismatch(String),
    #[error("invalid loss config: {0}")]
    InvalidLossConfig(String),

    // cost model
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    // data synthesis
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("provider returned an empty response")]
    EmptyResponse,
    #[error("image `{image_id}` is {width}x{height}, below the {min}px resolution filter")]
    BelowResolution {
        image_id: String,
        width: u32,
        height: u32,
        min: u32,
    },
    #[error("failed to parse provider output: {0}")]
    ParseFailure(String),
    #[error("expected 7 pairs with the cls/ret/global/local/creative layout: {0}")]
    CardinalityViolation(String),
    #[error("duplicate query within one image: `{0}`")]
    DuplicateQuery(String),
    #[error("schema violation at line {line}: {reason}")]
    SchemaViolation { line: usize, reason: String },

    // harness
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("evaluation set is empty")]
    EmptyEvalSet,

    // files
    #[error("malformed flat file: {0}")]
    MalformedFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
