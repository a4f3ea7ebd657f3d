use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] io::Error),

    #[error("json error at line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },

    // corpus
    #[error("unbalanced span markers: found {0} `##` tokens")]
    UnbalancedMarkers(usize),
    #[error("empty marked span at character {0}")]
    EmptySpan(usize),
    #[error("invalid span {span_id} in document {doc_id}: {reason}")]
    InvalidSpan {
        doc_id: String,
        span_id: String,
        reason: String,
    },
    #[error("duplicate document id {0}")]
    DuplicateDocument(String),
    #[error("invalid query {0}: description is empty")]
    EmptyDescription(String),

    // represent
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("unknown representation component {0:?}")]
    UnknownComponent(String),
    #[error("invalid representation key {0:?} (expected BLOCK:COMPONENT)")]
    InvalidKey(String),
    #[error("dump record references missing span {doc_id}/{span_id}")]
    DanglingSpanRef { doc_id: String, span_id: String },
    #[error("malformed dump: {0}")]
    MalformedDump(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    // sweep
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("cannot take cosine of a zero vector")]
    ZeroVector,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("missing vector for key {key}, span {doc_id}/{span_id}")]
    MissingVector {
        key: String,
        doc_id: String,
        span_id: String,
    },

    // projection
    #[error("type {0:?} has no labeled mentions")]
    TypeWithoutMentions(String),
    #[error("type {0:?} belongs to the held-out test split")]
    TypeSplitViolation(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize, loss: f64 },
    #[error("corrupt model checkpoint: {0}")]
    CorruptModel(String),

    // index
    #[error("vector is zero or non-finite and cannot be normalized")]
    NonFiniteVector,
    #[error("corrupt index file: {0}")]
    CorruptIndex(String),
    #[error("index file format stores {expected}-dim vectors, index has dim {actual}")]
    UnsupportedIndexDim { expected: usize, actual: usize },

    // lexical
    #[error("document {0:?} is not in the BM25 index")]
    UnknownDoc(String),

    // eval
    #[error("query {0:?} has no relevant documents")]
    EmptyRelevant(String),
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("query set mismatch for system {system}: {detail}")]
    QuerySetMismatch { system: String, detail: String },

    // pipeline
    #[error("missing variant data: {0}")]
    MissingVariantData(String),
}

impl Error {
    pub(crate) fn json(line: usize, source: serde_json::Error) -> Self {
        Error::Json { line, source }
    }
}
