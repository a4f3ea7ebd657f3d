//! Zero-shot retrieval of entity mentions by type description, using
//! intermediate language-model representations.
//!
//! The flow is: pick a `(block, component)` representation with [`sweep`],
//! train a small projection on it with [`projection`], index every mention
//! with [`index`], then rank documents for a type description and score the
//! rankings with [`eval`]. [`lexical`] provides the BM25 baseline.

pub mod corpus;
mod error;
pub mod eval;
pub mod index;
pub mod lexical;
pub mod pipeline;
pub mod projection;
pub mod represent;
pub mod sweep;

pub use corpus::{Corpus, Document, EntitySpan, SpanRef, TypeQuery};
pub use error::{Error, Result};
pub use eval::{EvalReport, Metric, QueryResult};
pub use index::{RankedDoc, RankedResult, VectorIndex};
pub use lexical::{Bm25Index, Bm25Params};
pub use projection::{ProjectionModel, TrainConfig, Triplet};
pub use represent::{MentionToken, RepresentationKey, RepresentationStore};
