//! Retrieval over documents annotated with semantic paths: master tags that
//! describe a whole document followed by paragraph tags for each chunk.
//!
//! Chunks are indexed three ways (path vectors, text vectors, BM25). A query
//! is rewritten into sub-queries, each of which gathers candidates from the
//! path and sparse indices, re-ranks them with weighted reciprocal rank
//! fusion, prunes them against the sub-query, and hands the grouped evidence
//! to a generator.

pub mod corpus;
pub mod embedding;
pub mod index;
pub mod llm;
pub mod prompts;
pub mod tagging;
pub mod text;
pub mod engine;
pub mod eval;
pub mod generation;
pub mod retrieval;
pub mod trace;

mod par;

pub use corpus::{Chunk, Document};
pub use engine::{Engine, EngineConfig, EngineError, QueryOptions, QueryOutcome};
pub use index::{AugmentedChunk, HybridIndex, RankedHit};
pub use par::parallel_map;
pub use retrieval::{Agents, RetrievalConfig, SubQueryContext};
pub use tagging::{SemanticPath, Tag};
pub use trace::QueryDebugTrace;
