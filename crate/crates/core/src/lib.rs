//! Semantic pose verification for visual localization.
//!
//! Database panoramas are turned into gnomonic views, RGB retrieval scores are
//! fused with a semantic-mask similarity over each query's candidate pool, and
//! the result is evaluated with Recall@N. Two semantic scorers are provided: a
//! pixel-agreement baseline and a contrastively trained embedding network.

pub mod augment;
pub mod config;
pub mod contrastive;
pub mod error;
pub mod evalkit;
pub mod maskio;
pub mod nn;
pub mod pixelsim;
pub mod projection;
pub mod rerank;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
pub use maskio::{ClassPalette, Dataset, PanoramaRecord, Position, QueryRecord, SemanticMask, ViewRecord};
pub use nn::EmbeddingModel;
pub use rerank::{CandidateList, RgbScoreTable, SemanticScorer};

/// Version of the on-disk formats (manifest, score CSVs, checkpoints).
pub const FORMAT_VERSION: u32 = 1;
