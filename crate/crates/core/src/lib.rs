//! figforge: turns archives of scientific-article packages into an aligned
//! subfigure/subcaption image-text dataset.
//!
//! The pipeline runs six stages in order:
//!
//! 1. [`ingest`] walks the archive and decodes figure/caption pairs.
//! 2. [`filter`] keeps captions with diagnostic-procedure keywords and,
//!    when a classifier is reachable, gates on the "Medical" category rank.
//! 3. [`panelsplit`] separates compound figures into panels (gutter splitter
//!    by default, remote detector optionally) and crops them.
//! 4. [`captionparse`] splits the caption into labeled subcaptions.
//! 5. [`align`] pairs every panel with a subcaption, falling back to the
//!    full caption.
//! 6. [`emit`] deduplicates, writes JSONL and computes corpus statistics.
//!
//! [`metrics`] and [`modelmath`] hold the evaluation arithmetic and the
//! contrastive/masked-language loss arithmetic. Both are generic over the
//! floating point type through [`Scalar`]; the aliases below fix the common
//! instantiations.

pub mod align;
pub mod captionparse;
pub mod emit;
pub mod filter;
pub mod fixtures;
pub mod infer;
pub mod ingest;
pub mod metrics;
pub mod modelmath;
pub mod panelsplit;
pub mod pipeline;
pub mod raster;
mod scalar;
pub mod warning;

pub use scalar::Scalar;
pub use warning::Warning;

/// Double-precision box geometry.
pub type Rect64 = metrics::Rect<f64>;
/// Double-precision scored prediction.
pub type ScoredRect64 = metrics::ScoredRect<f64>;
/// Double-precision detection evaluation set.
pub type DetectionSet64 = metrics::DetectionSet<f64>;
pub type DetectionSet32 = metrics::DetectionSet<f32>;
/// Embedding batch in the precision the inference service returns.
pub type EmbeddingBatch32 = modelmath::EmbeddingBatch<f32>;
pub type EmbeddingBatch64 = modelmath::EmbeddingBatch<f64>;
pub type LossConfig32 = modelmath::LossConfig<f32>;
pub type LossConfig64 = modelmath::LossConfig<f64>;
