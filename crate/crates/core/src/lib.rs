//! Per-place adaptive similarity thresholds for visual place recognition.
//!
//! A place's threshold is derived from how similar its images are to images
//! of *other* places. Queries are then answered by dropping places whose best
//! similarity falls below their threshold and ranking the survivors, which
//! lets a query come back as "unknown place".
//!
//! Modules, bottom up:
//! - [`store`]: descriptor file and manifest formats
//! - [`similarity`]: cosine kernels
//! - [`thresholds`]: negative statistics, mixtures, threshold tables
//! - [`retrieval`]: baseline and filter-then-rank queries
//! - [`evaluation`]: cross-validated Recall@K
//! - [`prep`]: group-and-step datasets and the built-in descriptor

pub mod error;
pub mod evaluation;
pub mod prep;
pub mod retrieval;
pub mod similarity;
pub mod store;
pub mod thresholds;

pub use error::{Result, VprError};
pub use evaluation::{
    emit_report, evaluate, parse_report_csv, EvalConfig, EvalMethod, Evaluation, RecallReport,
    ReportFormat,
};
pub use prep::{build_mini, extract_builtin, GroupStepConfig, MiniDataset, TraversalSpec};
pub use retrieval::{
    best_match, rank_baseline, rank_filtered, score_places, BestMatch, PlaceDatabase, PlaceScore,
    RankedResult,
};
pub use similarity::{cosine, similarity_row, NormCache, SimilarityScore};
pub use store::{
    load_manifest, read_descriptor_file, write_descriptor_file, write_manifest, Dataset,
    DatasetManifest, Descriptor, ImageKey,
};
pub use thresholds::{
    assemble_mixture, build_negative_set, calculate_place_averages, fit_component,
    generate_thresholds, simple_threshold, weighted_threshold, GaussianComponent, NegativeSet,
    PlaceMixture, RunRecord, ThresholdMethod, ThresholdTable,
};
