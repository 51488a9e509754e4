//! Detection evaluation: IoU matching, average precision, per-modality and
//! global aggregation, and the harmonic mean over modalities (H-mAP).
//!
//! All scores are fractions in `[0, 1]` internally; rendering to percent
//! happens only in the report writers.

mod ap;
mod boxes;
mod evaluate;
mod io;
mod metrics;
mod registry;

pub use ap::{
    average_precision, map_over_thresholds, ApMode, ThresholdAps, DEFAULT_IOU_THRESHOLDS,
};
pub use boxes::{iou, BBox, Detection, GroundTruthEntry};
pub use evaluate::{evaluate, CategoryReport, EvalConfig, EvalReport, Scores};
pub use io::{
    load_detections, load_ground_truth, parse_detections, parse_ground_truth, write_report_csv,
    write_report_json,
};
pub use metrics::{
    global_union_map, harmonic_modality_map, modality_map, weighted_union_map, Unit,
};
pub use registry::ModalityRegistry;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: invalid `{field}`: {message}")]
    Invalid {
        line: usize,
        field: &'static str,
        message: String,
    },
    #[error("records span several categories ({0} and {1})")]
    MixedCategories(String, String),
    #[error("IoU threshold {0} outside (0, 1)")]
    Threshold(f64),
    #[error("threshold list is empty")]
    EmptyThresholds,
    #[error("category `{0}` is not in the modality registry")]
    UnregisteredCategory(String),
    #[error("category `{category}` belongs to modality `{expected}`, record says `{found}`")]
    ModalityMismatch {
        category: String,
        expected: String,
        found: String,
    },
    #[error("category `{0}` has no AP value")]
    MissingCategory(String),
    #[error("invalid registry: {0}")]
    Registry(String),
    #[error("no values to aggregate")]
    Empty,
    #[error("value {value} outside the {unit:?} range")]
    OutOfRange { value: f64, unit: Unit },
    #[error("report serialization failed: {0}")]
    Serialize(String),
}

pub type Result<T> = std::result::Result<T, EvalError>;
