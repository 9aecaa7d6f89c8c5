//! Core library for AI-assisted error span annotation of machine translation.

pub mod analytics;
pub mod checks;
pub mod consistency;
pub mod export;
pub mod model;
pub mod qe;
pub mod span_diff;
pub mod stats;

pub use model::{
    score_from_spans, summarize_annotations, validate_span, Annotation, CheckInfo, ErrorSpan,
    SegmentTask, Severity, SpanOrigin, SpanScore, TaskKey,
};
