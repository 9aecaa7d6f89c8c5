//! Shared domain types: error spans, segment tasks, annotations and span scores.
//!
//! All character offsets are Unicode scalar-value indices into the *display*
//! text of a segment, i.e. the translation followed by [`MISSING_SUFFIX`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Suffix appended to every translation so omissions can be marked as ordinary spans.
pub const MISSING_SUFFIX: &str = " [MISSING]";

/// The token annotators select for omission errors.
pub const MISSING_TOKEN: &str = "[MISSING]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Minor,
    Major,
}

impl Severity {
    /// Weight of one error of this severity in the span-based score.
    pub fn penalty(self) -> i64 {
        match self {
            Severity::Minor => 1,
            Severity::Major => 5,
        }
    }
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Severity::Minor => f.write_str("minor"),
            Severity::Major => f.write_str("major"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanOrigin {
    Ai,
    Human,
}

/// A character-offset interval `[start, end)` on a segment's display text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ErrorSpan {
    pub start: usize,
    pub end: usize,
    pub severity: Severity,
    pub origin: SpanOrigin,
    #[serde(default)]
    pub on_missing: bool,
}

impl ErrorSpan {
    pub fn new(start: usize, end: usize, severity: Severity, origin: SpanOrigin) -> Self {
        ErrorSpan {
            start,
            end,
            severity,
            origin,
            on_missing: false,
        }
    }

    pub fn ai(start: usize, end: usize, severity: Severity) -> Self {
        Self::new(start, end, severity, SpanOrigin::Ai)
    }

    pub fn human(start: usize, end: usize, severity: Severity) -> Self {
        Self::new(start, end, severity, SpanOrigin::Human)
    }

    /// Span covering the `[MISSING]` token of the given translation.
    pub fn missing(target_text: &str, severity: Severity, origin: SpanOrigin) -> Self {
        let (start, end) = missing_token_range(target_text);
        ErrorSpan {
            start,
            end,
            severity,
            origin,
            on_missing: true,
        }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_interval(&self, other: &ErrorSpan) -> bool {
        self.start == other.start && self.end == other.end
    }

    /// Number of characters shared with `other`.
    pub fn overlap(&self, other: &ErrorSpan) -> usize {
        let lo = self.start.max(other.start);
        let hi = self.end.min(other.end);
        hi.saturating_sub(lo)
    }

    /// Largest shift of either endpoint between the two spans.
    pub fn endpoint_distance(&self, other: &ErrorSpan) -> usize {
        self.start.abs_diff(other.start).max(self.end.abs_diff(other.end))
    }

    pub fn intersects(&self, start: usize, end: usize) -> bool {
        self.start.max(start) < self.end.min(end)
    }

    pub fn with_origin(mut self, origin: SpanOrigin) -> Self {
        self.origin = origin;
        self
    }

    /// Same span moved by `delta` characters.
    pub fn shifted(mut self, delta: isize) -> Self {
        self.start = (self.start as isize + delta) as usize;
        self.end = (self.end as isize + delta) as usize;
        self
    }
}

/// Translation text as shown to annotators, with the missing-content suffix.
pub fn display_text(target_text: &str) -> String {
    let mut s = String::with_capacity(target_text.len() + MISSING_SUFFIX.len());
    s.push_str(target_text);
    s.push_str(MISSING_SUFFIX);
    s
}

/// Character range of the `[MISSING]` token within the display text of `target_text`.
pub fn missing_token_range(target_text: &str) -> (usize, usize) {
    let start = target_text.chars().count() + 1;
    (start, start + MISSING_TOKEN.chars().count())
}

pub fn char_len(text: &str) -> usize {
    text.chars().count()
}

/// Substring by character offsets; clamps to the text length.
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let byte_at = |pos: usize| {
        text.char_indices()
            .nth(pos)
            .map_or(text.len(), |(byte, _)| byte)
    };
    let lo = byte_at(start);
    &text[lo..byte_at(end).max(lo)]
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SpanViolation {
    #[error("start < end violated: start {start}, end {end}")]
    EmptyInterval { start: usize, end: usize },
    #[error("end <= display length violated: end {end}, display length {len}")]
    OutOfBounds { end: usize, len: usize },
    #[error("span flagged on_missing lies outside the [MISSING] suffix")]
    MissingOutsideSuffix,
}

/// Checks a span against the display text and returns every violated rule.
pub fn validate_span(span: &ErrorSpan, display_text: &str) -> Vec<SpanViolation> {
    let len = char_len(display_text);
    let mut violations = Vec::new();
    if span.start >= span.end {
        violations.push(SpanViolation::EmptyInterval {
            start: span.start,
            end: span.end,
        });
    }
    if span.end > len {
        violations.push(SpanViolation::OutOfBounds { end: span.end, len });
    }
    if span.on_missing {
        let suffix_start = display_text
            .strip_suffix(MISSING_SUFFIX)
            .map(char_len)
            .filter(|_| len >= char_len(MISSING_SUFFIX));
        let inside = match suffix_start {
            Some(lo) => span.start >= lo && span.end <= len,
            None => false,
        };
        if !inside {
            violations.push(SpanViolation::MissingOutsideSuffix);
        }
    }
    violations
}

/// Segment-level span score: −1 per minor error, −5 per major error.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpanScore(pub i64);

impl SpanScore {
    pub fn value(self) -> i64 {
        self.0
    }
}

pub fn score_from_spans(spans: &[ErrorSpan]) -> SpanScore {
    SpanScore(-spans.iter().map(|s| s.severity.penalty()).sum::<i64>())
}

/// Metadata carried by a perturbed attention-check item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckInfo {
    /// Character interval of the inserted phrase in the perturbed display text.
    pub perturbed_region: (usize, usize),
    pub original_segment_id: String,
}

/// One translation to be annotated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentTask {
    pub segment_id: String,
    pub document_id: String,
    pub system_id: String,
    pub source_text: String,
    pub target_text: String,
    pub target_display_text: String,
    #[serde(default)]
    pub prefill_spans: Vec<ErrorSpan>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub check_info: Option<CheckInfo>,
    /// Set when the QE provider failed and the pre-fill was left empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_error: Option<String>,
}

impl SegmentTask {
    pub fn new(
        segment_id: impl Into<String>,
        document_id: impl Into<String>,
        system_id: impl Into<String>,
        source_text: impl Into<String>,
        target_text: impl Into<String>,
    ) -> Self {
        let target_text = target_text.into();
        SegmentTask {
            segment_id: segment_id.into(),
            document_id: document_id.into(),
            system_id: system_id.into(),
            source_text: source_text.into(),
            target_display_text: display_text(&target_text),
            target_text,
            prefill_spans: Vec::new(),
            check_info: None,
            provider_error: None,
        }
    }

    pub fn key(&self) -> TaskKey {
        TaskKey::new(&self.system_id, &self.segment_id)
    }

    pub fn is_check(&self) -> bool {
        self.check_info.is_some()
    }

    pub fn word_count(&self) -> usize {
        self.target_text.split_whitespace().count()
    }

    /// Validates structural invariants: display text, pre-fill spans and check region.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.target_display_text != display_text(&self.target_text) {
            return Err(ModelError::InvalidTask {
                key: self.key().to_string(),
                reason: "display text must be the translation plus the [MISSING] suffix".into(),
            });
        }
        for span in &self.prefill_spans {
            let violations = validate_span(span, &self.target_display_text);
            if !violations.is_empty() {
                return Err(ModelError::InvalidSpans {
                    key: self.key().to_string(),
                    violations,
                });
            }
            if span.origin != SpanOrigin::Ai {
                return Err(ModelError::InvalidTask {
                    key: self.key().to_string(),
                    reason: "pre-fill spans must have AI origin".into(),
                });
            }
        }
        if let Some(check) = &self.check_info {
            let (start, end) = check.perturbed_region;
            if start >= end || end > char_len(&self.target_display_text) {
                return Err(ModelError::InvalidTask {
                    key: self.key().to_string(),
                    reason: format!("perturbed region ({start},{end}) out of range"),
                });
            }
        }
        Ok(())
    }
}

/// Identifies a task: one system's translation of one source segment.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskKey {
    pub system_id: String,
    pub segment_id: String,
}

impl TaskKey {
    pub fn new(system_id: &str, segment_id: &str) -> Self {
        TaskKey {
            system_id: system_id.to_owned(),
            segment_id: segment_id.to_owned(),
        }
    }
}

impl fmt::Display for TaskKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.system_id, self.segment_id)
    }
}

/// An annotator's final state for one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub segment_id: String,
    pub system_id: String,
    pub annotator_id: String,
    #[serde(default)]
    pub run_id: String,
    pub spans: Vec<ErrorSpan>,
    pub direct_score: f64,
    pub duration_seconds: f64,
    /// Milliseconds since the Unix epoch.
    pub submitted_at: u64,
    /// 1-based position of the segment in the annotator's work order.
    pub sequence_index: usize,
}

impl Annotation {
    pub fn key(&self) -> TaskKey {
        TaskKey::new(&self.system_id, &self.segment_id)
    }

    pub fn span_score(&self) -> SpanScore {
        score_from_spans(&self.spans)
    }

    pub fn validate(&self, display_text: &str) -> Result<(), ModelError> {
        let violations: Vec<_> = self
            .spans
            .iter()
            .flat_map(|s| validate_span(s, display_text))
            .collect();
        if !violations.is_empty() {
            return Err(ModelError::InvalidSpans {
                key: self.key().to_string(),
                violations,
            });
        }
        if !(0.0..=100.0).contains(&self.direct_score) {
            return Err(ModelError::ScoreOutOfRange(self.direct_score));
        }
        if self.duration_seconds.is_nan() || self.duration_seconds < 0.0 {
            return Err(ModelError::NegativeDuration(self.duration_seconds));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("no annotations")]
    NoAnnotations,
    #[error("direct score {0} outside [0, 100]")]
    ScoreOutOfRange(f64),
    #[error("negative duration {0}")]
    NegativeDuration(f64),
    #[error("invalid spans on {key}: {}", join_violations(.violations))]
    InvalidSpans {
        key: String,
        violations: Vec<SpanViolation>,
    },
    #[error("invalid task {key}: {reason}")]
    InvalidTask { key: String, reason: String },
}

fn join_violations(violations: &[SpanViolation]) -> String {
    violations
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

/// Aggregate span and score statistics over a set of annotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSummary {
    pub segments: usize,
    pub mean_errors: f64,
    /// Share of minor spans among all spans; `None` when there are no spans.
    pub minor_share: Option<f64>,
    pub major_share: Option<f64>,
    pub mean_score: f64,
}

pub fn summarize_annotations(annotations: &[Annotation]) -> Result<AnnotationSummary, ModelError> {
    if annotations.is_empty() {
        return Err(ModelError::NoAnnotations);
    }
    let span_lists: Vec<&[ErrorSpan]> = annotations.iter().map(|a| a.spans.as_slice()).collect();
    let (mean_errors, minor_share, major_share) = span_statistics(&span_lists);
    let mean_score =
        annotations.iter().map(|a| a.direct_score).sum::<f64>() / annotations.len() as f64;
    Ok(AnnotationSummary {
        segments: annotations.len(),
        mean_errors,
        minor_share,
        major_share,
        mean_score,
    })
}

/// Mean span count per list and pooled minor/major shares.
pub fn span_statistics(span_lists: &[&[ErrorSpan]]) -> (f64, Option<f64>, Option<f64>) {
    let total: usize = span_lists.iter().map(|l| l.len()).sum();
    let minor = span_lists
        .iter()
        .flat_map(|l| l.iter())
        .filter(|s| s.severity == Severity::Minor)
        .count();
    let mean = if span_lists.is_empty() {
        0.0
    } else {
        total as f64 / span_lists.len() as f64
    };
    if total == 0 {
        (mean, None, None)
    } else {
        let minor_share = minor as f64 / total as f64;
        (mean, Some(minor_share), Some(1.0 - minor_share))
    }
}
