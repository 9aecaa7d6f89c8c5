//! Canonical export format and ingestion.
//!
//! An export directory holds three JSON-lines files, each starting with a
//! header line `{"schema": ..., "version": 1}`:
//! `segments.jsonl` (one [`SegmentTask`] per line), `annotations.jsonl`
//! (one [`Annotation`] per line) and `timing.jsonl` (one [`TimingRecord`]
//! per line). Scores from an external protocol use `scores.jsonl` lines of
//! [`ScoreRecord`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checks::{CheckPair, StreamItem};
use crate::model::{Annotation, SegmentTask, TaskKey};
use crate::span_diff::{diff_segment, EditRecord, ProgressEdits, SegmentEdits};

pub const FORMAT_VERSION: u32 = 1;
pub const SEGMENTS_FILE: &str = "segments.jsonl";
pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";

pub const SEGMENTS_SCHEMA: &str = "esa.segments";
const ANNOTATIONS_SCHEMA: &str = "esa.annotations";
const TIMING_SCHEMA: &str = "esa.timing";
const SCORES_SCHEMA: &str = "esa.scores";

#[derive(Debug, Error)]
pub enum ExportError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: missing header line")]
    MissingHeader { path: PathBuf },
    #[error("{path}: expected schema {expected} version {FORMAT_VERSION}, found {found}")]
    WrongSchema {
        path: PathBuf,
        expected: &'static str,
        found: String,
    },
    #[error("annotation {key} by {annotator} refers to an unknown segment")]
    UnknownSegment { key: String, annotator: String },
    #[error("duplicate segment {0}")]
    DuplicateSegment(String),
    #[error("invalid record: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DurationSource {
    /// Active time reported by the annotation client.
    Client,
    /// Claim-to-submit delta measured by the server.
    Server,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub annotator_id: String,
    pub run_id: String,
    pub system_id: String,
    pub segment_id: String,
    pub sequence_index: usize,
    pub claimed_at: Option<u64>,
    pub submitted_at: u64,
    pub duration_seconds: f64,
    pub duration_source: DurationSource,
}

/// A segment-level score from another evaluation protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub system_id: String,
    pub segment_id: String,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    schema: String,
    version: u32,
}

/// Everything analytics needs from one campaign run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExportBundle {
    pub segments: Vec<SegmentTask>,
    pub annotations: Vec<Annotation>,
    pub timing: Vec<TimingRecord>,
}

impl ExportBundle {
    pub fn new(
        mut segments: Vec<SegmentTask>,
        mut annotations: Vec<Annotation>,
        mut timing: Vec<TimingRecord>,
    ) -> Result<Self, ExportError> {
        segments.sort_by(|a, b| (&a.system_id, &a.segment_id).cmp(&(&b.system_id, &b.segment_id)));
        for pair in segments.windows(2) {
            if pair[0].key() == pair[1].key() {
                return Err(ExportError::DuplicateSegment(pair[0].key().to_string()));
            }
        }
        annotations.sort_by(|a, b| annotation_order(a).cmp(&annotation_order(b)));
        timing.sort_by(|a, b| {
            (&a.run_id, &a.annotator_id, a.sequence_index, &a.system_id, &a.segment_id).cmp(&(
                &b.run_id,
                &b.annotator_id,
                b.sequence_index,
                &b.system_id,
                &b.segment_id,
            ))
        });
        let bundle = ExportBundle {
            segments,
            annotations,
            timing,
        };
        bundle.check_references()?;
        Ok(bundle)
    }

    fn check_references(&self) -> Result<(), ExportError> {
        let tasks = self.task_index();
        for a in &self.annotations {
            let task = tasks.get(&a.key()).ok_or_else(|| ExportError::UnknownSegment {
                key: a.key().to_string(),
                annotator: a.annotator_id.clone(),
            })?;
            a.validate(&task.target_display_text)
                .map_err(|e| ExportError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    pub fn task_index(&self) -> HashMap<TaskKey, &SegmentTask> {
        self.segments.iter().map(|t| (t.key(), t)).collect()
    }

    pub fn task(&self, key: &TaskKey) -> Option<&SegmentTask> {
        self.segments
            .binary_search_by(|t| {
                (t.system_id.as_str(), t.segment_id.as_str())
                    .cmp(&(key.system_id.as_str(), key.segment_id.as_str()))
            })
            .ok()
            .map(|i| &self.segments[i])
    }

    pub fn is_check(&self, key: &TaskKey) -> bool {
        self.task(key).is_some_and(SegmentTask::is_check)
    }

    /// Annotations of regular (non-check) items.
    pub fn regular_annotations(&self) -> impl Iterator<Item = &Annotation> {
        self.annotations.iter().filter(|a| !self.is_check(&a.key()))
    }

    pub fn systems(&self) -> Vec<String> {
        let mut s: Vec<String> = self
            .segments
            .iter()
            .filter(|t| !t.is_check())
            .map(|t| t.system_id.clone())
            .collect();
        s.dedup();
        s
    }

    /// Each check annotation joined with the same annotator's annotation of
    /// the original item.
    pub fn check_pairs(&self) -> Vec<CheckPair> {
        let by_annotator: HashMap<(&str, TaskKey), &Annotation> = self
            .annotations
            .iter()
            .map(|a| ((a.annotator_id.as_str(), a.key()), a))
            .collect();
        let mut pairs = Vec::new();
        for a in &self.annotations {
            let Some(info) = self.task(&a.key()).and_then(|t| t.check_info.as_ref()) else {
                continue;
            };
            let original_key = TaskKey::new(&a.system_id, &info.original_segment_id);
            if let Some(orig) = by_annotator.get(&(a.annotator_id.as_str(), original_key)) {
                pairs.push(CheckPair {
                    original: (*orig).clone(),
                    perturbed: a.clone(),
                    check: info.clone(),
                });
            }
        }
        pairs
    }

    fn edits_of(&self, a: &Annotation) -> Option<(usize, Vec<EditRecord>)> {
        let task = self.task(&a.key())?;
        Some((task.prefill_spans.len(), diff_segment(&task.prefill_spans, &a.spans, &a.key())))
    }

    /// Span edits of every regular annotation.
    pub fn segment_edits(&self) -> Vec<SegmentEdits> {
        self.regular_annotations()
            .filter_map(|a| {
                let (qe_span_count, records) = self.edits_of(a)?;
                Some(SegmentEdits {
                    key: a.key(),
                    qe_span_count,
                    records,
                })
            })
            .collect()
    }

    /// Span edits of every regular annotation tagged with its work position.
    pub fn progress_edits(&self) -> Vec<ProgressEdits> {
        self.regular_annotations()
            .filter_map(|a| {
                let (_, records) = self.edits_of(a)?;
                Some(ProgressEdits {
                    sequence_index: a.sequence_index,
                    records,
                })
            })
            .collect()
    }

    /// Per-annotator work streams in submission order, checks included.
    pub fn streams(&self) -> Vec<Vec<StreamItem>> {
        let mut grouped: BTreeMap<(&str, &str), Vec<&Annotation>> = BTreeMap::new();
        for a in &self.annotations {
            grouped
                .entry((a.run_id.as_str(), a.annotator_id.as_str()))
                .or_default()
                .push(a);
        }
        grouped
            .into_values()
            .map(|mut list| {
                list.sort_by_key(|a| a.sequence_index);
                list.into_iter()
                    .filter_map(|a| {
                        let task = self.task(&a.key())?;
                        let (ai_spans, records) = self.edits_of(a)?;
                        Some(StreamItem {
                            document_id: task.document_id.clone(),
                            is_check: task.is_check(),
                            ai_spans,
                            accepted_ai_spans: records
                                .iter()
                                .filter(|r| r.kind.accepts_ai_span())
                                .count(),
                        })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), ExportError> {
        fs::create_dir_all(dir).map_err(|source| ExportError::Io {
            path: dir.to_path_buf(),
            message: source.to_string(),
        })?;
        write_jsonl(&dir.join(SEGMENTS_FILE), SEGMENTS_SCHEMA, &self.segments)?;
        write_jsonl(&dir.join(ANNOTATIONS_FILE), ANNOTATIONS_SCHEMA, &self.annotations)?;
        write_jsonl(&dir.join(TIMING_FILE), TIMING_SCHEMA, &self.timing)
    }

    pub fn load_dir(dir: &Path) -> Result<Self, ExportError> {
        let segments = read_jsonl(&dir.join(SEGMENTS_FILE), SEGMENTS_SCHEMA)?;
        let annotations = read_jsonl(&dir.join(ANNOTATIONS_FILE), ANNOTATIONS_SCHEMA)?;
        let timing = read_jsonl(&dir.join(TIMING_FILE), TIMING_SCHEMA)?;
        Self::new(segments, annotations, timing)
    }
}

fn annotation_order(a: &Annotation) -> (&str, &str, usize, &str, &str) {
    (
        &a.run_id,
        &a.annotator_id,
        a.sequence_index,
        &a.system_id,
        &a.segment_id,
    )
}

pub fn write_scores(path: &Path, scores: &[ScoreRecord]) -> Result<(), ExportError> {
    write_jsonl(path, SCORES_SCHEMA, scores)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>, ExportError> {
    read_jsonl(path, SCORES_SCHEMA)
}

pub fn render_jsonl<T: Serialize>(schema: &str, records: &[T]) -> String {
    let header = Header {
        schema: schema.to_string(),
        version: FORMAT_VERSION,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Writes a header line followed by one JSON record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, schema: &str, records: &[T]) -> Result<(), ExportError> {
    let io = |source: std::io::Error| ExportError::Io {
        path: path.to_path_buf(),
        message: source.to_string(),
    };
    let mut file = fs::File::create(path).map_err(io)?;
    file.write_all(render_jsonl(schema, records).as_bytes()).map_err(io)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path, schema: &'static str) -> Result<Vec<T>, ExportError> {
    let text = fs::read_to_string(path).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        message: source.to_string(),
    })?;
    parse_jsonl(path, schema, &text)
}

fn parse_jsonl<T: DeserializeOwned>(
    path: &Path,
    schema: &'static str,
    text: &str,
) -> Result<Vec<T>, ExportError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| ExportError::MissingHeader {
        path: path.to_path_buf(),
    })?;
    let header: Header = serde_json::from_str(first).map_err(|_| ExportError::MissingHeader {
        path: path.to_path_buf(),
    })?;
    if header.schema != schema || header.version != FORMAT_VERSION {
        return Err(ExportError::WrongSchema {
            path: path.to_path_buf(),
            expected: schema,
            found: format!("{} version {}", header.schema, header.version),
        });
    }
    lines
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| ExportError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
