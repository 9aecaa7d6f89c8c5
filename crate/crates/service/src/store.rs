//! Append-only event log, replayable campaign state and the service facade.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use esa_core::export::{DurationSource, ExportBundle, TimingRecord};
use esa_core::{validate_span, Annotation, ErrorSpan, SegmentTask, TaskKey};
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::build::Campaign;
use crate::ServiceError;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const SNAPSHOT_FILE: &str = "snapshot.json";
pub const DEFAULT_SNAPSHOT_EVERY: u64 = 100;

pub trait Clock: Send + Sync {
    /// Milliseconds since the Unix epoch.
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Clock under test control.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        ManualClock(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

impl<C: Clock + ?Sized> Clock for Arc<C> {
    fn now_ms(&self) -> u64 {
        (**self).now_ms()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    AnnotatorRegistered {
        annotator_id: String,
        batch_id: usize,
    },
    TaskClaimed {
        annotator_id: String,
        system_id: String,
        segment_id: String,
    },
    AnnotationSubmitted {
        annotation: Annotation,
        timing: TimingRecord,
    },
    AnnotationRevised {
        annotation: Annotation,
        timing: TimingRecord,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredEvent {
    pub seq: u64,
    pub timestamp: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub system_id: String,
    pub segment_id: String,
    pub claimed_at: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Submission {
    pub annotation: Annotation,
    pub timing: TimingRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorState {
    pub batch_id: usize,
    pub claim: Option<Claim>,
    /// In work order; the cursor is its length.
    pub submissions: Vec<Submission>,
}

impl AnnotatorState {
    pub fn cursor(&self) -> usize {
        self.submissions.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CampaignState {
    /// Sequence number of the last applied event.
    pub applied: u64,
    pub annotators: BTreeMap<String, AnnotatorState>,
}

impl CampaignState {
    pub fn apply(&mut self, event: &StoredEvent) {
        self.applied = event.seq;
        match &event.kind {
            EventKind::AnnotatorRegistered {
                annotator_id,
                batch_id,
            } => {
                self.annotators.entry(annotator_id.clone()).or_insert(AnnotatorState {
                    batch_id: *batch_id,
                    claim: None,
                    submissions: Vec::new(),
                });
            }
            EventKind::TaskClaimed {
                annotator_id,
                system_id,
                segment_id,
            } => {
                if let Some(a) = self.annotators.get_mut(annotator_id) {
                    a.claim = Some(Claim {
                        system_id: system_id.clone(),
                        segment_id: segment_id.clone(),
                        claimed_at: event.timestamp,
                    });
                }
            }
            EventKind::AnnotationSubmitted { annotation, timing } => {
                if let Some(a) = self.annotators.get_mut(&annotation.annotator_id) {
                    a.claim = None;
                    a.submissions.push(Submission {
                        annotation: annotation.clone(),
                        timing: timing.clone(),
                    });
                }
            }
            EventKind::AnnotationRevised { annotation, timing } => {
                if let Some(a) = self.annotators.get_mut(&annotation.annotator_id) {
                    if let Some(s) = a
                        .submissions
                        .iter_mut()
                        .find(|s| s.annotation.key() == annotation.key())
                    {
                        s.annotation = annotation.clone();
                        s.timing = timing.clone();
                    }
                }
            }
        }
    }

    pub fn batches_assigned(&self) -> usize {
        self.annotators.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Registration {
    pub annotator_id: String,
    pub batch_id: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum ClaimResult {
    Task {
        task: SegmentTask,
        /// 1-based position in the batch.
        position: usize,
        batch_size: usize,
        /// Segments of the same document in this batch, in work order.
        document: Vec<SegmentTask>,
    },
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub annotator_id: String,
    pub system_id: String,
    pub segment_id: String,
    pub spans: Vec<ErrorSpan>,
    pub direct_score: f64,
    /// Active annotation time measured by the client.
    #[serde(default)]
    pub client_elapsed_seconds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitAck {
    pub revised: bool,
    pub sequence_index: usize,
    pub duration_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorProgress {
    pub annotator_id: String,
    pub batch_id: usize,
    pub completed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub name: String,
    pub run_id: String,
    pub tasks: usize,
    pub batches: usize,
    pub batches_assigned: usize,
    pub submitted: usize,
    pub annotators: Vec<AnnotatorProgress>,
}

struct Writer {
    state: CampaignState,
    log: File,
    log_len: u64,
    since_snapshot: u64,
}

/// Owns a built campaign directory. Mutations are serialized through one
/// writer that appends to the event log before applying; readers work on
/// the last published state.
pub struct CampaignService {
    dir: PathBuf,
    campaign: Campaign,
    index: HashMap<TaskKey, usize>,
    writer: Mutex<Writer>,
    published: RwLock<Arc<CampaignState>>,
    clock: Arc<dyn Clock>,
    snapshot_every: u64,
}

impl CampaignService {
    pub fn open(dir: &Path, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        let campaign = Campaign::load(dir)?;
        let log_path = dir.join(EVENTS_FILE);
        let events = read_log(&log_path)?;
        let mut state = load_snapshot(&dir.join(SNAPSHOT_FILE))
            .filter(|s| s.applied <= events.last().map_or(0, |e| e.seq))
            .unwrap_or_default();
        let from = state.applied;
        for e in events.iter().filter(|e| e.seq > from) {
            state.apply(e);
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| ServiceError::io(&log_path, e))?;
        let log_len = log.metadata().map_err(|e| ServiceError::io(&log_path, e))?.len();
        Ok(CampaignService {
            dir: dir.to_path_buf(),
            index: campaign.task_index(),
            campaign,
            published: RwLock::new(Arc::new(state.clone())),
            writer: Mutex::new(Writer {
                state,
                log,
                log_len,
                since_snapshot: 0,
            }),
            clock,
            snapshot_every: DEFAULT_SNAPSHOT_EVERY,
        })
    }

    pub fn with_snapshot_every(mut self, events: u64) -> Self {
        self.snapshot_every = events.max(1);
        self
    }

    pub fn campaign(&self) -> &Campaign {
        &self.campaign
    }

    pub fn state(&self) -> Arc<CampaignState> {
        self.published.read().clone()
    }

    /// State rebuilt from the full event log alone, ignoring any snapshot.
    pub fn replay(dir: &Path) -> Result<CampaignState, ServiceError> {
        let mut state = CampaignState::default();
        for e in read_log(&dir.join(EVENTS_FILE))? {
            state.apply(&e);
        }
        Ok(state)
    }

    fn task(&self, key: &TaskKey) -> Option<&SegmentTask> {
        self.index.get(key).map(|&i| &self.campaign.tasks[i])
    }

    fn append(&self, w: &mut Writer, kind: EventKind) -> Result<(), ServiceError> {
        let event = StoredEvent {
            seq: w.state.applied + 1,
            timestamp: self.clock.now_ms(),
            kind,
        };
        let mut line = serde_json::to_string(&event).expect("event serializes");
        line.push('\n');
        let path = self.dir.join(EVENTS_FILE);
        if let Err(e) = w.log.write_all(line.as_bytes()).and_then(|_| w.log.sync_data()) {
            // drop a partial line so later appends stay parseable
            let _ = w.log.set_len(w.log_len);
            return Err(ServiceError::io(&path, e));
        }
        w.log_len += line.len() as u64;
        w.state.apply(&event);
        w.since_snapshot += 1;
        if w.since_snapshot >= self.snapshot_every {
            self.write_snapshot(&w.state)?;
            w.since_snapshot = 0;
        }
        *self.published.write() = Arc::new(w.state.clone());
        Ok(())
    }

    fn write_snapshot(&self, state: &CampaignState) -> Result<(), ServiceError> {
        let path = self.dir.join(SNAPSHOT_FILE);
        let tmp = self.dir.join("snapshot.json.tmp");
        let io = |e| ServiceError::io(&path, e);
        let mut f = File::create(&tmp).map_err(io)?;
        f.write_all(&serde_json::to_vec(state).expect("state serializes"))
            .map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, &path).map_err(io)
    }

    pub fn snapshot(&self) -> Result<(), ServiceError> {
        let w = self.writer.lock();
        self.write_snapshot(&w.state)
    }

    /// Assigns the next free batch; registering again returns the same one.
    pub fn register(&self, annotator_id: &str) -> Result<Registration, ServiceError> {
        if annotator_id.trim().is_empty() {
            return Err(ServiceError::InvalidSubmission(vec!["empty annotator id".into()]));
        }
        let mut w = self.writer.lock();
        if let Some(a) = w.state.annotators.get(annotator_id) {
            return Ok(self.registration(annotator_id, a.batch_id));
        }
        let batch_id = w.state.batches_assigned();
        if batch_id >= self.campaign.batches.len() {
            return Err(ServiceError::NoBatchAvailable(self.campaign.batches.len()));
        }
        self.append(
            &mut w,
            EventKind::AnnotatorRegistered {
                annotator_id: annotator_id.to_string(),
                batch_id,
            },
        )?;
        Ok(self.registration(annotator_id, batch_id))
    }

    fn registration(&self, annotator_id: &str, batch_id: usize) -> Registration {
        Registration {
            annotator_id: annotator_id.to_string(),
            batch_id,
            batch_size: self.campaign.batches[batch_id].items.len(),
        }
    }

    /// Next task in the annotator's order. An outstanding claim is returned
    /// again unchanged, so repeated claims are idempotent.
    pub fn claim_next(&self, annotator_id: &str) -> Result<ClaimResult, ServiceError> {
        let mut w = self.writer.lock();
        let a = w
            .state
            .annotators
            .get(annotator_id)
            .ok_or_else(|| ServiceError::UnknownAnnotator(annotator_id.to_string()))?;
        let batch = &self.campaign.batches[a.batch_id];
        let cursor = a.cursor();
        if cursor >= batch.items.len() {
            return Ok(ClaimResult::Done);
        }
        let key = batch.items[cursor].clone();
        if a.claim.is_none() {
            self.append(
                &mut w,
                EventKind::TaskClaimed {
                    annotator_id: annotator_id.to_string(),
                    system_id: key.system_id.clone(),
                    segment_id: key.segment_id.clone(),
                },
            )?;
        }
        let task = self.task(&key).expect("batch items exist").clone();
        let document = batch
            .items
            .iter()
            .filter_map(|k| self.task(k))
            .filter(|t| t.system_id == task.system_id && t.document_id == task.document_id)
            .cloned()
            .collect();
        Ok(ClaimResult::Task {
            task,
            position: cursor + 1,
            batch_size: batch.items.len(),
            document,
        })
    }

    /// Records an annotation of the claimed task, or revises an earlier one.
    pub fn submit(&self, req: &SubmitRequest) -> Result<SubmitAck, ServiceError> {
        let key = TaskKey::new(&req.system_id, &req.segment_id);
        let task = self
            .task(&key)
            .ok_or_else(|| ServiceError::UnknownSegment(key.to_string()))?;
        let mut problems: Vec<String> = req
            .spans
            .iter()
            .flat_map(|s| validate_span(s, &task.target_display_text))
            .map(|v| v.to_string())
            .collect();
        if !(0.0..=100.0).contains(&req.direct_score) {
            problems.push(format!("direct score {} outside [0, 100]", req.direct_score));
        }
        if let Some(t) = req.client_elapsed_seconds {
            if !t.is_finite() || t < 0.0 {
                problems.push(format!("client elapsed time {t} is negative"));
            }
        }
        if !problems.is_empty() {
            return Err(ServiceError::InvalidSubmission(problems));
        }

        let mut w = self.writer.lock();
        let now = self.clock.now_ms();
        let a = w
            .state
            .annotators
            .get(&req.annotator_id)
            .ok_or_else(|| ServiceError::UnknownAnnotator(req.annotator_id.clone()))?;
        let claimed = a
            .claim
            .as_ref()
            .filter(|c| c.system_id == req.system_id && c.segment_id == req.segment_id);
        let previous = a.submissions.iter().find(|s| s.annotation.key() == key);

        let (sequence_index, claimed_at, fallback, revised) = match (claimed, previous) {
            (Some(c), _) => (
                a.cursor() + 1,
                Some(c.claimed_at),
                now.saturating_sub(c.claimed_at) as f64 / 1000.0,
                false,
            ),
            (None, Some(p)) => (
                p.annotation.sequence_index,
                p.timing.claimed_at,
                p.annotation.duration_seconds,
                true,
            ),
            (None, None) => {
                return Err(ServiceError::NotClaimed {
                    annotator: req.annotator_id.clone(),
                    key: key.to_string(),
                })
            }
        };
        let (duration_seconds, duration_source) = match req.client_elapsed_seconds {
            Some(t) => (t, DurationSource::Client),
            None if revised => (fallback, previous.expect("revision").timing.duration_source),
            None => (fallback, DurationSource::Server),
        };
        let annotation = Annotation {
            segment_id: req.segment_id.clone(),
            system_id: req.system_id.clone(),
            annotator_id: req.annotator_id.clone(),
            run_id: self.campaign.meta.run_id.clone(),
            spans: req.spans.clone(),
            direct_score: req.direct_score,
            duration_seconds,
            submitted_at: now,
            sequence_index,
        };
        let timing = TimingRecord {
            annotator_id: req.annotator_id.clone(),
            run_id: self.campaign.meta.run_id.clone(),
            system_id: req.system_id.clone(),
            segment_id: req.segment_id.clone(),
            sequence_index,
            claimed_at,
            submitted_at: now,
            duration_seconds,
            duration_source,
        };
        let kind = if revised {
            EventKind::AnnotationRevised { annotation, timing }
        } else {
            EventKind::AnnotationSubmitted { annotation, timing }
        };
        self.append(&mut w, kind)?;
        Ok(SubmitAck {
            revised,
            sequence_index,
            duration_seconds,
        })
    }

    pub fn progress(&self) -> Progress {
        let state = self.state();
        let annotators: Vec<AnnotatorProgress> = state
            .annotators
            .iter()
            .map(|(id, a)| AnnotatorProgress {
                annotator_id: id.clone(),
                batch_id: a.batch_id,
                completed: a.cursor(),
                total: self.campaign.batches[a.batch_id].items.len(),
            })
            .collect();
        Progress {
            name: self.campaign.meta.name.clone(),
            run_id: self.campaign.meta.run_id.clone(),
            tasks: self.campaign.tasks.len(),
            batches: self.campaign.batches.len(),
            batches_assigned: state.batches_assigned(),
            submitted: annotators.iter().map(|a| a.completed).sum(),
            annotators,
        }
    }

    /// Latest annotation per (annotator, task) with all tasks and timing.
    pub fn export(&self) -> Result<ExportBundle, ServiceError> {
        export_state(&self.campaign, &self.state())
    }
}

pub fn export_state(campaign: &Campaign, state: &CampaignState) -> Result<ExportBundle, ServiceError> {
    let (annotations, timing) = state
        .annotators
        .values()
        .flat_map(|a| a.submissions.iter())
        .map(|s| (s.annotation.clone(), s.timing.clone()))
        .unzip();
    Ok(ExportBundle::new(campaign.tasks.clone(), annotations, timing)?)
}

fn load_snapshot(path: &Path) -> Option<CampaignState> {
    let bytes = fs::read(path).ok()?;
    match serde_json::from_slice(&bytes) {
        Ok(s) => Some(s),
        Err(e) => {
            log::warn!("ignoring unreadable snapshot {}: {e}", path.display());
            None
        }
    }
}

/// Reads the log, dropping (and truncating away) an incomplete final line
/// left by a crash mid-append.
pub fn read_log(path: &Path) -> Result<Vec<StoredEvent>, ServiceError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(ServiceError::io(path, e)),
    };
    let mut events = Vec::new();
    let mut good_len = 0;
    let mut rest = text.as_str();
    let mut line_no = 0;
    while !rest.is_empty() {
        line_no += 1;
        let (line, complete) = match rest.find('\n') {
            Some(i) => (&rest[..i], true),
            None => (rest, false),
        };
        let parsed = serde_json::from_str::<StoredEvent>(line);
        match (parsed, complete) {
            (Ok(e), true) => {
                let expected = events.last().map_or(1, |p: &StoredEvent| p.seq + 1);
                if e.seq != expected {
                    return Err(ServiceError::CorruptLog {
                        path: path.display().to_string(),
                        line: line_no,
                        message: format!("sequence {} after {}", e.seq, expected - 1),
                    });
                }
                events.push(e);
                good_len += line.len() + 1;
                rest = &rest[line.len() + 1..];
            }
            (_, false) => {
                log::warn!("dropping incomplete trailing event in {}", path.display());
                let f = OpenOptions::new()
                    .write(true)
                    .open(path)
                    .map_err(|e| ServiceError::io(path, e))?;
                f.set_len(good_len as u64).map_err(|e| ServiceError::io(path, e))?;
                break;
            }
            (Err(e), true) => {
                return Err(ServiceError::CorruptLog {
                    path: path.display().to_string(),
                    line: line_no,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(events)
}
