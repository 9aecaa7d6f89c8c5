//! Campaign construction: pre-fill, attention checks and batch assignment.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;
use std::thread;

use esa_core::checks::{inject_checks, Perturber};
use esa_core::export::{read_jsonl, write_jsonl, SEGMENTS_SCHEMA};
use esa_core::qe::{prefill_segment, QeProvider};
use esa_core::{SegmentTask, TaskKey};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::CampaignConfig;
use crate::ServiceError;

pub const META_FILE: &str = "campaign.json";
pub const TASKS_FILE: &str = "tasks.jsonl";
pub const BATCHES_FILE: &str = "batches.jsonl";
const BATCHES_SCHEMA: &str = "esa.batches";

/// One line of the segment input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSegment {
    pub segment_id: String,
    pub document_id: String,
    pub system_id: String,
    pub source_text: String,
    pub target_text: String,
}

/// Ordered work list of one annotator, grouped by document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskBatch {
    pub batch_id: usize,
    pub items: Vec<TaskKey>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignMeta {
    pub name: String,
    pub run_id: String,
    pub seed: u64,
    pub source_lang: String,
    pub target_lang: String,
    pub systems: Vec<String>,
    pub segments_per_annotator: usize,
    pub check_rate: f64,
    pub tasks: usize,
    pub checks: usize,
    pub batches: usize,
    pub provider_errors: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Campaign {
    pub meta: CampaignMeta,
    /// Sorted by (system, segment).
    pub tasks: Vec<SegmentTask>,
    pub batches: Vec<TaskBatch>,
}

impl Campaign {
    pub fn task_index(&self) -> HashMap<TaskKey, usize> {
        self.tasks.iter().enumerate().map(|(i, t)| (t.key(), i)).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<(), ServiceError> {
        fs::create_dir_all(dir).map_err(|e| ServiceError::io(dir, e))?;
        let meta = serde_json::to_string_pretty(&self.meta).expect("meta serializes") + "\n";
        let path = dir.join(META_FILE);
        fs::write(&path, meta).map_err(|e| ServiceError::io(&path, e))?;
        write_jsonl(&dir.join(TASKS_FILE), SEGMENTS_SCHEMA, &self.tasks)?;
        write_jsonl(&dir.join(BATCHES_FILE), BATCHES_SCHEMA, &self.batches)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ServiceError> {
        let path = dir.join(META_FILE);
        let text = fs::read_to_string(&path).map_err(|e| ServiceError::io(&path, e))?;
        let meta = serde_json::from_str(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        Ok(Campaign {
            meta,
            tasks: read_jsonl(&dir.join(TASKS_FILE), SEGMENTS_SCHEMA)?,
            batches: read_jsonl(&dir.join(BATCHES_FILE), BATCHES_SCHEMA)?,
        })
    }
}

/// Parses the segment input; the error names the offending line.
pub fn parse_segments(text: &str, origin: &str) -> Result<Vec<InputSegment>, ServiceError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let seg: InputSegment = serde_json::from_str(line).map_err(|e| ServiceError::Input {
            origin: origin.to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert((seg.system_id.clone(), seg.segment_id.clone())) {
            return Err(ServiceError::Input {
                origin: origin.to_string(),
                line: i + 1,
                message: format!("duplicate segment {}/{}", seg.system_id, seg.segment_id),
            });
        }
        out.push(seg);
    }
    Ok(out)
}

pub fn read_segments(path: &Path) -> Result<Vec<InputSegment>, ServiceError> {
    let text = fs::read_to_string(path).map_err(|e| ServiceError::io(path, e))?;
    parse_segments(&text, &path.display().to_string())
}

const PREFILL_WORKERS: usize = 8;

fn prefill_all(
    tasks: &[SegmentTask],
    provider: &dyn QeProvider,
    cfg: &CampaignConfig,
) -> Vec<SegmentTask> {
    let chunk = tasks.len().div_ceil(PREFILL_WORKERS).max(1);
    thread::scope(|s| {
        let handles: Vec<_> = tasks
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|t| {
                            let out = prefill_segment(t, provider, &cfg.source_lang, &cfg.target_lang);
                            for w in &out.warnings {
                                log::warn!("{}: {w}", t.key());
                            }
                            out.task
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("prefill worker panicked"))
            .collect()
    })
}

fn derived_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Pre-fills every segment, injects attention checks and splits the work
/// into document-grouped batches. Identical inputs, seed and provider
/// responses give an identical campaign.
pub fn build_campaign(
    cfg: &CampaignConfig,
    input: &[InputSegment],
    provider: &dyn QeProvider,
) -> Result<Campaign, ServiceError> {
    cfg.validate()?;
    let wanted: BTreeSet<&str> = cfg.systems.iter().map(String::as_str).collect();
    let originals: Vec<SegmentTask> = input
        .iter()
        .filter(|s| wanted.contains(s.system_id.as_str()))
        .map(|s| {
            SegmentTask::new(
                s.segment_id.clone(),
                s.document_id.clone(),
                s.system_id.clone(),
                s.source_text.clone(),
                s.target_text.clone(),
            )
        })
        .collect();
    let present: BTreeSet<&str> = originals.iter().map(|t| t.system_id.as_str()).collect();
    if let Some(missing) = wanted.difference(&present).next() {
        return Err(ServiceError::Config(format!("system {missing} has no input segments")));
    }

    let prefilled = prefill_all(&originals, provider, cfg);
    let provider_errors = prefilled.iter().filter(|t| t.provider_error.is_some()).count();

    let all = if cfg.check_rate > 0.0 {
        let perturber = Perturber::new(cfg.phrases()?)?;
        inject_checks(&prefilled, cfg.check_rate, cfg.seed, &perturber)?
    } else {
        prefilled.clone()
    };
    let checks: Vec<SegmentTask> = all[prefilled.len()..].to_vec();

    // document groups in input order
    let mut groups: Vec<Vec<TaskKey>> = Vec::new();
    let mut group_of: HashMap<(String, String), usize> = HashMap::new();
    for t in &prefilled {
        let id = *group_of
            .entry((t.system_id.clone(), t.document_id.clone()))
            .or_insert_with(|| {
                groups.push(Vec::new());
                groups.len() - 1
            });
        groups[id].push(t.key());
    }

    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut derived_rng(cfg.seed, 1));
    let mut batch_groups: Vec<Vec<usize>> = vec![Vec::new()];
    let mut filled = 0;
    for g in order {
        if filled >= cfg.segments_per_annotator {
            batch_groups.push(Vec::new());
            filled = 0;
        }
        batch_groups.last_mut().expect("nonempty").push(g);
        filled += groups[g].len();
    }

    let mut batch_of_original: HashMap<TaskKey, usize> = HashMap::new();
    for (b, gs) in batch_groups.iter().enumerate() {
        for &g in gs {
            for key in &groups[g] {
                batch_of_original.insert(key.clone(), b);
            }
        }
    }
    let mut checks_by_batch: Vec<Vec<&SegmentTask>> = vec![Vec::new(); batch_groups.len()];
    for c in &checks {
        let info = c.check_info.as_ref().expect("check task");
        let b = batch_of_original[&TaskKey::new(&c.system_id, &info.original_segment_id)];
        checks_by_batch[b].push(c);
    }

    let mut batches = Vec::with_capacity(batch_groups.len());
    for (b, mut gs) in batch_groups.into_iter().enumerate() {
        let mut rng = derived_rng(cfg.seed, 100 + b as u64);
        gs.shuffle(&mut rng);
        let mut docs: Vec<Vec<TaskKey>> = gs.iter().map(|&g| groups[g].clone()).collect();
        // each check goes into a random slot after its original's document
        for c in &checks_by_batch[b] {
            let info = c.check_info.as_ref().expect("check task");
            let original = TaskKey::new(&c.system_id, &info.original_segment_id);
            let pos = docs
                .iter()
                .position(|d| d.contains(&original))
                .expect("original in batch");
            let slot = rng.random_range(pos + 1..=docs.len());
            docs.insert(slot, vec![c.key()]);
        }
        batches.push(TaskBatch {
            batch_id: b,
            items: docs.into_iter().flatten().collect(),
        });
    }

    let mut tasks = all;
    tasks.sort_by(|a, b| (&a.system_id, &a.segment_id).cmp(&(&b.system_id, &b.segment_id)));
    Ok(Campaign {
        meta: CampaignMeta {
            name: cfg.name.clone(),
            run_id: cfg.run_id.clone(),
            seed: cfg.seed,
            source_lang: cfg.source_lang.clone(),
            target_lang: cfg.target_lang.clone(),
            systems: cfg.systems.clone(),
            segments_per_annotator: cfg.segments_per_annotator,
            check_rate: cfg.check_rate,
            tasks: tasks.len(),
            checks: checks.len(),
            batches: batches.len(),
            provider_errors,
        },
        tasks,
        batches,
    })
}
