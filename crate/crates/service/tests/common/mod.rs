#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use esa_core::export::ExportBundle;
use esa_core::model::char_len;
use esa_core::qe::MockProvider;
use esa_core::{ErrorSpan, SegmentTask, Severity};
use esa_service::build::{build_campaign, InputSegment};
use esa_service::config::CampaignConfig;
use esa_service::store::{SubmitRequest, EVENTS_FILE};
use esa_service::{Campaign, CampaignService, ManualClock};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 16] = [
    "the", "quick", "brown", "fox", "jumps", "over", "lazy", "dog", "while", "seven", "quiet",
    "rivers", "carry", "old", "paper", "boats",
];

pub const QE_ANSWER: &str = "Major:\naccuracy/mistranslation - \"quick\"\nMinor:\nfluency/grammar - \"lazy\"\n";

pub fn provider() -> MockProvider {
    MockProvider::new().with_fallback(QE_ANSWER)
}

/// `systems` × `segments` input lines, documents of four segments.
pub fn input(systems: usize, segments: usize) -> Vec<InputSegment> {
    let mut out = Vec::new();
    for m in 0..systems {
        for i in 0..segments {
            let words: Vec<&str> = (0..12).map(|k| WORDS[(i * 7 + k * (m + 3) + k * k) % WORDS.len()]).collect();
            out.push(InputSegment {
                segment_id: format!("{i:04}"),
                document_id: format!("doc{}", i / 4),
                system_id: format!("sys{m:02}"),
                source_text: format!("source sentence number {i}"),
                target_text: format!("{}.", words.join(" ")),
            });
        }
    }
    out
}

pub fn config(systems: usize, per_annotator: usize, seed: u64) -> CampaignConfig {
    let systems: Vec<String> = (0..systems).map(|m| format!("\"sys{m:02}\"")).collect();
    CampaignConfig::from_toml(&format!(
        r#"
name = "fixture"
run_id = "run1"
segments_file = "segments.jsonl"
systems = [{}]
segments_per_annotator = {per_annotator}
seed = {seed}
source_lang = "English"
target_lang = "German"
"#,
        systems.join(", ")
    ))
    .unwrap()
}

pub fn campaign(systems: usize, segments: usize, per_annotator: usize, seed: u64) -> Campaign {
    build_campaign(
        &config(systems, per_annotator, seed),
        &input(systems, segments),
        &provider(),
    )
    .unwrap()
}

pub fn open(dir: &Path, clock: Arc<ManualClock>) -> CampaignService {
    CampaignService::open(dir, clock).unwrap()
}

pub fn setup(systems: usize, segments: usize, per: usize) -> (tempfile::TempDir, Arc<ManualClock>) {
    let dir = tempfile::tempdir().unwrap();
    campaign(systems, segments, per, 3).write(dir.path()).unwrap();
    (dir, Arc::new(ManualClock::new(1_000_000)))
}

pub fn submit_for(task: &SegmentTask, who: &str, score: f64, elapsed: Option<f64>) -> SubmitRequest {
    SubmitRequest {
        annotator_id: who.into(),
        system_id: task.system_id.clone(),
        segment_id: task.segment_id.clone(),
        spans: task.prefill_spans.clone(),
        direct_score: score,
        client_elapsed_seconds: elapsed,
    }
}

pub fn random_spans(rng: &mut ChaCha8Rng, task: &SegmentTask) -> Vec<ErrorSpan> {
    let len = char_len(&task.target_display_text);
    match rng.random_range(0..4) {
        0 => task.prefill_spans.clone(),
        1 => Vec::new(),
        2 => {
            let start = rng.random_range(0..len - 1);
            let end = rng.random_range(start + 1..=len);
            let sev = if rng.random_bool(0.5) { Severity::Minor } else { Severity::Major };
            vec![ErrorSpan::human(start, end, sev)]
        }
        // invalid: empty interval
        _ => vec![ErrorSpan::human(3, 3, Severity::Minor)],
    }
}

pub fn check_export_invariants(bundle: &ExportBundle) {
    let mut per: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for a in &bundle.annotations {
        assert!(a.duration_seconds >= 0.0);
        per.entry(&a.annotator_id).or_default().push(a.sequence_index);
    }
    for (who, mut idx) in per {
        idx.sort();
        assert_eq!(idx, (1..=idx.len()).collect::<Vec<_>>(), "{who}");
    }
}

pub fn torn_write(dir: &Path) {
    let mut f = OpenOptions::new().append(true).open(dir.join(EVENTS_FILE)).unwrap();
    f.write_all(b"{\"seq\":99999,\"timestamp\":1,\"event\":\"task_cl").unwrap();
}

pub struct RunSummary {
    pub restarts: usize,
    pub events: u64,
    pub annotations: usize,
}

/// Random register/claim/submit/revise operations with crash restarts and
/// torn log tails; panics if replayed state ever differs from live state.
pub fn randomized_run(seed: u64, ops: usize) -> RunSummary {
    let (dir, clock) = setup(3, 48, 12);
    let annotators = ["a0", "a1", "a2", "a3", "a4", "a5"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut svc = open(dir.path(), clock.clone()).with_snapshot_every(7);
    let mut restarts = 0;
    for _ in 0..ops {
        let who = annotators[rng.random_range(0..annotators.len())];
        match rng.random_range(0..100) {
            0..=9 => {
                let _ = svc.register(who);
            }
            10..=39 => {
                let _ = svc.claim_next(who);
            }
            40..=74 => {
                let state = svc.state();
                let Some(a) = state.annotators.get(who) else { continue };
                let Some(c) = &a.claim else { continue };
                let task = svc
                    .campaign()
                    .tasks
                    .iter()
                    .find(|t| t.system_id == c.system_id && t.segment_id == c.segment_id)
                    .unwrap()
                    .clone();
                clock.advance(rng.random_range(1_000..90_000));
                let mut req = submit_for(&task, who, rng.random_range(0..=110) as f64, None);
                req.spans = random_spans(&mut rng, &task);
                if rng.random_bool(0.5) {
                    req.client_elapsed_seconds = Some(rng.random_range(0.0..120.0));
                }
                let _ = svc.submit(&req);
            }
            75..=84 => {
                // revise an earlier submission
                let state = svc.state();
                let Some(a) = state.annotators.get(who) else { continue };
                if a.submissions.is_empty() {
                    continue;
                }
                let s = &a.submissions[rng.random_range(0..a.submissions.len())].annotation;
                let task = svc
                    .campaign()
                    .tasks
                    .iter()
                    .find(|t| t.key() == s.key())
                    .unwrap()
                    .clone();
                let mut req = submit_for(&task, who, rng.random_range(0..=100) as f64, None);
                req.spans = random_spans(&mut rng, &task);
                let _ = svc.submit(&req);
            }
            85..=89 => clock.advance(rng.random_range(0..5_000)),
            _ => {
                // crash: drop without shutdown, sometimes leaving a torn line
                let before = svc.state();
                drop(svc);
                if rng.random_bool(0.5) {
                    torn_write(dir.path());
                }
                svc = open(dir.path(), clock.clone()).with_snapshot_every(7);
                assert_eq!(*svc.state(), *before, "state changed across restart");
                restarts += 1;
            }
        }
    }
    assert!(restarts > 10);
    let live = svc.state();
    assert_eq!(CampaignService::replay(dir.path()).unwrap(), *live);
    let bundle = svc.export().unwrap();
    check_export_invariants(&bundle);
    assert!(!bundle.annotations.is_empty());
    let out = tempfile::tempdir().unwrap();
    bundle.write_dir(out.path()).unwrap();
    assert_eq!(ExportBundle::load_dir(out.path()).unwrap(), bundle);
    RunSummary {
        restarts,
        events: live.applied,
        annotations: bundle.annotations.len(),
    }
}

