mod common;

use std::collections::{BTreeSet, HashMap};
use std::fs;

use esa_core::checks::check_count;
use esa_core::qe::{FailingProvider, ProviderError};
use esa_core::TaskKey;
use esa_service::build::{build_campaign, BATCHES_FILE, META_FILE, TASKS_FILE};
use esa_service::config::CampaignConfig;

#[test]
fn wmt_sized_campaign_counts() {
    let c = common::campaign(13, 207, 100, 1);
    let originals = c.tasks.iter().filter(|t| !t.is_check()).count();
    assert_eq!(originals, 2691);
    assert_eq!(c.meta.checks, check_count(2691, 12.0));
    assert_eq!(c.meta.checks, 323);
    assert_eq!(c.tasks.len(), 2691 + 323);
    let assigned: usize = c.batches.iter().map(|b| b.items.len()).sum();
    assert_eq!(assigned, c.tasks.len());
}

#[test]
fn batches_partition_tasks_and_keep_documents_together() {
    let c = common::campaign(4, 60, 30, 9);
    let tasks: HashMap<TaskKey, _> = c.tasks.iter().map(|t| (t.key(), t)).collect();
    let mut seen = BTreeSet::new();
    for b in &c.batches {
        let mut closed = BTreeSet::new();
        let mut current: Option<(String, String)> = None;
        for (pos, key) in b.items.iter().enumerate() {
            assert!(seen.insert(key.clone()), "{key} assigned twice");
            let t = tasks[key];
            let doc = (t.system_id.clone(), t.document_id.clone());
            if current.as_ref() != Some(&doc) {
                assert!(!closed.contains(&doc), "document {doc:?} split in batch {}", b.batch_id);
                if let Some(prev) = current.take() {
                    closed.insert(prev);
                }
                current = Some(doc);
            }
            if let Some(info) = &t.check_info {
                let original = TaskKey::new(&t.system_id, &info.original_segment_id);
                let orig_pos = b.items.iter().position(|k| *k == original);
                assert!(orig_pos.is_some_and(|p| p < pos), "check {key} not after its original");
            }
        }
    }
    assert_eq!(seen.len(), c.tasks.len());
}

#[test]
fn rebuild_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    common::campaign(3, 40, 20, 5).write(a.path()).unwrap();
    common::campaign(3, 40, 20, 5).write(b.path()).unwrap();
    for f in [META_FILE, TASKS_FILE, BATCHES_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let other = common::campaign(3, 40, 20, 6);
    let first = common::campaign(3, 40, 20, 5);
    assert_ne!(other.batches, first.batches);
}

#[test]
fn prefill_comes_from_provider() {
    let c = common::campaign(2, 12, 10, 1);
    let with_quick = c
        .tasks
        .iter()
        .find(|t| !t.is_check() && t.target_text.contains("quick"))
        .unwrap();
    assert!(!with_quick.prefill_spans.is_empty());
    assert_eq!(c.meta.provider_errors, 0);
}

#[test]
fn provider_failures_are_recorded_not_fatal() {
    let cfg = common::config(2, 10, 1);
    let failing = FailingProvider(ProviderError::Timeout);
    let c = build_campaign(&cfg, &common::input(2, 12), &failing).unwrap();
    assert_eq!(c.meta.provider_errors, 24);
    assert!(c.tasks.iter().all(|t| t.prefill_spans.is_empty() && t.provider_error.is_some()));
}

#[test]
fn config_errors() {
    let mut cfg = common::config(2, 10, 1);
    cfg.systems.clear();
    assert!(build_campaign(&cfg, &common::input(2, 4), &common::provider()).is_err());
    let mut cfg = common::config(2, 10, 1);
    cfg.systems.push("ghost".into());
    let err = build_campaign(&cfg, &common::input(2, 4), &common::provider()).unwrap_err();
    assert!(err.to_string().contains("ghost"));
}

#[test]
fn config_file_paths_resolve_relative_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("campaign.toml");
    fs::write(
        &path,
        "name = \"x\"\nsegments_file = \"in.jsonl\"\nsystems = [\"a\"]\nsegments_per_annotator = 5\nsource_lang = \"English\"\ntarget_lang = \"German\"\n",
    )
    .unwrap();
    let cfg = CampaignConfig::load(&path).unwrap();
    assert_eq!(cfg.segments_file, dir.path().join("in.jsonl"));
}
