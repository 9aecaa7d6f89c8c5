//! Attention checks: perturbed copies of real items whose pre-fill
//! deliberately misses the perturbation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{char_len, display_text, Annotation, CheckInfo, SegmentTask, SpanOrigin};

/// Incongruent phrases used as replacements.
pub const DEFAULT_PHRASES: &[&str] = &[
    "squirrels are never",
    "the purple kettle sang loudly",
    "seven umbrellas ate breakfast",
    "under the dancing moon of cheese",
    "bicycles dream in green",
    "while the piano swims backwards",
    "no elephants were harmed",
    "Tuesday smells of copper",
];

/// Default number of checks per 100 tasks.
pub const DEFAULT_CHECK_RATE: f64 = 12.0;

/// Default share of checks an annotator must pass on the score criterion.
pub const DEFAULT_PASS_THRESHOLD: f64 = 0.5;

const CHECK_SUFFIX: &str = "#check";

#[derive(Debug, Error, PartialEq)]
pub enum CheckError {
    #[error("segment {0} is unperturbable: needs at least 4 tokens")]
    Unperturbable(String),
    #[error("segment {0} has no region free of pre-fill spans")]
    NoFreeRegion(String),
    #[error("check rate {0} outside (0, 100)")]
    RateOutOfRange(f64),
    #[error("only {available} of {needed} tasks can be perturbed")]
    NotEnoughCandidates { needed: usize, available: usize },
    #[error("annotations are not a check pair: {0}")]
    Unpaired(String),
    #[error("phrase list is empty")]
    NoPhrases,
    #[error("reading phrase list: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbation {
    pub base_segment_id: String,
    /// Character interval replaced in the original translation.
    pub region: (usize, usize),
    pub replaced_text: String,
    pub replacement_text: String,
    pub perturbed_target: String,
}

impl Perturbation {
    /// Interval of the inserted phrase in the perturbed translation.
    pub fn perturbed_region(&self) -> (usize, usize) {
        let start = self.region.0;
        (start, start + char_len(&self.replacement_text))
    }

    /// Character shift applied to text after the region.
    pub fn length_delta(&self) -> isize {
        char_len(&self.replacement_text) as isize - (self.region.1 - self.region.0) as isize
    }
}

/// Whitespace tokens with character offsets `[start, end)`.
fn tokens(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push((s, i));
                start = None;
            }
            _ => {}
        }
        n = i + 1;
    }
    if let Some(s) = start {
        out.push((s, n));
    }
    out
}

/// Generates perturbed copies of tasks from a phrase list.
#[derive(Debug, Clone)]
pub struct Perturber {
    phrases: Vec<String>,
}

impl Default for Perturber {
    fn default() -> Self {
        Perturber {
            phrases: DEFAULT_PHRASES.iter().map(|p| p.to_string()).collect(),
        }
    }
}

impl Perturber {
    pub fn new(phrases: Vec<String>) -> Result<Self, CheckError> {
        let phrases: Vec<String> = phrases
            .into_iter()
            .map(|p| p.trim().to_owned())
            .filter(|p| !p.is_empty())
            .collect();
        if phrases.is_empty() {
            return Err(CheckError::NoPhrases);
        }
        Ok(Perturber { phrases })
    }

    /// One phrase per line; blank lines ignored.
    pub fn from_file(path: &Path) -> Result<Self, CheckError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CheckError::Io(format!("{}: {e}", path.display())))?;
        Self::new(text.lines().map(str::to_owned).collect())
    }

    /// Candidate regions: token windows covering 20–50% of the tokens that do
    /// not touch any pre-fill span. Trailing punctuation of the window is kept.
    pub fn candidate_regions(&self, task: &SegmentTask) -> Result<Vec<(usize, usize)>, CheckError> {
        let toks = tokens(&task.target_text);
        let n = toks.len();
        if n < 4 {
            return Err(CheckError::Unperturbable(task.segment_id.clone()));
        }
        let chars: Vec<char> = task.target_text.chars().collect();
        let min_len = (n as f64 * 0.2).ceil().max(1.0) as usize;
        let max_len = ((n as f64 * 0.5).floor() as usize).max(min_len);
        let mut regions = Vec::new();
        for len in min_len..=max_len {
            for first in 0..=n - len {
                let start = toks[first].0;
                let mut end = toks[first + len - 1].1;
                while end > start && chars[end - 1].is_ascii_punctuation() {
                    end -= 1;
                }
                if end <= start {
                    continue;
                }
                if task.prefill_spans.iter().any(|s| s.intersects(start, end)) {
                    continue;
                }
                regions.push((start, end));
            }
        }
        if regions.is_empty() {
            return Err(CheckError::NoFreeRegion(task.segment_id.clone()));
        }
        Ok(regions)
    }

    pub fn generate(&self, task: &SegmentTask, seed: u64) -> Result<Perturbation, CheckError> {
        let regions = self.candidate_regions(task)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let region = regions[rng.random_range(0..regions.len())];
        let replaced = crate::model::char_slice(&task.target_text, region.0, region.1);
        let offset = rng.random_range(0..self.phrases.len());
        let phrase = (0..self.phrases.len())
            .map(|i| &self.phrases[(offset + i) % self.phrases.len()])
            .find(|p| p.as_str() != replaced)
            .ok_or(CheckError::NoPhrases)?;
        Ok(perturb_region(task, region, phrase))
    }
}

/// Replaces a character region of the translation with `replacement`.
pub fn perturb_region(task: &SegmentTask, region: (usize, usize), replacement: &str) -> Perturbation {
    let chars: Vec<char> = task.target_text.chars().collect();
    let before: String = chars[..region.0].iter().collect();
    let replaced: String = chars[region.0..region.1].iter().collect();
    let after: String = chars[region.1..].iter().collect();
    Perturbation {
        base_segment_id: task.segment_id.clone(),
        region,
        replaced_text: replaced,
        replacement_text: replacement.to_owned(),
        perturbed_target: format!("{before}{replacement}{after}"),
    }
}

pub fn generate_perturbation(task: &SegmentTask, seed: u64) -> Result<Perturbation, CheckError> {
    Perturber::default().generate(task, seed)
}

/// Builds the perturbed check item. It lives in its own single-segment
/// document and carries the original's pre-fill, shifted past the region.
pub fn make_check_task(original: &SegmentTask, p: &Perturbation) -> SegmentTask {
    let delta = p.length_delta();
    let prefill_spans = original
        .prefill_spans
        .iter()
        .map(|s| if s.start >= p.region.1 { s.shifted(delta) } else { *s })
        .collect();
    SegmentTask {
        segment_id: format!("{}{CHECK_SUFFIX}", original.segment_id),
        document_id: format!("{}{CHECK_SUFFIX}-{}", original.document_id, original.segment_id),
        system_id: original.system_id.clone(),
        source_text: original.source_text.clone(),
        target_display_text: display_text(&p.perturbed_target),
        target_text: p.perturbed_target.clone(),
        prefill_spans,
        check_info: Some(CheckInfo {
            perturbed_region: p.perturbed_region(),
            original_segment_id: original.segment_id.clone(),
        }),
        provider_error: original.provider_error.clone(),
    }
}

/// Number of checks for `n` tasks at `rate` per 100.
pub fn check_count(n: usize, rate: f64) -> usize {
    (rate * n as f64 / 100.0).round() as usize
}

/// Appends `round(rate·n/100)` perturbed copies of seeded-selected originals.
pub fn inject_checks(
    tasks: &[SegmentTask],
    rate: f64,
    seed: u64,
    perturber: &Perturber,
) -> Result<Vec<SegmentTask>, CheckError> {
    if !(rate > 0.0 && rate < 100.0) {
        return Err(CheckError::RateOutOfRange(rate));
    }
    let originals: Vec<usize> = (0..tasks.len()).filter(|&i| !tasks[i].is_check()).collect();
    let needed = check_count(originals.len(), rate);
    let mut order = originals.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let mut checks = Vec::with_capacity(needed);
    for &i in &order {
        if checks.len() == needed {
            break;
        }
        let item_seed = seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        if let Ok(p) = perturber.generate(&tasks[i], item_seed) {
            checks.push(make_check_task(&tasks[i], &p));
        }
    }
    if checks.len() < needed {
        return Err(CheckError::NotEnoughCandidates {
            needed,
            available: checks.len(),
        });
    }
    let mut out = tasks.to_vec();
    out.extend(checks);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub score_ok: bool,
    pub span_count_ok: bool,
    pub perturbation_marked: bool,
}

pub fn evaluate_check(
    original: &Annotation,
    perturbed: &Annotation,
    check: &CheckInfo,
) -> Result<CheckOutcome, CheckError> {
    if original.annotator_id != perturbed.annotator_id {
        return Err(CheckError::Unpaired(format!(
            "annotators differ ({} vs {})",
            original.annotator_id, perturbed.annotator_id
        )));
    }
    if original.segment_id != check.original_segment_id || original.system_id != perturbed.system_id {
        return Err(CheckError::Unpaired(format!(
            "{} is not the original of {}",
            original.key(),
            perturbed.key()
        )));
    }
    let (start, end) = check.perturbed_region;
    Ok(CheckOutcome {
        score_ok: original.direct_score > perturbed.direct_score,
        span_count_ok: original.spans.len() < perturbed.spans.len(),
        perturbation_marked: perturbed
            .spans
            .iter()
            .any(|s| s.origin == SpanOrigin::Human && s.intersects(start, end)),
    })
}

/// A check item's annotation together with its original's.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckPair {
    pub original: Annotation,
    pub perturbed: Annotation,
    pub check: CheckInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorCheckRate {
    pub annotator_id: String,
    pub checks: usize,
    pub score_ok: f64,
    pub span_count_ok: f64,
    pub perturbation_marked: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub pairs: usize,
    pub pass_threshold: f64,
    pub mean_original_score: f64,
    pub mean_perturbed_score: f64,
    pub score_ok: f64,
    pub mean_original_spans: f64,
    pub mean_perturbed_spans: f64,
    pub span_count_ok: f64,
    pub perturbation_marked: f64,
    pub annotators: Vec<AnnotatorCheckRate>,
}

/// Aggregates check outcomes; an annotator passes when their share of
/// score-OK checks reaches `pass_threshold`.
pub fn check_report(pairs: &[CheckPair], pass_threshold: f64) -> Result<CheckReport, CheckError> {
    let mut outcomes = Vec::with_capacity(pairs.len());
    for p in pairs {
        outcomes.push(evaluate_check(&p.original, &p.perturbed, &p.check)?);
    }
    let n = pairs.len().max(1) as f64;
    let rate = |f: &dyn Fn(&CheckOutcome) -> bool, o: &[&CheckOutcome]| {
        o.iter().filter(|x| f(x)).count() as f64 / o.len().max(1) as f64
    };
    let all: Vec<&CheckOutcome> = outcomes.iter().collect();
    let mut per: BTreeMap<&str, Vec<&CheckOutcome>> = BTreeMap::new();
    for (p, o) in pairs.iter().zip(&outcomes) {
        per.entry(p.original.annotator_id.as_str()).or_default().push(o);
    }
    let annotators = per
        .into_iter()
        .map(|(id, o)| {
            let score_ok = rate(&|x| x.score_ok, &o);
            AnnotatorCheckRate {
                annotator_id: id.to_owned(),
                checks: o.len(),
                score_ok,
                span_count_ok: rate(&|x| x.span_count_ok, &o),
                perturbation_marked: rate(&|x| x.perturbation_marked, &o),
                passed: score_ok >= pass_threshold,
            }
        })
        .collect();
    Ok(CheckReport {
        pairs: pairs.len(),
        pass_threshold,
        mean_original_score: pairs.iter().map(|p| p.original.direct_score).sum::<f64>() / n,
        mean_perturbed_score: pairs.iter().map(|p| p.perturbed.direct_score).sum::<f64>() / n,
        score_ok: rate(&|x| x.score_ok, &all),
        mean_original_spans: pairs.iter().map(|p| p.original.spans.len()).sum::<usize>() as f64 / n,
        mean_perturbed_spans: pairs.iter().map(|p| p.perturbed.spans.len()).sum::<usize>() as f64 / n,
        span_count_ok: rate(&|x| x.span_count_ok, &all),
        perturbation_marked: rate(&|x| x.perturbation_marked, &all),
        annotators,
    })
}

impl CheckReport {
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# pairs={} pass_threshold={}\ncriterion\toriginal\tperturbed\tok_pct\n",
            self.pairs, self.pass_threshold
        );
        let _ = writeln!(
            out,
            "score\t{:.2}\t{:.2}\t{:.1}",
            self.mean_original_score,
            self.mean_perturbed_score,
            100.0 * self.score_ok
        );
        let _ = writeln!(
            out,
            "span_count\t{:.2}\t{:.2}\t{:.1}",
            self.mean_original_spans,
            self.mean_perturbed_spans,
            100.0 * self.span_count_ok
        );
        let _ = writeln!(out, "perturbation_marked\t\t\t{:.1}", 100.0 * self.perturbation_marked);
        out.push_str("\nannotator\tchecks\tscore_ok_pct\tspan_count_ok_pct\tmarked_pct\tpassed\n");
        for a in &self.annotators {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.1}\t{:.1}\t{:.1}\t{}",
                a.annotator_id,
                a.checks,
                100.0 * a.score_ok,
                100.0 * a.span_count_ok,
                100.0 * a.perturbation_marked,
                a.passed
            );
        }
        out
    }
}

/// One annotated segment in an annotator's work stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamItem {
    pub document_id: String,
    pub is_check: bool,
    pub ai_spans: usize,
    /// AI spans kept, re-graded, moved or resized.
    pub accepted_ai_spans: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustEffect {
    pub checks: usize,
    pub accept_before: Option<f64>,
    pub accept_after: Option<f64>,
}

/// AI-span acceptance in the documents adjacent to each attention check,
/// averaged over checks. Streams must be in work order.
pub fn trust_effect(streams: &[Vec<StreamItem>]) -> TrustEffect {
    let mut before = Vec::new();
    let mut after = Vec::new();
    let mut checks = 0;
    for stream in streams {
        // (is_check, ai_spans, accepted) per contiguous document
        let mut docs: Vec<(bool, usize, usize)> = Vec::new();
        let mut prev: Option<&str> = None;
        for item in stream {
            if prev != Some(item.document_id.as_str()) {
                docs.push((false, 0, 0));
                prev = Some(&item.document_id);
            }
            let doc = docs.last_mut().expect("pushed above");
            doc.0 |= item.is_check;
            doc.1 += item.ai_spans;
            doc.2 += item.accepted_ai_spans;
        }
        let rate = |d: &(bool, usize, usize)| (d.1 > 0).then(|| d.2 as f64 / d.1 as f64);
        for (k, doc) in docs.iter().enumerate() {
            if !doc.0 {
                continue;
            }
            checks += 1;
            if let Some(r) = docs[..k].iter().rev().find(|d| !d.0).and_then(rate) {
                before.push(r);
            }
            if let Some(r) = docs[k + 1..].iter().find(|d| !d.0).and_then(rate) {
                after.push(r);
            }
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    TrustEffect {
        checks,
        accept_before: mean(&before),
        accept_after: mean(&after),
    }
}
