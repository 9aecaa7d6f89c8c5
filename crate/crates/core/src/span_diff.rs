//! Post-edit analysis: matching AI pre-fill spans to the final human spans and
//! classifying every difference.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ErrorSpan, TaskKey};

/// Largest endpoint distance at which a non-overlapping pair is still matched.
pub const PROXIMITY_LIMIT: usize = 20;

/// Move-distance buckets reported in post-edit summaries.
pub const MOVE_BUCKETS: [usize; 3] = [5, 10, 20];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DiffError {
    #[error("smoothing window must be at least 1")]
    ZeroWindow,
}

/// An AI span with its matched human span, if any.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanMatch {
    pub ai_span: ErrorSpan,
    pub human_span: Option<ErrorSpan>,
    pub overlap_chars: usize,
    /// Endpoint distance when the pair was matched by proximity instead of overlap.
    pub proximity_distance: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub matches: Vec<SpanMatch>,
    pub unmatched_final: Vec<ErrorSpan>,
}

fn span_order(a: &ErrorSpan, b: &ErrorSpan) -> Ordering {
    (a.start, a.end, a.severity, a.origin, a.on_missing).cmp(&(
        b.start,
        b.end,
        b.severity,
        b.origin,
        b.on_missing,
    ))
}

/// One-to-one matching of pre-fill spans to final spans.
///
/// Pairs are chosen to maximise total character overlap; among optimal
/// matchings the total endpoint distance is minimised. Both lists are put in
/// canonical order first, so the result does not depend on input order. AI
/// spans left without an overlapping partner are paired with the nearest
/// unmatched final span within [`PROXIMITY_LIMIT`] characters.
pub fn match_spans(prefill: &[ErrorSpan], final_spans: &[ErrorSpan]) -> MatchResult {
    let mut ai: Vec<ErrorSpan> = prefill.to_vec();
    let mut human: Vec<ErrorSpan> = final_spans.to_vec();
    ai.sort_by(span_order);
    human.sort_by(span_order);

    let max_coord = ai
        .iter()
        .chain(human.iter())
        .map(|s| s.end)
        .max()
        .unwrap_or(0) as i64;
    // lexicographic objective: overlap, then smaller endpoint distance, then equal severity
    let pairs = ai.len().min(human.len()) as i64 + 1;
    let scale = pairs * (max_coord + 1);
    let weights: Vec<Vec<i64>> = ai
        .iter()
        .map(|a| {
            human
                .iter()
                .map(|h| match a.overlap(h) {
                    0 => 0,
                    o => {
                        (o as i64 * scale - a.endpoint_distance(h) as i64) * pairs
                            + i64::from(a.severity == h.severity)
                    }
                })
                .collect()
        })
        .collect();

    let assignment = max_weight_assignment(&weights);
    let mut human_taken = vec![false; human.len()];
    let mut partner: Vec<Option<(usize, Option<usize>)>> = vec![None; ai.len()];
    for (i, j) in assignment.iter().enumerate() {
        if let Some(j) = *j {
            if weights[i][j] > 0 {
                partner[i] = Some((j, None));
                human_taken[j] = true;
            }
        }
    }

    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for (i, a) in ai.iter().enumerate() {
        if partner[i].is_some() {
            continue;
        }
        for (j, h) in human.iter().enumerate() {
            if human_taken[j] {
                continue;
            }
            let d = a.endpoint_distance(h);
            if d <= PROXIMITY_LIMIT {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_unstable();
    for (d, i, j) in candidates {
        if partner[i].is_none() && !human_taken[j] {
            partner[i] = Some((j, Some(d)));
            human_taken[j] = true;
        }
    }

    let matches = ai
        .iter()
        .zip(partner)
        .map(|(a, p)| match p {
            Some((j, proximity)) => SpanMatch {
                ai_span: *a,
                human_span: Some(human[j]),
                overlap_chars: if proximity.is_some() { 0 } else { a.overlap(&human[j]) },
                proximity_distance: proximity,
            },
            None => SpanMatch {
                ai_span: *a,
                human_span: None,
                overlap_chars: 0,
                proximity_distance: None,
            },
        })
        .collect();
    let unmatched_final = human
        .into_iter()
        .zip(human_taken)
        .filter(|(_, taken)| !taken)
        .map(|(h, _)| h)
        .collect();
    MatchResult {
        matches,
        unmatched_final,
    }
}

/// Maximum-weight assignment of rows to columns (Hungarian method on the
/// padded square cost matrix). Returns the column chosen for each row.
fn max_weight_assignment(weights: &[Vec<i64>]) -> Vec<Option<usize>> {
    let rows = weights.len();
    let cols = weights.first().map_or(0, Vec::len);
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    let n = rows.max(cols);
    let max_w = weights.iter().flatten().copied().max().unwrap_or(0);
    let cost = |i: usize, j: usize| -> i64 {
        if i < rows && j < cols {
            max_w - weights[i][j]
        } else {
            max_w
        }
    };

    // potentials u (rows), v (columns); p[j] = row assigned to column j, 1-based
    const INF: i64 = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; rows];
    for (j, &i) in p.iter().enumerate().take(n + 1).skip(1) {
        if i >= 1 && i <= rows && j <= cols {
            assignment[i - 1] = Some(j - 1);
        }
    }
    assignment
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increase,
    Decrease,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditKind {
    Kept,
    Removed,
    Added,
    SeverityChange {
        direction: Direction,
    },
    Move {
        distance: usize,
    },
    /// Length change; `distance` is the endpoint distance, nonzero when the span also shifted.
    Resize {
        direction: Direction,
        delta: i64,
        distance: usize,
    },
}

impl EditKind {
    /// Whether the AI span survived in some form.
    pub fn accepts_ai_span(&self) -> bool {
        matches!(
            self,
            EditKind::Kept
                | EditKind::SeverityChange { .. }
                | EditKind::Move { .. }
                | EditKind::Resize { .. }
        )
    }

    pub fn label(&self) -> &'static str {
        match self {
            EditKind::Kept => "kept",
            EditKind::Removed => "removed",
            EditKind::Added => "added",
            EditKind::SeverityChange { .. } => "severity_change",
            EditKind::Move { .. } => "move",
            EditKind::Resize { .. } => "resize",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditRecord {
    pub kind: EditKind,
    pub system_id: String,
    pub segment_id: String,
    pub ai_span: Option<ErrorSpan>,
    pub human_span: Option<ErrorSpan>,
}

fn classify_pair(ai: &ErrorSpan, human: &ErrorSpan) -> EditKind {
    if ai.same_interval(human) {
        return match human.severity.cmp(&ai.severity) {
            Ordering::Equal => EditKind::Kept,
            Ordering::Greater => EditKind::SeverityChange {
                direction: Direction::Increase,
            },
            Ordering::Less => EditKind::SeverityChange {
                direction: Direction::Decrease,
            },
        };
    }
    let delta = human.len() as i64 - ai.len() as i64;
    let distance = ai.endpoint_distance(human);
    if delta == 0 {
        EditKind::Move { distance }
    } else {
        let direction = if delta > 0 {
            Direction::Increase
        } else {
            Direction::Decrease
        };
        EditKind::Resize {
            direction,
            delta,
            distance,
        }
    }
}

/// Turns a matching into one edit record per AI span plus one per added span.
pub fn classify_edits(result: &MatchResult, key: &TaskKey) -> Vec<EditRecord> {
    let record = |kind, ai_span, human_span| EditRecord {
        kind,
        system_id: key.system_id.clone(),
        segment_id: key.segment_id.clone(),
        ai_span,
        human_span,
    };
    let mut records: Vec<EditRecord> = result
        .matches
        .iter()
        .map(|m| match m.human_span {
            Some(h) => record(classify_pair(&m.ai_span, &h), Some(m.ai_span), Some(h)),
            None => record(EditKind::Removed, Some(m.ai_span), None),
        })
        .collect();
    records.extend(
        result
            .unmatched_final
            .iter()
            .map(|h| record(EditKind::Added, None, Some(*h))),
    );
    records
}

/// Convenience: match and classify in one step.
pub fn diff_segment(prefill: &[ErrorSpan], final_spans: &[ErrorSpan], key: &TaskKey) -> Vec<EditRecord> {
    classify_edits(&match_spans(prefill, final_spans), key)
}

/// Counts of each post-edit operation over a collection of records.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostEditSummary {
    pub ai_spans: usize,
    pub matched: usize,
    pub kept: usize,
    pub removed: usize,
    pub added: usize,
    pub severity_increase: usize,
    pub severity_decrease: usize,
    pub move_distances: Vec<usize>,
    pub resize_increase: usize,
    pub resize_decrease: usize,
}

impl PostEditSummary {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a EditRecord>) -> Self {
        let mut s = PostEditSummary::default();
        for r in records {
            if r.ai_span.is_some() {
                s.ai_spans += 1;
            }
            if r.ai_span.is_some() && r.human_span.is_some() {
                s.matched += 1;
            }
            match r.kind {
                EditKind::Kept => s.kept += 1,
                EditKind::Removed => s.removed += 1,
                EditKind::Added => s.added += 1,
                EditKind::SeverityChange { direction } => match direction {
                    Direction::Increase => s.severity_increase += 1,
                    Direction::Decrease => s.severity_decrease += 1,
                },
                EditKind::Move { distance } => s.move_distances.push(distance),
                EditKind::Resize { direction, .. } => match direction {
                    Direction::Increase => s.resize_increase += 1,
                    Direction::Decrease => s.resize_decrease += 1,
                },
            }
        }
        s.move_distances.sort_unstable();
        s
    }

    pub fn severity_changes(&self) -> usize {
        self.severity_increase + self.severity_decrease
    }

    pub fn moves_within(&self, limit: usize) -> usize {
        self.move_distances.iter().filter(|&&d| d <= limit).count()
    }

    /// Tab-separated table with shares against both candidate denominators.
    pub fn to_tsv(&self) -> String {
        let share = |n: usize, d: usize| {
            if d == 0 {
                "undefined".to_owned()
            } else {
                format!("{:.2}", 100.0 * n as f64 / d as f64)
            }
        };
        let mut out = String::from("operation\tcount\tpct_of_ai_spans\tpct_of_matched\tpct_within_group\n");
        let mut row = |name: &str, n: usize, group: Option<usize>| {
            let within = group.map_or_else(|| "-".to_owned(), |g| share(n, g));
            let _ = writeln!(
                out,
                "{name}\t{n}\t{}\t{}\t{within}",
                share(n, self.ai_spans),
                share(n, self.matched)
            );
        };
        row("kept", self.kept, None);
        row("removed", self.removed, None);
        row("severity_change", self.severity_changes(), None);
        row("severity_increase", self.severity_increase, Some(self.severity_changes()));
        row("severity_decrease", self.severity_decrease, Some(self.severity_changes()));
        for limit in MOVE_BUCKETS {
            row(&format!("move_le_{limit}"), self.moves_within(limit), None);
        }
        row("move_any", self.move_distances.len(), None);
        let resizes = self.resize_increase + self.resize_decrease;
        row("resize", resizes, None);
        row("resize_increase", self.resize_increase, Some(resizes));
        row("resize_decrease", self.resize_decrease, Some(resizes));
        row("added", self.added, None);
        out
    }
}

/// Edit records of one annotated segment with its original pre-fill size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentEdits {
    pub key: TaskKey,
    pub qe_span_count: usize,
    pub records: Vec<EditRecord>,
}

impl SegmentEdits {
    pub fn removed(&self) -> usize {
        self.count(|k| matches!(k, EditKind::Removed))
    }

    pub fn added(&self) -> usize {
        self.count(|k| matches!(k, EditKind::Added))
    }

    /// No span was removed, added or changed.
    pub fn unedited(&self) -> bool {
        self.records.iter().all(|r| r.kind == EditKind::Kept)
    }

    fn count(&self, pred: impl Fn(&EditKind) -> bool) -> usize {
        self.records.iter().filter(|r| pred(&r.kind)).count()
    }
}

pub const QE_BUCKETS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRow {
    /// "0", "1", "2", "3" or "4+".
    pub bucket: String,
    pub segments: usize,
    /// Share of all segments falling in this bucket.
    pub frequency: f64,
    /// Shares of the bucket's segments with 0, 1 and ≥2 removed spans.
    pub removed: [f64; 3],
    pub no_edit: f64,
    /// Shares with 0, 1, 2 and ≥3 added spans.
    pub added: [f64; 4],
}

/// Post-edit distribution keyed by the number of QE spans originally shown.
pub fn edit_distribution(segments: &[SegmentEdits]) -> Vec<DistributionRow> {
    let total = segments.len();
    let mut buckets: Vec<Vec<&SegmentEdits>> = vec![Vec::new(); QE_BUCKETS];
    for seg in segments {
        buckets[seg.qe_span_count.min(QE_BUCKETS - 1)].push(seg);
    }
    buckets
        .into_iter()
        .enumerate()
        .map(|(b, segs)| {
            let n = segs.len();
            let share = |count: usize| if n == 0 { 0.0 } else { count as f64 / n as f64 };
            let mut removed = [0usize; 3];
            let mut added = [0usize; 4];
            let mut no_edit = 0;
            for s in &segs {
                removed[s.removed().min(2)] += 1;
                added[s.added().min(3)] += 1;
                if s.unedited() {
                    no_edit += 1;
                }
            }
            DistributionRow {
                bucket: if b == QE_BUCKETS - 1 {
                    format!("{b}+")
                } else {
                    b.to_string()
                },
                segments: n,
                frequency: if total == 0 { 0.0 } else { n as f64 / total as f64 },
                removed: removed.map(share),
                no_edit: share(no_edit),
                added: added.map(share),
            }
        })
        .collect()
}

pub fn distribution_to_tsv(rows: &[DistributionRow]) -> String {
    let mut out = String::from(
        "qe_errors\tsegments\tfrequency_pct\tremoved_ge2_pct\tremoved_1_pct\tremoved_0_pct\tno_edit_pct\tadded_0_pct\tadded_1_pct\tadded_2_pct\tadded_ge3_pct\n",
    );
    for r in rows {
        let p = |x: f64| format!("{:.2}", 100.0 * x);
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.bucket,
            r.segments,
            p(r.frequency),
            p(r.removed[2]),
            p(r.removed[1]),
            p(r.removed[0]),
            p(r.no_edit),
            p(r.added[0]),
            p(r.added[1]),
            p(r.added[2]),
            p(r.added[3]),
        );
    }
    out
}

/// Edits of the segment an annotator handled at a given progress position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProgressEdits {
    pub sequence_index: usize,
    pub records: Vec<EditRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressPoint {
    pub position: usize,
    pub removed: f64,
    /// AI spans that survived in any form (kept, severity change, move, resize).
    pub kept: f64,
    pub added: f64,
}

/// Removed/kept/added counts per progress position, averaged over all
/// annotators at that position, then smoothed with a trailing moving mean.
pub fn overreliance_curve(
    items: &[ProgressEdits],
    window: usize,
) -> Result<Vec<ProgressPoint>, DiffError> {
    if window == 0 {
        return Err(DiffError::ZeroWindow);
    }
    let mut per_position: BTreeMap<usize, ([f64; 3], usize)> = BTreeMap::new();
    for item in items {
        let entry = per_position.entry(item.sequence_index).or_default();
        for r in &item.records {
            match r.kind {
                EditKind::Removed => entry.0[0] += 1.0,
                EditKind::Added => entry.0[2] += 1.0,
                _ => entry.0[1] += 1.0,
            }
        }
        entry.1 += 1;
    }
    let raw: Vec<(usize, [f64; 3])> = per_position
        .into_iter()
        .map(|(pos, (sums, n))| (pos, sums.map(|s| s / n as f64)))
        .collect();
    Ok(raw
        .iter()
        .enumerate()
        .map(|(i, (pos, _))| {
            let lo = (i + 1).saturating_sub(window);
            let slice = &raw[lo..=i];
            let mean = |c: usize| slice.iter().map(|(_, v)| v[c]).sum::<f64>() / slice.len() as f64;
            ProgressPoint {
                position: *pos,
                removed: mean(0),
                kept: mean(1),
                added: mean(2),
            }
        })
        .collect())
}

pub fn curve_to_tsv(points: &[ProgressPoint], window: usize) -> String {
    let mut out = format!("# window={window}\nposition\tremoved\tkept\tadded\n");
    for p in points {
        let _ = writeln!(
            out,
            "{}\t{:.4}\t{:.4}\t{:.4}",
            p.position, p.removed, p.kept, p.added
        );
    }
    out
}
