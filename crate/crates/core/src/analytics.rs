//! Descriptive statistics, agreement, timing models and system ranking over exports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::{self, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::export::{ExportBundle, ScoreRecord};
use crate::model::{span_statistics, summarize_annotations, Annotation, ErrorSpan, ModelError, TaskKey};
use crate::stats::{self, StatsError};

pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_SPEEDUP_WINDOW: usize = 15;
pub const RANKING_TEST: &str = "one-sided Wilcoxon rank-sum";

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("empty join on ({0})")]
    EmptyJoin(&'static str),
    #[error("need at least two scored systems, found {0}")]
    TooFewSystems(usize),
    #[error("system {0} shares no segments with any other system")]
    DisjointCoverage(String),
    #[error("alpha {0} outside (0, 1)")]
    InvalidAlpha(f64),
    #[error("window must be at least 1")]
    ZeroWindow,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// The annotator's 0–100 judgment.
    Direct,
    /// −(#minor + 5·#major).
    FromSpans,
}

impl Scoring {
    pub fn score(self, a: &Annotation) -> f64 {
        match self {
            Scoring::Direct => a.direct_score,
            Scoring::FromSpans => a.span_score().value() as f64,
        }
    }
}

impl fmt::Display for Scoring {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scoring::Direct => "direct",
            Scoring::FromSpans => "from_spans",
        })
    }
}

impl FromStr for Scoring {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "direct" => Ok(Scoring::Direct),
            "from_spans" | "from-spans" | "spans" => Ok(Scoring::FromSpans),
            other => Err(format!("unknown scoring mode {other:?} (direct, from_spans)")),
        }
    }
}

/// A correlation value or the reason it is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Correlation {
    pub n: usize,
    pub value: Option<f64>,
    pub undefined: Option<String>,
}

impl Correlation {
    fn from_result(n: usize, r: Result<f64, StatsError>) -> Self {
        match r {
            Ok(v) => Correlation {
                n,
                value: Some(v),
                undefined: None,
            },
            Err(e) => Correlation::undefined(n, e.to_string()),
        }
    }

    fn undefined(n: usize, reason: impl Into<String>) -> Self {
        Correlation {
            n,
            value: None,
            undefined: Some(reason.into()),
        }
    }

    pub fn cell(&self) -> String {
        match self.value {
            Some(v) => format!("{v:.3}"),
            None => "undefined".to_string(),
        }
    }
}

/// Mean score per task key over regular annotations.
pub fn segment_scores(bundle: &ExportBundle, scoring: Scoring) -> BTreeMap<TaskKey, f64> {
    let mut acc: BTreeMap<TaskKey, (f64, usize)> = BTreeMap::new();
    for a in bundle.regular_annotations() {
        let e = acc.entry(a.key()).or_default();
        e.0 += scoring.score(a);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

// (key, annotator) -> mean score; duplicates within a run are averaged
fn annotator_scores(bundle: &ExportBundle, scoring: Scoring) -> BTreeMap<(TaskKey, String), f64> {
    let mut acc: BTreeMap<(TaskKey, String), (f64, usize)> = BTreeMap::new();
    for a in bundle.regular_annotations() {
        let e = acc.entry((a.key(), a.annotator_id.clone())).or_default();
        e.0 += scoring.score(a);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

#[derive(Debug, Default)]
struct Paired {
    system: Vec<String>,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl Paired {
    fn push(&mut self, system: &str, x: f64, y: f64) {
        self.system.push(system.to_string());
        self.x.push(x);
        self.y.push(y);
    }

    fn pooled(&self) -> Correlation {
        Correlation::from_result(self.x.len(), stats::spearman(&self.x, &self.y))
    }

    fn per_system_mean(&self) -> Correlation {
        let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for ((s, x), y) in self.system.iter().zip(&self.x).zip(&self.y) {
            let g = groups.entry(s.as_str()).or_default();
            g.0.push(*x);
            g.1.push(*y);
        }
        let values: Vec<f64> = groups
            .values()
            .filter_map(|(x, y)| stats::spearman(x, y).ok())
            .collect();
        if values.is_empty() {
            return Correlation::undefined(self.x.len(), "no system with a defined correlation");
        }
        Correlation {
            n: self.x.len(),
            value: Some(stats::mean(&values)),
            undefined: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub scoring: Scoring,
    /// Spearman over all joined segments pooled across systems.
    pub inter: Correlation,
    pub intra: Correlation,
    /// Spearman per system, then averaged over systems.
    pub inter_per_system: Correlation,
    pub intra_per_system: Correlation,
}

impl AgreementReport {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("# scoring={}\tcorrelation=spearman\n", self.scoring);
        out.push_str("relation\tpooling\tn\tspearman\n");
        for (relation, pooling, c) in [
            ("inter", "pooled", &self.inter),
            ("inter", "per_system_mean", &self.inter_per_system),
            ("intra", "pooled", &self.intra),
            ("intra", "per_system_mean", &self.intra_per_system),
        ] {
            let _ = writeln!(out, "{relation}\t{pooling}\t{}\t{}", c.n, c.cell());
        }
        out
    }
}

/// Inter-annotator agreement joins the two runs on (system, segment) across
/// different annotators; intra-annotator agreement joins on (system,
/// segment, annotator).
pub fn agreement_report(
    run_a: &ExportBundle,
    run_b: &ExportBundle,
    scoring: Scoring,
) -> Result<AgreementReport, AnalyticsError> {
    let a = annotator_scores(run_a, scoring);
    let b = annotator_scores(run_b, scoring);
    let mut b_by_key: BTreeMap<&TaskKey, Vec<(&str, f64)>> = BTreeMap::new();
    for ((key, who), score) in &b {
        b_by_key.entry(key).or_default().push((who, *score));
    }
    let mut inter = Paired::default();
    let mut intra = Paired::default();
    for ((key, who), x) in &a {
        for (other, y) in b_by_key.get(key).into_iter().flatten() {
            if who == other {
                intra.push(&key.system_id, *x, *y);
            } else {
                inter.push(&key.system_id, *x, *y);
            }
        }
    }
    if inter.x.is_empty() && intra.x.is_empty() {
        return Err(AnalyticsError::EmptyJoin("system_id, segment_id, annotator_id"));
    }
    let or_empty = |p: &Paired, f: fn(&Paired) -> Correlation| {
        if p.x.is_empty() {
            Correlation::undefined(0, "empty join")
        } else {
            f(p)
        }
    };
    Ok(AgreementReport {
        scoring,
        inter: or_empty(&inter, Paired::pooled),
        intra: or_empty(&intra, Paired::pooled),
        inter_per_system: or_empty(&inter, Paired::per_system_mean),
        intra_per_system: or_empty(&intra, Paired::per_system_mean),
    })
}

/// Segment-level Kendall τ_c between this export and scores from another
/// protocol, joined on (system, segment) with duplicates averaged per side.
pub fn cross_protocol_kendall(
    bundle: &ExportBundle,
    scoring: Scoring,
    other: &[ScoreRecord],
) -> Result<Correlation, AnalyticsError> {
    let ours = segment_scores(bundle, scoring);
    let mut theirs: BTreeMap<TaskKey, (f64, usize)> = BTreeMap::new();
    for r in other {
        let e = theirs.entry(TaskKey::new(&r.system_id, &r.segment_id)).or_default();
        e.0 += r.score;
        e.1 += 1;
    }
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (key, score) in &ours {
        if let Some((s, n)) = theirs.get(key) {
            x.push(*score);
            y.push(s / *n as f64);
        }
    }
    if x.is_empty() {
        return Err(AnalyticsError::EmptyJoin("system_id, segment_id"));
    }
    Ok(Correlation::from_result(x.len(), stats::kendall_tau_c(&x, &y)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub segments: usize,
    pub mean_errors: f64,
    pub minor_share: Option<f64>,
    pub major_share: Option<f64>,
    pub mean_score: Option<f64>,
}

/// Span counts, severity shares and mean direct score of the human
/// annotations, plus the same span statistics for the AI pre-fill of the
/// annotated items when any pre-fill exists.
pub fn summary_table(bundle: &ExportBundle, label: &str) -> Result<Vec<SummaryRow>, AnalyticsError> {
    let regular: Vec<Annotation> = bundle.regular_annotations().cloned().collect();
    let human = summarize_annotations(&regular)?;
    let mut rows = vec![SummaryRow {
        label: label.to_string(),
        segments: human.segments,
        mean_errors: human.mean_errors,
        minor_share: human.minor_share,
        major_share: human.major_share,
        mean_score: Some(human.mean_score),
    }];
    let prefill: Vec<&[ErrorSpan]> = regular
        .iter()
        .filter_map(|a| bundle.task(&a.key()))
        .map(|t| t.prefill_spans.as_slice())
        .collect();
    if prefill.iter().any(|l| !l.is_empty()) {
        let (mean_errors, minor_share, major_share) = span_statistics(&prefill);
        rows.push(SummaryRow {
            label: "QE".to_string(),
            segments: prefill.len(),
            mean_errors,
            minor_share,
            major_share,
            mean_score: None,
        });
    }
    Ok(rows)
}

pub fn summary_to_tsv(rows: &[SummaryRow]) -> String {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.0}%", 100.0 * v));
    let mut out = String::from("protocol\tsegments\terrors\tminor\tmajor\tscore\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.2}\t{}\t{}\t{}",
            r.label,
            r.segments,
            r.mean_errors,
            pct(r.minor_share),
            pct(r.major_share),
            r.mean_score.map_or("-".to_string(), |s| format!("{s:.1}"))
        );
    }
    out
}

pub const TIME_FEATURES: [&str; 6] = [
    "progress",
    "translation_word_count",
    "qe_error_spans",
    "error_spans",
    "score",
    "document_size",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCorrelation {
    pub feature: String,
    pub pearson: Correlation,
}

/// Pearson correlation of each per-segment feature with annotation time.
pub fn time_feature_correlations(bundle: &ExportBundle) -> Vec<FeatureCorrelation> {
    let mut doc_sizes: HashMap<(&str, &str), usize> = HashMap::new();
    for t in bundle.segments.iter().filter(|t| !t.is_check()) {
        *doc_sizes.entry((&t.system_id, &t.document_id)).or_default() += 1;
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); TIME_FEATURES.len()];
    let mut durations = Vec::new();
    for a in bundle.regular_annotations() {
        let Some(task) = bundle.task(&a.key()) else {
            continue;
        };
        let row = [
            a.sequence_index as f64,
            task.word_count() as f64,
            task.prefill_spans.len() as f64,
            a.spans.len() as f64,
            a.direct_score,
            doc_sizes[&(task.system_id.as_str(), task.document_id.as_str())] as f64,
        ];
        for (col, v) in columns.iter_mut().zip(row) {
            col.push(v);
        }
        durations.push(a.duration_seconds);
    }
    TIME_FEATURES
        .iter()
        .zip(columns)
        .map(|(name, col)| FeatureCorrelation {
            feature: name.to_string(),
            pearson: Correlation::from_result(col.len(), stats::pearson(&col, &durations)),
        })
        .collect()
}

pub fn features_to_tsv(rows: &[FeatureCorrelation]) -> String {
    let mut out = String::from("feature\tn\tpearson\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{}\t{}", r.feature, r.pearson.n, r.pearson.cell());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatorSpeed {
    pub run_id: String,
    pub annotator_id: String,
    pub segments: usize,
    /// Least-squares slope of duration against work position, seconds per segment.
    pub slope: f64,
    pub mean_absolute_deviation: f64,
    /// Moving average of duration, one value per complete window.
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub window: usize,
    pub annotators: Vec<AnnotatorSpeed>,
    /// Annotators with fewer segments than the window.
    pub skipped: Vec<String>,
    pub mean_slope: Option<f64>,
    pub mean_absolute_deviation: Option<f64>,
    /// Per-position mean of the annotator curves over annotators reaching it.
    pub average_curve: Vec<f64>,
}

fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    values.windows(window).map(stats::mean).collect()
}

pub fn speedup_report(bundle: &ExportBundle, window: usize) -> Result<SpeedupReport, AnalyticsError> {
    if window == 0 {
        return Err(AnalyticsError::ZeroWindow);
    }
    let mut streams: BTreeMap<(&str, &str), Vec<&Annotation>> = BTreeMap::new();
    for a in &bundle.annotations {
        streams.entry((&a.run_id, &a.annotator_id)).or_default().push(a);
    }
    let mut annotators = Vec::new();
    let mut skipped = Vec::new();
    for ((run, who), mut list) in streams {
        if list.len() < window.max(2) {
            log::info!("skipping annotator {who}: {} segments < window {window}", list.len());
            skipped.push(who.to_string());
            continue;
        }
        list.sort_by_key(|a| a.sequence_index);
        let x: Vec<f64> = list.iter().map(|a| a.sequence_index as f64).collect();
        let y: Vec<f64> = list.iter().map(|a| a.duration_seconds).collect();
        let Ok((slope, _)) = stats::linear_fit(&x, &y) else {
            skipped.push(who.to_string());
            continue;
        };
        annotators.push(AnnotatorSpeed {
            run_id: run.to_string(),
            annotator_id: who.to_string(),
            segments: list.len(),
            slope,
            mean_absolute_deviation: stats::mean_absolute_deviation(&y),
            curve: moving_average(&y, window),
        });
    }
    let longest = annotators.iter().map(|a| a.curve.len()).max().unwrap_or(0);
    let average_curve = (0..longest)
        .map(|i| {
            let vals: Vec<f64> = annotators.iter().filter_map(|a| a.curve.get(i).copied()).collect();
            stats::mean(&vals)
        })
        .collect();
    let mean_of = |f: fn(&AnnotatorSpeed) -> f64| {
        (!annotators.is_empty()).then(|| annotators.iter().map(f).sum::<f64>() / annotators.len() as f64)
    };
    Ok(SpeedupReport {
        window,
        mean_slope: mean_of(|a| a.slope),
        mean_absolute_deviation: mean_of(|a| a.mean_absolute_deviation),
        annotators,
        skipped,
        average_curve,
    })
}

impl SpeedupReport {
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.3}"));
        let mut out = format!(
            "# window={}\tmean_slope={}\tmean_abs_deviation={}\n",
            self.window,
            opt(self.mean_slope),
            opt(self.mean_absolute_deviation)
        );
        out.push_str("run\tannotator\tsegments\tslope\tabs_deviation\n");
        for a in &self.annotators {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.3}\t{:.3}",
                a.run_id, a.annotator_id, a.segments, a.slope, a.mean_absolute_deviation
            );
        }
        for who in &self.skipped {
            let _ = writeln!(out, "# skipped {who}: fewer than {} segments", self.window);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedSystem {
    pub system_id: String,
    pub mean_score: f64,
    pub segments: usize,
    /// 1-based cluster label; clusters are contiguous in rank order.
    pub cluster: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingTable {
    pub scoring: Scoring,
    pub alpha: f64,
    pub test: String,
    /// Best first.
    pub systems: Vec<RankedSystem>,
    /// `p_values[i][j]`: one-sided p that system `i` scores higher than
    /// system `j` (rank order indices); `None` on the diagonal.
    pub p_values: Vec<Vec<Option<f64>>>,
}

impl RankingTable {
    pub fn cluster_count(&self) -> usize {
        self.systems.last().map_or(0, |s| s.cluster)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# scoring={}\talpha={}\ttest={}\n",
            self.scoring, self.alpha, self.test
        );
        out.push_str("rank\tsystem\tsegments\tmean_score\tcluster\n");
        for (i, s) in self.systems.iter().enumerate() {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.4}\t{}",
                i + 1,
                s.system_id,
                s.segments,
                s.mean_score,
                s.cluster
            );
        }
        out.push_str("\nsystem_better\tsystem_worse\tp_value\n");
        for (i, row) in self.p_values.iter().enumerate() {
            for (j, p) in row.iter().enumerate().skip(i + 1) {
                if let Some(p) = p {
                    let _ = writeln!(
                        out,
                        "{}\t{}\t{:.6e}",
                        self.systems[i].system_id, self.systems[j].system_id, p
                    );
                }
            }
        }
        out
    }
}

/// Per-system scores, used by [`rank_systems`].
pub fn system_scores(bundle: &ExportBundle, scoring: Scoring) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut by_system: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (key, score) in segment_scores(bundle, scoring) {
        by_system
            .entry(key.system_id)
            .or_default()
            .insert(key.segment_id, score);
    }
    by_system
}

/// Sorts systems by mean score and splits them into significance clusters:
/// a system opens a new cluster when every member of the current cluster
/// is significantly better than it.
pub fn rank_systems(
    bundle: &ExportBundle,
    scoring: Scoring,
    alpha: f64,
) -> Result<RankingTable, AnalyticsError> {
    rank_score_sets(&system_scores(bundle, scoring), scoring, alpha)
}

pub fn rank_score_sets(
    by_system: &BTreeMap<String, BTreeMap<String, f64>>,
    scoring: Scoring,
    alpha: f64,
) -> Result<RankingTable, AnalyticsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(AnalyticsError::InvalidAlpha(alpha));
    }
    if by_system.len() < 2 {
        return Err(AnalyticsError::TooFewSystems(by_system.len()));
    }
    for (sys, segs) in by_system {
        let shared = by_system
            .iter()
            .any(|(other, o)| other != sys && segs.keys().any(|k| o.contains_key(k)));
        if !shared {
            return Err(AnalyticsError::DisjointCoverage(sys.clone()));
        }
    }
    let mut order: Vec<(&String, Vec<f64>, f64)> = by_system
        .iter()
        .map(|(s, segs)| {
            let v: Vec<f64> = segs.values().copied().collect();
            let m = stats::mean(&v);
            (s, v, m)
        })
        .collect();
    order.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(b.0)));

    let k = order.len();
    let mut p_values = vec![vec![None; k]; k];
    for i in 0..k {
        for j in 0..k {
            if i != j {
                p_values[i][j] = stats::rank_sum_greater(&order[i].1, &order[j].1)
                    .ok()
                    .map(|r| r.p_value);
            }
        }
    }
    let mut systems = Vec::with_capacity(k);
    let mut cluster = 1;
    let mut members: Vec<usize> = Vec::new();
    for j in 0..k {
        let separated = !members.is_empty()
            && members
                .iter()
                .all(|&i| p_values[i][j].is_some_and(|p| p < alpha));
        if separated {
            cluster += 1;
            members.clear();
        }
        members.push(j);
        systems.push(RankedSystem {
            system_id: order[j].0.clone(),
            mean_score: order[j].2,
            segments: order[j].1.len(),
            cluster,
        });
    }
    Ok(RankingTable {
        scoring,
        alpha,
        test: RANKING_TEST.to_string(),
        systems,
        p_values,
    })
}

/// Systems ordered by mean score, best first.
pub fn system_order(by_system: &BTreeMap<String, BTreeMap<String, f64>>) -> Vec<(String, f64)> {
    let mut v: Vec<(String, f64)> = by_system
        .iter()
        .map(|(s, segs)| (s.clone(), segs.values().sum::<f64>() / segs.len().max(1) as f64))
        .collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    v
}

/// Distinct segment ids with at least one score.
pub fn covered_segments(by_system: &BTreeMap<String, BTreeMap<String, f64>>) -> BTreeSet<String> {
    by_system.values().flat_map(|m| m.keys().cloned()).collect()
}
