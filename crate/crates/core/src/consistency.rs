//! Subset consistency accuracy, the additive noise-model simulator and
//! QE-based prefiltering.

use std::collections::BTreeMap;
use std::fmt::{self, Write};
use std::str::FromStr;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analytics::{system_order, system_scores, Scoring};
use crate::export::ExportBundle;
use crate::model::TaskKey;

pub const DEFAULT_RESAMPLES: usize = 1000;
pub const PUBLISHED_SIZES: [usize; 4] = [10, 40, 115, 190];
pub const DEFAULT_EXCLUDE_THRESHOLD: f64 = 1.0;
pub const SUBSTITUTE_SCORE: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConsistencyError {
    #[error("empty segment subset")]
    EmptySubset,
    #[error("subset size {size} outside 1..={segments}")]
    SizeOutOfRange { size: usize, segments: usize },
    #[error("segment index {0} out of range")]
    IndexOutOfRange(usize),
    #[error("need at least two systems, found {0}")]
    TooFewSystems(usize),
    #[error("no segment is scored for every system")]
    NoCompleteSegments,
    #[error("matrix is not rectangular or has non-finite values")]
    Malformed,
    #[error("negative {0} scale")]
    NegativeScale(&'static str),
    #[error("difficulty vector has {got} entries, expected {expected}")]
    DifficultyLength { expected: usize, got: usize },
    #[error("threshold {0} outside (0, 1]")]
    ThresholdOutOfRange(f64),
    #[error("no segments left after filtering")]
    NothingLeft,
}

/// Systems × segments scores with full-data system means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub systems: Vec<String>,
    pub segments: Vec<String>,
    /// One row per system.
    pub values: Vec<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(
        systems: Vec<String>,
        segments: Vec<String>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self, ConsistencyError> {
        if systems.len() < 2 {
            return Err(ConsistencyError::TooFewSystems(systems.len()));
        }
        let ok = values.len() == systems.len()
            && values
                .iter()
                .all(|r| r.len() == segments.len() && r.iter().all(|v| v.is_finite()));
        if !ok {
            return Err(ConsistencyError::Malformed);
        }
        if segments.is_empty() {
            return Err(ConsistencyError::NoCompleteSegments);
        }
        Ok(ScoreMatrix {
            systems,
            segments,
            values,
        })
    }

    /// Unnamed matrix from rows.
    pub fn from_rows(values: Vec<Vec<f64>>) -> Result<Self, ConsistencyError> {
        let systems = (0..values.len()).map(|m| format!("sys{m}")).collect();
        let segments = (0..values.first().map_or(0, Vec::len))
            .map(|i| format!("seg{i}"))
            .collect();
        Self::new(systems, segments, values)
    }

    /// Keeps only segments scored for every system; duplicate annotations
    /// of a cell are averaged.
    pub fn from_bundle(bundle: &ExportBundle, scoring: Scoring) -> Result<Self, ConsistencyError> {
        Self::from_system_scores(&system_scores(bundle, scoring))
    }

    pub fn from_system_scores(
        by_system: &BTreeMap<String, BTreeMap<String, f64>>,
    ) -> Result<Self, ConsistencyError> {
        if by_system.len() < 2 {
            return Err(ConsistencyError::TooFewSystems(by_system.len()));
        }
        let mut rows = by_system.values();
        let first = rows.next().expect("two systems");
        let segments: Vec<String> = first
            .keys()
            .filter(|seg| by_system.values().all(|m| m.contains_key(*seg)))
            .cloned()
            .collect();
        let values = by_system
            .values()
            .map(|m| segments.iter().map(|s| m[s]).collect())
            .collect();
        Self::new(by_system.keys().cloned().collect(), segments, values)
    }

    pub fn system_count(&self) -> usize {
        self.systems.len()
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    /// Y_{m,D}.
    pub fn full_means(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|r| r.iter().sum::<f64>() / r.len() as f64)
            .collect()
    }

    fn subset_means(&self, subset: &[usize]) -> Vec<f64> {
        self.values
            .iter()
            .map(|r| subset.iter().map(|&i| r[i]).sum::<f64>() / subset.len() as f64)
            .collect()
    }
}

fn ordering_agreement(subset_means: &[f64], full_means: &[f64]) -> f64 {
    let k = full_means.len();
    let mut hits = 0usize;
    for a in 0..k {
        for b in 0..k {
            if (subset_means[a] > subset_means[b]) == (full_means[a] > full_means[b]) {
                hits += 1;
            }
        }
    }
    hits as f64 / (k * k) as f64
}

/// Fraction of ordered system pairs, diagonal included, whose order by
/// subset mean agrees with their order by full-data mean.
pub fn subset_accuracy(matrix: &ScoreMatrix, subset: &[usize]) -> Result<f64, ConsistencyError> {
    if subset.is_empty() {
        return Err(ConsistencyError::EmptySubset);
    }
    if let Some(&bad) = subset.iter().find(|&&i| i >= matrix.segment_count()) {
        return Err(ConsistencyError::IndexOutOfRange(bad));
    }
    Ok(ordering_agreement(&matrix.subset_means(subset), &matrix.full_means()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub size: usize,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyCurve {
    pub seed: u64,
    pub resamples: usize,
    pub points: Vec<CurvePoint>,
    /// Mean of the per-size accuracies.
    pub mean_over_sizes: f64,
}

impl ConsistencyCurve {
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# resamples={}\tseed={}\tmean_over_sizes={:.4}\n",
            self.resamples,
            self.seed,
            100.0 * self.mean_over_sizes
        );
        out.push_str("size\taccuracy_pct\n");
        for p in &self.points {
            let _ = writeln!(out, "{}\t{:.4}", p.size, 100.0 * p.mean_accuracy);
        }
        out
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn resample_seed(seed: u64, size: usize, index: usize) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ size as u64) ^ index as u64)
}

/// Mean subset accuracy over `resamples` uniform subsets per size, drawn
/// without replacement. Each resample has its own seed derived from
/// (seed, size, index), so the result does not depend on thread count.
pub fn consistency_curve(
    matrix: &ScoreMatrix,
    sizes: &[usize],
    resamples: usize,
    seed: u64,
) -> Result<ConsistencyCurve, ConsistencyError> {
    let n = matrix.segment_count();
    if let Some(&size) = sizes.iter().find(|&&s| s == 0 || s > n) {
        return Err(ConsistencyError::SizeOutOfRange { size, segments: n });
    }
    if resamples == 0 {
        return Err(ConsistencyError::EmptySubset);
    }
    let full = matrix.full_means();
    let points: Vec<CurvePoint> = sizes
        .iter()
        .map(|&size| {
            let accs: Vec<f64> = (0..resamples)
                .into_par_iter()
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(resample_seed(seed, size, i));
                    let subset = index::sample(&mut rng, n, size).into_vec();
                    ordering_agreement(&matrix.subset_means(&subset), &full)
                })
                .collect();
            CurvePoint {
                size,
                mean_accuracy: accs.iter().sum::<f64>() / resamples as f64,
            }
        })
        .collect();
    let mean_over_sizes = if points.is_empty() {
        0.0
    } else {
        points.iter().map(|p| p.mean_accuracy).sum::<f64>() / points.len() as f64
    };
    Ok(ConsistencyCurve {
        seed,
        resamples,
        points,
        mean_over_sizes,
    })
}

/// Zero-mean distribution family for difficulties and noise; the scale is
/// the standard deviation in both cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    #[default]
    Gaussian,
    Uniform,
}

impl FromStr for NoiseFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gaussian" | "normal" => Ok(NoiseFamily::Gaussian),
            "uniform" => Ok(NoiseFamily::Uniform),
            other => Err(format!("unknown noise family {other:?} (gaussian, uniform)")),
        }
    }
}

impl fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::Uniform => "uniform",
        })
    }
}

fn draw(family: NoiseFamily, scale: f64, rng: &mut impl Rng) -> f64 {
    if scale == 0.0 {
        return 0.0;
    }
    match family {
        NoiseFamily::Gaussian => Normal::new(0.0, scale).expect("finite scale").sample(rng),
        NoiseFamily::Uniform => {
            let half = scale * 3f64.sqrt();
            Uniform::new_inclusive(-half, half).expect("finite scale").sample(rng)
        }
    }
}

/// Parameters of y_{m,i} = a_m − d_i + ε_{m,i}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModelParams {
    pub abilities: Vec<f64>,
    /// Fixed difficulties; drawn with `difficulty_scale` when absent.
    pub difficulties: Option<Vec<f64>>,
    pub difficulty_scale: f64,
    pub noise_scale: f64,
    pub family: NoiseFamily,
    pub seed: u64,
}

impl NoiseModelParams {
    pub fn new(abilities: Vec<f64>, noise_scale: f64, seed: u64) -> Self {
        NoiseModelParams {
            abilities,
            difficulties: None,
            difficulty_scale: 10.0,
            noise_scale,
            family: NoiseFamily::Gaussian,
            seed,
        }
    }

    pub fn to_tsv(&self) -> String {
        let abilities: Vec<String> = self.abilities.iter().map(|a| a.to_string()).collect();
        let mut out = String::from("parameter\tvalue\n");
        let _ = writeln!(out, "abilities\t{}", abilities.join(","));
        match &self.difficulties {
            Some(d) => {
                let _ = writeln!(out, "difficulties\tfixed({})", d.len());
            }
            None => {
                let _ = writeln!(out, "difficulty_scale\t{}", self.difficulty_scale);
            }
        }
        let _ = writeln!(out, "noise_scale\t{}", self.noise_scale);
        let _ = writeln!(out, "family\t{}", self.family);
        let _ = writeln!(out, "seed\t{}", self.seed);
        out
    }
}

/// Draws a score matrix from the additive model. Difficulties and noise use
/// separate random streams, so changing one leaves the other unchanged.
pub fn simulate_matrix(params: &NoiseModelParams, segments: usize) -> Result<ScoreMatrix, ConsistencyError> {
    if params.abilities.len() < 2 {
        return Err(ConsistencyError::TooFewSystems(params.abilities.len()));
    }
    if params.noise_scale.is_nan() || params.noise_scale < 0.0 || params.noise_scale.is_infinite() {
        return Err(ConsistencyError::NegativeScale("noise"));
    }
    if params.difficulty_scale.is_nan() || params.difficulty_scale < 0.0 || params.difficulty_scale.is_infinite() {
        return Err(ConsistencyError::NegativeScale("difficulty"));
    }
    let difficulties = match &params.difficulties {
        Some(d) if d.len() != segments => {
            return Err(ConsistencyError::DifficultyLength {
                expected: segments,
                got: d.len(),
            })
        }
        Some(d) => d.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(1);
            (0..segments)
                .map(|_| draw(params.family, params.difficulty_scale, &mut rng))
                .collect()
        }
    };
    let mut noise = ChaCha8Rng::seed_from_u64(params.seed);
    noise.set_stream(2);
    let values = params
        .abilities
        .iter()
        .map(|a| {
            difficulties
                .iter()
                .map(|d| a - d + draw(params.family, params.noise_scale, &mut noise))
                .collect()
        })
        .collect();
    ScoreMatrix::from_rows(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefilterMode {
    /// Segments with no QE error get the maximum score instead of a human one.
    Substitute,
    /// Segments with no QE error for enough systems are dropped.
    Exclude,
}

impl FromStr for PrefilterMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "substitute" => Ok(PrefilterMode::Substitute),
            "exclude" => Ok(PrefilterMode::Exclude),
            other => Err(format!("unknown prefilter mode {other:?} (substitute, exclude)")),
        }
    }
}

impl fmt::Display for PrefilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrefilterMode::Substitute => "substitute",
            PrefilterMode::Exclude => "exclude",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemComparison {
    pub system_id: String,
    pub full_mean: f64,
    pub filtered_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefilterReport {
    pub mode: PrefilterMode,
    pub threshold: f64,
    pub cells: usize,
    pub cells_saved: usize,
    /// Share of (system, segment) annotations no longer needed.
    pub budget_saved: f64,
    pub segments_excluded: usize,
    /// Sorted by full-data mean, best first.
    pub systems: Vec<SystemComparison>,
    /// Unordered system pairs whose order differs after filtering.
    pub flipped_pairs: Vec<(String, String)>,
    /// Share of unordered system pairs ordered the same way.
    pub pair_agreement: f64,
}

impl PrefilterReport {
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# mode={}\tthreshold={}\tbudget_saved_pct={:.2}\tpair_agreement={:.4}\tflipped_pairs={}\tsegments_excluded={}\n",
            self.mode,
            self.threshold,
            100.0 * self.budget_saved,
            self.pair_agreement,
            self.flipped_pairs.len(),
            self.segments_excluded
        );
        out.push_str("system\tfull_mean\tfiltered_mean\n");
        for s in &self.systems {
            let _ = writeln!(out, "{}\t{:.4}\t{:.4}", s.system_id, s.full_mean, s.filtered_mean);
        }
        for (a, b) in &self.flipped_pairs {
            let _ = writeln!(out, "# flipped\t{a}\t{b}");
        }
        out
    }
}

/// Budget saving and ranking stability when segments that the QE system
/// marks error-free are auto-scored or skipped. `threshold` is the share of
/// systems with zero QE errors at which a segment is excluded.
pub fn prefilter_simulation(
    bundle: &ExportBundle,
    mode: PrefilterMode,
    threshold: f64,
) -> Result<PrefilterReport, ConsistencyError> {
    if mode == PrefilterMode::Exclude && !(threshold > 0.0 && threshold <= 1.0) {
        return Err(ConsistencyError::ThresholdOutOfRange(threshold));
    }
    let full = system_scores(bundle, Scoring::Direct);
    if full.len() < 2 {
        return Err(ConsistencyError::TooFewSystems(full.len()));
    }
    // tasks whose provider failed have no usable QE count
    let qe_zero = |sys: &str, seg: &str| {
        bundle
            .task(&TaskKey::new(sys, seg))
            .is_some_and(|t| t.provider_error.is_none() && t.prefill_spans.is_empty())
    };
    let cells: usize = full.values().map(BTreeMap::len).sum();
    let mut filtered: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut cells_saved = 0;
    let mut segments_excluded = 0;
    match mode {
        PrefilterMode::Substitute => {
            for (sys, segs) in &full {
                let row = filtered.entry(sys.clone()).or_default();
                for (seg, score) in segs {
                    if qe_zero(sys, seg) {
                        cells_saved += 1;
                        row.insert(seg.clone(), SUBSTITUTE_SCORE);
                    } else {
                        row.insert(seg.clone(), *score);
                    }
                }
            }
        }
        PrefilterMode::Exclude => {
            let mut per_segment: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
            for (sys, segs) in &full {
                for seg in segs.keys() {
                    let e = per_segment.entry(seg).or_default();
                    e.0 += usize::from(qe_zero(sys, seg));
                    e.1 += 1;
                }
            }
            for (seg, (zero, total)) in &per_segment {
                if *zero as f64 / *total as f64 >= threshold {
                    segments_excluded += 1;
                    cells_saved += total;
                    continue;
                }
                for (sys, segs) in &full {
                    if let Some(score) = segs.get(*seg) {
                        filtered.entry(sys.clone()).or_default().insert(seg.to_string(), *score);
                    }
                }
            }
        }
    }
    if full.keys().any(|s| filtered.get(s).is_none_or(BTreeMap::is_empty)) {
        return Err(ConsistencyError::NothingLeft);
    }
    let after: BTreeMap<String, f64> = system_order(&filtered).into_iter().collect();
    let before = system_order(&full);
    let systems: Vec<SystemComparison> = before
        .iter()
        .map(|(s, m)| SystemComparison {
            system_id: s.clone(),
            full_mean: *m,
            filtered_mean: after[s],
        })
        .collect();
    let mut flipped_pairs = Vec::new();
    let mut pairs = 0;
    for i in 0..systems.len() {
        for j in i + 1..systems.len() {
            pairs += 1;
            let (a, b) = (&systems[i], &systems[j]);
            let before = a.full_mean.partial_cmp(&b.full_mean);
            let after = a.filtered_mean.partial_cmp(&b.filtered_mean);
            if before != after {
                flipped_pairs.push((a.system_id.clone(), b.system_id.clone()));
            }
        }
    }
    Ok(PrefilterReport {
        mode,
        threshold,
        cells,
        cells_saved,
        budget_saved: cells_saved as f64 / cells as f64,
        segments_excluded,
        systems,
        pair_agreement: 1.0 - flipped_pairs.len() as f64 / pairs as f64,
        flipped_pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Annotation, ErrorSpan, SegmentTask, Severity};

    fn brute_accuracy(rows: &[Vec<f64>], subset: &[usize]) -> f64 {
        let n = rows[0].len() as f64;
        let k = subset.len() as f64;
        let mut hits = 0.0;
        for r1 in rows {
            for r2 in rows {
                let sub1: f64 = subset.iter().map(|&i| r1[i]).sum::<f64>() / k;
                let sub2: f64 = subset.iter().map(|&i| r2[i]).sum::<f64>() / k;
                let full1: f64 = r1.iter().sum::<f64>() / n;
                let full2: f64 = r2.iter().sum::<f64>() / n;
                if (sub1 > sub2) == (full1 > full2) {
                    hits += 1.0;
                }
            }
        }
        hits / (rows.len() * rows.len()) as f64
    }

    #[test]
    fn enumerated_examples() {
        // full means: A 5, B 4; segment 1 alone flips the order
        let m = ScoreMatrix::from_rows(vec![vec![10.0, 0.0], vec![2.0, 6.0]]).unwrap();
        assert_eq!(subset_accuracy(&m, &[0, 1]), Ok(1.0));
        assert_eq!(subset_accuracy(&m, &[1]), Ok(0.5));
        let m3 = ScoreMatrix::from_rows(vec![vec![3.0, 9.0], vec![2.0, 5.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(subset_accuracy(&m3, &[0]), Ok(1.0));
        assert_eq!(subset_accuracy(&m3, &[]), Err(ConsistencyError::EmptySubset));
        assert_eq!(subset_accuracy(&m3, &[2]), Err(ConsistencyError::IndexOutOfRange(2)));
    }

    #[test]
    fn matches_double_loop_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let rows: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..20).map(|_| rng.random_range(0..100) as f64).collect())
                .collect();
            let size = rng.random_range(1..=20);
            let subset = index::sample(&mut rng, 20, size).into_vec();
            let m = ScoreMatrix::from_rows(rows.clone()).unwrap();
            assert_eq!(subset_accuracy(&m, &subset).unwrap(), brute_accuracy(&rows, &subset));
        }
    }

    #[test]
    fn noiseless_and_deterministic() {
        let params = NoiseModelParams::new(vec![1.0, 2.0, 3.0, 4.0], 0.0, 5);
        let m = simulate_matrix(&params, 50).unwrap();
        let c = consistency_curve(&m, &[1, 5, 25], 200, 9).unwrap();
        assert!(c.points.iter().all(|p| p.mean_accuracy == 1.0));
        assert_eq!(c.mean_over_sizes, 1.0);

        let noisy = simulate_matrix(&NoiseModelParams::new(vec![1.0, 2.0, 3.0], 5.0, 5), 40).unwrap();
        let a = consistency_curve(&noisy, &[4, 8], 100, 1).unwrap();
        let b = consistency_curve(&noisy, &[4, 8], 100, 1).unwrap();
        assert_eq!(a, b);
        assert!(consistency_curve(&noisy, &[0], 10, 1).is_err());
        assert!(consistency_curve(&noisy, &[41], 10, 1).is_err());
    }

    #[test]
    fn simulator_validates_parameters() {
        let mut p = NoiseModelParams::new(vec![1.0, 2.0], -1.0, 0);
        assert_eq!(simulate_matrix(&p, 5), Err(ConsistencyError::NegativeScale("noise")));
        p.noise_scale = 1.0;
        p.abilities.pop();
        assert_eq!(simulate_matrix(&p, 5), Err(ConsistencyError::TooFewSystems(1)));
        p.abilities.push(3.0);
        p.difficulties = Some(vec![0.0; 3]);
        assert!(matches!(simulate_matrix(&p, 5), Err(ConsistencyError::DifficultyLength { .. })));
        p.family = NoiseFamily::Uniform;
        p.difficulties = None;
        assert!(simulate_matrix(&p, 5).is_ok());
    }

    fn prefilter_bundle(qe: &[[usize; 3]], scores: &[[f64; 3]]) -> ExportBundle {
        let systems = ["A", "B", "C"];
        let mut tasks = Vec::new();
        let mut anns = Vec::new();
        for (i, (qrow, srow)) in qe.iter().zip(scores).enumerate() {
            for (m, sys) in systems.iter().enumerate() {
                let seg = format!("{i:02}");
                let mut t = SegmentTask::new(seg.clone(), "d", *sys, "s", "some words here");
                t.prefill_spans = vec![ErrorSpan::ai(0, 4, Severity::Minor); qrow[m]];
                tasks.push(t);
                anns.push(Annotation {
                    segment_id: seg,
                    system_id: sys.to_string(),
                    annotator_id: "x".into(),
                    run_id: String::new(),
                    spans: vec![],
                    direct_score: srow[m],
                    duration_seconds: 1.0,
                    submitted_at: 0,
                    sequence_index: anns.len() + 1,
                });
            }
        }
        ExportBundle::new(tasks, anns, vec![]).unwrap()
    }

    #[test]
    fn prefilter_degenerate_all_zero() {
        let b = prefilter_bundle(&[[0, 0, 0], [0, 0, 0]], &[[10.0, 50.0, 90.0], [20.0, 60.0, 80.0]]);
        let r = prefilter_simulation(&b, PrefilterMode::Substitute, 1.0).unwrap();
        assert_eq!(r.budget_saved, 1.0);
        assert!(r.systems.iter().all(|s| s.filtered_mean == 100.0));
        assert_eq!(r.flipped_pairs.len(), 3);
        assert_eq!(
            prefilter_simulation(&b, PrefilterMode::Exclude, 1.0),
            Err(ConsistencyError::NothingLeft)
        );
        assert_eq!(
            prefilter_simulation(&b, PrefilterMode::Exclude, 0.0),
            Err(ConsistencyError::ThresholdOutOfRange(0.0))
        );
    }

    #[test]
    fn prefilter_exclude_threshold() {
        let b = prefilter_bundle(
            &[[0, 0, 0], [0, 0, 2], [1, 1, 1]],
            &[[90.0, 80.0, 70.0], [60.0, 50.0, 40.0], [30.0, 20.0, 10.0]],
        );
        let all = prefilter_simulation(&b, PrefilterMode::Exclude, 1.0).unwrap();
        assert_eq!(all.segments_excluded, 1);
        assert!((all.budget_saved - 3.0 / 9.0).abs() < 1e-12);
        assert!(all.flipped_pairs.is_empty());
        let most = prefilter_simulation(&b, PrefilterMode::Exclude, 0.6).unwrap();
        assert_eq!(most.segments_excluded, 2);
        assert!(most.to_tsv().starts_with("# mode=exclude\tthreshold=0.6\t"));
    }
}
