//! Acceptance suite. Prints one line per criterion; exits non-zero on any
//! FAIL. Everything runs offline against the mock QE provider. Criteria
//! that need the released campaign data read it from `ESA_RELEASED_DATA`
//! and report BLOCKED when it is unset:
//!
//! ```text
//! $ESA_RELEASED_DATA/
//!   esa_ai/ esa_ai_repeat/ esa/ esa_repeat/   export directories
//!   mqm_wmt.jsonl                              esa.scores records
//! ```

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use esa_core::analytics::{agreement_report, cross_protocol_kendall, segment_scores, summary_table, Scoring};
use esa_core::checks::{evaluate_check, CheckOutcome};
use esa_core::consistency::{
    consistency_curve, prefilter_simulation, simulate_matrix, subset_accuracy, NoiseModelParams, PrefilterMode,
    ScoreMatrix, PUBLISHED_SIZES,
};
use esa_core::export::{read_scores, ExportBundle};
use esa_core::stats::{kendall_tau_c, spearman};
use esa_core::{score_from_spans, Annotation, CheckInfo, ErrorSpan, Severity, SpanOrigin, TaskKey};
use esa_service::build_campaign;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

enum Outcome {
    Pass(String),
    Fail(String),
    Blocked(String),
}

use Outcome::{Blocked, Fail, Pass};

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Pass(detail)
    } else {
        Fail(detail)
    }
}

fn within_budget(outcome: Outcome, elapsed: Duration, budget: Duration) -> Outcome {
    match outcome {
        // time budgets hold for optimized builds only
        Pass(d) if cfg!(not(debug_assertions)) && elapsed > budget => {
            Fail(format!("{d}; took {elapsed:?}, budget {budget:?}"))
        }
        other => other,
    }
}

fn released() -> Option<PathBuf> {
    std::env::var_os("ESA_RELEASED_DATA").map(PathBuf::from)
}

// ---------------------------------------------------------------- formula

fn random_spans(rng: &mut ChaCha8Rng) -> Vec<ErrorSpan> {
    (0..rng.random_range(0..12))
        .map(|_| {
            let start = rng.random_range(0..200);
            let sev = if rng.random_bool(0.5) { Severity::Minor } else { Severity::Major };
            let origin = if rng.random_bool(0.5) { SpanOrigin::Ai } else { SpanOrigin::Human };
            ErrorSpan::new(start, start + rng.random_range(1..30), sev, origin)
        })
        .collect()
}

fn formula_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for case in 0..10_000 {
        let spans = random_spans(&mut rng);
        let mut weight = 0i64;
        for s in &spans {
            weight += match s.severity {
                Severity::Minor => 1,
                Severity::Major => 5,
            };
        }
        if score_from_spans(&spans).value() != -weight {
            return Fail(format!("case {case}: {spans:?}"));
        }
    }
    Pass("10000 span lists".into())
}

// ------------------------------------------------------- subset consistency

fn brute_accuracy(rows: &[Vec<f64>], subset: &[usize]) -> f64 {
    let mean = |r: &Vec<f64>, idx: &mut dyn Iterator<Item = usize>| {
        let (mut s, mut n) = (0.0, 0.0);
        for i in idx {
            s += r[i];
            n += 1.0;
        }
        s / n
    };
    let mut hits = 0;
    for a in rows {
        for b in rows {
            let sa = mean(a, &mut subset.iter().copied());
            let sb = mean(b, &mut subset.iter().copied());
            let fa = mean(a, &mut (0..a.len()));
            let fb = mean(b, &mut (0..b.len()));
            if (sa > sb) == (fa > fb) {
                hits += 1;
            }
        }
    }
    hits as f64 / (rows.len() * rows.len()) as f64
}

fn subset_accuracy_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..200 {
        let rows: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..20).map(|_| rng.random_range(0..100) as f64).collect())
            .collect();
        let matrix = ScoreMatrix::from_rows(rows.clone()).unwrap();
        let size = rng.random_range(1..=20);
        let subset = index::sample(&mut rng, 20, size).into_vec();
        let got = subset_accuracy(&matrix, &subset).unwrap();
        let want = brute_accuracy(&rows, &subset);
        if got != want {
            return Fail(format!("case {case}: {got} vs {want}"));
        }
    }
    Pass("200 random 5x20 matrices, exact".into())
}

const TABLE7_ESA_AI: [f64; 4] = [84.41, 92.38, 96.69, 98.88];

fn subset_consistency_released() -> Outcome {
    let Some(root) = released() else {
        return Blocked("ESA_RELEASED_DATA not set".into());
    };
    let bundle = match ExportBundle::load_dir(&root.join("esa_ai")) {
        Ok(b) => b,
        Err(e) => return Fail(e.to_string()),
    };
    let matrix = match ScoreMatrix::from_bundle(&bundle, Scoring::Direct) {
        Ok(m) => m,
        Err(e) => return Fail(e.to_string()),
    };
    let curve = match consistency_curve(&matrix, &PUBLISHED_SIZES, 1000, 0) {
        Ok(c) => c,
        Err(e) => return Fail(e.to_string()),
    };
    let got: Vec<f64> = curve.points.iter().map(|p| 100.0 * p.mean_accuracy).collect();
    let ok = got.iter().zip(TABLE7_ESA_AI).all(|(g, w)| (g - w).abs() <= 1.5);
    ensure(ok, format!("{got:.2?} vs {TABLE7_ESA_AI:?} (±1.5pp)"))
}

// ---------------------------------------------------------------- simulator

const ABILITIES: [f64; 6] = [60.0, 61.0, 62.5, 63.0, 65.0, 66.0];
const SIM_SEGMENTS: usize = 200;
const SIM_SIZES: [usize; 6] = [5, 10, 20, 40, 80, 160];

fn sim_curve(params: &NoiseModelParams, seed: u64) -> Vec<f64> {
    let m = simulate_matrix(params, SIM_SEGMENTS).unwrap();
    consistency_curve(&m, &SIM_SIZES, 1000, seed)
        .unwrap()
        .points
        .iter()
        .map(|p| p.mean_accuracy)
        .collect()
}

fn simulator_noiseless() -> Outcome {
    let curve = sim_curve(&NoiseModelParams::new(ABILITIES.to_vec(), 0.0, 3), 3);
    ensure(curve.iter().all(|&a| a == 1.0), format!("{curve:?}"))
}

fn simulator_difficulty_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..5 {
        let base = NoiseModelParams::new(ABILITIES.to_vec(), 4.0, trial);
        let reference = sim_curve(&base, 9);
        let mut fixed = base.clone();
        fixed.difficulties = Some((0..SIM_SEGMENTS).map(|_| rng.random_range(-40..40) as f64).collect());
        let mut rescaled = base.clone();
        rescaled.difficulty_scale = 37.0;
        for variant in [fixed, rescaled] {
            let curve = sim_curve(&variant, 9);
            if curve != reference {
                return Fail(format!("trial {trial}: {curve:?} vs {reference:?}"));
            }
        }
    }
    Pass("5 trials, fixed and rescaled d, identical Acc".into())
}

fn simulator_monotone() -> Outcome {
    let sigmas = [1.0, 2.0, 4.0, 8.0, 16.0];
    let curves: Vec<Vec<f64>> = sigmas
        .iter()
        .map(|&s| sim_curve(&NoiseModelParams::new(ABILITIES.to_vec(), s, 5), 5))
        .collect();
    for (c, s) in curves.iter().zip(sigmas) {
        if let Some(w) = c.windows(2).find(|w| w[0] > w[1] + 0.01) {
            return Fail(format!("sigma {s}: not monotone in size {w:?}"));
        }
    }
    for pair in curves.windows(2) {
        for (k, (lo, hi)) in pair[0].iter().zip(&pair[1]).enumerate() {
            if *hi > lo + 0.01 {
                return Fail(format!("size {}: higher noise {hi} beats lower noise {lo}", SIM_SIZES[k]));
            }
        }
    }
    Pass(format!(
        "sigma {sigmas:?} x sizes {SIM_SIZES:?}; size 5 acc {:.3} -> {:.3}",
        curves[0][0],
        curves[sigmas.len() - 1][0]
    ))
}

// --------------------------------------------------------------- statistics

fn oracle_ranks(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|v| {
            let less = x.iter().filter(|w| *w < v).count() as f64;
            let equal = x.iter().filter(|w| *w == v).count() as f64;
            less + (equal + 1.0) / 2.0
        })
        .collect()
}

fn oracle_pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

fn oracle_tau_c(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len();
    let (mut c, mut d) = (0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let s = (x[i] - x[j]) * (y[i] - y[j]);
            if s > 0.0 {
                c += 1;
            } else if s < 0.0 {
                d += 1;
            }
        }
    }
    let distinct = |v: &[f64]| v.iter().map(|a| a.to_bits()).collect::<BTreeSet<_>>().len();
    let m = distinct(x).min(distinct(y)) as f64;
    (m >= 2.0).then(|| 2.0 * (c - d) as f64 / ((n * n) as f64 * (m - 1.0) / m))
}

fn statistics_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut compared = 0;
    for case in 0..1000 {
        let n = rng.random_range(3..80);
        let tied = case % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| {
            if tied {
                rng.random_range(0..6) as f64
            } else {
                rng.random_range(-1000.0..1000.0)
            }
        };
        let x: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let y: Vec<f64> = (0..n).map(|_| draw(&mut rng)).collect();
        let pairs = [
            (spearman(&x, &y).ok(), oracle_pearson(&oracle_ranks(&x), &oracle_ranks(&y)), "spearman"),
            (kendall_tau_c(&x, &y).ok(), oracle_tau_c(&x, &y), "tau_c"),
        ];
        for (got, want, name) in pairs {
            match (got, want) {
                (Some(g), Some(w)) => {
                    worst = worst.max((g - w).abs());
                    compared += 1;
                }
                (None, None) => {}
                _ => return Fail(format!("case {case} {name}: {got:?} vs {want:?}")),
            }
        }
    }
    ensure(worst <= 1e-10, format!("{compared} comparisons, max |diff| {worst:.2e}"))
}

// ------------------------------------------------------------ attention checks

fn check_injection() -> Outcome {
    let input = common::input(2, 40);
    let provider = common::provider();
    for seed in 0..500 {
        let cfg = common::config(2, 20, seed);
        let c = match build_campaign(&cfg, &input, &provider) {
            Ok(c) => c,
            Err(e) => return Fail(format!("seed {seed}: {e}")),
        };
        let n = c.tasks.iter().filter(|t| !t.is_check()).count();
        let want = (12 * n + 50) / 100;
        if c.meta.checks != want {
            return Fail(format!("seed {seed}: {} checks for {n} items, want {want}", c.meta.checks));
        }
        let tasks: BTreeMap<TaskKey, _> = c.tasks.iter().map(|t| (t.key(), t)).collect();
        for b in &c.batches {
            for (pos, key) in b.items.iter().enumerate() {
                let t = tasks[key];
                let Some(info) = &t.check_info else { continue };
                let original = TaskKey::new(&t.system_id, &info.original_segment_id);
                if !b.items[..pos].contains(&original) {
                    return Fail(format!("seed {seed}: {key} not preceded by {original} in batch {}", b.batch_id));
                }
                let (s, e) = info.perturbed_region;
                if t.prefill_spans.iter().any(|p| p.intersects(s, e)) {
                    return Fail(format!("seed {seed}: pre-fill of {key} covers the perturbed region"));
                }
            }
        }
    }
    Pass("500 seeds, 2x40 segments".into())
}

fn ann(segment: &str, score: f64, spans: Vec<ErrorSpan>) -> Annotation {
    Annotation {
        segment_id: segment.into(),
        system_id: "sys".into(),
        annotator_id: "ann".into(),
        run_id: "run1".into(),
        spans,
        direct_score: score,
        duration_seconds: 10.0,
        submitted_at: 0,
        sequence_index: 1,
    }
}

fn h(start: usize, end: usize) -> ErrorSpan {
    ErrorSpan::human(start, end, Severity::Minor)
}

fn a(start: usize, end: usize) -> ErrorSpan {
    ErrorSpan::ai(start, end, Severity::Major)
}

/// Perturbed region is always [10, 20).
fn check_hand_table() -> Vec<(f64, f64, usize, Vec<ErrorSpan>, CheckOutcome)> {
    let o = |score_ok, span_count_ok, perturbation_marked| CheckOutcome {
        score_ok,
        span_count_ok,
        perturbation_marked,
    };
    vec![
        (80.0, 50.0, 0, vec![h(12, 15)], o(true, true, true)),
        (80.0, 80.0, 0, vec![h(12, 15)], o(false, true, true)),
        (80.0, 90.0, 1, vec![], o(false, false, false)),
        (70.0, 60.0, 1, vec![h(0, 5)], o(true, false, false)),
        (70.0, 60.0, 0, vec![a(12, 15)], o(true, true, false)),
        (70.0, 60.0, 0, vec![h(5, 10)], o(true, true, false)),
        (70.0, 60.0, 0, vec![h(20, 25)], o(true, true, false)),
        (70.0, 60.0, 0, vec![h(19, 25)], o(true, true, true)),
        (70.0, 60.0, 0, vec![h(0, 40)], o(true, true, true)),
        (50.0, 49.5, 2, vec![h(10, 11), h(30, 32), h(40, 41)], o(true, true, true)),
        (50.0, 50.5, 2, vec![h(10, 11), h(30, 32)], o(false, false, true)),
        (0.0, 0.0, 0, vec![], o(false, false, false)),
        (100.0, 0.0, 3, vec![h(1, 2)], o(true, false, false)),
        (100.0, 99.0, 0, vec![a(0, 40), h(15, 16)], o(true, true, true)),
        (30.0, 20.0, 1, vec![a(10, 20), a(30, 31)], o(true, true, false)),
        (30.0, 20.0, 1, vec![h(10, 20)], o(true, false, true)),
        (60.0, 70.0, 0, vec![h(11, 12)], o(false, true, true)),
        (60.0, 10.0, 4, vec![h(9, 10), h(20, 21)], o(true, false, false)),
        (60.0, 10.0, 0, vec![h(9, 11)], o(true, true, true)),
        (
            45.0,
            44.0,
            5,
            vec![h(1, 2), h(3, 4), h(5, 6), h(7, 8), h(30, 31), h(18, 19)],
            o(true, true, true),
        ),
    ]
}

fn check_evaluation() -> Outcome {
    let info = CheckInfo {
        perturbed_region: (10, 20),
        original_segment_id: "s1".into(),
    };
    let table = check_hand_table();
    for (i, (os, ps, on, pspans, want)) in table.iter().enumerate() {
        let orig_spans = (0..*on).map(|k| h(30 + 2 * k, 31 + 2 * k)).collect();
        let original = ann("s1", *os, orig_spans);
        let perturbed = ann("s1#check", *ps, pspans.clone());
        match evaluate_check(&original, &perturbed, &info) {
            Ok(got) if got == *want => {}
            other => return Fail(format!("fixture {}: {other:?}, want {want:?}", i + 1)),
        }
    }
    Pass(format!("{} hand fixtures", table.len()))
}

// ------------------------------------------------------------------ service

fn service_replay() -> Outcome {
    let mut events = 0;
    let mut restarts = 0;
    for seed in 0..3 {
        let s = common::randomized_run(seed, 1000);
        events += s.events;
        restarts += s.restarts;
    }
    Pass(format!("3 x 1000 operations, {events} events, {restarts} crash restarts"))
}

fn export_round_trip() -> Outcome {
    let (dir, clock) = common::setup(3, 24, 12);
    let svc = common::open(dir.path(), clock.clone());
    let mut n = 0;
    for who in ["a", "b", "c", "d", "e", "f"] {
        if svc.register(who).is_err() {
            break;
        }
        while let esa_service::store::ClaimResult::Task { task, .. } = svc.claim_next(who).unwrap() {
            n += 1;
            clock.advance(5_000 + 700 * n);
            let req = common::submit_for(&task, who, (n * 37 % 101) as f64, (n % 3 == 0).then_some(n as f64));
            svc.submit(&req).unwrap();
        }
    }
    let bundle = svc.export().unwrap();
    let out = tempfile::tempdir().unwrap();
    bundle.write_dir(out.path()).unwrap();
    let loaded = ExportBundle::load_dir(out.path()).unwrap();
    let same = loaded == bundle
        && segment_scores(&loaded, Scoring::Direct) == segment_scores(&bundle, Scoring::Direct)
        && summary_table(&loaded, "x").unwrap() == summary_table(&bundle, "x").unwrap();
    ensure(same, format!("{} annotations, {} timing records", bundle.annotations.len(), bundle.timing.len()))
}

// ------------------------------------------------------------- released data

struct Released {
    esa_ai: ExportBundle,
    esa_ai_repeat: ExportBundle,
    esa: ExportBundle,
    esa_repeat: ExportBundle,
    mqm: Vec<esa_core::export::ScoreRecord>,
}

fn load_released(root: &Path) -> Result<Released, String> {
    let load = |name: &str| ExportBundle::load_dir(&root.join(name)).map_err(|e| e.to_string());
    Ok(Released {
        esa_ai: load("esa_ai")?,
        esa_ai_repeat: load("esa_ai_repeat")?,
        esa: load("esa")?,
        esa_repeat: load("esa_repeat")?,
        mqm: read_scores(&root.join("mqm_wmt.jsonl")).map_err(|e| e.to_string())?,
    })
}

fn released_tables() -> Outcome {
    let Some(root) = released() else {
        return Blocked("ESA_RELEASED_DATA not set".into());
    };
    let data = match load_released(&root) {
        Ok(d) => d,
        Err(e) => return Fail(e),
    };
    let mut problems = Vec::new();

    // Table 1, compared at published precision
    for (bundle, label, errors, minor, major, score) in [
        (&data.esa_ai, "ESA-AI", "1.63", "54", "46", "76.7"),
        (&data.esa, "ESA", "0.45", "63", "37", "81.8"),
    ] {
        let row = &summary_table(bundle, label).unwrap()[0];
        let pct = |v: Option<f64>| format!("{:.0}", 100.0 * v.unwrap_or(f64::NAN));
        let got = (
            format!("{:.2}", row.mean_errors),
            pct(row.minor_share),
            pct(row.major_share),
            format!("{:.1}", row.mean_score.unwrap_or(f64::NAN)),
        );
        if got != (errors.into(), minor.into(), major.into(), score.into()) {
            problems.push(format!("table 1 {label}: {got:?}"));
        }
    }

    // Table 5; either pooling may match
    let table5 = [
        (Scoring::Direct, 0.376, 0.533, 0.222, 0.486),
        (Scoring::FromSpans, 0.327, 0.671, 0.282, 0.689),
    ];
    for (scoring, esa_inter, ai_inter, esa_intra, ai_intra) in table5 {
        for (name, first, repeat, inter, intra) in [
            ("ESA", &data.esa, &data.esa_repeat, esa_inter, esa_intra),
            ("ESA-AI", &data.esa_ai, &data.esa_ai_repeat, ai_inter, ai_intra),
        ] {
            let within = |c: &esa_core::analytics::Correlation, v: f64| c.value.is_some_and(|x| (x - v).abs() <= 0.01);
            match (agreement_report(first, first, scoring), agreement_report(first, repeat, scoring)) {
                (Ok(same), Ok(again)) => {
                    if !(within(&same.inter, inter) || within(&same.inter_per_system, inter)) {
                        problems.push(format!("table 5 {name} {scoring} inter: {:?}/{:?}", same.inter.value, same.inter_per_system.value));
                    }
                    if !(within(&again.intra, intra) || within(&again.intra_per_system, intra)) {
                        problems.push(format!("table 5 {name} {scoring} intra: {:?}/{:?}", again.intra.value, again.intra_per_system.value));
                    }
                }
                (a, b) => problems.push(format!("table 5 {name} {scoring}: {:?} {:?}", a.err(), b.err())),
            }
        }
    }

    // Table 6
    match cross_protocol_kendall(&data.esa_ai, Scoring::Direct, &data.mqm) {
        Ok(c) if c.value.is_some_and(|v| (v - 0.292).abs() <= 0.005) => {}
        other => problems.push(format!("table 6 ESA-AI vs MQM: {other:?}")),
    }

    // prefiltering
    for (mode, threshold) in [(PrefilterMode::Substitute, 1.0), (PrefilterMode::Exclude, 0.5)] {
        match prefilter_simulation(&data.esa_ai, mode, threshold) {
            Ok(r) => {
                if r.flipped_pairs.len() > 1 {
                    problems.push(format!("prefilter {mode}: {} flipped pairs", r.flipped_pairs.len()));
                }
                if mode == PrefilterMode::Substitute && (100.0 * r.budget_saved - 24.0).abs() > 2.0 {
                    problems.push(format!("prefilter budget saving {:.2}%", 100.0 * r.budget_saved));
                }
            }
            Err(e) => problems.push(format!("prefilter {mode}: {e}")),
        }
    }
    ensure(problems.is_empty(), problems.join("; "))
}

// --------------------------------------------------------------------- main

fn main() -> ExitCode {
    type Criterion = (&'static str, fn() -> Outcome, Duration);
    let secs = Duration::from_secs;
    let criteria: [Criterion; 12] = [
        ("formula-oracle", formula_oracle, secs(1)),
        ("subset-accuracy-oracle", subset_accuracy_oracle, secs(60)),
        ("subset-consistency-released", subset_consistency_released, secs(60)),
        ("simulator-noiseless", simulator_noiseless, secs(120)),
        ("simulator-difficulty-invariance", simulator_difficulty_invariance, secs(120)),
        ("simulator-monotone", simulator_monotone, secs(120)),
        ("released-tables-1-5-6-prefilter", released_tables, secs(120)),
        ("statistics-oracles", statistics_oracles, secs(60)),
        ("check-injection", check_injection, secs(120)),
        ("check-evaluation", check_evaluation, secs(1)),
        ("service-replay", service_replay, secs(120)),
        ("export-round-trip", export_round_trip, secs(60)),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, run, budget) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Fail(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let (tag, detail) = match within_budget(outcome, elapsed, budget) {
            Pass(d) => ("PASS", d),
            Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Blocked(d) => ("BLOCKED", d),
        };
        println!("{tag:<8}{name:<34}{detail} [{:.2}s]", elapsed.as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
