//! `esa`: campaign lifecycle and analyses for error span annotation.

use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use esa_core::analytics::{
    self, agreement_report, cross_protocol_kendall, features_to_tsv, rank_systems, speedup_report,
    summary_table, summary_to_tsv, time_feature_correlations, Scoring,
};
use esa_core::checks::{check_report, trust_effect, DEFAULT_PASS_THRESHOLD};
use esa_core::consistency::{
    consistency_curve, prefilter_simulation, simulate_matrix, NoiseFamily, NoiseModelParams,
    PrefilterMode, ScoreMatrix, DEFAULT_EXCLUDE_THRESHOLD, DEFAULT_RESAMPLES, PUBLISHED_SIZES,
};
use esa_core::export::{read_scores, ExportBundle};
use esa_core::span_diff::{curve_to_tsv, distribution_to_tsv, edit_distribution, overreliance_curve, PostEditSummary};
use esa_service::build::read_segments;
use esa_service::config::DEFAULT_ANNOTATOR_TOKEN_ENV;
use esa_service::provider::build_provider;
use esa_service::{build_campaign, CampaignConfig, CampaignService, SystemClock};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "esa", version, about = "AI-assisted error span annotation: campaigns and analyses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build, serve and export annotation campaigns.
    #[command(subcommand)]
    Campaign(CampaignCmd),
    /// Statistics over an exported campaign.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Subset consistency accuracy on exported data or a simulated matrix.
    Consistency(ConsistencyArgs),
    /// Budget saving and ranking stability when QE-clean segments are skipped.
    Prefilter(PrefilterArgs),
    /// Attention check evaluation.
    #[command(subcommand)]
    Checks(ChecksCmd),
    /// Post-editing of the AI pre-fill.
    #[command(subcommand)]
    Diff(DiffCmd),
}

#[derive(Debug, Subcommand)]
enum CampaignCmd {
    /// Pre-fill segments, inject attention checks and write batches.
    Build {
        /// Campaign TOML file.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed from the config file.
        #[arg(long)]
        seed: Option<u64>,
        /// Campaign directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the annotation HTTP API. A bearer token is required when
    /// ESA_ANNOTATOR_TOKEN is set.
    Serve {
        /// Campaign directory.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Write segments, annotations and timing records.
    Export {
        /// Campaign directory.
        #[arg(long)]
        dir: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Exported campaign directory.
    #[arg(long)]
    data: PathBuf,
    /// Report directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCmd {
    /// Error counts, severity shares and mean score.
    Summary {
        #[command(flatten)]
        io: DataArgs,
        /// Row label of the human annotations.
        #[arg(long, default_value = "ESA-AI")]
        label: String,
    },
    /// Inter- and intra-annotator Spearman between two runs.
    Agreement {
        #[arg(long)]
        run_a: PathBuf,
        #[arg(long)]
        run_b: PathBuf,
        /// direct or spans.
        #[arg(long, default_value = "direct")]
        mode: Scoring,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment-level Kendall tau-c against scores from another protocol.
    Kendall {
        #[command(flatten)]
        io: DataArgs,
        /// Score records of the other protocol.
        #[arg(long)]
        other: PathBuf,
        #[arg(long, default_value = "direct")]
        mode: Scoring,
    },
    /// Pearson correlation of annotation time with segment features.
    Timing {
        #[command(flatten)]
        io: DataArgs,
    },
    /// Per-annotator duration trend over work position.
    Speedup {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long, default_value_t = analytics::DEFAULT_SPEEDUP_WINDOW)]
        window: usize,
    },
    /// System ranking with significance clusters.
    Ranking {
        #[command(flatten)]
        io: DataArgs,
        #[arg(long, default_value_t = analytics::DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value = "direct")]
        mode: Scoring,
    },
}

#[derive(Debug, Args)]
struct ConsistencyArgs {
    /// Exported campaign directory; omit with --simulate.
    #[arg(long, required_unless_present = "simulate", conflicts_with = "simulate")]
    data: Option<PathBuf>,
    /// Draw the matrix from the additive noise model instead.
    #[arg(long)]
    simulate: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = PUBLISHED_SIZES)]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scoring of exported data: direct or spans.
    #[arg(long, default_value = "direct")]
    mode: Scoring,
    /// Also report a prefilter simulation: substitute or exclude.
    #[arg(long)]
    prefilter: Option<PrefilterMode>,
    /// Exclude-mode share of systems with no QE error.
    #[arg(long, default_value_t = DEFAULT_EXCLUDE_THRESHOLD)]
    threshold: f64,
    /// Simulated system abilities.
    #[arg(long, value_delimiter = ',', default_values_t = [60.0, 62.0, 64.0, 66.0, 68.0, 70.0])]
    abilities: Vec<f64>,
    /// Simulated noise standard deviation.
    #[arg(long, default_value_t = 10.0)]
    noise_scale: f64,
    /// Simulated difficulty standard deviation.
    #[arg(long, default_value_t = 10.0)]
    difficulty_scale: f64,
    /// gaussian or uniform.
    #[arg(long, default_value = "gaussian")]
    family: NoiseFamily,
    /// Simulated segment count.
    #[arg(long, default_value_t = 200)]
    segments: usize,
}

#[derive(Debug, Args)]
struct PrefilterArgs {
    #[command(flatten)]
    io: DataArgs,
    /// substitute or exclude.
    #[arg(long, default_value = "exclude")]
    mode: PrefilterMode,
    #[arg(long, default_value_t = DEFAULT_EXCLUDE_THRESHOLD)]
    threshold: f64,
}

#[derive(Debug, Subcommand)]
enum ChecksCmd {
    /// Pass rates and the trust effect around checks.
    Report {
        #[command(flatten)]
        io: DataArgs,
        /// Share of score-OK checks an annotator needs to pass.
        #[arg(long, default_value_t = DEFAULT_PASS_THRESHOLD)]
        threshold: f64,
    },
}

#[derive(Debug, Subcommand)]
enum DiffCmd {
    /// Edit operations, edit distribution and over-reliance curve.
    Report {
        #[command(flatten)]
        io: DataArgs,
        /// Trailing moving-average window of the over-reliance curve.
        #[arg(long, default_value_t = analytics::DEFAULT_SPEEDUP_WINDOW)]
        window: usize,
    },
}

fn load(dir: &Path) -> Result<ExportBundle> {
    ExportBundle::load_dir(dir).with_context(|| format!("loading export {}", dir.display()))
}

fn write(out: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(name);
    fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<()> {
    write(out, name, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn campaign(cmd: CampaignCmd) -> Result<()> {
    match cmd {
        CampaignCmd::Build { config, seed, out } => {
            let mut cfg = CampaignConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let input = read_segments(&cfg.segments_file)?;
            let provider = build_provider(&cfg.provider)?;
            let c = build_campaign(&cfg, &input, &provider)?;
            c.write(&out)?;
            println!(
                "campaign {}: {} tasks ({} checks) in {} batches, seed {}, {} provider errors",
                c.meta.name, c.meta.tasks, c.meta.checks, c.meta.batches, c.meta.seed, c.meta.provider_errors
            );
        }
        CampaignCmd::Serve { dir, host, port } => {
            let svc = Arc::new(CampaignService::open(&dir, Arc::new(SystemClock))?);
            let addr: SocketAddr = format!("{host}:{port}").parse().context("listen address")?;
            let token = std::env::var(DEFAULT_ANNOTATOR_TOKEN_ENV).ok();
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(esa_service::http::serve(svc, addr, token))?;
        }
        CampaignCmd::Export { dir, out } => {
            let bundle = CampaignService::open(&dir, Arc::new(SystemClock))?.export()?;
            bundle.write_dir(&out)?;
            println!(
                "exported {} segments, {} annotations to {}",
                bundle.segments.len(),
                bundle.annotations.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn analyze(cmd: AnalyzeCmd) -> Result<()> {
    match cmd {
        AnalyzeCmd::Summary { io, label } => {
            let rows = summary_table(&load(&io.data)?, &label)?;
            let tsv = summary_to_tsv(&rows);
            write(&io.out, "summary.tsv", &tsv)?;
            write_json(&io.out, "summary.json", &rows)?;
            print!("{tsv}");
        }
        AnalyzeCmd::Agreement { run_a, run_b, mode, out } => {
            let report = agreement_report(&load(&run_a)?, &load(&run_b)?, mode)?;
            let tsv = report.to_tsv();
            write(&out, "agreement.tsv", &tsv)?;
            write_json(&out, "agreement.json", &report)?;
            print!("{tsv}");
        }
        AnalyzeCmd::Kendall { io, other, mode } => {
            let scores = read_scores(&other)?;
            let c = cross_protocol_kendall(&load(&io.data)?, mode, &scores)?;
            let tsv = format!("# scoring={mode}\tcorrelation=kendall_tau_c\nn\ttau_c\n{}\t{}\n", c.n, c.cell());
            write(&io.out, "kendall.tsv", &tsv)?;
            write_json(&io.out, "kendall.json", &c)?;
            print!("{tsv}");
        }
        AnalyzeCmd::Timing { io } => {
            let rows = time_feature_correlations(&load(&io.data)?);
            let tsv = features_to_tsv(&rows);
            write(&io.out, "timing.tsv", &tsv)?;
            write_json(&io.out, "timing.json", &rows)?;
            print!("{tsv}");
        }
        AnalyzeCmd::Speedup { io, window } => {
            let report = speedup_report(&load(&io.data)?, window)?;
            write(&io.out, "speedup.tsv", &report.to_tsv())?;
            write_json(&io.out, "speedup.json", &report)?;
            let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
            println!(
                "window {window}: {} annotators, {} skipped, mean slope {} s/segment, mean MAD {}",
                report.annotators.len(),
                report.skipped.len(),
                fmt(report.mean_slope),
                fmt(report.mean_absolute_deviation)
            );
        }
        AnalyzeCmd::Ranking { io, alpha, mode } => {
            let table = rank_systems(&load(&io.data)?, mode, alpha)?;
            let tsv = table.to_tsv();
            write(&io.out, "ranking.tsv", &tsv)?;
            write_json(&io.out, "ranking.json", &table)?;
            println!("{} systems in {} clusters (alpha {alpha})", table.systems.len(), table.cluster_count());
        }
    }
    Ok(())
}

fn consistency(args: ConsistencyArgs) -> Result<()> {
    let matrix = if args.simulate {
        let mut params = NoiseModelParams::new(args.abilities.clone(), args.noise_scale, args.seed);
        params.difficulty_scale = args.difficulty_scale;
        params.family = args.family;
        write(&args.out, "simulation.tsv", &params.to_tsv())?;
        simulate_matrix(&params, args.segments)?
    } else {
        let data = args.data.as_deref().expect("required by clap");
        let bundle = load(data)?;
        if let Some(mode) = args.prefilter {
            let report = prefilter_simulation(&bundle, mode, args.threshold)?;
            write(&args.out, "prefilter.tsv", &report.to_tsv())?;
            write_json(&args.out, "prefilter.json", &report)?;
        }
        ScoreMatrix::from_bundle(&bundle, args.mode)?
    };
    let curve = consistency_curve(&matrix, &args.sizes, args.resamples, args.seed)?;
    let tsv = curve.to_tsv();
    write(&args.out, "consistency.tsv", &tsv)?;
    write_json(&args.out, "consistency.json", &curve)?;
    println!(
        "{} systems x {} segments, seed {}",
        matrix.system_count(),
        matrix.segment_count(),
        args.seed
    );
    print!("{tsv}");
    Ok(())
}

fn prefilter(args: PrefilterArgs) -> Result<()> {
    let report = prefilter_simulation(&load(&args.io.data)?, args.mode, args.threshold)?;
    write(&args.io.out, "prefilter.tsv", &report.to_tsv())?;
    write_json(&args.io.out, "prefilter.json", &report)?;
    println!(
        "{} mode: {:.2}% of annotations saved, {} segments excluded, {} of {} system pairs flipped",
        report.mode,
        100.0 * report.budget_saved,
        report.segments_excluded,
        report.flipped_pairs.len(),
        report.systems.len() * report.systems.len().saturating_sub(1) / 2
    );
    Ok(())
}

#[derive(Serialize)]
struct ChecksSummary {
    report: esa_core::checks::CheckReport,
    trust: esa_core::checks::TrustEffect,
}

fn checks(cmd: ChecksCmd) -> Result<()> {
    let ChecksCmd::Report { io, threshold } = cmd;
    let bundle = load(&io.data)?;
    let pairs = bundle.check_pairs();
    if pairs.is_empty() {
        bail!("{}: no annotated attention check pairs", io.data.display());
    }
    let report = check_report(&pairs, threshold)?;
    let trust = trust_effect(&bundle.streams());
    let rate = |v: Option<f64>| v.map_or("undefined".to_string(), |v| format!("{v:.4}"));
    let tsv = format!(
        "{}\n# trust effect\nchecks\taccept_before\taccept_after\n{}\t{}\t{}\n",
        report.to_tsv(),
        trust.checks,
        rate(trust.accept_before),
        rate(trust.accept_after)
    );
    write(&io.out, "checks.tsv", &tsv)?;
    let passed = report.annotators.iter().filter(|a| a.passed).count();
    println!(
        "{} check pairs, score lowered in {:.1}%, {passed}/{} annotators pass",
        report.pairs,
        100.0 * report.score_ok,
        report.annotators.len()
    );
    write_json(&io.out, "checks.json", &ChecksSummary { report, trust })?;
    Ok(())
}

fn diff(cmd: DiffCmd) -> Result<()> {
    let DiffCmd::Report { io, window } = cmd;
    let bundle = load(&io.data)?;
    let segments = bundle.segment_edits();
    let summary = PostEditSummary::from_records(segments.iter().flat_map(|s| &s.records));
    let distribution = edit_distribution(&segments);
    let curve = overreliance_curve(&bundle.progress_edits(), window)?;
    write(&io.out, "edits.tsv", &summary.to_tsv())?;
    write(&io.out, "edit_distribution.tsv", &distribution_to_tsv(&distribution))?;
    write(&io.out, "overreliance.tsv", &curve_to_tsv(&curve, window))?;
    write_json(&io.out, "edits.json", &summary)?;
    println!(
        "{} segments, {} AI spans: {} kept, {} removed, {} added",
        segments.len(),
        summary.ai_spans,
        summary.kept,
        summary.removed,
        summary.added
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Campaign(c) => campaign(c),
        Command::Analyze(c) => analyze(c),
        Command::Consistency(a) => consistency(a),
        Command::Prefilter(a) => prefilter(a),
        Command::Checks(c) => checks(c),
        Command::Diff(c) => diff(c),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
