use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use circuitscope::dataset::{export_dataset, make_pairs, read_triples, shipped_triples};
use circuitscope::features::{build_feature_matrices, FeatureMatrices, HEAD_METRIC_COUNT, HEAD_METRIC_NAMES, LAYER_FEATURE_COUNT, LAYER_FEATURE_NAMES};
use circuitscope::pipelines::patching::read_patch_records;
use circuitscope::pipelines::{
    cross_validate, rank_patching, run_h1, run_h2, run_h3, CvConfig, CvPipeline, H1Config, H1Report,
    H2Config, H2Report, H3Config, H3Report,
};
use circuitscope::synth::{
    generate_synthetic, score_detection, PipelineOutput, PlantConfig, PlantedGroundTruth,
};
use circuitscope::trace::{decode_trace_set, validate_trace_set, write_trace_set, LoadOptions, TaskType, TraceSet};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

mod emit;
mod manifest;

use emit::{write_doc, write_json, Format};
use manifest::RunManifest;

const THREADS_ENV: &str = "CIRCUITSCOPE_THREADS";

#[derive(Parser)]
#[command(name = "circuitscope", version, about = "Recall-vs-reasoning specialization analysis over activation traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct OutputArgs {
    /// Output path; structured output goes to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Structured)]
    format: Format,
}

#[derive(Args)]
struct TraceInput {
    /// Binary trace file.
    #[arg(long)]
    traces: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum CvTarget {
    H1,
    H2,
    H3,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Benchmark,
    Null,
}

#[derive(Subcommand)]
enum Command {
    /// Build the paired recall/reasoning prompt dataset.
    GenDataset {
        /// CSV of country,capital,continent; the bundled list when omitted.
        #[arg(long)]
        triples: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        pairs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a trace file against the format and its invariants.
    Validate {
        #[command(flatten)]
        input: TraceInput,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-layer features and per-head attention metrics.
    Features {
        #[command(flatten)]
        input: TraceInput,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Layer-level specialization.
    H1 {
        #[command(flatten)]
        input: TraceInput,
        #[arg(long, default_value_t = 0.01)]
        alpha: f64,
        #[arg(long, default_value_t = 0.5)]
        d_min: f64,
        #[arg(long, default_value_t = 2)]
        min_features: usize,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Attention-head specialization.
    H2 {
        #[command(flatten)]
        input: TraceInput,
        #[arg(long, default_value_t = 1e-4)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        d_min: f64,
        #[arg(long, default_value_t = 3)]
        min_metrics: usize,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// MLP-neuron specialization and firing profiles.
    H3 {
        #[command(flatten)]
        input: TraceInput,
        #[arg(long, default_value_t = 1e-4)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        d_min: f64,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// k-fold label consistency for one pipeline.
    Cv {
        #[command(flatten)]
        input: TraceInput,
        #[arg(long, value_enum)]
        pipeline: CvTarget,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 50)]
        top_n: usize,
        #[arg(long, default_value_t = 0.8)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Overrides the pipeline's default alpha.
        #[arg(long)]
        alpha: Option<f64>,
        /// Overrides the pipeline's default d_min.
        #[arg(long)]
        d_min: Option<f64>,
        /// Overrides min_features (H1) or min_metrics (H2).
        #[arg(long)]
        min_significant: Option<usize>,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Rank layers by mean activation-patching effect.
    PatchRank {
        /// JSONL patch records.
        #[arg(long)]
        records: PathBuf,
        #[command(flatten)]
        output: OutputArgs,
    },
    /// Generate a synthetic trace set with planted effects.
    SynthGen {
        /// JSON plant config.
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Overrides the config's noise seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the planted ground truth.
        #[arg(long)]
        truth: PathBuf,
    },
    /// Score a structured h1/h2/h3 report against planted ground truth.
    SynthScore {
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run H1, H2 and H3 with default thresholds into a directory.
    Report {
        #[command(flatten)]
        input: TraceInput,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Errors that should exit with the usage code.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn command_line() -> String {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    args.insert(0, "circuitscope".into());
    args.join(" ")
}

fn read_input(path: &Path, what: &str) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("cannot read {what} {}", path.display()))
}

fn load_traces(path: &Path, manifest: &mut RunManifest) -> Result<TraceSet> {
    let bytes = read_input(path, "trace file")?;
    let ts = decode_trace_set(&bytes, &LoadOptions::default())
        .with_context(|| format!("invalid trace file {}", path.display()))?;
    manifest.add_input(path, &bytes);
    Ok(ts)
}

fn load_features(path: &Path, manifest: &mut RunManifest) -> Result<FeatureMatrices> {
    let ts = load_traces(path, manifest)?;
    build_feature_matrices(&ts).with_context(|| format!("cannot compute features for {}", path.display()))
}

fn check_output(output: &OutputArgs) -> Result<()> {
    if output.format == Format::Tabular && output.out.is_none() {
        return Err(usage("--format tabular needs --out"));
    }
    Ok(())
}

fn data_err(path: &Path) -> impl FnOnce() -> String + '_ {
    move || format!("analysis of {} failed", path.display())
}

fn features_doc(fm: &FeatureMatrices, manifest: &RunManifest) -> serde_json::Value {
    let c = &fm.config;
    let prompts: Vec<serde_json::Value> = (0..fm.num_prompts())
        .map(|p| {
            let layers: Vec<Vec<f64>> = (0..c.num_layers)
                .map(|l| (0..LAYER_FEATURE_COUNT).map(|f| fm.layer_feature(p, l, f)).collect())
                .collect();
            let heads: Vec<Vec<Vec<f64>>> = (0..c.num_layers)
                .map(|l| {
                    (0..c.heads_per_layer)
                        .map(|h| (0..HEAD_METRIC_COUNT).map(|m| fm.head_metric(p, l, h, m)).collect())
                        .collect()
                })
                .collect();
            json!({
                "prompt_id": fm.prompt_ids[p],
                "task_type": fm.task_labels[p],
                "layer_features": layers,
                "head_metrics": heads,
            })
        })
        .collect();
    json!({
        "manifest": manifest,
        "kind": "features",
        "config": c,
        "layer_feature_names": LAYER_FEATURE_NAMES,
        "head_metric_names": HEAD_METRIC_NAMES,
        "prompts": prompts,
    })
}

fn write_feature_tables(fm: &FeatureMatrices, out: &Path) -> Result<()> {
    let c = &fm.config;
    let mut w = csv::Writer::from_path(out).with_context(|| format!("cannot write {}", out.display()))?;
    let mut header = vec!["prompt_id", "task_type", "layer"];
    header.extend(LAYER_FEATURE_NAMES);
    w.write_record(&header)?;
    for p in 0..fm.num_prompts() {
        for l in 0..c.num_layers {
            let mut row = vec![fm.prompt_ids[p].clone(), fm.task_labels[p].to_string(), l.to_string()];
            row.extend((0..LAYER_FEATURE_COUNT).map(|f| fm.layer_feature(p, l, f).to_string()));
            w.write_record(row)?;
        }
    }
    w.flush()?;

    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let heads_path = out.with_file_name(format!("{stem}.heads.csv"));
    let mut w = csv::Writer::from_path(&heads_path)
        .with_context(|| format!("cannot write {}", heads_path.display()))?;
    let mut header = vec!["prompt_id", "task_type", "layer", "head"];
    header.extend(HEAD_METRIC_NAMES);
    w.write_record(&header)?;
    for p in 0..fm.num_prompts() {
        for l in 0..c.num_layers {
            for h in 0..c.heads_per_layer {
                let mut row = vec![
                    fm.prompt_ids[p].clone(),
                    fm.task_labels[p].to_string(),
                    l.to_string(),
                    h.to_string(),
                ];
                row.extend((0..HEAD_METRIC_COUNT).map(|m| fm.head_metric(p, l, h, m).to_string()));
                w.write_record(row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cmd = command_line();
    match cli.command {
        Command::GenDataset { triples, pairs, out } => {
            let list = match &triples {
                Some(path) => read_triples(path).with_context(|| format!("cannot load triples from {}", path.display()))?,
                None => shipped_triples(),
            };
            let pairs = make_pairs(&list, pairs)?;
            export_dataset(&pairs, &out)?;
            eprintln!("wrote {} records to {}", pairs.len() * 2, out.display());
        }
        Command::Validate { input, out } => {
            let mut manifest = RunManifest::new("validate", &json!({}), None);
            manifest.command = cmd;
            let ts = load_traces(&input.traces, &mut manifest)?;
            let report = validate_trace_set(&ts);
            eprintln!(
                "{}: ok, {} prompts ({} recall, {} reasoning), {} layers x {} heads, hidden {}, mlp {}",
                input.traces.display(),
                ts.prompts.len(),
                ts.count(TaskType::Recall),
                ts.count(TaskType::Reasoning),
                ts.config.num_layers,
                ts.config.heads_per_layer,
                ts.config.hidden_dim,
                ts.config.mlp_dim,
            );
            if let Some(out) = out {
                write_json(&out, &json!({ "manifest": manifest, "kind": "validate", "config": ts.config, "result": report }))?;
            }
        }
        Command::Features { input, output } => {
            check_output(&output)?;
            let mut manifest = RunManifest::new("features", &json!({}), None);
            manifest.command = cmd;
            let fm = load_features(&input.traces, &mut manifest)?;
            match output.format {
                Format::Structured => write_doc(output.out.as_deref(), &features_doc(&fm, &manifest))?,
                Format::Tabular => {
                    let out = output.out.as_deref().expect("checked above");
                    write_feature_tables(&fm, out)?;
                    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    write_json(&out.with_file_name(format!("{stem}.manifest.json")), &manifest)?;
                }
            }
        }
        Command::H1 { input, alpha, d_min, min_features, output } => {
            check_output(&output)?;
            let config = H1Config { alpha, d_min, min_features };
            let mut manifest = RunManifest::new("h1", &serde_json::to_value(config)?, None);
            manifest.command = cmd;
            let fm = load_features(&input.traces, &mut manifest)?;
            let report = run_h1(&fm, &config).with_context(data_err(&input.traces))?;
            emit::emit_h1(&report, &manifest, output.format, output.out.as_deref())?;
        }
        Command::H2 { input, alpha, d_min, min_metrics, output } => {
            check_output(&output)?;
            let config = H2Config { alpha, d_min, min_metrics };
            let mut manifest = RunManifest::new("h2", &serde_json::to_value(config)?, None);
            manifest.command = cmd;
            let fm = load_features(&input.traces, &mut manifest)?;
            let report = run_h2(&fm, &config).with_context(data_err(&input.traces))?;
            emit::emit_h2(&report, &manifest, output.format, output.out.as_deref())?;
        }
        Command::H3 { input, alpha, d_min, output } => {
            check_output(&output)?;
            let config = H3Config { alpha, d_min };
            let mut manifest = RunManifest::new("h3", &serde_json::to_value(config)?, None);
            manifest.command = cmd;
            let fm = load_features(&input.traces, &mut manifest)?;
            let report = run_h3(&fm, &config).with_context(data_err(&input.traces))?;
            emit::emit_h3(&report, &manifest, output.format, output.out.as_deref())?;
        }
        Command::Cv { input, pipeline, k, top_n, threshold, seed, alpha, d_min, min_significant, output } => {
            check_output(&output)?;
            let pipeline = match pipeline {
                CvTarget::H1 => {
                    let d = H1Config::default();
                    CvPipeline::H1(H1Config {
                        alpha: alpha.unwrap_or(d.alpha),
                        d_min: d_min.unwrap_or(d.d_min),
                        min_features: min_significant.unwrap_or(d.min_features),
                    })
                }
                CvTarget::H2 => {
                    let d = H2Config::default();
                    CvPipeline::H2(H2Config {
                        alpha: alpha.unwrap_or(d.alpha),
                        d_min: d_min.unwrap_or(d.d_min),
                        min_metrics: min_significant.unwrap_or(d.min_metrics),
                    })
                }
                CvTarget::H3 => {
                    if min_significant.is_some() {
                        return Err(usage("--min-significant does not apply to h3"));
                    }
                    let d = H3Config::default();
                    CvPipeline::H3TopN(H3Config {
                        alpha: alpha.unwrap_or(d.alpha),
                        d_min: d_min.unwrap_or(d.d_min),
                    })
                }
            };
            let config = CvConfig { k, pipeline, top_n, threshold, seed };
            let mut manifest = RunManifest::new("cv", &serde_json::to_value(config)?, Some(seed));
            manifest.command = cmd;
            let fm = load_features(&input.traces, &mut manifest)?;
            let report = cross_validate(&fm, &config).with_context(data_err(&input.traces))?;
            emit::emit_cv(&report, &manifest, output.format, output.out.as_deref())?;
        }
        Command::PatchRank { records, output } => {
            check_output(&output)?;
            let mut manifest = RunManifest::new("patch-rank", &json!({}), None);
            manifest.command = cmd;
            let bytes = read_input(&records, "patch records")?;
            manifest.add_input(&records, &bytes);
            let parsed = read_patch_records(&records)?;
            let ranked = rank_patching(&parsed).with_context(|| format!("invalid patch records in {}", records.display()))?;
            emit::emit_patching(&ranked, &manifest, output.format, output.out.as_deref())?;
        }
        Command::SynthGen { config, preset, seed, out, truth } => {
            let mut pc = match (&config, preset) {
                (Some(path), _) => PlantConfig::from_json_file(path)?,
                (None, Some(Preset::Benchmark)) => PlantConfig::benchmark(seed.unwrap_or(0)),
                (None, Some(Preset::Null)) => {
                    let b = PlantConfig::benchmark(0);
                    PlantConfig::null(b.config, b.n_recall, b.n_reasoning, 0)
                }
                (None, None) => return Err(usage("give --config or --preset")),
            };
            if let Some(seed) = seed {
                pc.noise_seed = seed;
            }
            let (ts, gt) = generate_synthetic(&pc)?;
            write_trace_set(&ts, &out)?;
            let mut manifest = RunManifest::new("synth-gen", &serde_json::to_value(&pc)?, Some(pc.noise_seed));
            manifest.command = cmd;
            write_json(&truth, &json!({ "manifest": manifest, "kind": "ground_truth", "plant_config": pc, "result": gt }))?;
            eprintln!("wrote {} prompts to {} and ground truth to {}", ts.prompts.len(), out.display(), truth.display());
        }
        Command::SynthScore { truth, report, out } => {
            let mut manifest = RunManifest::new("synth-score", &json!({}), None);
            manifest.command = cmd;
            let gt_bytes = read_input(&truth, "ground truth")?;
            let report_bytes = read_input(&report, "report")?;
            manifest.add_input(&truth, &gt_bytes);
            manifest.add_input(&report, &report_bytes);

            let gt_doc: serde_json::Value = serde_json::from_slice(&gt_bytes)
                .with_context(|| format!("{} is not JSON", truth.display()))?;
            let gt: PlantedGroundTruth = serde_json::from_value(gt_doc.get("result").cloned().unwrap_or(gt_doc))
                .with_context(|| format!("{} is not a ground-truth file", truth.display()))?;
            let doc: serde_json::Value = serde_json::from_slice(&report_bytes)
                .with_context(|| format!("{} is not JSON", report.display()))?;
            let kind = doc.get("kind").and_then(|k| k.as_str()).unwrap_or("");
            let result = doc.get("result").cloned().unwrap_or_default();
            let bad = || format!("{} does not hold a valid {kind} report", report.display());
            let score = match kind {
                "h1" => score_detection(PipelineOutput::H1(&serde_json::from_value::<H1Report>(result).with_context(bad)?), &gt),
                "h2" => score_detection(PipelineOutput::H2(&serde_json::from_value::<H2Report>(result).with_context(bad)?), &gt),
                "h3" => score_detection(PipelineOutput::H3(&serde_json::from_value::<H3Report>(result).with_context(bad)?), &gt),
                other => bail!("{}: cannot score report kind `{other}`", report.display()),
            }
            .with_context(|| format!("{} does not match {}", report.display(), truth.display()))?;
            write_doc(out.as_deref(), &json!({ "manifest": manifest, "kind": "detection_score", "result": score }))?;
        }
        Command::Report { input, out_dir } => {
            fs::create_dir_all(&out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
            let (c1, c2, c3) = (H1Config::default(), H2Config::default(), H3Config::default());
            let params = json!({ "h1": c1, "h2": c2, "h3": c3 });
            let mut manifest = RunManifest::new("report", &params, None);
            manifest.command = cmd;
            let fm = load_features(&input.traces, &mut manifest)?;
            let h1 = run_h1(&fm, &c1).with_context(data_err(&input.traces))?;
            let h2 = run_h2(&fm, &c2).with_context(data_err(&input.traces))?;
            let h3 = run_h3(&fm, &c3).with_context(data_err(&input.traces))?;
            for format in [Format::Structured, Format::Tabular] {
                let ext = if format == Format::Structured { "json" } else { "csv" };
                emit::emit_h1(&h1, &manifest, format, Some(&out_dir.join(format!("h1.{ext}"))))?;
                emit::emit_h2(&h2, &manifest, format, Some(&out_dir.join(format!("h2.{ext}"))))?;
                emit::emit_h3(&h3, &manifest, format, Some(&out_dir.join(format!("h3.{ext}"))))?;
            }
            let summary = json!({
                "manifest": manifest,
                "kind": "summary",
                "layers": { "analyzed": h1.layers.len(), "counts": h1.counts },
                "heads": { "analyzed": h2.heads.len(), "excluded": h2.excluded.len(), "counts": h2.counts },
                "neurons": {
                    "analyzed": h3.family_size,
                    "excluded": h3.excluded.len(),
                    "counts": h3.counts,
                    "per_layer_task_specific": h3.per_layer_counts,
                },
            });
            write_json(&out_dir.join("summary.json"), &summary)?;
            eprintln!("wrote report to {}", out_dir.display());
        }
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("cannot start worker pool")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match configure_threads().and_then(|()| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
