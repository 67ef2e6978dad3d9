//! Report writers: one JSON document per run, or plot-ready CSV tables.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use circuitscope::features::{HEAD_METRIC_NAMES, LAYER_FEATURE_NAMES};
use circuitscope::pipelines::{
    ConsistencyReport, H1Report, H2Report, H3Report, LabelCounts, LayerDelta, SpecializationLabel,
    UnitId, UnitResult,
};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::RunManifest;

/// Size of the H2 head ranking block.
pub const TOP_HEADS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Structured,
    Tabular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopHead {
    pub rank: usize,
    pub unit: UnitId,
    pub label: SpecializationLabel,
    pub mean_abs_d: f64,
}

pub fn top_heads(r: &H2Report, n: usize) -> Vec<TopHead> {
    r.top_heads(n)
        .into_iter()
        .enumerate()
        .map(|(i, u)| TopHead {
            rank: i + 1,
            unit: u.unit,
            label: u.label,
            mean_abs_d: u.mean_abs_d(),
        })
        .collect()
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Structured output goes to `out`, or to stdout when no path is given.
pub fn write_doc(out: Option<&Path>, value: &impl Serialize) -> Result<()> {
    match out {
        Some(path) => write_json(path, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn table_path(out: Option<&Path>) -> Result<&Path> {
    out.context("tabular output needs an --out path")
}

/// `dir/stem.suffix` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("cannot write {}", path.display()))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().with_context(|| format!("cannot write {}", path.display()))
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn write_counts(path: &Path, counts: &LabelCounts) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["category", "count"])?;
    let rows = [
        (SpecializationLabel::RecallSpecialized, counts.recall_specialized),
        (SpecializationLabel::ReasoningSpecialized, counts.reasoning_specialized),
        (SpecializationLabel::Mixed, counts.mixed),
        (SpecializationLabel::NonSpecialized, counts.non_specialized),
    ];
    for (label, n) in rows {
        w.write_record([label.as_str().to_string(), n.to_string()])?;
    }
    finish(w, path)
}

fn unit_header(names: &[&str], lead: &[&str]) -> Vec<String> {
    let mut h: Vec<String> = lead.iter().map(|s| s.to_string()).collect();
    h.push("label".into());
    h.push("mean_abs_d".into());
    for n in names {
        h.push(format!("d_{n}"));
        h.push(format!("p_adj_{n}"));
        h.push(format!("significant_{n}"));
    }
    h
}

fn unit_row(u: &UnitResult, lead: Vec<String>) -> Vec<String> {
    let mut row = lead;
    row.push(u.label.as_str().into());
    row.push(num(u.mean_abs_d()));
    for ((t, p), s) in u.per_feature.iter().zip(&u.adjusted_p).zip(&u.significant_mask) {
        row.push(num(t.effect_size_d));
        row.push(num(*p));
        row.push(s.to_string());
    }
    row
}

/// Writes the manifest beside a tabular report.
fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    write_json(&sibling(out, "manifest.json"), manifest)
}

pub fn emit_h1(r: &H1Report, manifest: &RunManifest, format: Format, out: Option<&Path>) -> Result<()> {
    match format {
        Format::Structured => write_doc(out, &json!({ "manifest": manifest, "kind": "h1", "result": r })),
        Format::Tabular => {
            let out = table_path(out)?;
            let mut w = csv_writer(out)?;
            w.write_record(unit_header(&LAYER_FEATURE_NAMES, &["layer"]))?;
            for u in &r.layers {
                w.write_record(unit_row(u, vec![u.unit.layer().to_string()]))?;
            }
            finish(w, out)?;
            write_counts(&sibling(out, "counts.csv"), &r.counts)?;
            write_manifest(out, manifest)
        }
    }
}

pub fn emit_h2(r: &H2Report, manifest: &RunManifest, format: Format, out: Option<&Path>) -> Result<()> {
    let top = top_heads(r, TOP_HEADS);
    match format {
        Format::Structured => write_doc(
            out,
            &json!({ "manifest": manifest, "kind": "h2", "result": r, "top_heads": top }),
        ),
        Format::Tabular => {
            let out = table_path(out)?;
            let head_lead = |u: &UnitId| match *u {
                UnitId::Head { layer, head } => vec![layer.to_string(), head.to_string()],
                _ => vec![u.layer().to_string(), String::new()],
            };
            let mut w = csv_writer(out)?;
            let header = unit_header(&HEAD_METRIC_NAMES, &["layer", "head"]);
            let width = header.len();
            w.write_record(&header)?;
            for u in &r.heads {
                w.write_record(unit_row(u, head_lead(&u.unit)))?;
            }
            for u in &r.excluded {
                let mut row = head_lead(u);
                row.push("excluded".into());
                row.resize(width, String::new());
                w.write_record(row)?;
            }
            finish(w, out)?;
            write_counts(&sibling(out, "counts.csv"), &r.counts)?;

            let top_path = sibling(out, "top.csv");
            let mut w = csv_writer(&top_path)?;
            w.write_record(["rank", "layer", "head", "label", "mean_abs_d"])?;
            for t in &top {
                let mut row = vec![t.rank.to_string()];
                row.extend(head_lead(&t.unit));
                row.push(t.label.as_str().into());
                row.push(num(t.mean_abs_d));
                w.write_record(row)?;
            }
            finish(w, &top_path)?;
            write_manifest(out, manifest)
        }
    }
}

pub fn emit_h3(r: &H3Report, manifest: &RunManifest, format: Format, out: Option<&Path>) -> Result<()> {
    let compact = r.compact();
    match format {
        Format::Structured => write_doc(out, &json!({ "manifest": manifest, "kind": "h3", "result": compact })),
        Format::Tabular => {
            let out = table_path(out)?;
            let mut w = csv_writer(out)?;
            w.write_record([
                "rank",
                "layer",
                "neuron",
                "label",
                "p_fire_recall",
                "p_fire_reasoning",
                "specificity",
                "d",
                "u",
                "p",
                "p_adj",
            ])?;
            for (rank, s) in compact.ranked().enumerate() {
                let (layer, neuron) = match s.unit {
                    UnitId::Neuron { layer, neuron } => (layer, neuron),
                    _ => unreachable!("H3 reports neurons"),
                };
                w.write_record([
                    (rank + 1).to_string(),
                    layer.to_string(),
                    neuron.to_string(),
                    s.label.as_str().into(),
                    num(s.p_fire_recall),
                    num(s.p_fire_reasoning),
                    num(s.specificity),
                    num(s.test.effect_size_d),
                    num(s.test.u_statistic),
                    num(s.test.p_value),
                    num(s.adjusted_p),
                ])?;
            }
            finish(w, out)?;

            let counts_path = sibling(out, "counts.csv");
            let mut w = csv_writer(&counts_path)?;
            w.write_record(["layer", "task_specific"])?;
            for (layer, n) in r.per_layer_counts.iter().enumerate() {
                w.write_record([layer.to_string(), n.to_string()])?;
            }
            finish(w, &counts_path)?;
            write_manifest(out, manifest)
        }
    }
}

pub fn emit_cv(r: &ConsistencyReport, manifest: &RunManifest, format: Format, out: Option<&Path>) -> Result<()> {
    match format {
        Format::Structured => write_doc(out, &json!({ "manifest": manifest, "kind": "cv", "result": r })),
        Format::Tabular => {
            let out = table_path(out)?;
            let mut w = csv_writer(out)?;
            w.write_record(["unit", "full_label", "modal_label", "consistency", "consistent", "fold_labels"])?;
            for u in &r.units {
                let folds: Vec<&str> = u.fold_labels.iter().map(|l| l.as_str()).collect();
                w.write_record([
                    u.unit.to_string(),
                    u.full_label.as_str().into(),
                    u.modal_label.as_str().into(),
                    num(u.consistency),
                    u.consistent.to_string(),
                    folds.join(";"),
                ])?;
            }
            finish(w, out)?;
            write_manifest(out, manifest)
        }
    }
}

pub fn emit_patching(r: &[LayerDelta], manifest: &RunManifest, format: Format, out: Option<&Path>) -> Result<()> {
    match format {
        Format::Structured => write_doc(out, &json!({ "manifest": manifest, "kind": "patch_rank", "result": r })),
        Format::Tabular => {
            let out = table_path(out)?;
            let mut w = csv_writer(out)?;
            w.write_record(["rank", "layer", "mean_delta", "records"])?;
            for (i, d) in r.iter().enumerate() {
                w.write_record([
                    (i + 1).to_string(),
                    d.layer.to_string(),
                    num(d.mean_delta),
                    d.records.to_string(),
                ])?;
            }
            finish(w, out)?;
            write_manifest(out, manifest)
        }
    }
}
