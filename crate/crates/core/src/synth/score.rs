use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{PlantedGroundTruth, SynthError};
use crate::pipelines::{H1Report, H2Report, H3Report, SpecializationLabel, UnitId};

/// A pipeline report to score.
#[derive(Debug, Clone, Copy)]
pub enum PipelineOutput<'a> {
    H1(&'a H1Report),
    H2(&'a H2Report),
    H3(&'a H3Report),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionScore {
    pub pipeline: String,
    /// Correctly labeled planted units over all detected units; 1.0 when
    /// nothing was detected (see `zero_detected`).
    pub precision: f64,
    /// Correctly labeled planted units over analyzed planted units.
    pub recall: f64,
    pub zero_detected: bool,
    pub true_positives: usize,
    pub detected: usize,
    pub planted: usize,
    pub analyzed: usize,
    /// Planted units that the pipeline excluded.
    pub planted_excluded: usize,
    /// `confusion[expected][reported]`, indexed in label order.
    pub confusion: [[usize; 4]; 4],
}

struct Detections {
    pipeline: &'static str,
    example: UnitId,
    analyzed: usize,
    specialized: HashMap<UnitId, SpecializationLabel>,
    excluded: HashSet<UnitId>,
}

fn mismatch(msg: String) -> SynthError {
    SynthError::ConfigMismatch(msg)
}

fn collect(report: PipelineOutput<'_>, gt: &PlantedGroundTruth) -> Result<Detections, SynthError> {
    let c = &gt.config;
    match report {
        PipelineOutput::H1(r) => {
            if r.layers.len() != c.num_layers {
                return Err(mismatch(format!(
                    "H1 report has {} layers, ground truth {}",
                    r.layers.len(),
                    c.num_layers
                )));
            }
            Ok(Detections {
                pipeline: "h1",
                example: UnitId::Layer { layer: 0 },
                analyzed: r.layers.len(),
                specialized: r
                    .layers
                    .iter()
                    .filter(|u| u.label.is_specialized())
                    .map(|u| (u.unit, u.label))
                    .collect(),
                excluded: HashSet::new(),
            })
        }
        PipelineOutput::H2(r) => {
            let total = r.heads.len() + r.excluded.len();
            if total != c.head_count() {
                return Err(mismatch(format!("H2 report covers {total} heads, ground truth {}", c.head_count())));
            }
            Ok(Detections {
                pipeline: "h2",
                example: UnitId::Head { layer: 0, head: 0 },
                analyzed: r.heads.len(),
                specialized: r
                    .heads
                    .iter()
                    .filter(|u| u.label.is_specialized())
                    .map(|u| (u.unit, u.label))
                    .collect(),
                excluded: r.excluded.iter().copied().collect(),
            })
        }
        PipelineOutput::H3(r) => {
            let total = r.family_size + r.excluded.len();
            if total != c.neuron_count() {
                return Err(mismatch(format!(
                    "H3 report covers {total} neurons, ground truth {}",
                    c.neuron_count()
                )));
            }
            Ok(Detections {
                pipeline: "h3",
                example: UnitId::Neuron { layer: 0, neuron: 0 },
                analyzed: r.family_size,
                specialized: r.labels(),
                excluded: r.excluded.iter().copied().collect(),
            })
        }
    }
}

/// Scores a report against planted ground truth. A planted unit counts as
/// found only when its label matches the planted direction exactly.
pub fn score_detection(report: PipelineOutput<'_>, gt: &PlantedGroundTruth) -> Result<DetectionScore, SynthError> {
    let det = collect(report, gt)?;
    let planted = gt.planted_of_kind(&det.example);
    let non = SpecializationLabel::NonSpecialized;

    let mut confusion = [[0usize; 4]; 4];
    let mut true_positives = 0;
    let mut planted_analyzed = 0;
    let mut planted_excluded = 0;
    for (unit, &expected) in &planted {
        if det.excluded.contains(unit) {
            planted_excluded += 1;
            continue;
        }
        planted_analyzed += 1;
        let got = det.specialized.get(unit).copied().unwrap_or(non);
        confusion[expected.index()][got.index()] += 1;
        if got == expected {
            true_positives += 1;
        }
    }
    let mut false_detections = 0;
    for (unit, &got) in &det.specialized {
        if !planted.contains_key(unit) {
            confusion[non.index()][got.index()] += 1;
            false_detections += 1;
        }
    }
    confusion[non.index()][non.index()] = det
        .analyzed
        .checked_sub(planted_analyzed + false_detections)
        .ok_or_else(|| mismatch("more planted and detected units than analyzed units".into()))?;

    let detected = det.specialized.len();
    let ratio = |num: usize, den: usize, empty: f64| if den == 0 { empty } else { num as f64 / den as f64 };
    Ok(DetectionScore {
        pipeline: det.pipeline.to_string(),
        precision: ratio(true_positives, detected, 1.0),
        recall: ratio(true_positives, planted_analyzed, 0.0),
        zero_detected: detected == 0,
        true_positives,
        detected,
        planted: planted_analyzed,
        analyzed: det.analyzed,
        planted_excluded,
        confusion,
    })
}
