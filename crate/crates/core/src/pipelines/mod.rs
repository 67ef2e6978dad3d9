//! Layer (H1), attention-head (H2) and MLP-neuron (H3) specialization
//! analyses, fold-consistency validation and activation-patching scores.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{FeatureError, FeatureMatrices};
use crate::stats::{StatsError, TestResult};
use crate::trace::TaskType;

pub mod cv;
pub mod h1;
pub mod h2;
pub mod h3;
pub mod patching;

pub use cv::{cross_validate, stratified_folds, ConsistencyReport, CvConfig, CvPipeline, UnitConsistency};
pub use h1::{run_h1, H1Config, H1Report};
pub use h2::{run_h2, H2Config, H2Report, HEAD_METRIC_POLARITY};
pub use h3::{firing_probabilities, run_h3, H3Config, H3NeuronSummary, H3Report};
pub use patching::{
    patching_delta, rank_patching, read_patch_records, write_patch_records, LayerDelta, PatchIoError, PatchRecord,
};

/// Fewest prompts per task group any pipeline accepts.
pub const MIN_GROUP_SIZE: usize = 2;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("insufficient samples: {recall} recall and {reasoning} reasoning prompts (need at least {needed} each)")]
    InsufficientSamples {
        recall: usize,
        reasoning: usize,
        needed: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("fold count {k} invalid for smallest task group of {group_size}")]
    FoldCount { k: usize, group_size: usize },
    #[error("{field} = {value} for prompt `{prompt_id}`, layer {layer} is outside [0, 1]")]
    InvalidProbability {
        prompt_id: String,
        layer: usize,
        field: &'static str,
        value: f64,
    },
    #[error("no patch records")]
    NoRecords,
    #[error(transparent)]
    Features(#[from] FeatureError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecializationLabel {
    RecallSpecialized,
    ReasoningSpecialized,
    Mixed,
    NonSpecialized,
}

impl SpecializationLabel {
    pub const ALL: [SpecializationLabel; 4] = [
        SpecializationLabel::RecallSpecialized,
        SpecializationLabel::ReasoningSpecialized,
        SpecializationLabel::Mixed,
        SpecializationLabel::NonSpecialized,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SpecializationLabel::RecallSpecialized => "recall_specialized",
            SpecializationLabel::ReasoningSpecialized => "reasoning_specialized",
            SpecializationLabel::Mixed => "mixed",
            SpecializationLabel::NonSpecialized => "non_specialized",
        }
    }

    pub fn is_specialized(self) -> bool {
        self != SpecializationLabel::NonSpecialized
    }

    /// Label for a single directional preference.
    pub fn from_direction(d: f64) -> Self {
        if d > 0.0 {
            SpecializationLabel::RecallSpecialized
        } else if d < 0.0 {
            SpecializationLabel::ReasoningSpecialized
        } else {
            SpecializationLabel::NonSpecialized
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for SpecializationLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identifies a layer, an attention head or an MLP neuron.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UnitId {
    Layer { layer: usize },
    Head { layer: usize, head: usize },
    Neuron { layer: usize, neuron: usize },
}

impl UnitId {
    pub fn layer(&self) -> usize {
        match *self {
            UnitId::Layer { layer } | UnitId::Head { layer, .. } | UnitId::Neuron { layer, .. } => layer,
        }
    }

    pub fn same_kind(&self, other: &UnitId) -> bool {
        std::mem::discriminant(self) == std::mem::discriminant(other)
    }
}

impl fmt::Display for UnitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnitId::Layer { layer } => write!(f, "L{layer}"),
            UnitId::Head { layer, head } => write!(f, "L{layer}H{head}"),
            UnitId::Neuron { layer, neuron } => write!(f, "L{layer}N{neuron}"),
        }
    }
}

/// Per-unit outcome of H1 or H2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitResult {
    pub unit: UnitId,
    pub per_feature: Vec<TestResult>,
    /// Family-wide corrected p-values, aligned with `per_feature`.
    pub adjusted_p: Vec<f64>,
    pub significant_mask: Vec<bool>,
    pub label: SpecializationLabel,
}

impl UnitResult {
    /// Mean |d| over the unit's features.
    pub fn mean_abs_d(&self) -> f64 {
        let n = self.per_feature.len().max(1) as f64;
        self.per_feature.iter().map(|t| t.effect_size_d.abs()).sum::<f64>() / n
    }
}

/// Category totals; always partitions the analyzed units.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub recall_specialized: usize,
    pub reasoning_specialized: usize,
    pub mixed: usize,
    pub non_specialized: usize,
}

impl LabelCounts {
    pub fn from_labels(labels: impl IntoIterator<Item = SpecializationLabel>) -> Self {
        let mut c = LabelCounts::default();
        for l in labels {
            match l {
                SpecializationLabel::RecallSpecialized => c.recall_specialized += 1,
                SpecializationLabel::ReasoningSpecialized => c.reasoning_specialized += 1,
                SpecializationLabel::Mixed => c.mixed += 1,
                SpecializationLabel::NonSpecialized => c.non_specialized += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.recall_specialized + self.reasoning_specialized + self.mixed + self.non_specialized
    }

    pub fn specialized(&self) -> usize {
        self.total() - self.non_specialized
    }
}

/// Labels a unit from its per-feature effect sizes.
///
/// A feature qualifies when it is significant, non-degenerate and has
/// `|d| > d_min`. Fewer than `min_significant` qualifying features gives
/// `NonSpecialized`; otherwise the label follows the sign of every
/// qualifying `d` (positive means the recall group is higher), or `Mixed`
/// when signs disagree.
pub fn classify_unit(
    results: &[TestResult],
    significant_mask: &[bool],
    d_min: f64,
    min_significant: usize,
) -> SpecializationLabel {
    let directions: Vec<f64> = results.iter().map(|r| r.effect_size_d).collect();
    classify_directed(results, &directions, significant_mask, d_min, min_significant)
}

/// Like [`classify_unit`] but with explicit per-feature directions, used when
/// a feature's sign is oriented before voting.
pub(crate) fn classify_directed(
    results: &[TestResult],
    directions: &[f64],
    significant_mask: &[bool],
    d_min: f64,
    min_significant: usize,
) -> SpecializationLabel {
    let qualifying: Vec<f64> = results
        .iter()
        .zip(directions)
        .zip(significant_mask)
        .filter(|((r, d), &sig)| sig && !r.degenerate && d.abs() > d_min)
        .map(|((_, &d), _)| d)
        .collect();
    if qualifying.is_empty() || qualifying.len() < min_significant {
        SpecializationLabel::NonSpecialized
    } else if qualifying.iter().all(|&d| d > 0.0) {
        SpecializationLabel::RecallSpecialized
    } else if qualifying.iter().all(|&d| d < 0.0) {
        SpecializationLabel::ReasoningSpecialized
    } else {
        SpecializationLabel::Mixed
    }
}

pub(crate) fn validate_alpha(alpha: f64) -> Result<(), PipelineError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(PipelineError::InvalidConfig(format!("alpha {alpha} outside (0, 1)")))
    }
}

pub(crate) fn validate_d_min(d_min: f64) -> Result<(), PipelineError> {
    if d_min >= 0.0 && d_min.is_finite() {
        Ok(())
    } else {
        Err(PipelineError::InvalidConfig(format!("d_min {d_min} must be a non-negative number")))
    }
}

/// Recall and reasoning prompt indices, checked for minimum size.
pub(crate) fn task_groups(fm: &FeatureMatrices) -> Result<(Vec<usize>, Vec<usize>), PipelineError> {
    fm.check_shapes()?;
    let recall = fm.group_indices(TaskType::Recall);
    let reasoning = fm.group_indices(TaskType::Reasoning);
    if recall.len() < MIN_GROUP_SIZE || reasoning.len() < MIN_GROUP_SIZE {
        return Err(PipelineError::InsufficientSamples {
            recall: recall.len(),
            reasoning: reasoning.len(),
            needed: MIN_GROUP_SIZE,
        });
    }
    Ok((recall, reasoning))
}
