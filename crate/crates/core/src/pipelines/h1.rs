//! H1: whole-layer specialization from the six per-layer features.

use serde::{Deserialize, Serialize};

use super::{
    classify_unit, task_groups, validate_alpha, validate_d_min, LabelCounts, PipelineError,
    UnitId, UnitResult,
};
use crate::features::{FeatureMatrices, LAYER_FEATURE_COUNT};
use crate::stats::{bh_fdr, GroupComparator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct H1Config {
    pub alpha: f64,
    pub d_min: f64,
    pub min_features: usize,
}

impl Default for H1Config {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            d_min: 0.5,
            min_features: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H1Report {
    pub config: H1Config,
    /// Number of tests under the FDR correction (layers times features).
    pub family_size: usize,
    pub layers: Vec<UnitResult>,
    pub counts: LabelCounts,
}

impl H1Report {
    pub fn specialized_layers(&self) -> impl Iterator<Item = &UnitResult> {
        self.layers.iter().filter(|u| u.label.is_specialized())
    }
}

/// Tests every (layer, feature) pair, corrects across the whole family with
/// BH-FDR and labels each layer.
pub fn run_h1(fm: &FeatureMatrices, config: &H1Config) -> Result<H1Report, PipelineError> {
    validate_alpha(config.alpha)?;
    validate_d_min(config.d_min)?;
    let (recall, reasoning) = task_groups(fm)?;
    let num_layers = fm.config.num_layers;

    let mut cmp = GroupComparator::new();
    let mut a = Vec::with_capacity(recall.len());
    let mut b = Vec::with_capacity(reasoning.len());
    let mut tests = Vec::with_capacity(num_layers * LAYER_FEATURE_COUNT);
    for layer in 0..num_layers {
        for feature in 0..LAYER_FEATURE_COUNT {
            a.clear();
            b.clear();
            a.extend(recall.iter().map(|&p| fm.layer_feature(p, layer, feature)));
            b.extend(reasoning.iter().map(|&p| fm.layer_feature(p, layer, feature)));
            tests.push(cmp.compare(&a, &b)?);
        }
    }

    let p: Vec<f64> = tests.iter().map(|t| t.p_value).collect();
    let correction = bh_fdr(&p, config.alpha)?;
    let adjusted = correction.adjusted_p.unwrap_or_default();

    let layers: Vec<UnitResult> = (0..num_layers)
        .map(|layer| {
            let span = layer * LAYER_FEATURE_COUNT..(layer + 1) * LAYER_FEATURE_COUNT;
            let per_feature = tests[span.clone()].to_vec();
            let significant_mask: Vec<bool> = per_feature
                .iter()
                .zip(&correction.rejected[span.clone()])
                .map(|(t, &r)| r && !t.degenerate)
                .collect();
            let label = classify_unit(&per_feature, &significant_mask, config.d_min, config.min_features);
            UnitResult {
                unit: UnitId::Layer { layer },
                per_feature,
                adjusted_p: adjusted[span].to_vec(),
                significant_mask,
                label,
            }
        })
        .collect();

    Ok(H1Report {
        config: *config,
        family_size: tests.len(),
        counts: LabelCounts::from_labels(layers.iter().map(|u| u.label)),
        layers,
    })
}
