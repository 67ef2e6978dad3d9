//! H2: attention-head specialization from the five attention metrics.

use serde::{Deserialize, Serialize};

use super::{
    classify_directed, task_groups, validate_alpha, validate_d_min, LabelCounts, PipelineError,
    SpecializationLabel, UnitId, UnitResult,
};
use crate::features::{FeatureMatrices, HEAD_METRIC_COUNT};
use crate::stats::{bh_fdr, GroupComparator, TestResult};

/// Sign applied to each metric's `d` before the direction vote, so that a
/// positive oriented effect always means "more concentrated for recall".
/// Entropy and spread fall as attention concentrates; the other three rise.
pub const HEAD_METRIC_POLARITY: [f64; HEAD_METRIC_COUNT] = [-1.0, 1.0, 1.0, -1.0, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct H2Config {
    pub alpha: f64,
    pub d_min: f64,
    pub min_metrics: usize,
}

impl Default for H2Config {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            d_min: 1.0,
            min_metrics: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H2Report {
    pub config: H2Config,
    pub family_size: usize,
    /// Analyzed heads in (layer, head) order.
    pub heads: Vec<UnitResult>,
    /// Heads whose five metrics are all constant across prompts.
    pub excluded: Vec<UnitId>,
    pub counts: LabelCounts,
}

impl H2Report {
    /// Specialized heads by mean |d|, largest first.
    pub fn top_heads(&self, n: usize) -> Vec<&UnitResult> {
        let mut ranked: Vec<&UnitResult> = self.heads.iter().filter(|u| u.label.is_specialized()).collect();
        ranked.sort_by(|x, y| y.mean_abs_d().total_cmp(&x.mean_abs_d()).then(x.unit.cmp(&y.unit)));
        ranked.truncate(n);
        ranked
    }

    pub fn label_of(&self, unit: &UnitId) -> Option<SpecializationLabel> {
        self.heads.iter().find(|u| &u.unit == unit).map(|u| u.label)
    }
}

fn oriented(tests: &[TestResult]) -> Vec<f64> {
    tests
        .iter()
        .zip(HEAD_METRIC_POLARITY)
        .map(|(t, s)| s * t.effect_size_d)
        .collect()
}

/// Tests every (head, metric) pair, corrects across all analyzed heads with
/// BH-FDR and labels each head.
///
/// Labels use the oriented effects of [`HEAD_METRIC_POLARITY`]: a head whose
/// attention is sharper for recall prompts is recall-specialized even though
/// its entropy and spread effects are negative. The stored test results keep
/// the raw signs.
pub fn run_h2(fm: &FeatureMatrices, config: &H2Config) -> Result<H2Report, PipelineError> {
    validate_alpha(config.alpha)?;
    validate_d_min(config.d_min)?;
    let (recall, reasoning) = task_groups(fm)?;
    let cfg = &fm.config;
    let n = fm.num_prompts();

    let mut cmp = GroupComparator::new();
    let mut a = Vec::with_capacity(recall.len());
    let mut b = Vec::with_capacity(reasoning.len());
    let mut analyzed = Vec::new();
    let mut excluded = Vec::new();
    let mut tests = Vec::new();
    for layer in 0..cfg.num_layers {
        for head in 0..cfg.heads_per_layer {
            let unit = UnitId::Head { layer, head };
            let constant = (0..HEAD_METRIC_COUNT).all(|m| {
                let first = fm.head_metric(0, layer, head, m);
                (1..n).all(|p| fm.head_metric(p, layer, head, m) == first)
            });
            if constant {
                excluded.push(unit);
                continue;
            }
            for m in 0..HEAD_METRIC_COUNT {
                a.clear();
                b.clear();
                a.extend(recall.iter().map(|&p| fm.head_metric(p, layer, head, m)));
                b.extend(reasoning.iter().map(|&p| fm.head_metric(p, layer, head, m)));
                tests.push(cmp.compare(&a, &b)?);
            }
            analyzed.push(unit);
        }
    }

    let (rejected, adjusted) = if tests.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let p: Vec<f64> = tests.iter().map(|t| t.p_value).collect();
        let c = bh_fdr(&p, config.alpha)?;
        (c.rejected, c.adjusted_p.unwrap_or_default())
    };

    let heads: Vec<UnitResult> = analyzed
        .into_iter()
        .enumerate()
        .map(|(i, unit)| {
            let span = i * HEAD_METRIC_COUNT..(i + 1) * HEAD_METRIC_COUNT;
            let per_feature = tests[span.clone()].to_vec();
            let significant_mask: Vec<bool> = per_feature
                .iter()
                .zip(&rejected[span.clone()])
                .map(|(t, &r)| r && !t.degenerate)
                .collect();
            let label = classify_directed(
                &per_feature,
                &oriented(&per_feature),
                &significant_mask,
                config.d_min,
                config.min_metrics,
            );
            UnitResult {
                unit,
                per_feature,
                adjusted_p: adjusted[span].to_vec(),
                significant_mask,
                label,
            }
        })
        .collect();

    Ok(H2Report {
        config: *config,
        family_size: tests.len(),
        counts: LabelCounts::from_labels(heads.iter().map(|u| u.label)),
        heads,
        excluded,
    })
}
