//! Per-layer features, per-head attention metrics and per-neuron firing
//! indicators derived from a trace set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{self, StatsError};
use crate::trace::{validate_trace_set, PromptTrace, TaskType, TraceConfig, TraceSet, ValidationReport};

pub const LAYER_FEATURE_COUNT: usize = 6;
pub const HEAD_METRIC_COUNT: usize = 5;

pub const LAYER_FEATURE_NAMES: [&str; LAYER_FEATURE_COUNT] = [
    "hidden_norm",
    "hidden_mean",
    "attn_entropy",
    "attn_concentration",
    "mlp_magnitude",
    "sparsity",
];

pub const HEAD_METRIC_NAMES: [&str; HEAD_METRIC_COUNT] =
    ["entropy", "max_weight", "focus", "spread", "gini"];

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },
    #[error("trace set failed validation: {0}")]
    Invalid(ValidationReport),
    #[error("matrix shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerFeatureVector {
    pub hidden_norm: f64,
    pub hidden_mean: f64,
    pub attn_entropy: f64,
    pub attn_concentration: f64,
    pub mlp_magnitude: f64,
    pub sparsity: f64,
}

impl LayerFeatureVector {
    pub fn to_array(&self) -> [f64; LAYER_FEATURE_COUNT] {
        [
            self.hidden_norm,
            self.hidden_mean,
            self.attn_entropy,
            self.attn_concentration,
            self.mlp_magnitude,
            self.sparsity,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadMetricVector {
    pub entropy: f64,
    pub max_weight: f64,
    /// Mass of the top `ceil(seq_len / 4)` positions.
    pub focus: f64,
    /// Standard deviation of the attended position.
    pub spread: f64,
    pub gini: f64,
}

impl HeadMetricVector {
    pub fn to_array(&self) -> [f64; HEAD_METRIC_COUNT] {
        [self.entropy, self.max_weight, self.focus, self.spread, self.gini]
    }
}

fn check_index(what: &'static str, index: usize, limit: usize) -> Result<(), FeatureError> {
    if index < limit {
        Ok(())
    } else {
        Err(FeatureError::IndexOutOfRange { what, index, limit })
    }
}

/// Number of positions summed by the focus metric.
pub fn focus_width(seq_len: usize) -> usize {
    seq_len.div_ceil(4).max(1)
}

/// Five attention metrics of one post-softmax row.
pub fn attention_metrics(row: &[f32]) -> Result<HeadMetricVector, FeatureError> {
    let raw: Vec<f64> = row.iter().map(|&w| f64::from(w)).collect();
    let entropy = stats::shannon_entropy(&raw)?;
    let gini = stats::gini(&raw)?;
    let total: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|x| x / total).collect();

    let mut sorted = w.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let max_weight = sorted[0];
    let focus: f64 = sorted[..focus_width(w.len())].iter().sum();

    let center: f64 = w.iter().enumerate().map(|(i, x)| i as f64 * x).sum();
    let var: f64 = w
        .iter()
        .enumerate()
        .map(|(i, x)| x * (i as f64 - center).powi(2))
        .sum();

    Ok(HeadMetricVector {
        entropy,
        max_weight,
        focus: focus.min(1.0),
        spread: var.max(0.0).sqrt(),
        gini,
    })
}

pub fn head_metrics(
    pt: &PromptTrace,
    cfg: &TraceConfig,
    layer: usize,
    head: usize,
) -> Result<HeadMetricVector, FeatureError> {
    check_index("layer", layer, cfg.num_layers)?;
    check_index("head", head, cfg.heads_per_layer)?;
    attention_metrics(pt.attention_row(cfg, layer, head))
}

/// Six layer-level features. Attention features average the per-head
/// entropy and max weight over the layer's heads.
pub fn layer_features(
    pt: &PromptTrace,
    cfg: &TraceConfig,
    layer: usize,
) -> Result<LayerFeatureVector, FeatureError> {
    check_index("layer", layer, cfg.num_layers)?;
    let heads = (0..cfg.heads_per_layer)
        .map(|h| head_metrics(pt, cfg, layer, h))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(layer_features_from_heads(pt, cfg, layer, &heads))
}

fn layer_features_from_heads(
    pt: &PromptTrace,
    cfg: &TraceConfig,
    layer: usize,
    heads: &[HeadMetricVector],
) -> LayerFeatureVector {
    let h = pt.hidden_state(cfg, layer);
    let sq: f64 = h.iter().map(|&x| f64::from(x).powi(2)).sum();
    let hidden_mean = h.iter().map(|&x| f64::from(x)).sum::<f64>() / h.len() as f64;

    let mlp = pt.mlp(cfg, layer);
    let magnitude = mlp.iter().map(|&x| f64::from(x).abs()).sum::<f64>() / mlp.len() as f64;
    let inactive = mlp.iter().filter(|&&x| x <= 0.0).count();

    let nh = heads.len() as f64;
    LayerFeatureVector {
        hidden_norm: sq.sqrt(),
        hidden_mean,
        attn_entropy: heads.iter().map(|m| m.entropy).sum::<f64>() / nh,
        attn_concentration: heads.iter().map(|m| m.max_weight).sum::<f64>() / nh,
        mlp_magnitude: magnitude,
        sparsity: inactive as f64 / mlp.len() as f64,
    }
}

/// Dense feature tensors for a whole trace set, prompt-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrices {
    pub config: TraceConfig,
    pub prompt_ids: Vec<String>,
    pub task_labels: Vec<TaskType>,
    /// `[prompt][layer][6]`
    pub layer_features: Vec<f64>,
    /// `[prompt][layer][head][5]`
    pub head_metrics: Vec<f64>,
    /// `[prompt][layer][mlp_dim]`
    pub neuron_activations: Vec<f32>,
    /// `[prompt][layer][mlp_dim]`, true iff the activation is strictly positive.
    pub firing: Vec<bool>,
}

impl FeatureMatrices {
    pub fn num_prompts(&self) -> usize {
        self.task_labels.len()
    }

    pub fn layer_feature(&self, prompt: usize, layer: usize, feature: usize) -> f64 {
        let l = self.config.num_layers;
        self.layer_features[(prompt * l + layer) * LAYER_FEATURE_COUNT + feature]
    }

    pub fn head_metric(&self, prompt: usize, layer: usize, head: usize, metric: usize) -> f64 {
        let (l, h) = (self.config.num_layers, self.config.heads_per_layer);
        self.head_metrics[((prompt * l + layer) * h + head) * HEAD_METRIC_COUNT + metric]
    }

    /// Activations of one prompt, all layers, `[layer][mlp_dim]`.
    pub fn prompt_activations(&self, prompt: usize) -> &[f32] {
        let n = self.config.neuron_count();
        &self.neuron_activations[prompt * n..(prompt + 1) * n]
    }

    pub fn prompt_firing(&self, prompt: usize) -> &[bool] {
        let n = self.config.neuron_count();
        &self.firing[prompt * n..(prompt + 1) * n]
    }

    pub fn group_indices(&self, task: TaskType) -> Vec<usize> {
        self.task_labels
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == task)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn check_shapes(&self) -> Result<(), FeatureError> {
        let n = self.num_prompts();
        let c = &self.config;
        let expect = [
            ("prompt_ids", self.prompt_ids.len(), n),
            ("layer_features", self.layer_features.len(), n * c.num_layers * LAYER_FEATURE_COUNT),
            ("head_metrics", self.head_metrics.len(), n * c.head_count() * HEAD_METRIC_COUNT),
            ("neuron_activations", self.neuron_activations.len(), n * c.neuron_count()),
            ("firing", self.firing.len(), n * c.neuron_count()),
        ];
        for (name, got, want) in expect {
            if got != want {
                return Err(FeatureError::Shape(format!("{name} has {got} entries, expected {want}")));
            }
        }
        Ok(())
    }

    /// Rows of the given prompts, in the given order.
    pub fn subset(&self, prompts: &[usize]) -> FeatureMatrices {
        let c = &self.config;
        let lf = c.num_layers * LAYER_FEATURE_COUNT;
        let hm = c.head_count() * HEAD_METRIC_COUNT;
        let gather = |data: &[f64], width: usize| -> Vec<f64> {
            prompts
                .iter()
                .flat_map(|&p| data[p * width..(p + 1) * width].iter().copied())
                .collect()
        };
        FeatureMatrices {
            config: c.clone(),
            prompt_ids: prompts.iter().map(|&p| self.prompt_ids[p].clone()).collect(),
            task_labels: prompts.iter().map(|&p| self.task_labels[p]).collect(),
            layer_features: gather(&self.layer_features, lf),
            head_metrics: gather(&self.head_metrics, hm),
            neuron_activations: prompts
                .iter()
                .flat_map(|&p| self.prompt_activations(p).iter().copied())
                .collect(),
            firing: prompts
                .iter()
                .flat_map(|&p| self.prompt_firing(p).iter().copied())
                .collect(),
        }
    }
}

struct PromptFeatures {
    layer: Vec<f64>,
    heads: Vec<f64>,
}

fn prompt_features(pt: &PromptTrace, cfg: &TraceConfig) -> Result<PromptFeatures, FeatureError> {
    let mut layer = Vec::with_capacity(cfg.num_layers * LAYER_FEATURE_COUNT);
    let mut heads = Vec::with_capacity(cfg.head_count() * HEAD_METRIC_COUNT);
    for l in 0..cfg.num_layers {
        let metrics = (0..cfg.heads_per_layer)
            .map(|h| attention_metrics(pt.attention_row(cfg, l, h)))
            .collect::<Result<Vec<_>, _>>()?;
        heads.extend(metrics.iter().flat_map(|m| m.to_array()));
        layer.extend(layer_features_from_heads(pt, cfg, l, &metrics).to_array());
    }
    Ok(PromptFeatures { layer, heads })
}

/// Computes every feature for every prompt. Work is split per prompt and
/// concatenated in prompt order, so output does not depend on thread count.
pub fn build_feature_matrices(ts: &TraceSet) -> Result<FeatureMatrices, FeatureError> {
    let report = validate_trace_set(ts);
    if !report.ok {
        return Err(FeatureError::Invalid(report));
    }
    let cfg = &ts.config;
    let per_prompt = ts
        .prompts
        .par_iter()
        .map(|p| prompt_features(p, cfg))
        .collect::<Result<Vec<_>, _>>()?;

    let mut layer_features = Vec::with_capacity(ts.prompts.len() * cfg.num_layers * LAYER_FEATURE_COUNT);
    let mut head_metrics = Vec::with_capacity(ts.prompts.len() * cfg.head_count() * HEAD_METRIC_COUNT);
    for pf in per_prompt {
        layer_features.extend(pf.layer);
        head_metrics.extend(pf.heads);
    }
    let neuron_activations: Vec<f32> = ts
        .prompts
        .iter()
        .flat_map(|p| p.mlp_activations.iter().copied())
        .collect();
    let firing = neuron_activations.par_iter().map(|&x| x > 0.0).collect();

    Ok(FeatureMatrices {
        config: cfg.clone(),
        prompt_ids: ts.prompts.iter().map(|p| p.prompt_id.clone()).collect(),
        task_labels: ts.prompts.iter().map(|p| p.task_type).collect(),
        layer_features,
        head_metrics,
        neuron_activations,
        firing,
    })
}
