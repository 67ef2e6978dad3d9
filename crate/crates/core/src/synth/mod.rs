//! Synthetic trace sets with planted layer, head and neuron specializations,
//! and scoring of pipeline detections against them.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::HEAD_METRIC_COUNT;
use crate::pipelines::{SpecializationLabel, UnitId};
use crate::trace::{PromptTrace, TaskType, TraceConfig, TraceSet};

pub mod calibrate;
mod score;

pub use calibrate::HEAD_PLANT_ORDER;
pub use score::{score_detection, DetectionScore, PipelineOutput};

/// Layer features a layer plant may target: hidden_norm, hidden_mean,
/// mlp_magnitude and sparsity. The two attention features move in opposite
/// directions under any change of attention shape, so they cannot carry a
/// same-sign plant.
pub const PLANTABLE_LAYER_FEATURES: [usize; 4] = [0, 1, 4, 5];

pub const DEFAULT_SEQ_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid plant config: {0}")]
    InvalidConfig(String),
    #[error("infeasible plant on {unit}: {reason}")]
    Infeasible { unit: UnitId, reason: String },
    #[error("report does not match ground truth: {0}")]
    ConfigMismatch(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerPlant {
    pub layer: usize,
    /// Task group whose features are raised.
    pub direction: TaskType,
    pub effect_d: f64,
    pub features: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadPlant {
    pub layer: usize,
    pub head: usize,
    /// Task group whose attention is sharpened.
    pub direction: TaskType,
    pub effect_d: f64,
    /// Metrics guaranteed to reach `effect_d`, taken in [`HEAD_PLANT_ORDER`].
    pub metric_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronPlant {
    pub layer: usize,
    pub neuron: usize,
    pub direction: TaskType,
    pub effect_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantConfig {
    pub config: TraceConfig,
    pub n_recall: usize,
    pub n_reasoning: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default)]
    pub planted_layers: Vec<LayerPlant>,
    #[serde(default)]
    pub planted_heads: Vec<HeadPlant>,
    #[serde(default)]
    pub planted_neurons: Vec<NeuronPlant>,
    pub noise_seed: u64,
}

fn default_seq_len() -> usize {
    DEFAULT_SEQ_LEN
}

fn expected_label(direction: TaskType) -> SpecializationLabel {
    match direction {
        TaskType::Recall => SpecializationLabel::RecallSpecialized,
        TaskType::Reasoning => SpecializationLabel::ReasoningSpecialized,
    }
}

fn opposite(t: TaskType) -> TaskType {
    match t {
        TaskType::Recall => TaskType::Reasoning,
        TaskType::Reasoning => TaskType::Recall,
    }
}

impl PlantConfig {
    /// No plants.
    pub fn null(config: TraceConfig, n_recall: usize, n_reasoning: usize, noise_seed: u64) -> Self {
        Self {
            config,
            n_recall,
            n_reasoning,
            seq_len: DEFAULT_SEQ_LEN,
            planted_layers: Vec::new(),
            planted_heads: Vec::new(),
            planted_neurons: Vec::new(),
            noise_seed,
        }
    }

    /// 28 layers of 28 heads, 64 hidden and 512 MLP units, 30 prompts per
    /// task, with d = 3.0 plants: 4 layers, 40 heads and 200 neurons.
    ///
    /// Heads and neurons are planted in opposite-direction pairs within a
    /// layer so that the layer-level averages they feed stay balanced, and
    /// they avoid the planted layers.
    pub fn benchmark(noise_seed: u64) -> Self {
        let config = TraceConfig::new(28, 28, 64, 512, "synthetic-benchmark");
        let mut pc = Self::null(config, 30, 30, noise_seed);
        let d = 3.0;
        let layer_specs: [(usize, TaskType, &[usize]); 4] = [
            (0, TaskType::Recall, &[0, 1]),
            (7, TaskType::Reasoning, &[4, 5]),
            (14, TaskType::Recall, &[0, 1, 4, 5]),
            (21, TaskType::Reasoning, &[1, 5]),
        ];
        for (layer, direction, features) in layer_specs {
            pc.planted_layers.push(LayerPlant {
                layer,
                direction,
                effect_d: d,
                features: features.to_vec(),
            });
        }
        let free: Vec<usize> = (0..28).filter(|l| l % 7 != 0).collect();
        for (i, &layer) in free.iter().take(10).enumerate() {
            for pair in 0..2 {
                let head = pair * 14 + (layer % 7);
                let direction = if (i + pair) % 2 == 0 { TaskType::Recall } else { TaskType::Reasoning };
                let metric_count = 3 + (i + pair) % 3;
                pc.planted_heads.push(HeadPlant { layer, head, direction, effect_d: d, metric_count });
                pc.planted_heads.push(HeadPlant {
                    layer,
                    head: head + 7,
                    direction: opposite(direction),
                    effect_d: d,
                    metric_count,
                });
            }
        }
        for pair in 0..100 {
            let layer = free[pair % free.len()];
            let slot = pair / free.len();
            let neuron = 17 + slot * 40;
            let direction = if pair % 2 == 0 { TaskType::Recall } else { TaskType::Reasoning };
            pc.planted_neurons.push(NeuronPlant { layer, neuron, direction, effect_d: d });
            pc.planted_neurons.push(NeuronPlant {
                layer,
                neuron: neuron + 20,
                direction: opposite(direction),
                effect_d: d,
            });
        }
        pc
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidConfig(msg));
        let c = &self.config;
        if c.num_layers == 0 || c.heads_per_layer == 0 || c.hidden_dim == 0 || c.mlp_dim == 0 {
            return bad(format!("all dimensions must be positive: {c:?}"));
        }
        if self.n_recall == 0 || self.n_reasoning == 0 {
            return bad("both task groups need at least one prompt".into());
        }
        if self.seq_len == 0 {
            return bad("seq_len must be positive".into());
        }
        let check_d = |unit: UnitId, d: f64| -> Result<(), SynthError> {
            if d > 0.0 && d.is_finite() {
                Ok(())
            } else {
                Err(SynthError::InvalidConfig(format!("{unit}: effect_d must be positive, got {d}")))
            }
        };
        let check_layer = |layer: usize| -> Result<(), SynthError> {
            if layer < c.num_layers {
                Ok(())
            } else {
                Err(SynthError::InvalidConfig(format!(
                    "layer {layer} out of range (num_layers {})",
                    c.num_layers
                )))
            }
        };

        let mut seen = HashSet::new();
        for p in &self.planted_layers {
            check_layer(p.layer)?;
            let unit = UnitId::Layer { layer: p.layer };
            check_d(unit, p.effect_d)?;
            if !seen.insert(unit) {
                return bad(format!("{unit} planted twice"));
            }
            if p.features.is_empty() {
                return bad(format!("{unit}: no features"));
            }
            let mut fs = HashSet::new();
            for &f in &p.features {
                if !fs.insert(f) {
                    return bad(format!("{unit}: feature {f} listed twice"));
                }
                if !PLANTABLE_LAYER_FEATURES.contains(&f) {
                    return Err(SynthError::Infeasible {
                        unit,
                        reason: format!(
                            "feature {f} cannot be planted; allowed features are {PLANTABLE_LAYER_FEATURES:?}"
                        ),
                    });
                }
            }
        }
        for p in &self.planted_heads {
            check_layer(p.layer)?;
            let unit = UnitId::Head { layer: p.layer, head: p.head };
            if p.head >= c.heads_per_layer {
                return bad(format!("{unit}: head out of range (heads_per_layer {})", c.heads_per_layer));
            }
            check_d(unit, p.effect_d)?;
            if !seen.insert(unit) {
                return bad(format!("{unit} planted twice"));
            }
            if p.metric_count == 0 || p.metric_count > HEAD_METRIC_COUNT {
                return bad(format!("{unit}: metric_count must be 1..={HEAD_METRIC_COUNT}"));
            }
            if self.seq_len < 2 {
                return Err(SynthError::Infeasible {
                    unit,
                    reason: "attention over a single position cannot change".into(),
                });
            }
        }
        for p in &self.planted_neurons {
            check_layer(p.layer)?;
            let unit = UnitId::Neuron { layer: p.layer, neuron: p.neuron };
            if p.neuron >= c.mlp_dim {
                return bad(format!("{unit}: neuron out of range (mlp_dim {})", c.mlp_dim));
            }
            check_d(unit, p.effect_d)?;
            if !seen.insert(unit) {
                return bad(format!("{unit} planted twice"));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let pc: PlantConfig = serde_json::from_str(&text).map_err(|source| SynthError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        pc.validate()?;
        Ok(pc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedUnit {
    pub unit: UnitId,
    pub expected: SpecializationLabel,
    pub effect_d: f64,
}

/// Expected labels of planted units; every other unit should come out
/// non-specialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedGroundTruth {
    pub config: TraceConfig,
    pub n_recall: usize,
    pub n_reasoning: usize,
    pub planted: Vec<PlantedUnit>,
}

impl PlantedGroundTruth {
    pub fn expected(&self, unit: &UnitId) -> SpecializationLabel {
        self.planted
            .iter()
            .find(|p| &p.unit == unit)
            .map(|p| p.expected)
            .unwrap_or(SpecializationLabel::NonSpecialized)
    }

    pub fn planted_of_kind(&self, example: &UnitId) -> HashMap<UnitId, SpecializationLabel> {
        self.planted
            .iter()
            .filter(|p| p.unit.same_kind(example))
            .map(|p| (p.unit, p.expected))
            .collect()
    }
}

struct LayerTransform {
    favored: TaskType,
    hidden: (f64, f64),
    mlp: (f64, f64),
}

struct HeadTransform {
    favored: TaskType,
    lambda: f64,
}

fn resolve_layers(pc: &PlantConfig) -> Result<HashMap<usize, LayerTransform>, SynthError> {
    let mut out = HashMap::new();
    for p in &pc.planted_layers {
        let unit = UnitId::Layer { layer: p.layer };
        let target = |f: usize| if p.features.contains(&f) { p.effect_d } else { 0.0 };
        let infeasible = |what: &str| SynthError::Infeasible {
            unit,
            reason: format!("d = {} on {what} is out of reach", p.effect_d),
        };
        let hidden = calibrate::hidden_transform(pc.config.hidden_dim, target(0), target(1))
            .ok_or_else(|| infeasible("hidden-state features"))?;
        let mlp = calibrate::mlp_transform(pc.config.mlp_dim, target(4), target(5))
            .ok_or_else(|| infeasible("MLP features"))?;
        out.insert(p.layer, LayerTransform { favored: p.direction, hidden, mlp });
    }
    Ok(out)
}

fn resolve_heads(pc: &PlantConfig) -> Result<HashMap<(usize, usize), HeadTransform>, SynthError> {
    if pc.planted_heads.is_empty() {
        return Ok(HashMap::new());
    }
    let cal = calibrate::HeadCalibrator::new(pc.seq_len);
    let mut cache: HashMap<(u64, usize), f64> = HashMap::new();
    let mut out = HashMap::new();
    for p in &pc.planted_heads {
        let key = (p.effect_d.to_bits(), p.metric_count);
        let lambda = match cache.get(&key) {
            Some(&l) => l,
            None => {
                let l = cal.mixing_weight(p.effect_d, p.metric_count).ok_or_else(|| {
                    SynthError::Infeasible {
                        unit: UnitId::Head { layer: p.layer, head: p.head },
                        reason: format!(
                            "d = {} on {} metrics exceeds what sharpening rows of length {} can reach",
                            p.effect_d, p.metric_count, pc.seq_len
                        ),
                    }
                })?;
                cache.insert(key, l);
                l
            }
        };
        out.insert((p.layer, p.head), HeadTransform { favored: p.direction, lambda });
    }
    Ok(out)
}

/// Draws a trace set from the baseline distributions and applies the plants.
///
/// Hidden and MLP values are standard normal and attention rows Dirichlet(1).
/// A planted neuron gains `effect_d` for its favored group. Planted layers
/// and heads transform the favored group so the targeted derived features
/// have population d equal to `effect_d`. Output depends only on `pc`.
pub fn generate_synthetic(pc: &PlantConfig) -> Result<(TraceSet, PlantedGroundTruth), SynthError> {
    pc.validate()?;
    let cfg = &pc.config;
    let layers = resolve_layers(pc)?;
    let heads = resolve_heads(pc)?;
    let mut neurons: HashMap<(usize, usize), (TaskType, f64)> = HashMap::new();
    for p in &pc.planted_neurons {
        neurons.insert((p.layer, p.neuron), (p.direction, p.effect_d));
    }
    let mut neuron_plants: Vec<Vec<(usize, TaskType, f64)>> = vec![Vec::new(); cfg.num_layers];
    for (&(layer, neuron), &(dir, d)) in &neurons {
        neuron_plants[layer].push((neuron, dir, d));
    }
    for v in &mut neuron_plants {
        v.sort_by_key(|e| e.0);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(pc.noise_seed);
    let tasks = std::iter::repeat_n(TaskType::Recall, pc.n_recall)
        .chain(std::iter::repeat_n(TaskType::Reasoning, pc.n_reasoning));
    let mut prompts = Vec::with_capacity(pc.n_recall + pc.n_reasoning);
    let mut counters = [0usize; 2];
    for task in tasks {
        let idx = counters[task.code() as usize];
        counters[task.code() as usize] += 1;
        let mut hidden: Vec<f32> = Vec::with_capacity(cfg.num_layers * cfg.hidden_dim);
        let mut mlp: Vec<f32> = Vec::with_capacity(cfg.num_layers * cfg.mlp_dim);
        let mut attention: Vec<f32> = Vec::with_capacity(cfg.head_count() * pc.seq_len);
        for layer in 0..cfg.num_layers {
            let lt = layers.get(&layer).filter(|t| t.favored == task);

            let (s, mu) = lt.map_or((1.0, 0.0), |t| t.hidden);
            hidden.extend((0..cfg.hidden_dim).map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                (s * x + mu) as f32
            }));

            let mut row: Vec<f64> = (0..cfg.mlp_dim).map(|_| rng.sample(StandardNormal)).collect();
            for &(neuron, dir, d) in &neuron_plants[layer] {
                if dir == task {
                    row[neuron] += d;
                }
            }
            let (s, delta) = lt.map_or((1.0, 0.0), |t| t.mlp);
            mlp.extend(row.iter().map(|&x| (s * (x - delta)) as f32));

            for head in 0..cfg.heads_per_layer {
                let mut w = calibrate::dirichlet_row(&mut rng, pc.seq_len);
                if let Some(ht) = heads.get(&(layer, head)).filter(|t| t.favored == task) {
                    calibrate::sharpen(&mut w, ht.lambda);
                }
                attention.extend(w.iter().map(|&x| x as f32));
            }
        }
        prompts.push(PromptTrace {
            prompt_id: format!("{}-{:03}", task.as_str(), idx),
            task_type: task,
            seq_len: pc.seq_len,
            hidden_states: hidden,
            mlp_activations: mlp,
            attention,
        });
    }

    let mut planted: Vec<PlantedUnit> = pc
        .planted_layers
        .iter()
        .map(|p| (UnitId::Layer { layer: p.layer }, p.direction, p.effect_d))
        .chain(pc.planted_heads.iter().map(|p| {
            (UnitId::Head { layer: p.layer, head: p.head }, p.direction, p.effect_d)
        }))
        .chain(pc.planted_neurons.iter().map(|p| {
            (UnitId::Neuron { layer: p.layer, neuron: p.neuron }, p.direction, p.effect_d)
        }))
        .map(|(unit, dir, effect_d)| PlantedUnit {
            unit,
            expected: expected_label(dir),
            effect_d,
        })
        .collect();
    planted.sort_by_key(|p| p.unit);

    Ok((
        TraceSet::new(cfg.clone(), prompts),
        PlantedGroundTruth {
            config: cfg.clone(),
            n_recall: pc.n_recall,
            n_reasoning: pc.n_reasoning,
            planted,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::validate_trace_set;

    fn small() -> PlantConfig {
        PlantConfig::null(TraceConfig::new(3, 4, 8, 16, "tiny"), 5, 5, 11)
    }

    #[test]
    fn deterministic_and_valid() {
        let pc = PlantConfig::benchmark(3);
        let (a, gt) = generate_synthetic(&pc).unwrap();
        let (b, _) = generate_synthetic(&pc).unwrap();
        assert_eq!(a, b);
        assert!(validate_trace_set(&a).ok);
        assert_eq!(a.prompts.len(), 60);
        assert_eq!(gt.planted.len(), 4 + 40 + 200);
        let (c, _) = generate_synthetic(&PlantConfig::benchmark(4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_plants() {
        let mut pc = small();
        pc.planted_neurons.push(NeuronPlant { layer: 3, neuron: 0, direction: TaskType::Recall, effect_d: 1.0 });
        assert!(matches!(pc.validate(), Err(SynthError::InvalidConfig(_))));

        let mut pc = small();
        let plant = NeuronPlant { layer: 1, neuron: 2, direction: TaskType::Recall, effect_d: 1.0 };
        pc.planted_neurons = vec![plant.clone(), plant];
        assert!(pc.validate().is_err());

        let mut pc = small();
        pc.planted_heads.push(HeadPlant { layer: 0, head: 0, direction: TaskType::Recall, effect_d: -1.0, metric_count: 3 });
        assert!(pc.validate().is_err());

        let mut pc = small();
        pc.planted_layers.push(LayerPlant { layer: 0, direction: TaskType::Recall, effect_d: 1.0, features: vec![2] });
        assert!(matches!(pc.validate(), Err(SynthError::Infeasible { .. })));
    }

    #[test]
    fn unreachable_head_effect_is_infeasible() {
        let mut pc = small();
        pc.planted_heads.push(HeadPlant { layer: 0, head: 1, direction: TaskType::Recall, effect_d: 500.0, metric_count: 5 });
        assert!(matches!(generate_synthetic(&pc), Err(SynthError::Infeasible { .. })));
    }

    #[test]
    fn plant_config_json_defaults() {
        let json = r#"{"config":{"num_layers":2,"heads_per_layer":2,"hidden_dim":4,"mlp_dim":4,"model_id":"m"},
                      "n_recall":3,"n_reasoning":3,"noise_seed":9}"#;
        let pc: PlantConfig = serde_json::from_str(json).unwrap();
        assert_eq!(pc.seq_len, DEFAULT_SEQ_LEN);
        assert!(pc.planted_neurons.is_empty());
        pc.validate().unwrap();
    }
}
