//! H3: individual MLP neurons, tested on raw activations and profiled by
//! their firing probabilities.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    task_groups, validate_alpha, validate_d_min, LabelCounts, PipelineError, SpecializationLabel,
    UnitId,
};
use crate::features::FeatureMatrices;
use crate::stats::{bonferroni, GroupComparator, TestResult};
use crate::trace::TaskType;

/// Neurons handed to one worker at a time. Results never depend on it.
const NEURON_CHUNK: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct H3Config {
    pub alpha: f64,
    pub d_min: f64,
}

impl Default for H3Config {
    fn default() -> Self {
        Self {
            alpha: 1e-4,
            d_min: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H3NeuronSummary {
    pub unit: UnitId,
    pub p_fire_recall: f64,
    pub p_fire_reasoning: f64,
    /// `|p_fire_recall - p_fire_reasoning|`
    pub specificity: f64,
    pub test: TestResult,
    pub adjusted_p: f64,
    pub task_specific: bool,
    pub label: SpecializationLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H3Report {
    pub config: H3Config,
    /// Non-degenerate neurons, the Bonferroni family.
    pub family_size: usize,
    /// Neuron summaries in (layer, neuron) order. A compacted report keeps
    /// only the task-specific ones.
    pub neurons: Vec<H3NeuronSummary>,
    /// Indices into `neurons` of task-specific neurons, most specific first.
    pub ranking: Vec<usize>,
    /// Task-specific neurons per layer.
    pub per_layer_counts: Vec<usize>,
    pub counts: LabelCounts,
    /// Neurons with zero pooled variance or too few samples.
    pub excluded: Vec<UnitId>,
}

impl H3Report {
    pub fn ranked(&self) -> impl Iterator<Item = &H3NeuronSummary> {
        self.ranking.iter().map(|&i| &self.neurons[i])
    }

    pub fn top(&self, n: usize) -> Vec<&H3NeuronSummary> {
        self.ranked().take(n).collect()
    }

    /// Drops the non-task-specific summaries; labels stay recoverable
    /// through [`H3Report::labels`].
    pub fn compact(&self) -> H3Report {
        let ranked: Vec<H3NeuronSummary> = self.ranked().cloned().collect();
        let mut order: Vec<usize> = (0..ranked.len()).collect();
        order.sort_by_key(|&i| ranked[i].unit);
        let mut position = vec![0; ranked.len()];
        for (new, &old) in order.iter().enumerate() {
            position[old] = new;
        }
        H3Report {
            config: self.config,
            family_size: self.family_size,
            neurons: order.iter().map(|&i| ranked[i].clone()).collect(),
            ranking: position,
            per_layer_counts: self.per_layer_counts.clone(),
            counts: self.counts,
            excluded: self.excluded.clone(),
        }
    }

    /// Specialized neurons by unit; absent analyzed neurons are non-specialized.
    pub fn labels(&self) -> HashMap<UnitId, SpecializationLabel> {
        self.neurons
            .iter()
            .filter(|s| s.task_specific)
            .map(|s| (s.unit, s.label))
            .collect()
    }
}

/// Group-wise means of a binary firing indicator.
pub fn firing_probabilities(firing: &[bool], labels: &[TaskType]) -> Result<(f64, f64), PipelineError> {
    if firing.len() != labels.len() {
        return Err(PipelineError::InvalidConfig(format!(
            "{} firing indicators for {} labels",
            firing.len(),
            labels.len()
        )));
    }
    let mut fired = [0usize; 2];
    let mut total = [0usize; 2];
    for (&f, &t) in firing.iter().zip(labels) {
        let g = t.code() as usize;
        total[g] += 1;
        fired[g] += f as usize;
    }
    if total[0] == 0 || total[1] == 0 {
        return Err(PipelineError::InsufficientSamples {
            recall: total[0],
            reasoning: total[1],
            needed: 1,
        });
    }
    Ok((
        fired[0] as f64 / total[0] as f64,
        fired[1] as f64 / total[1] as f64,
    ))
}

struct NeuronStats {
    test: TestResult,
    p_fire_recall: f64,
    p_fire_reasoning: f64,
}

struct Scratch {
    cmp: GroupComparator,
    a: Vec<f64>,
    b: Vec<f64>,
}

fn neuron_stats(
    fm: &FeatureMatrices,
    recall: &[usize],
    reasoning: &[usize],
    j: usize,
    s: &mut Scratch,
) -> Result<NeuronStats, PipelineError> {
    let nn = fm.config.neuron_count();
    s.a.clear();
    s.b.clear();
    s.a.extend(recall.iter().map(|&p| fm.neuron_activations[p * nn + j] as f64));
    s.b.extend(reasoning.iter().map(|&p| fm.neuron_activations[p * nn + j] as f64));
    let fires = |group: &[usize]| group.iter().filter(|&&p| fm.firing[p * nn + j]).count() as f64 / group.len() as f64;
    Ok(NeuronStats {
        test: s.cmp.compare(&s.a, &s.b)?,
        p_fire_recall: fires(recall),
        p_fire_reasoning: fires(reasoning),
    })
}

/// Tests one neuron by flat index `layer * mlp_dim + neuron`, without the
/// family correction.
pub fn neuron_test(fm: &FeatureMatrices, layer: usize, neuron: usize) -> Result<TestResult, PipelineError> {
    let (recall, reasoning) = task_groups(fm)?;
    let j = layer * fm.config.mlp_dim + neuron;
    let mut s = Scratch {
        cmp: GroupComparator::new(),
        a: Vec::new(),
        b: Vec::new(),
    };
    Ok(neuron_stats(fm, &recall, &reasoning, j, &mut s)?.test)
}

/// Tests every neuron, applies Bonferroni over the non-degenerate ones and
/// ranks the task-specific neurons by firing specificity.
///
/// Work is split into fixed neuron chunks and reassembled in order, so the
/// report is identical for any thread count.
pub fn run_h3(fm: &FeatureMatrices, config: &H3Config) -> Result<H3Report, PipelineError> {
    validate_alpha(config.alpha)?;
    validate_d_min(config.d_min)?;
    let (recall, reasoning) = task_groups(fm)?;
    let nn = fm.config.neuron_count();
    let mlp_dim = fm.config.mlp_dim;

    let stats: Vec<NeuronStats> = (0..nn)
        .into_par_iter()
        .with_min_len(NEURON_CHUNK)
        .map_init(
            || Scratch {
                cmp: GroupComparator::new(),
                a: Vec::with_capacity(recall.len()),
                b: Vec::with_capacity(reasoning.len()),
            },
            |s, j| neuron_stats(fm, &recall, &reasoning, j, s),
        )
        .collect::<Result<_, _>>()?;

    let unit = |j: usize| UnitId::Neuron {
        layer: j / mlp_dim,
        neuron: j % mlp_dim,
    };
    let analyzed: Vec<usize> = (0..nn).filter(|&j| !stats[j].test.degenerate).collect();
    let excluded: Vec<UnitId> = (0..nn).filter(|&j| stats[j].test.degenerate).map(unit).collect();

    let (rejected, adjusted) = if analyzed.is_empty() {
        (Vec::new(), Vec::new())
    } else {
        let p: Vec<f64> = analyzed.iter().map(|&j| stats[j].test.p_value).collect();
        let c = bonferroni(&p, config.alpha)?;
        (c.rejected, c.adjusted_p.unwrap_or_default())
    };

    let mut per_layer_counts = vec![0; fm.config.num_layers];
    let neurons: Vec<H3NeuronSummary> = analyzed
        .iter()
        .enumerate()
        .map(|(i, &j)| {
            let st = &stats[j];
            let d = st.test.effect_size_d;
            let task_specific = rejected[i] && d.abs() > config.d_min;
            let label = if task_specific {
                per_layer_counts[j / mlp_dim] += 1;
                SpecializationLabel::from_direction(d)
            } else {
                SpecializationLabel::NonSpecialized
            };
            H3NeuronSummary {
                unit: unit(j),
                p_fire_recall: st.p_fire_recall,
                p_fire_reasoning: st.p_fire_reasoning,
                specificity: (st.p_fire_recall - st.p_fire_reasoning).abs(),
                test: st.test.clone(),
                adjusted_p: adjusted[i],
                task_specific,
                label,
            }
        })
        .collect();

    let mut ranking: Vec<usize> = (0..neurons.len()).filter(|&i| neurons[i].task_specific).collect();
    ranking.sort_by(|&x, &y| {
        let (a, b) = (&neurons[x], &neurons[y]);
        b.specificity
            .total_cmp(&a.specificity)
            .then(b.test.effect_size_d.abs().total_cmp(&a.test.effect_size_d.abs()))
            .then(x.cmp(&y))
    });

    Ok(H3Report {
        config: *config,
        family_size: analyzed.len(),
        counts: LabelCounts::from_labels(neurons.iter().map(|s| s.label)),
        neurons,
        ranking,
        per_layer_counts,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn firing_probability_examples() {
        let labels: Vec<TaskType> = (0..60)
            .map(|i| if i < 30 { TaskType::Recall } else { TaskType::Reasoning })
            .collect();
        assert_eq!(firing_probabilities(&[true; 60], &labels).unwrap(), (1.0, 1.0));
        let recall_only: Vec<bool> = (0..60).map(|i| i < 30).collect();
        assert_eq!(firing_probabilities(&recall_only, &labels).unwrap(), (1.0, 0.0));
        let partial: Vec<bool> = (0..60).map(|i| i < 15 || (30..36).contains(&i)).collect();
        let (r, s) = firing_probabilities(&partial, &labels).unwrap();
        assert_eq!((r, s), (0.5, 0.2));
        assert!(((r - s).abs() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn firing_probability_needs_both_groups() {
        let labels = [TaskType::Recall; 4];
        assert!(firing_probabilities(&[true; 4], &labels).is_err());
        assert!(firing_probabilities(&[true; 3], &labels).is_err());
    }
}
