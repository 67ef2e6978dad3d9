//! Stratified k-fold consistency of unit labels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::h3::neuron_test;
use super::{
    run_h1, run_h2, run_h3, H1Config, H2Config, H3Config, PipelineError, SpecializationLabel,
    UnitId,
};
use crate::features::FeatureMatrices;
use crate::trace::TaskType;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "pipeline", rename_all = "snake_case")]
pub enum CvPipeline {
    H1(H1Config),
    H2(H2Config),
    H3TopN(H3Config),
}

impl CvPipeline {
    pub fn name(&self) -> &'static str {
        match self {
            CvPipeline::H1(_) => "h1",
            CvPipeline::H2(_) => "h2",
            CvPipeline::H3TopN(_) => "h3_top_n",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub k: usize,
    pub pipeline: CvPipeline,
    pub top_n: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl CvConfig {
    pub fn new(pipeline: CvPipeline, seed: u64) -> Self {
        Self {
            k: 5,
            pipeline,
            top_n: 50,
            threshold: 0.8,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitConsistency {
    pub unit: UnitId,
    /// Label on the full data set.
    pub full_label: SpecializationLabel,
    pub fold_labels: Vec<SpecializationLabel>,
    pub modal_label: SpecializationLabel,
    pub consistency: f64,
    pub consistent: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub config: CvConfig,
    pub fold_count: usize,
    pub units: Vec<UnitConsistency>,
    pub consistent_units: Vec<UnitId>,
}

impl ConsistencyReport {
    pub fn consistent_fraction(&self) -> f64 {
        if self.units.is_empty() {
            return 0.0;
        }
        self.consistent_units.len() as f64 / self.units.len() as f64
    }
}

/// Splits prompt indices into `k` folds with each task group shuffled
/// (seeded) and dealt round-robin, so folds are balanced by task.
pub fn stratified_folds(labels: &[TaskType], k: usize, seed: u64) -> Result<Vec<Vec<usize>>, PipelineError> {
    let mut groups: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, t) in labels.iter().enumerate() {
        groups[t.code() as usize].push(i);
    }
    let smallest = groups[0].len().min(groups[1].len());
    if k < 2 || k > smallest {
        return Err(PipelineError::FoldCount { k, group_size: smallest });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![Vec::new(); k];
    for group in &mut groups {
        group.shuffle(&mut rng);
        for (i, &p) in group.iter().enumerate() {
            folds[i % k].push(p);
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Most frequent label; ties go to the earlier variant.
fn modal_label(labels: &[SpecializationLabel]) -> SpecializationLabel {
    let mut counts = [0usize; 4];
    for l in labels {
        counts[l.index()] += 1;
    }
    let best = *counts.iter().max().unwrap_or(&0);
    SpecializationLabel::ALL[counts.iter().position(|&c| c == best).unwrap_or(3)]
}

/// Labels for `units` on one data set.
fn fold_labels(
    fm: &FeatureMatrices,
    pipeline: &CvPipeline,
    units: &[UnitId],
) -> Result<Vec<SpecializationLabel>, PipelineError> {
    match pipeline {
        CvPipeline::H1(c) => {
            let r = run_h1(fm, c)?;
            Ok(r.layers.iter().map(|u| u.label).collect())
        }
        CvPipeline::H2(c) => {
            let r = run_h2(fm, c)?;
            // A head that becomes invariant inside a fold cannot be specialized.
            Ok(units
                .iter()
                .map(|u| r.label_of(u).unwrap_or(SpecializationLabel::NonSpecialized))
                .collect())
        }
        CvPipeline::H3TopN(_) => units
            .iter()
            .map(|u| match *u {
                UnitId::Neuron { layer, neuron } => {
                    let t = neuron_test(fm, layer, neuron)?;
                    Ok(if t.degenerate {
                        SpecializationLabel::NonSpecialized
                    } else {
                        SpecializationLabel::from_direction(t.effect_size_d)
                    })
                }
                _ => unreachable!("H3 tracks neurons only"),
            })
            .collect(),
    }
}

/// Re-runs a pipeline on each k-1 fold complement and scores how often each
/// unit reproduces its modal label.
///
/// H1 tracks every layer and H2 every analyzed head. For H3 the `top_n` most
/// specific neurons of the full run are tracked, and a fold's label is the
/// neuron's task preference there: the sign of its activation effect size.
pub fn cross_validate(fm: &FeatureMatrices, config: &CvConfig) -> Result<ConsistencyReport, PipelineError> {
    if !(config.threshold > 0.0 && config.threshold <= 1.0) {
        return Err(PipelineError::InvalidConfig(format!(
            "consistency threshold {} outside (0, 1]",
            config.threshold
        )));
    }
    let folds = stratified_folds(&fm.task_labels, config.k, config.seed)?;

    let (units, full): (Vec<UnitId>, Vec<SpecializationLabel>) = match &config.pipeline {
        CvPipeline::H1(c) => run_h1(fm, c)?.layers.iter().map(|u| (u.unit, u.label)).unzip(),
        CvPipeline::H2(c) => run_h2(fm, c)?.heads.iter().map(|u| (u.unit, u.label)).unzip(),
        CvPipeline::H3TopN(c) => run_h3(fm, c)?
            .ranked()
            .take(config.top_n)
            .map(|s| (s.unit, s.label))
            .unzip(),
    };

    let n = fm.num_prompts();
    let mut per_fold = Vec::with_capacity(folds.len());
    for held_out in &folds {
        let keep: Vec<usize> = (0..n).filter(|p| held_out.binary_search(p).is_err()).collect();
        per_fold.push(fold_labels(&fm.subset(&keep), &config.pipeline, &units)?);
    }

    let k = folds.len();
    let mut out = Vec::with_capacity(units.len());
    for (i, (&unit, &full_label)) in units.iter().zip(&full).enumerate() {
        let fold_labels: Vec<SpecializationLabel> = per_fold.iter().map(|f| f[i]).collect();
        let modal = modal_label(&fold_labels);
        let hits = fold_labels.iter().filter(|&&l| l == modal).count();
        let consistency = hits as f64 / k as f64;
        out.push(UnitConsistency {
            unit,
            full_label,
            fold_labels,
            modal_label: modal,
            consistency,
            consistent: consistency >= config.threshold,
        });
    }
    let consistent_units = out.iter().filter(|u| u.consistent).map(|u| u.unit).collect();
    Ok(ConsistencyReport {
        config: *config,
        fold_count: k,
        units: out,
        consistent_units,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use SpecializationLabel::*;

    #[test]
    fn modal_and_ties() {
        assert_eq!(modal_label(&[RecallSpecialized; 5]), RecallSpecialized);
        let split = [
            RecallSpecialized,
            ReasoningSpecialized,
            RecallSpecialized,
            ReasoningSpecialized,
            RecallSpecialized,
        ];
        assert_eq!(modal_label(&split), RecallSpecialized);
        assert_eq!(modal_label(&[NonSpecialized, Mixed]), Mixed);
    }

    #[test]
    fn folds_are_stratified_and_seeded() {
        let labels: Vec<TaskType> = (0..60)
            .map(|i| if i % 2 == 0 { TaskType::Recall } else { TaskType::Reasoning })
            .collect();
        let folds = stratified_folds(&labels, 5, 7).unwrap();
        assert_eq!(folds, stratified_folds(&labels, 5, 7).unwrap());
        assert_ne!(folds, stratified_folds(&labels, 5, 8).unwrap());
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..60).collect::<Vec<_>>());
        for f in &folds {
            let r = f.iter().filter(|&&p| labels[p] == TaskType::Recall).count();
            assert_eq!((r, f.len() - r), (6, 6));
        }
    }

    #[test]
    fn fold_count_bounds() {
        let labels = [TaskType::Recall, TaskType::Reasoning, TaskType::Recall, TaskType::Reasoning];
        assert!(stratified_folds(&labels, 1, 0).is_err());
        assert!(stratified_folds(&labels, 3, 0).is_err());
        assert_eq!(stratified_folds(&labels, 2, 0).unwrap().len(), 2);
    }
}
