mod common;

use circuitscope::features::{FeatureMatrices, HEAD_METRIC_COUNT, LAYER_FEATURE_COUNT};
use circuitscope::pipelines::{
    classify_unit, cross_validate, firing_probabilities, patching_delta, rank_patching, read_patch_records,
    run_h1, run_h2, run_h3, stratified_folds, write_patch_records, CvConfig, CvPipeline, H1Config, H2Config,
    H3Config, PatchRecord, PipelineError, SpecializationLabel, UnitId, HEAD_METRIC_POLARITY,
};
use circuitscope::stats::TestResult;
use circuitscope::trace::{TaskType, TraceConfig};
use common::{gaussian_matrices, shift_neuron};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const N: usize = 30;

fn paper_shape(mlp_dim: usize) -> TraceConfig {
    TraceConfig::new(28, 28, 8, mlp_dim, "synthetic")
}

fn shift_layer_feature(fm: &mut FeatureMatrices, layer: usize, feature: usize, shift: f64) {
    let l = fm.config.num_layers;
    for p in 0..N {
        fm.layer_features[(p * l + layer) * LAYER_FEATURE_COUNT + feature] += shift;
    }
}

fn shift_head_metric(fm: &mut FeatureMatrices, layer: usize, head: usize, metric: usize, shift: f64) {
    let (l, h) = (fm.config.num_layers, fm.config.heads_per_layer);
    for p in 0..N {
        fm.head_metrics[((p * l + layer) * h + head) * HEAD_METRIC_COUNT + metric] += shift;
    }
}

fn result(d: f64) -> TestResult {
    TestResult {
        u_statistic: 0.0,
        p_value: 0.0,
        effect_size_d: d,
        n_recall: N,
        n_reasoning: N,
        degenerate: false,
    }
}

#[test]
fn classification_examples() {
    use SpecializationLabel::*;
    let three = [result(1.2), result(0.8), result(2.0)];
    assert_eq!(classify_unit(&three, &[false; 3], 0.5, 2), NonSpecialized);
    assert_eq!(classify_unit(&three, &[true; 3], 0.5, 2), RecallSpecialized);
    assert_eq!(classify_unit(&[result(1.2), result(-1.5)], &[true; 2], 0.5, 2), Mixed);
    assert_eq!(classify_unit(&[result(-1.2), result(-1.5)], &[true; 2], 0.5, 2), ReasoningSpecialized);
    // Only |d| above the threshold counts toward the quorum.
    assert_eq!(classify_unit(&[result(1.2), result(0.4)], &[true; 2], 0.5, 2), NonSpecialized);
}

#[test]
fn h1_finds_planted_layer_and_tests_full_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut fm = gaussian_matrices(&mut rng, paper_shape(4), N, N);
    for f in 1..=3 {
        shift_layer_feature(&mut fm, 5, f, 2.0);
    }
    let r = run_h1(&fm, &H1Config::default()).unwrap();
    assert_eq!(r.family_size, 168);
    assert_eq!(r.layers.iter().map(|u| u.per_feature.len()).sum::<usize>(), 168);
    assert_eq!(r.layers[5].label, SpecializationLabel::RecallSpecialized);
    assert_eq!(r.counts.total(), 28);
}

#[test]
fn h1_null_runs_rarely_specialize() {
    let mut false_layers = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let fm = gaussian_matrices(&mut rng, TraceConfig::new(28, 1, 1, 1, "null"), N, N);
        let r = run_h1(&fm, &H1Config::default()).unwrap();
        let specialized = r.counts.specialized();
        assert!(specialized <= 1, "seed {seed}: {specialized} false layers");
        false_layers += specialized;
    }
    let rate = false_layers as f64 / (100.0 * 28.0);
    assert!(rate <= 0.01, "false specialization rate {rate}");
}

#[test]
fn h1_insufficient_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let fm = gaussian_matrices(&mut rng, TraceConfig::new(2, 1, 1, 1, "m"), 1, 5);
    assert!(matches!(
        run_h1(&fm, &H1Config::default()),
        Err(PipelineError::InsufficientSamples { recall: 1, reasoning: 5, .. })
    ));
}

#[test]
fn h2_planted_head_and_excluded_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut fm = gaussian_matrices(&mut rng, paper_shape(4), N, N);
    // Sharper attention for recall on four metrics: lower entropy and
    // spread, higher max weight and focus.
    for m in 0..4 {
        shift_head_metric(&mut fm, 2, 5, m, 3.0 * HEAD_METRIC_POLARITY[m]);
    }
    let (l, h) = (fm.config.num_layers, fm.config.heads_per_layer);
    for p in 0..2 * N {
        for m in 0..HEAD_METRIC_COUNT {
            fm.head_metrics[((p * l + 7) * h + 3) * HEAD_METRIC_COUNT + m] = 0.25;
        }
    }
    let r = run_h2(&fm, &H2Config::default()).unwrap();
    let planted = UnitId::Head { layer: 2, head: 5 };
    assert_eq!(r.label_of(&planted), Some(SpecializationLabel::RecallSpecialized));
    // Raw entropy effect keeps its sign.
    let unit = r.heads.iter().find(|u| u.unit == planted).unwrap();
    assert!(unit.per_feature[0].effect_size_d < -1.0);

    let constant = UnitId::Head { layer: 7, head: 3 };
    assert_eq!(r.excluded, vec![constant]);
    assert_eq!(r.label_of(&constant), None);
    assert_eq!(r.heads.len(), 783);
    assert_eq!(r.family_size, 783 * 5);
    assert_eq!(r.top_heads(15)[0].unit, planted);
}

#[test]
fn firing_probability_examples() {
    let labels: Vec<TaskType> = (0..60).map(|i| if i < 30 { TaskType::Recall } else { TaskType::Reasoning }).collect();
    assert_eq!(firing_probabilities(&[true; 60], &labels).unwrap(), (1.0, 1.0));
    let recall_only: Vec<bool> = (0..60).map(|i| i < 30).collect();
    assert_eq!(firing_probabilities(&recall_only, &labels).unwrap(), (1.0, 0.0));
    let mixed: Vec<bool> = (0..60).map(|i| i < 15 || (30..36).contains(&i)).collect();
    let (a, b) = firing_probabilities(&mixed, &labels).unwrap();
    assert_eq!((a, b), (0.5, 0.2));
    assert!(((a - b).abs() - 0.3).abs() < 1e-15);
    assert!(firing_probabilities(&[true; 3], &[TaskType::Recall; 3]).is_err());
}

#[test]
fn h3_near_binary_neuron_ranks_first() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    let mut fm = gaussian_matrices(&mut rng, TraceConfig::new(3, 1, 1, 50, "m"), N, N);
    let target = 50 + 17;
    let nn = fm.config.neuron_count();
    for p in 0..2 * N {
        let i = p * nn + target;
        fm.neuron_activations[i] = if p < N { 1.0 + rng.random::<f32>() } else { -1.0 - rng.random::<f32>() };
        fm.firing[i] = p < N;
    }
    // Identical values in both groups.
    let twin = 2 * 50 + 3;
    for p in 0..N {
        let v = fm.neuron_activations[p * nn + twin];
        fm.neuron_activations[(p + N) * nn + twin] = v;
        fm.firing[(p + N) * nn + twin] = v > 0.0;
    }
    let r = run_h3(&fm, &H3Config::default()).unwrap();
    let top = r.top(1)[0];
    assert_eq!(top.unit, UnitId::Neuron { layer: 1, neuron: 17 });
    assert_eq!(top.specificity, 1.0);
    assert_eq!((top.p_fire_recall, top.p_fire_reasoning), (1.0, 0.0));
    assert_eq!(top.label, SpecializationLabel::RecallSpecialized);
    let same = r.neurons.iter().find(|s| s.unit == UnitId::Neuron { layer: 2, neuron: 3 }).unwrap();
    assert!(!same.task_specific);
    assert_eq!(same.test.effect_size_d, 0.0);
    assert_eq!(r.per_layer_counts, vec![0, 1, 0]);
}

fn planted_neurons(seed: u64, layers: usize, mlp_dim: usize, planted: usize) -> (FeatureMatrices, Vec<(usize, bool)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fm = gaussian_matrices(&mut rng, TraceConfig::new(layers, 1, 1, mlp_dim, "m"), N, N);
    let nn = layers * mlp_dim;
    let stride = nn / planted;
    let mut truth = Vec::new();
    for k in 0..planted {
        let j = k * stride + rng.random_range(0..stride);
        let recall_higher = k % 2 == 0;
        let rows = if recall_higher { 0..N } else { N..2 * N };
        shift_neuron(&mut fm, rows, j, 3.0);
        truth.push((j, recall_higher));
    }
    (fm, truth)
}

#[test]
fn h3_recovers_planted_neurons() {
    let (fm, truth) = planted_neurons(35, 10, 1000, 200);
    let r = run_h3(&fm, &H3Config::default()).unwrap();
    assert_eq!(r.family_size + r.excluded.len(), 10_000);
    let labels = r.labels();
    let mut hits = 0;
    for &(j, recall_higher) in &truth {
        let unit = UnitId::Neuron { layer: j / 1000, neuron: j % 1000 };
        let want = if recall_higher { SpecializationLabel::RecallSpecialized } else { SpecializationLabel::ReasoningSpecialized };
        hits += (labels.get(&unit) == Some(&want)) as usize;
    }
    let precision = hits as f64 / labels.len().max(1) as f64;
    let recall = hits as f64 / truth.len() as f64;
    assert!(precision >= 0.99, "precision {precision}");
    assert!(recall >= 0.9, "recall {recall}");
    assert_eq!(r.per_layer_counts.iter().sum::<usize>(), labels.len());
}

#[test]
fn stricter_thresholds_never_add_units() {
    let (mut fm, _) = planted_neurons(36, 4, 500, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for layer in [3, 4] {
        for f in 0..LAYER_FEATURE_COUNT {
            shift_layer_feature(&mut fm, layer, f, rng.random_range(0.0..1.5));
        }
    }
    for head in 0..4 {
        for m in 0..HEAD_METRIC_COUNT {
            shift_head_metric(&mut fm, 0, 0, m, rng.random_range(-2.0..2.0) * head as f64);
        }
    }
    let alphas = [0.05, 0.01, 1e-3, 1e-4, 1e-6];
    let d_mins = [0.0, 0.5, 1.0, 2.0];
    let mut h1 = Vec::new();
    let mut h3 = Vec::new();
    for &alpha in &alphas {
        for &d_min in &d_mins {
            h1.push(run_h1(&fm, &H1Config { alpha, d_min, min_features: 2 }).unwrap().counts.specialized());
            h3.push(run_h3(&fm, &H3Config { alpha, d_min }).unwrap().counts.specialized());
        }
    }
    for counts in [h1, h3] {
        for a in 0..alphas.len() {
            for d in 0..d_mins.len() {
                let c = counts[a * d_mins.len() + d];
                if d + 1 < d_mins.len() {
                    assert!(counts[a * d_mins.len() + d + 1] <= c);
                }
                if a + 1 < alphas.len() {
                    assert!(counts[(a + 1) * d_mins.len() + d] <= c);
                }
            }
        }
    }
}

#[test]
fn h3_family_skips_degenerate_neurons() {
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    let mut fm = gaussian_matrices(&mut rng, TraceConfig::new(2, 1, 1, 10, "m"), N, N);
    let nn = fm.config.neuron_count();
    for p in 0..2 * N {
        fm.neuron_activations[p * nn + 4] = 0.0;
        fm.firing[p * nn + 4] = false;
    }
    let r = run_h3(&fm, &H3Config::default()).unwrap();
    assert_eq!(r.family_size, 19);
    assert_eq!(r.excluded, vec![UnitId::Neuron { layer: 0, neuron: 4 }]);
    assert_eq!(r.counts.total(), 19);
}

#[test]
fn reports_do_not_depend_on_thread_count() {
    let (fm, _) = planted_neurons(39, 6, 3000, 60);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            (
                run_h1(&fm, &H1Config::default()).unwrap(),
                run_h2(&fm, &H2Config::default()).unwrap(),
                run_h3(&fm, &H3Config::default()).unwrap(),
            )
        })
    };
    let one = run(1);
    let many = run(4);
    assert_eq!(one.0, many.0);
    assert_eq!(one.1, many.1);
    assert_eq!(one.2, many.2);
}

#[test]
fn folds_are_stratified_and_seeded() {
    let labels: Vec<TaskType> = (0..60).map(|i| if i % 3 == 0 { TaskType::Reasoning } else { TaskType::Recall }).collect();
    let folds = stratified_folds(&labels, 5, 9).unwrap();
    let mut all: Vec<usize> = folds.concat();
    all.sort_unstable();
    assert_eq!(all, (0..60).collect::<Vec<_>>());
    for f in &folds {
        let reasoning = f.iter().filter(|&&i| labels[i] == TaskType::Reasoning).count();
        assert_eq!((f.len(), reasoning), (12, 4));
    }
    assert_eq!(folds, stratified_folds(&labels, 5, 9).unwrap());
    assert_ne!(folds, stratified_folds(&labels, 5, 10).unwrap());
    assert!(matches!(stratified_folds(&labels, 1, 0), Err(PipelineError::FoldCount { .. })));
    assert!(matches!(stratified_folds(&labels, 21, 0), Err(PipelineError::FoldCount { .. })));
}

#[test]
fn planted_top_fifty_are_consistent_across_folds() {
    let (fm, truth) = planted_neurons(40, 10, 1000, 200);
    let report = cross_validate(&fm, &CvConfig::new(CvPipeline::H3TopN(H3Config::default()), 7)).unwrap();
    assert_eq!(report.fold_count, 5);
    assert_eq!(report.units.len(), 50);
    assert_eq!(report.consistent_fraction(), 1.0);
    let planted: Vec<usize> = truth.iter().map(|t| t.0).collect();
    for u in &report.units {
        let UnitId::Neuron { layer, neuron } = u.unit else { panic!("not a neuron") };
        assert!(planted.contains(&(layer * 1000 + neuron)));
        assert_eq!(u.fold_labels.len(), 5);
        assert_eq!(u.consistency, 1.0);
    }
}

#[test]
fn h1_cv_tracks_every_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut fm = gaussian_matrices(&mut rng, TraceConfig::new(6, 1, 1, 1, "m"), N, N);
    for f in 0..LAYER_FEATURE_COUNT {
        shift_layer_feature(&mut fm, 2, f, -3.0);
    }
    let report = cross_validate(&fm, &CvConfig::new(CvPipeline::H1(H1Config::default()), 3)).unwrap();
    assert_eq!(report.units.len(), 6);
    let layer2 = &report.units[2];
    assert_eq!(layer2.modal_label, SpecializationLabel::ReasoningSpecialized);
    assert!(layer2.consistent);
    for u in &report.units {
        assert!((0.0..=1.0).contains(&u.consistency));
        assert_eq!(u.consistent, u.consistency >= 0.8);
    }
}

fn record(prompt: &str, layer: usize, p_corrupted: f64, p_patched: f64) -> PatchRecord {
    PatchRecord { prompt_id: prompt.into(), layer, p_corrupted, p_patched }
}

#[test]
fn patching_examples() {
    assert_eq!(patching_delta(&record("a", 0, 0.4, 0.4)).unwrap(), 0.0);
    assert!((patching_delta(&record("a", 0, 0.1, 0.9)).unwrap() - 0.8).abs() < 1e-15);
    assert!(matches!(
        patching_delta(&record("a", 3, 0.1, 1.5)),
        Err(PipelineError::InvalidProbability { field: "p_patched", layer: 3, .. })
    ));

    let one = rank_patching(&[record("a", 4, 0.2, 0.3)]).unwrap();
    assert_eq!(one.len(), 1);
    let ranked = rank_patching(&[
        record("a", 0, 0.1, 0.2),
        record("a", 1, 0.0, 0.5),
        record("b", 2, 0.3, 0.8),
        record("b", 0, 0.1, 0.2),
    ])
    .unwrap();
    let order: Vec<usize> = ranked.iter().map(|d| d.layer).collect();
    assert_eq!(order, [1, 2, 0]);
    assert_eq!(ranked[2].records, 2);
    assert!(matches!(rank_patching(&[]), Err(PipelineError::NoRecords)));
}

#[test]
fn patch_records_round_trip_through_jsonl() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("patch.jsonl");
    let records = vec![record("q1", 0, 0.25, 0.5), record("q2", 3, 0.0, 1.0)];
    write_patch_records(&records, &path).unwrap();
    assert_eq!(read_patch_records(&path).unwrap(), records);
}
