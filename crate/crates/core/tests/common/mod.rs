#![allow(dead_code)]

use circuitscope::trace::{PromptTrace, TaskType, TraceConfig, TraceSet};
use rand::Rng;

/// Normalized attention row of positive weights.
pub fn random_row<R: Rng>(rng: &mut R, len: usize) -> Vec<f32> {
    let raw: Vec<f64> = (0..len).map(|_| rng.random::<f64>() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| (w / total) as f32).collect()
}

/// A small valid trace set with arbitrary dimensions and values.
pub fn random_trace_set<R: Rng>(rng: &mut R) -> TraceSet {
    let cfg = TraceConfig::new(
        rng.random_range(1..4),
        rng.random_range(1..4),
        rng.random_range(1..6),
        rng.random_range(1..6),
        format!("model-{}", rng.random_range(0..1000)),
    );
    let n = rng.random_range(1..5);
    let prompts = (0..n)
        .map(|i| {
            let seq_len = rng.random_range(1..7);
            let mut attention = Vec::new();
            for _ in 0..cfg.head_count() {
                attention.extend(random_row(rng, seq_len));
            }
            PromptTrace {
                prompt_id: format!("p{i}-é{}", rng.random_range(0..100)),
                task_type: if rng.random_bool(0.5) { TaskType::Recall } else { TaskType::Reasoning },
                seq_len,
                hidden_states: (0..cfg.num_layers * cfg.hidden_dim)
                    .map(|_| rng.random_range(-1e3f32..1e3))
                    .collect(),
                mlp_activations: (0..cfg.num_layers * cfg.mlp_dim)
                    .map(|_| rng.random_range(-5f32..5.0))
                    .collect(),
                attention,
            }
        })
        .collect();
    TraceSet::new(cfg, prompts)
}

/// Bitwise equality of every stored float.
pub fn bitwise_equal(a: &TraceSet, b: &TraceSet) -> bool {
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    a.config == b.config
        && a.prompts.len() == b.prompts.len()
        && a.prompts.iter().zip(&b.prompts).all(|(x, y)| {
            x.prompt_id == y.prompt_id
                && x.task_type == y.task_type
                && x.seq_len == y.seq_len
                && bits(&x.hidden_states) == bits(&y.hidden_states)
                && bits(&x.mlp_activations) == bits(&y.mlp_activations)
                && bits(&x.attention) == bits(&y.attention)
        })
}

/// Byte offsets of one prompt's fields inside an encoded file.
pub struct PromptLayout {
    pub id_len: usize,
    pub task: usize,
    pub seq_len: usize,
    pub hidden: usize,
    pub mlp: usize,
    pub attention: usize,
    pub end: usize,
}

pub fn layout(ts: &TraceSet) -> (usize, Vec<PromptLayout>) {
    let cfg = &ts.config;
    let mut pos = 4 + 4 + 5 * 4 + 2 + cfg.model_id.len();
    let header_end = pos;
    let mut out = Vec::new();
    for p in &ts.prompts {
        let id_len = pos;
        let task = id_len + 2 + p.prompt_id.len();
        let seq_len = task + 1;
        let hidden = seq_len + 4;
        let mlp = hidden + 4 * cfg.num_layers * cfg.hidden_dim;
        let attention = mlp + 4 * cfg.num_layers * cfg.mlp_dim;
        let end = attention + 4 * cfg.head_count() * p.seq_len;
        out.push(PromptLayout { id_len, task, seq_len, hidden, mlp, attention, end });
        pos = end;
    }
    (header_end, out)
}

fn put_u32(bytes: &mut [u8], at: usize, v: u32) {
    bytes[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn get_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Single-field corruptions of an encoded trace set, each with a name.
pub fn corruptions<R: Rng>(rng: &mut R, ts: &TraceSet, bytes: &[u8]) -> Vec<(String, Vec<u8>)> {
    let (header_end, prompts) = layout(ts);
    let mut out = Vec::new();
    let mut push = |name: String, f: &dyn Fn(&mut Vec<u8>)| {
        let mut b = bytes.to_vec();
        f(&mut b);
        out.push((name, b));
    };
    push("magic".into(), &|b| b[0] = b'X');
    push("version".into(), &|b| put_u32(b, 4, 2));
    for (i, field) in ["num_layers", "heads_per_layer", "hidden_dim", "mlp_dim", "num_prompts"].iter().enumerate() {
        let at = 8 + 4 * i;
        push(format!("{field} zero"), &|b| put_u32(b, at, 0));
        push(format!("{field} plus one"), &|b| {
            let v = get_u32(b, at) + 1;
            put_u32(b, at, v)
        });
    }
    push("truncated header".into(), &|b| b.truncate(header_end - 1));

    let k = rng.random_range(0..prompts.len());
    let p = &prompts[k];
    let trace = &ts.prompts[k];
    let id_len = trace.prompt_id.len() as u16;
    let (id_at, task_at, seq_at) = (p.id_len, p.task, p.seq_len);
    push(format!("prompt {k} id length"), &|b| b[id_at..id_at + 2].copy_from_slice(&(id_len + 1).to_le_bytes()));
    push(format!("prompt {k} id utf8"), &|b| b[id_at + 2] = 0xFF);
    push(format!("prompt {k} task"), &|b| b[task_at] = 7);
    push(format!("prompt {k} seq_len zero"), &|b| put_u32(b, seq_at, 0));
    push(format!("prompt {k} seq_len plus one"), &|b| {
        let v = get_u32(b, seq_at) + 1;
        put_u32(b, seq_at, v)
    });

    let float_at = |start: usize, end: usize, rng: &mut R| start + 4 * rng.random_range(0..(end - start) / 4);
    let h = float_at(p.hidden, p.mlp, rng);
    push(format!("prompt {k} hidden NaN"), &|b| b[h..h + 4].copy_from_slice(&f32::NAN.to_le_bytes()));
    let m = float_at(p.mlp, p.attention, rng);
    push(format!("prompt {k} mlp inf"), &|b| b[m..m + 4].copy_from_slice(&f32::INFINITY.to_le_bytes()));
    let a = float_at(p.attention, p.end, rng);
    push(format!("prompt {k} attention negative"), &|b| {
        let w = f32::from_le_bytes(b[a..a + 4].try_into().unwrap());
        b[a..a + 4].copy_from_slice(&(-w).to_le_bytes());
    });
    push(format!("prompt {k} attention unnormalized"), &|b| {
        let w = f32::from_le_bytes(b[a..a + 4].try_into().unwrap());
        b[a..a + 4].copy_from_slice(&(w + 0.5).to_le_bytes());
    });
    let cut = rng.random_range(p.hidden..p.end);
    push(format!("prompt {k} truncated at {cut}"), &|b| b.truncate(cut));
    push("trailing byte".into(), &|b| b.push(0));
    out
}

/// Whether a decode error says where the problem is: a byte offset, or
/// validation issues naming a prompt and field.
pub fn is_located(err: &circuitscope::trace::TraceError) -> bool {
    use circuitscope::trace::TraceError;
    match err {
        TraceError::Invalid(report) => {
            !report.issues.is_empty() && report.issues.iter().all(|i| !i.field.is_empty())
        }
        other => {
            let msg = other.to_string();
            msg.contains("byte") || msg.contains("prompt")
        }
    }
}

/// Feature matrices with every entry drawn from N(0, 1); recall prompts first.
pub fn gaussian_matrices<R: Rng>(
    rng: &mut R,
    cfg: TraceConfig,
    n_recall: usize,
    n_reasoning: usize,
) -> circuitscope::features::FeatureMatrices {
    use circuitscope::features::{FeatureMatrices, HEAD_METRIC_COUNT, LAYER_FEATURE_COUNT};
    use rand_distr::StandardNormal;
    let n = n_recall + n_reasoning;
    let mut normal = |len: usize| -> Vec<f64> { (0..len).map(|_| rng.sample(StandardNormal)).collect() };
    let layer_features = normal(n * cfg.num_layers * LAYER_FEATURE_COUNT);
    let head_metrics = normal(n * cfg.head_count() * HEAD_METRIC_COUNT);
    let neuron_activations: Vec<f32> = normal(n * cfg.neuron_count()).into_iter().map(|x| x as f32).collect();
    let firing = neuron_activations.iter().map(|&x| x > 0.0).collect();
    FeatureMatrices {
        prompt_ids: (0..n).map(|i| format!("p{i}")).collect(),
        task_labels: (0..n)
            .map(|i| if i < n_recall { TaskType::Recall } else { TaskType::Reasoning })
            .collect(),
        config: cfg,
        layer_features,
        head_metrics,
        neuron_activations,
        firing,
    }
}

/// Adds `shift` to one neuron's activations over the given prompts and
/// refreshes its firing bits.
pub fn shift_neuron(
    fm: &mut circuitscope::features::FeatureMatrices,
    prompts: std::ops::Range<usize>,
    flat_neuron: usize,
    shift: f32,
) {
    let nn = fm.config.neuron_count();
    for p in prompts {
        let i = p * nn + flat_neuron;
        fm.neuron_activations[i] += shift;
        fm.firing[i] = fm.neuron_activations[i] > 0.0;
    }
}
