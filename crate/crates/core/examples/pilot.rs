//! Measures planted-effect recovery on the benchmark synthetic config over a
//! run of seeds and prints the averages as JSON.
//!
//! cargo run --release -p circuitscope-core --example pilot -- [first_seed] [runs]

use std::time::Instant;

use circuitscope::features::build_feature_matrices;
use circuitscope::pipelines::{run_h1, run_h2, run_h3, H1Config, H2Config, H3Config};
use circuitscope::synth::{generate_synthetic, score_detection, DetectionScore, PipelineOutput, PlantConfig};
use serde_json::json;

fn main() {
    let args: Vec<u64> = std::env::args().skip(1).map(|a| a.parse().expect("numeric argument")).collect();
    let first = args.first().copied().unwrap_or(1000);
    let runs = args.get(1).copied().unwrap_or(20);

    let start = Instant::now();
    let mut scores: Vec<[DetectionScore; 3]> = Vec::new();
    for seed in first..first + runs {
        let (ts, gt) = generate_synthetic(&PlantConfig::benchmark(seed)).unwrap();
        let fm = build_feature_matrices(&ts).unwrap();
        let h1 = run_h1(&fm, &H1Config::default()).unwrap();
        let h2 = run_h2(&fm, &H2Config::default()).unwrap();
        let h3 = run_h3(&fm, &H3Config::default()).unwrap();
        scores.push([
            score_detection(PipelineOutput::H1(&h1), &gt).unwrap(),
            score_detection(PipelineOutput::H2(&h2), &gt).unwrap(),
            score_detection(PipelineOutput::H3(&h3), &gt).unwrap(),
        ]);
    }
    let mean = |k: usize, f: fn(&DetectionScore) -> f64| scores.iter().map(|s| f(&s[k])).sum::<f64>() / scores.len() as f64;
    let mut out = serde_json::Map::new();
    for (k, name) in ["h1", "h2", "h3"].iter().enumerate() {
        out.insert(
            name.to_string(),
            json!({
                "precision": mean(k, |s| s.precision),
                "recall": mean(k, |s| s.recall),
                "min_precision": scores.iter().map(|s| s[k].precision).fold(1.0, f64::min),
                "min_recall": scores.iter().map(|s| s[k].recall).fold(1.0, f64::min),
            }),
        );
    }
    let doc = json!({ "config": "benchmark", "first_seed": first, "runs": runs, "scores": out });
    println!("{}", serde_json::to_string_pretty(&doc).unwrap());
    eprintln!("{:.1}s", start.elapsed().as_secs_f64());
}
