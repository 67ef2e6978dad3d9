//! Transform parameters that realize a requested population Cohen's d on
//! derived features whose distributions are not simple mean shifts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use statrs::function::erf::erfc;

use crate::features::{attention_metrics, HEAD_METRIC_COUNT};
use crate::pipelines::HEAD_METRIC_POLARITY;

/// Head metrics in the order a head plant claims them: gini, max_weight,
/// focus, entropy, spread.
pub const HEAD_PLANT_ORDER: [usize; HEAD_METRIC_COUNT] = [4, 1, 2, 0, 3];

const HEAD_CALIBRATION_ROWS: usize = 4000;
const HEAD_CALIBRATION_SEED: u64 = 0x00c0_ffee;
const BISECT_STEPS: usize = 60;

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Finds `x` in `[lo, hi]` with `f(x) = target` for increasing `f`.
fn bisect(mut lo: f64, mut hi: f64, target: f64, f: impl Fn(f64) -> f64) -> Option<f64> {
    if f(lo) > target || f(hi) < target {
        return None;
    }
    for _ in 0..BISECT_STEPS {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

fn pooled_d(m1: f64, v1: f64, m0: f64, v0: f64) -> f64 {
    let sd = ((v0 + v1) / 2.0).sqrt();
    if sd > 0.0 {
        (m1 - m0) / sd
    } else {
        0.0
    }
}

/// Mean and variance of a noncentral chi with `k` degrees of freedom and
/// noncentrality `lambda`, by the second-moment approximation.
fn chi_moments(k: f64, lambda: f64) -> (f64, f64) {
    let var = (k + 2.0 * lambda) / (2.0 * (k + lambda));
    ((k + lambda - var).max(0.0).sqrt(), var)
}

/// Favored-group hidden state `h = s * x + mu` for `x` standard normal in
/// `k` dimensions. Returns `(s, mu)` giving population d of `d_norm` on the
/// L2 norm and `d_mean` on the coordinate mean.
pub fn hidden_transform(k: usize, d_norm: f64, d_mean: f64) -> Option<(f64, f64)> {
    let kf = k as f64;
    let mu_for = |s: f64| d_mean * ((1.0 + s * s) / (2.0 * kf)).sqrt();
    let norm_d = |s: f64| {
        let mu = mu_for(s);
        let (m1, v1) = chi_moments(kf, kf * mu * mu / (s * s));
        let (m0, v0) = chi_moments(kf, 0.0);
        pooled_d(s * m1, s * s * v1, m0, v0)
    };
    let s = if d_norm == 0.0 && d_mean == 0.0 {
        1.0
    } else {
        bisect(1e-3, 1e3, d_norm, norm_d)?
    };
    Some((s, mu_for(s)))
}

/// `E|x - delta|` for standard normal `x`.
fn folded_mean(delta: f64) -> f64 {
    (2.0 / std::f64::consts::PI).sqrt() * (-delta * delta / 2.0).exp()
        + delta * (2.0 * std_normal_cdf(delta) - 1.0)
}

/// Favored-group MLP activations `a = s * (x - delta)` over `m` neurons.
/// Returns `(s, delta)` giving population d of `d_magnitude` on mean |a| and
/// `d_sparsity` on the fraction of non-positive activations.
pub fn mlp_transform(m: usize, d_magnitude: f64, d_sparsity: f64) -> Option<(f64, f64)> {
    let mf = m as f64;
    let sparsity_d = |delta: f64| {
        let p = std_normal_cdf(delta);
        pooled_d(p, p * (1.0 - p) / mf, 0.5, 0.25 / mf)
    };
    let delta = if d_sparsity == 0.0 {
        0.0
    } else {
        bisect(-10.0, 10.0, d_sparsity, sparsity_d)?
    };
    let m1 = folded_mean(delta);
    let v1 = 1.0 + delta * delta - m1 * m1;
    let m0 = folded_mean(0.0);
    let v0 = 1.0 - m0 * m0;
    let magnitude_d = |s: f64| pooled_d(s * m1, s * s * v1 / mf, m0, v0 / mf);
    let s = if d_magnitude == 0.0 && delta == 0.0 {
        1.0
    } else {
        bisect(1e-4, 1e4, d_magnitude, magnitude_d)?
    };
    Some((s, delta))
}

/// Mixes a row toward the one-hot vector at its largest weight.
pub fn sharpen(row: &mut [f64], lambda: f64) {
    let top = row
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    for w in row.iter_mut() {
        *w *= 1.0 - lambda;
    }
    row[top] += lambda;
}

/// A symmetric Dirichlet(1) row: normalized unit exponentials.
pub fn dirichlet_row<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..len).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let total: f64 = row.iter().sum();
    for w in &mut row {
        *w /= total;
    }
    row
}

fn metric_moments(rows: &[Vec<f64>], lambda: f64) -> [(f64, f64); HEAD_METRIC_COUNT] {
    let mut sum = [0.0; HEAD_METRIC_COUNT];
    let mut sum_sq = [0.0; HEAD_METRIC_COUNT];
    let mut buf = Vec::new();
    for row in rows {
        buf.clear();
        buf.extend_from_slice(row);
        sharpen(&mut buf, lambda);
        let as_f32: Vec<f32> = buf.iter().map(|&w| w as f32).collect();
        let m = attention_metrics(&as_f32)
            .expect("calibration rows are valid distributions")
            .to_array();
        for i in 0..HEAD_METRIC_COUNT {
            sum[i] += m[i];
            sum_sq[i] += m[i] * m[i];
        }
    }
    let n = rows.len() as f64;
    std::array::from_fn(|i| {
        let mean = sum[i] / n;
        (mean, (sum_sq[i] / n - mean * mean).max(0.0))
    })
}

/// Oriented population d of every head metric after sharpening by `lambda`,
/// estimated on a fixed Monte Carlo sample.
pub struct HeadCalibrator {
    rows: Vec<Vec<f64>>,
    baseline: [(f64, f64); HEAD_METRIC_COUNT],
}

impl HeadCalibrator {
    pub fn new(seq_len: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(HEAD_CALIBRATION_SEED ^ seq_len as u64);
        let rows: Vec<Vec<f64>> = (0..HEAD_CALIBRATION_ROWS)
            .map(|_| dirichlet_row(&mut rng, seq_len))
            .collect();
        let baseline = metric_moments(&rows, 0.0);
        Self { rows, baseline }
    }

    pub fn oriented_effects(&self, lambda: f64) -> [f64; HEAD_METRIC_COUNT] {
        let shifted = metric_moments(&self.rows, lambda);
        std::array::from_fn(|i| {
            let (m1, v1) = shifted[i];
            let (m0, v0) = self.baseline[i];
            HEAD_METRIC_POLARITY[i] * pooled_d(m1, v1, m0, v0)
        })
    }

    fn claimed_min(&self, lambda: f64, metric_count: usize) -> f64 {
        let d = self.oriented_effects(lambda);
        HEAD_PLANT_ORDER[..metric_count]
            .iter()
            .map(|&i| d[i])
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest mixing weight whose weakest claimed metric reaches `effect_d`.
    pub fn mixing_weight(&self, effect_d: f64, metric_count: usize) -> Option<f64> {
        bisect(0.0, 0.999, effect_d, |l| self.claimed_min(l, metric_count))
    }
}
