//! Statistical primitives: Mann-Whitney U, Cohen's d, multiple-comparison
//! corrections, Shannon entropy and the Gini coefficient.
//!
//! Group `a` is always the recall group and group `b` the reasoning group, so
//! a positive effect size means the recall mean is higher.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

/// Largest combined sample size for which p-values are computed exactly.
pub const EXACT_MAX_N: usize = 16;

/// Allowed deviation of a probability vector's sum from 1.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("empty input")]
    EmptyInput,
    #[error("group size {got} is below the minimum of {needed}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("non-finite sample value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("p-value {value} at index {index} is outside [0, 1]")]
    InvalidPValue { index: usize, value: f64 },
    #[error("alpha {0} is outside (0, 1)")]
    InvalidAlpha(f64),
    #[error("negative weight {value} at index {index}")]
    NegativeWeight { index: usize, value: f64 },
    #[error("weights sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("all weights are zero")]
    AllZero,
}

/// One recall-vs-reasoning comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// U statistic of the recall group.
    pub u_statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    /// Cohen's d, recall mean minus reasoning mean over the pooled SD.
    pub effect_size_d: f64,
    pub n_recall: usize,
    pub n_reasoning: usize,
    /// Effect size undefined (pooled SD of zero or a group below two samples).
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub d: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrectionMethod {
    #[serde(rename = "bh_fdr")]
    BhFdr,
    #[serde(rename = "bonferroni")]
    Bonferroni,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionOutcome {
    pub rejected: Vec<bool>,
    pub method: CorrectionMethod,
    pub alpha: f64,
    pub adjusted_p: Option<Vec<f64>>,
}

impl CorrectionOutcome {
    pub fn rejected_count(&self) -> usize {
        self.rejected.iter().filter(|&&r| r).count()
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sum of squared deviations from the mean.
fn sum_sq_dev(xs: &[f64], m: f64) -> f64 {
    xs.iter().map(|x| (x - m) * (x - m)).sum()
}

fn check_finite(xs: &[f64]) -> Result<(), StatsError> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(StatsError::NonFinite {
            index,
            value: xs[index],
        }),
        None => Ok(()),
    }
}

/// Cohen's d with the pooled sample standard deviation.
pub fn cohens_d(a: &[f64], b: &[f64]) -> Result<EffectSize, StatsError> {
    for g in [a, b] {
        if g.len() < 2 {
            return Err(StatsError::TooFewSamples {
                needed: 2,
                got: g.len(),
            });
        }
    }
    check_finite(a)?;
    check_finite(b)?;
    Ok(effect_size_unchecked(a, b))
}

fn effect_size_unchecked(a: &[f64], b: &[f64]) -> EffectSize {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let pooled_var = (sum_sq_dev(a, ma) + sum_sq_dev(b, mb)) / (na + nb - 2.0);
    let sd = pooled_var.sqrt();
    if sd > 0.0 && sd.is_finite() {
        EffectSize {
            d: (ma - mb) / sd,
            degenerate: false,
        }
    } else {
        EffectSize {
            d: 0.0,
            degenerate: true,
        }
    }
}

/// Reusable buffers for repeated group comparisons.
#[derive(Debug, Default)]
pub struct GroupComparator {
    pooled: Vec<(f64, bool)>,
    exact_counts: Vec<Vec<u64>>,
}

impl GroupComparator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Mann-Whitney U test plus Cohen's d for recall group `a` against
    /// reasoning group `b`.
    pub fn compare(&mut self, a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
        if a.is_empty() || b.is_empty() {
            return Err(StatsError::EmptyInput);
        }
        check_finite(a)?;
        check_finite(b)?;
        let (na, nb) = (a.len(), b.len());
        let n = na + nb;

        self.pooled.clear();
        self.pooled.extend(a.iter().map(|&x| (x, true)));
        self.pooled.extend(b.iter().map(|&x| (x, false)));
        self.pooled
            .sort_unstable_by(|x, y| x.0.partial_cmp(&y.0).unwrap_or(Ordering::Equal));

        // Midranks; ties accumulate t^3 - t for the variance correction.
        let mut rank_sum_a = 0.0;
        let mut tie_term = 0.0;
        let mut i = 0;
        while i < n {
            let mut j = i + 1;
            while j < n && self.pooled[j].0 == self.pooled[i].0 {
                j += 1;
            }
            let t = (j - i) as f64;
            let midrank = (i + j + 1) as f64 / 2.0;
            let in_a = self.pooled[i..j].iter().filter(|e| e.1).count();
            rank_sum_a += midrank * in_a as f64;
            if j - i > 1 {
                tie_term += t * t * t - t;
            }
            i = j;
        }

        let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;
        let p_value = if n <= EXACT_MAX_N && tie_term == 0.0 {
            self.exact_p(na, nb, u.round() as usize)
        } else {
            normal_p(na, nb, u, tie_term)
        };

        let effect = if na >= 2 && nb >= 2 {
            effect_size_unchecked(a, b)
        } else {
            EffectSize {
                d: 0.0,
                degenerate: true,
            }
        };

        Ok(TestResult {
            u_statistic: u,
            p_value,
            effect_size_d: effect.d,
            n_recall: na,
            n_reasoning: nb,
            degenerate: effect.degenerate,
        })
    }

    /// Two-sided exact p from the null distribution of U, counting rank
    /// subsets of size `na` by their rank sum.
    fn exact_p(&mut self, na: usize, nb: usize, u: usize) -> f64 {
        let n = na + nb;
        let max_sum = n * (n + 1) / 2;
        let counts = &mut self.exact_counts;
        counts.clear();
        counts.resize(na + 1, vec![0u64; max_sum + 1]);
        counts[0][0] = 1;
        for rank in 1..=n {
            for k in (1..=na.min(rank)).rev() {
                let (lower, upper) = counts.split_at_mut(k);
                let prev = &lower[k - 1];
                let cur = &mut upper[0];
                for s in (rank..=max_sum).rev() {
                    cur[s] += prev[s - rank];
                }
            }
        }
        let offset = na * (na + 1) / 2;
        let dist = &counts[na][offset..=offset + na * nb];
        let total: u64 = dist.iter().sum();
        let lower: u64 = dist[..=u].iter().sum();
        let upper: u64 = dist[u..].iter().sum();
        (2.0 * lower.min(upper) as f64 / total as f64).min(1.0)
    }
}

/// Two-sided normal-approximation p for U with continuity correction.
/// `tie_term` is the sum of `t^3 - t` over tie groups (0 without ties).
pub fn normal_p(na: usize, nb: usize, u: f64, tie_term: f64) -> f64 {
    let (fa, fb) = (na as f64, nb as f64);
    let n = fa + fb;
    let mu = fa * fb / 2.0;
    let tie_adjust = if n > 1.0 { tie_term / (n * (n - 1.0)) } else { 0.0 };
    let var = fa * fb / 12.0 * ((n + 1.0) - tie_adjust);
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

/// Two-sided Mann-Whitney U test (recall `a` vs reasoning `b`) with Cohen's d.
///
/// Exact p for tie-free samples with `a.len() + b.len() <= 16`; otherwise the
/// normal approximation with tie-corrected variance and continuity correction.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    GroupComparator::new().compare(a, b)
}

fn check_correction_input(p: &[f64], alpha: f64) -> Result<(), StatsError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidAlpha(alpha));
    }
    match p.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(StatsError::InvalidPValue {
            index,
            value: p[index],
        }),
        None => Ok(()),
    }
}

/// Benjamini-Hochberg step-up procedure.
pub fn bh_fdr(p_values: &[f64], alpha: f64) -> Result<CorrectionOutcome, StatsError> {
    check_correction_input(p_values, alpha)?;
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]).then(i.cmp(&j)));

    let mut cutoff = 0;
    for (rank0, &idx) in order.iter().enumerate() {
        let k = rank0 + 1;
        if p_values[idx] <= alpha * k as f64 / m as f64 {
            cutoff = k;
        }
    }
    let mut rejected = vec![false; m];
    for &idx in &order[..cutoff] {
        rejected[idx] = true;
    }

    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank0, &idx) in order.iter().enumerate().rev() {
        let q = p_values[idx] * m as f64 / (rank0 + 1) as f64;
        running = running.min(q).min(1.0);
        adjusted[idx] = running;
    }

    Ok(CorrectionOutcome {
        rejected,
        method: CorrectionMethod::BhFdr,
        alpha,
        adjusted_p: Some(adjusted),
    })
}

/// Bonferroni correction: reject `p_i <= alpha / m`.
pub fn bonferroni(p_values: &[f64], alpha: f64) -> Result<CorrectionOutcome, StatsError> {
    check_correction_input(p_values, alpha)?;
    let m = p_values.len() as f64;
    let threshold = alpha / m;
    Ok(CorrectionOutcome {
        rejected: p_values.iter().map(|&p| p <= threshold).collect(),
        method: CorrectionMethod::Bonferroni,
        alpha,
        adjusted_p: Some(p_values.iter().map(|&p| (p * m).min(1.0)).collect()),
    })
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn check_weights(w: &[f64]) -> Result<f64, StatsError> {
    if w.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    for (index, &value) in w.iter().enumerate() {
        if !value.is_finite() {
            return Err(StatsError::NonFinite { index, value });
        }
        if value < 0.0 {
            return Err(StatsError::NegativeWeight { index, value });
        }
    }
    Ok(compensated_sum(w.iter().copied()))
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
///
/// Vectors whose sum is within 1e-4 of 1 are renormalized first.
pub fn shannon_entropy(w: &[f64]) -> Result<f64, StatsError> {
    let sum = check_weights(w)?;
    if (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
        return Err(StatsError::NotNormalized(sum));
    }
    let h = -compensated_sum(w.iter().filter(|&&x| x > 0.0).map(|&x| {
        let q = x / sum;
        q * q.ln()
    }));
    Ok(h.max(0.0))
}

/// Gini coefficient over the ascending-sorted weights:
/// `sum_i (2i - n - 1) w_(i) / (n sum w)` with 1-based `i`.
pub fn gini(w: &[f64]) -> Result<f64, StatsError> {
    let sum = check_weights(w)?;
    if sum == 0.0 {
        return Err(StatsError::AllZero);
    }
    let mut sorted = w.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let numer = compensated_sum(
        sorted
            .iter()
            .enumerate()
            .map(|(i, &x)| (2.0 * (i + 1) as f64 - n - 1.0) * x),
    );
    Ok((numer / (n * sum)).max(0.0))
}
