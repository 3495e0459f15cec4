use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Largest sample size evaluated with the exact null distribution.
pub const EXACT_MAX_N: usize = 25;
/// Absolute differences closer than this share a rank.
pub const TIE_TOLERANCE: f64 = 1e-12;

/// Per-seed outcomes of two methods; index `i` is the same seed in both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedSamples {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

impl PairedSamples {
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Input(format!(
                "paired samples differ in length: {} vs {}",
                a.len(),
                b.len()
            )));
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::Input("paired samples must be finite".into()));
        }
        Ok(Self { a, b })
    }

    /// Non-zero differences `b - a`.
    pub fn differences(&self) -> Vec<f64> {
        self.a
            .iter()
            .zip(&self.b)
            .map(|(a, b)| b - a)
            .filter(|d| *d != 0.0)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// P(W+ >= observed) under the null; the alternative is B > A.
    pub p_value: f64,
    /// Sum of ranks of the positive differences.
    pub w_plus: f64,
    /// Differences left after dropping zeros.
    pub n: usize,
    pub exact: bool,
    /// Every difference was zero; `p_value` is 1.
    pub degenerate: bool,
}

/// Average ranks (1-based) of `values`, ties within `TIE_TOLERANCE`.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] - values[order[start]] <= TIE_TOLERANCE {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// One-sided paired Wilcoxon signed-rank test of H1: B > A.
pub fn wilcoxon_one_sided(p: &PairedSamples) -> WilcoxonResult {
    let d = p.differences();
    let n = d.len();
    if n == 0 {
        return WilcoxonResult {
            p_value: 1.0,
            w_plus: 0.0,
            n: 0,
            exact: true,
            degenerate: true,
        };
    }
    let ranks = average_ranks(&d.iter().map(|v| v.abs()).collect::<Vec<_>>());
    let w_plus: f64 = d.iter().zip(&ranks).filter(|(v, _)| **v > 0.0).map(|(_, r)| r).sum();
    if n <= EXACT_MAX_N {
        WilcoxonResult {
            p_value: exact_upper_tail(&ranks, w_plus),
            w_plus,
            n,
            exact: true,
            degenerate: false,
        }
    } else {
        WilcoxonResult {
            p_value: normal_upper_tail(&ranks, w_plus),
            w_plus,
            n,
            exact: false,
            degenerate: false,
        }
    }
}

/// Counts sign assignments by subset sums over doubled (integer) ranks.
fn exact_upper_tail(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let observed = (2.0 * w_plus).round() as usize;
    let tail: u64 = counts[observed..].iter().sum();
    tail as f64 / (1u64 << ranks.len()) as f64
}

/// Normal approximation with tie-corrected variance and continuity correction.
fn normal_upper_tail(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|r| **r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w_plus - mean - 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.sf(z).clamp(f64::MIN_POSITIVE, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation, 0 for a single record.
    pub sd: f64,
}

pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::Input("cannot summarize zero records".into()));
    }
    let n = values.len();
    if values.iter().all(|v| *v == values[0]) {
        return Ok(Summary { n, mean: values[0], sd: 0.0 });
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n == 1 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    Ok(Summary { n, mean, sd })
}
