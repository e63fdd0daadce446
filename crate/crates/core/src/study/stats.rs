//! Two-sample tests and summary statistics for pushforward samples.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Outcome of a two-sample test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Midranks (1-based) of the pooled sample and the tie term `Σ (t³ − t)`.
fn midranks(pooled: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && pooled[order[j]] == pooled[order[i]] {
            j += 1;
        }
        let r = 0.5 * ((i + 1) + j) as f64;
        for &k in &order[i..j] {
            ranks[k] = r;
        }
        let t = (j - i) as f64;
        ties += t * t * t - t;
        i = j;
    }
    (ranks, ties)
}

/// Mann–Whitney U test. The statistic is `U` of the first sample; the
/// two-sided p-value uses the normal approximation with tie and continuity
/// corrections (1 when the variance vanishes).
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("Mann–Whitney needs two nonempty samples"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let ra: f64 = ranks[..a.len()].iter().sum();
    let u = ra - na * (na + 1.0) / 2.0;
    let n = na + nb;
    let var = na * nb / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)).max(1.0));
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - na * nb / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
        erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(TestResult { statistic: u, p_value })
}

fn median_of(v: &[f64]) -> f64 {
    percentile(v, 50.0)
}

/// Brown–Forsythe (median-centered Levene) test for equal variances.
/// Zero spread in both groups gives `W = 0`, `p = 1`.
pub fn levene(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("Levene's test needs at least two values per group"));
    }
    let dev = |v: &[f64]| {
        let m = median_of(v);
        v.iter().map(|x| (x - m).abs()).collect::<Vec<f64>>()
    };
    let groups = [dev(a), dev(b)];
    let n_total = (a.len() + b.len()) as f64;
    let k = 2.0;
    let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / g.len() as f64).collect();
    let grand = groups.iter().flatten().sum::<f64>() / n_total;
    let between: f64 = groups.iter().zip(&means).map(|(g, m)| g.len() as f64 * (m - grand).powi(2)).sum();
    let within: f64 = groups.iter().zip(&means).map(|(g, m)| g.iter().map(|z| (z - m).powi(2)).sum::<f64>()).sum();
    if within == 0.0 {
        return Ok(if between == 0.0 {
            TestResult { statistic: 0.0, p_value: 1.0 }
        } else {
            TestResult { statistic: f64::INFINITY, p_value: 0.0 }
        });
    }
    let w = (n_total - k) / (k - 1.0) * between / within;
    let f = FisherSnedecor::new(k - 1.0, n_total - k).map_err(|e| Error::invalid(e.to_string()))?;
    Ok(TestResult { statistic: w, p_value: f.sf(w) })
}

/// Percentile with linear interpolation between order statistics at
/// position `q/100 · (n − 1)`.
pub fn percentile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (`n − 1` denominator; 0 for one value).
    pub std: f64,
    pub median: f64,
    pub p5: f64,
    pub p95: f64,
}

pub fn summarize(v: &[f64]) -> Result<Summary> {
    if v.is_empty() {
        return Err(Error::invalid("cannot summarize an empty sample"));
    }
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Ok(Summary { n, mean, std, median: median_of(v), p5: percentile(v, 5.0), p95: percentile(v, 95.0) })
}
