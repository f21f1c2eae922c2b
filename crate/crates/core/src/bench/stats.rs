//! Latency statistics with worst-case trimming.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean_ns: f64,
    pub trimmed_mean_ns: f64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
}

/// Nearest-rank percentile of an ascending slice: the value at rank
/// `ceil(p/100 * n)`, 1-based, clamped to the first element.
pub fn nearest_rank(sorted: &[u64], p: f64) -> Result<u64> {
    if sorted.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::InvalidConfig(format!(
            "percentile {p} not in [0, 100]"
        )));
    }
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[rank.min(n) - 1])
}

/// Number of worst samples dropped for `trim` of `n`: `ceil(trim * n)`,
/// always leaving at least one.
pub fn trimmed_count(n: usize, trim: f64) -> usize {
    let drop = (trim * n as f64 - 1e-9).ceil().max(0.0) as usize;
    drop.min(n.saturating_sub(1))
}

pub fn compute_stats(latencies_ns: &[u64], trim: f64) -> Result<LatencyStats> {
    if latencies_ns.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..1.0).contains(&trim) {
        return Err(Error::InvalidConfig(format!(
            "trim fraction {trim} not in [0, 1)"
        )));
    }
    let mut sorted = latencies_ns.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let mean = sorted.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let kept = &sorted[..n - trimmed_count(n, trim)];
    let trimmed_mean = kept.iter().map(|&v| v as f64).sum::<f64>() / kept.len() as f64;
    Ok(LatencyStats {
        n,
        mean_ns: mean,
        trimmed_mean_ns: trimmed_mean,
        p50_ns: nearest_rank(&sorted, 50.0)?,
        p99_ns: nearest_rank(&sorted, 99.0)?,
        min_ns: sorted[0],
        max_ns: sorted[n - 1],
    })
}
