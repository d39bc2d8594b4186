//! Response-time summaries.
//!
//! Percentiles use the nearest-rank rule: the `q`-quantile of `n` sorted
//! values is the value at 1-based rank `max(1, ceil(q * n))`.

use serde::{Deserialize, Serialize};

/// Width of histogram bins, seconds.
pub const HISTOGRAM_BIN_S: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub mean: f64,
    pub min: f64,
    pub p09: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub p91: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_s: f64,
    /// `counts[i]` holds values in `[i * bin_s, (i + 1) * bin_s)`.
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    /// Absent when there are no values.
    pub stats: Option<Quantiles>,
    pub histogram: Histogram,
}

impl Summary {
    pub fn mean(&self) -> Option<f64> {
        self.stats.as_ref().map(|s| s.mean)
    }
}

/// Nearest-rank quantile of sorted, non-empty `v`.
pub fn nearest_rank(v: &[f64], q: f64) -> f64 {
    assert!(!v.is_empty(), "quantile of an empty sample");
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

pub fn summarize(values: &[f64]) -> Summary {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mut counts = Vec::new();
    for x in &v {
        let bin = (x.max(0.0) / HISTOGRAM_BIN_S).floor() as usize;
        if counts.len() <= bin {
            counts.resize(bin + 1, 0);
        }
        counts[bin] += 1;
    }
    let stats = (!v.is_empty()).then(|| Quantiles {
        mean: v.iter().sum::<f64>() / v.len() as f64,
        min: v[0],
        p09: nearest_rank(&v, 0.09),
        q1: nearest_rank(&v, 0.25),
        median: nearest_rank(&v, 0.5),
        q3: nearest_rank(&v, 0.75),
        p91: nearest_rank(&v, 0.91),
        max: v[v.len() - 1],
    });
    Summary {
        count: v.len(),
        stats,
        histogram: Histogram {
            bin_s: HISTOGRAM_BIN_S,
            counts,
        },
    }
}
