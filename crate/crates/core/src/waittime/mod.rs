//! Waiting-time estimators for a region: the Erlang-C closed form, p-median
//! depot placement, and a random-forest surrogate trained on simulation.

mod forest;
mod training;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::RegionId;
use crate::jsonio::{read_json, write_json};

pub use forest::{train_forest, ForestHyperparams, ForestModel, Tree, TreeNode};
pub use training::{
    generate_training_data, placement_order, read_samples_csv, write_samples_csv, SurrogateSample,
    TrainingChain,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueueParams {
    /// Number of servers.
    pub p: usize,
    /// Arrivals per minute.
    pub gamma: f64,
    /// Service completions per minute per server.
    pub mu: f64,
}

/// Mean M/M/c queueing delay in minutes, or `+inf` when `gamma >= p * mu`.
pub fn mmc_wait(q: QueueParams) -> f64 {
    if q.gamma <= 0.0 {
        return 0.0;
    }
    if q.p == 0 {
        return f64::INFINITY;
    }
    let c = q.p as f64;
    let a = q.gamma / q.mu;
    let rho = a / c;
    if rho >= 1.0 {
        return f64::INFINITY;
    }
    // sum_{m<c} a^m/m!, built term by term
    let mut term = 1.0;
    let mut head = 0.0;
    for m in 0..q.p {
        head += term;
        term *= a / (m + 1) as f64;
    }
    // term is now a^c / c!
    let tail = term / (1.0 - rho);
    let p0 = 1.0 / (head + tail);
    let lq = p0 * term * rho / ((1.0 - rho) * (1.0 - rho));
    lq / q.gamma
}

/// Demand-weighted distances from region cells to candidate depots.
#[derive(Debug, Clone, PartialEq)]
pub struct PMedianInstance {
    /// Demand weight per cell.
    pub weights: Vec<f64>,
    /// `distances[cell][depot]`.
    pub distances: Vec<Vec<f64>>,
    pub p: usize,
}

impl PMedianInstance {
    pub fn n_depots(&self) -> usize {
        self.distances.first().map_or(0, Vec::len)
    }

    /// Objective for a set of open depots.
    pub fn cost(&self, open: &[usize]) -> f64 {
        self.weights
            .iter()
            .zip(&self.distances)
            .map(|(w, row)| {
                let d = open.iter().map(|&k| row[k]).fold(f64::INFINITY, f64::min);
                if *w == 0.0 {
                    0.0
                } else {
                    w * d
                }
            })
            .sum()
    }
}

/// Greedy-Add: opens depots one at a time, each time picking the one that
/// lowers the weighted distance the most (ties to the lowest index).
/// Returns the depots in opening order and the final objective.
pub fn greedy_add(inst: &PMedianInstance) -> Result<(Vec<usize>, f64)> {
    let n_depots = inst.n_depots();
    if inst.p == 0 {
        return Err(Error::Config("p-median needs p >= 1".into()));
    }
    if inst.p > n_depots {
        return Err(Error::TooFewDepots {
            p: inst.p,
            depots: n_depots,
        });
    }
    if inst.weights.len() != inst.distances.len() {
        return Err(Error::Config(
            "weights and distance rows differ in length".into(),
        ));
    }
    let mut nearest = vec![f64::INFINITY; inst.weights.len()];
    let mut open = Vec::with_capacity(inst.p);
    let mut score = f64::INFINITY;
    for _ in 0..inst.p {
        let mut best: Option<(usize, f64)> = None;
        for k in (0..n_depots).filter(|k| !open.contains(k)) {
            let u: f64 = inst
                .weights
                .iter()
                .zip(&inst.distances)
                .zip(&nearest)
                .map(|((w, row), cur)| if *w == 0.0 { 0.0 } else { w * cur.min(row[k]) })
                .sum();
            if best.is_none_or(|(_, b)| u < b) {
                best = Some((k, u));
            }
        }
        let (k, u) = best.expect("a depot remains");
        open.push(k);
        score = u;
        for (cur, row) in nearest.iter_mut().zip(&inst.distances) {
            *cur = cur.min(row[k]);
        }
    }
    Ok((open, score))
}

/// Per-region mean wait as a function of agent count and arrival rate.
#[derive(Debug, Clone, PartialEq)]
pub enum WaitEstimator {
    /// Erlang-C with service rate `mu` per minute; reports seconds.
    Queue { mu: f64 },
    /// One forest per region; reports seconds.
    Forest(BTreeMap<RegionId, ForestModel>),
}

impl WaitEstimator {
    /// Estimated wait in seconds. No agents with positive demand is
    /// unsustainable and reported as `+inf` by both variants.
    pub fn wait(&self, region: RegionId, p: usize, gamma: f64) -> Result<f64> {
        if p == 0 {
            return Ok(if gamma > 0.0 { f64::INFINITY } else { 0.0 });
        }
        match self {
            WaitEstimator::Queue { mu } => Ok(mmc_wait(QueueParams { p, gamma, mu: *mu }) * 60.0),
            WaitEstimator::Forest(models) => models
                .get(&region)
                .map(|m| m.predict(&[p as f64, gamma]))
                .ok_or(Error::UnknownRegion(region)),
        }
    }
}

/// Forests for every region, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSet {
    pub regions: BTreeMap<RegionId, ForestModel>,
}

impl SurrogateSet {
    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<SurrogateSet> {
        read_json(path)
    }

    pub fn into_estimator(self) -> WaitEstimator {
        WaitEstimator::Forest(self.regions)
    }
}
