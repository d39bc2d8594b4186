use std::fs::File;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{greedy_add, PMedianInstance};
use crate::demand::{IncidentChain, PoissonModel};
use crate::dispatch::Greedy;
use crate::error::{Error, Result};
use crate::ids::{AgentId, RegionId};
use crate::sim::{run, AgentState, Depot, RunOptions, SimState, World};
use crate::spatial::Region;

/// One simulated observation: mean response time with `p` agents under
/// arrival rate `gamma_per_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurrogateSample {
    pub region: RegionId,
    pub p: usize,
    pub gamma_per_min: f64,
    pub mean_response_s: f64,
}

/// A sampled chain and the region arrival rate it was drawn at.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingChain {
    pub chain: IncidentChain,
    pub gamma: f64,
}

/// Depots of `region` in Greedy-Add opening order, weighted by `weights`.
pub fn placement_order(
    region: &Region,
    world: &World,
    weights: &PoissonModel,
) -> Result<Vec<Depot>> {
    let depots: Vec<Depot> = region
        .depot_ids
        .iter()
        .map(|d| world.depot(*d).copied())
        .collect::<Result<_>>()?;
    if depots.is_empty() {
        return Err(Error::RegionWithoutDepots(region.id));
    }
    let distances = region
        .cell_ids
        .iter()
        .map(|c| {
            depots
                .iter()
                .map(|d| world.travel.travel_time(*c, d.cell))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let inst = PMedianInstance {
        weights: region.cell_ids.iter().map(|c| weights.rate(*c)).collect(),
        distances,
        p: depots.len(),
    };
    let (order, _) = greedy_add(&inst)?;
    Ok(order.into_iter().map(|k| depots[k]).collect())
}

/// Simulates every chain with `p = 1..=|depots|` agents placed by
/// Greedy-Add and greedy dispatch only. Chains without incidents in the
/// region yield no sample.
pub fn generate_training_data(
    region: &Region,
    world: &World,
    weights: &PoissonModel,
    chains: &[TrainingChain],
    seed: u64,
) -> Result<Vec<SurrogateSample>> {
    let order = placement_order(region, world, weights)?;
    let jobs: Vec<(usize, usize)> = (0..chains.len())
        .flat_map(|c| (1..=order.len()).map(move |p| (c, p)))
        .collect();
    let out: Vec<Option<SurrogateSample>> = jobs
        .par_iter()
        .map(|&(c, p)| {
            let tc = &chains[c];
            let chain = tc.chain.restricted_to(&region.cell_ids);
            if chain.is_empty() {
                return Ok(None);
            }
            let agents = order[..p]
                .iter()
                .enumerate()
                .map(|(i, d)| AgentState::parked(AgentId(i as u32), region.id, d))
                .collect();
            let state = SimState::new(world, chain.start_min * 60.0, agents, seed ^ c as u64)?;
            let res = run(world, state, &chain, &Greedy, None, &RunOptions::default())?;
            let mean =
                res.records.iter().map(|r| r.response_s).sum::<f64>() / res.records.len() as f64;
            Ok(Some(SurrogateSample {
                region: region.id,
                p,
                gamma_per_min: tc.gamma,
                mean_response_s: mean,
            }))
        })
        .collect::<Result<_>>()?;
    Ok(out.into_iter().flatten().collect())
}

pub fn write_samples_csv(path: &Path, samples: &[SurrogateSample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for s in samples {
        w.serialize(s).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_samples_csv(path: &Path) -> Result<Vec<SurrogateSample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        out.push(rec.map_err(|e| Error::parse(path, format!("line {}: {e}", i + 2)))?);
    }
    Ok(out)
}
