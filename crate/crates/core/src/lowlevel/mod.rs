//! Per-region depot planning by Monte Carlo tree search.
//!
//! A region's state is cut out of the global simulator state, candidate
//! depot assignments for its free agents are scored by UCT search over
//! sampled incident chains with greedy-dispatch rollouts, and scores from
//! independent trees (one per chain) are averaged.

mod mcts;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::{sample_chain, IncidentChain, PoissonModel, SpikeSchedule};
use crate::dispatch::Greedy;
use crate::error::{Error, Result};
use crate::ids::{AgentId, CellId, DepotId, RegionId};
use crate::sim::{PendingIncident, ResponseRecord, SimState, World};
use crate::spatial::Region;

pub use mcts::{mcts, search, ActionScore, MctsConfig, SearchTree};

/// The part of the simulator state one region's planner may see.
#[derive(Debug, Clone)]
pub struct RegionState {
    pub region: RegionId,
    pub cells: Vec<CellId>,
    /// Region agents and the pending incidents inside the region.
    pub state: SimState,
    /// Region depots with their capacities.
    pub depots: Vec<(DepotId, u32)>,
    /// Slots in region depots held by agents of other regions.
    pub external: BTreeMap<DepotId, usize>,
}

/// Copies out the agents assigned to `region` and the pending incidents in
/// its cells.
pub fn decompose(state: &SimState, world: &World, region: &Region) -> Result<RegionState> {
    let mut cells = region.cell_ids.clone();
    cells.sort();
    let sub = state.filtered(
        |a| a.region == region.id,
        |i| cells.binary_search(&i.cell).is_ok(),
    );
    let mut depots = Vec::with_capacity(region.depot_ids.len());
    let mut external = BTreeMap::new();
    for &d in &region.depot_ids {
        depots.push((d, world.depot(d)?.capacity));
        let n = state
            .agents()
            .iter()
            .filter(|a| a.depot == d && a.region != region.id)
            .count();
        external.insert(d, n);
    }
    depots.sort();
    Ok(RegionState {
        region: region.id,
        cells,
        state: sub,
        depots,
        external,
    })
}

/// A depot for each free agent, listed in agent-id order.
pub type Action = Vec<DepotId>;

impl RegionState {
    /// Free agents of `state`, by id.
    pub fn free_agents(state: &SimState) -> Vec<AgentId> {
        state.free_agents().map(|a| a.id).collect()
    }

    /// Spare slots per region depot once non-free agents are counted.
    fn slots(&self, state: &SimState) -> Vec<(DepotId, usize)> {
        self.depots
            .iter()
            .map(|&(d, cap)| {
                let held = self.external.get(&d).copied().unwrap_or(0)
                    + state
                        .agents()
                        .iter()
                        .filter(|a| a.depot == d && !a.is_free())
                        .count();
                (d, (cap as usize).saturating_sub(held))
            })
            .collect()
    }

    /// Every assignment of the free agents of `state` to region depots with
    /// spare slots. The current assignment comes first when it is valid,
    /// the rest follow in lexicographic order of depot ids.
    pub fn actions(&self, state: &SimState, limit: usize) -> Result<Vec<Action>> {
        let free = Self::free_agents(state).len();
        let slots = self.slots(state);
        let count = count_assignments(free, &slots);
        if count > limit as u128 {
            return Err(Error::TooManyActions {
                actions: count,
                limit,
            });
        }
        let mut out = Vec::with_capacity(count as usize);
        let mut left: Vec<usize> = slots.iter().map(|s| s.1).collect();
        let mut cur = Vec::with_capacity(free);
        enumerate(free, &slots, &mut left, &mut cur, &mut out);
        let here: Action = state.free_agents().map(|a| a.depot).collect();
        if let Some(i) = out.iter().position(|a| *a == here) {
            let stay = out.remove(i);
            out.insert(0, stay);
        }
        Ok(out)
    }

    /// Pairs an action with the free agents of `state`.
    pub fn bind(state: &SimState, action: &Action) -> Vec<(AgentId, DepotId)> {
        Self::free_agents(state)
            .into_iter()
            .zip(action.iter().copied())
            .collect()
    }
}

fn enumerate(
    n: usize,
    slots: &[(DepotId, usize)],
    left: &mut [usize],
    cur: &mut Action,
    out: &mut Vec<Action>,
) {
    if cur.len() == n {
        out.push(cur.clone());
        return;
    }
    for i in 0..slots.len() {
        if left[i] > 0 {
            left[i] -= 1;
            cur.push(slots[i].0);
            enumerate(n, slots, left, cur, out);
            cur.pop();
            left[i] += 1;
        }
    }
}

/// Ways to give `n` labeled agents depots with the given slot counts,
/// saturating at `u128::MAX`.
fn count_assignments(n: usize, slots: &[(DepotId, usize)]) -> u128 {
    let binom = |a: usize, b: usize| -> u128 {
        (0..b).fold(1u128, |acc, i| {
            acc.saturating_mul((a - i) as u128) / (i as u128 + 1)
        })
    };
    // ways[j]: assignments of j specific agents to the depots seen so far
    let mut ways = vec![0u128; n + 1];
    ways[0] = 1;
    for &(_, s) in slots {
        let mut next = vec![0u128; n + 1];
        for j in 0..=n {
            for k in 0..=s.min(j) {
                next[j] = next[j].saturating_add(ways[j - k].saturating_mul(binom(j, k)));
            }
        }
        ways = next;
    }
    ways[n]
}

/// Discounted cost of one dispatch: `alpha^t_h * response_s`, `t_h` in
/// minutes.
pub fn reward(response_s: f64, t_h_min: f64, alpha: f64) -> f64 {
    alpha.powf(t_h_min) * response_s
}

/// Upper confidence bound of a child; unvisited children come first.
pub fn uct_score(mean: f64, parent_visits: u32, visits: u32, c: f64) -> f64 {
    if visits == 0 {
        return f64::INFINITY;
    }
    mean + c * ((parent_visits as f64).ln() / visits as f64).sqrt()
}

/// Sum of discounted costs in incident-id order, discounting from `t0_s`.
pub fn total_reward(records: &[ResponseRecord], t0_s: f64, alpha: f64) -> f64 {
    let mut sorted: Vec<&ResponseRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.incident);
    sorted
        .iter()
        .map(|r| reward(r.response_s, (r.dispatch_time - t0_s) / 60.0, alpha))
        .sum()
}

/// Runs greedy dispatch until incident `next` of `chain` has been reported
/// and the queue drained, or, when the chain is used up, until the queue
/// empties. Returns `false` in the latter case.
pub(crate) fn advance_epoch(
    state: &mut SimState,
    world: &World,
    chain: &IncidentChain,
    next: &mut usize,
    records: &mut Vec<ResponseRecord>,
) -> Result<bool> {
    loop {
        let t_inc = chain.incidents.get(*next).map(|i| i.time_min * 60.0);
        let t_agent = if state.pending.is_empty() {
            None
        } else {
            state.next_agent_event()
        };
        let incident_first = match (t_inc, t_agent) {
            (None, None) => return Ok(false),
            (Some(ti), Some(ta)) => ti <= ta,
            (t, _) => t.is_some(),
        };
        match (t_inc, t_agent) {
            (Some(ti), _) if incident_first => {
                let inc = chain.incidents[*next];
                *next += 1;
                let ti = ti.max(state.clock());
                state.advance(world, ti, false)?;
                state.report(PendingIncident {
                    id: inc.id,
                    cell: inc.cell,
                    report_s: ti,
                });
                records.extend(state.drain_with(world, &Greedy)?);
                return Ok(true);
            }
            (_, Some(ta)) => {
                state.advance(world, ta.max(state.clock()), true)?;
                records.extend(state.drain_with(world, &Greedy)?);
            }
            _ => unreachable!("handled above"),
        }
    }
}

/// Greedy dispatch with no reallocation from incident `from` of `chain`
/// onwards; total discounted cost measured from `t0_s`.
pub fn rollout(
    state: &SimState,
    world: &World,
    chain: &IncidentChain,
    from: usize,
    t0_s: f64,
    alpha: f64,
) -> Result<f64> {
    let mut s = state.clone();
    let mut next = from;
    let mut records = Vec::new();
    while advance_epoch(&mut s, world, chain, &mut next, &mut records)? {}
    Ok(total_reward(&records, t0_s, alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub iterations: usize,
    pub c: f64,
    pub alpha: f64,
    /// Sampled chains, one tree each.
    pub n_chains: usize,
    /// Length of each sampled chain.
    pub lookahead_min: f64,
    /// Upper bound on root actions before planning gives up.
    pub max_actions: usize,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        PlannerConfig {
            iterations: 1000,
            c: 1.44,
            alpha: 0.99995,
            n_chains: 50,
            lookahead_min: 120.0,
            max_actions: 20_000,
        }
    }
}

/// Chosen depot assignment for one region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub region: RegionId,
    pub action: Vec<(AgentId, DepotId)>,
    /// Mean negated discounted cost over trees; absent when the choice was
    /// forced.
    pub mean_score: Option<f64>,
    pub n_trees: usize,
    pub iterations: usize,
}

/// Scores root actions over `chains` (one tree each, run in parallel) and
/// returns the best by mean score, ties to the first in canonical order.
pub fn plan_on_chains(
    rs: &RegionState,
    world: &World,
    chains: &[IncidentChain],
    cfg: &PlannerConfig,
    seed: u64,
) -> Result<Option<Recommendation>> {
    let actions = rs.actions(&rs.state, cfg.max_actions)?;
    let free = RegionState::free_agents(&rs.state).len();
    if actions.is_empty() {
        return Err(Error::TooFewDepots {
            p: free,
            depots: rs.slots(&rs.state).iter().map(|s| s.1).sum(),
        });
    }
    if free == 0 {
        return Ok(None);
    }
    let forced = actions.len() == 1 || chains.is_empty();
    if forced {
        return Ok(Some(Recommendation {
            region: rs.region,
            action: RegionState::bind(&rs.state, &actions[0]),
            mean_score: None,
            n_trees: 0,
            iterations: 0,
        }));
    }
    let mc = MctsConfig {
        iterations: cfg.iterations,
        c: cfg.c,
        alpha: cfg.alpha,
        max_actions: cfg.max_actions,
    };
    let per_tree: Vec<Vec<ActionScore>> = chains
        .par_iter()
        .enumerate()
        .map(|(i, ch)| mcts(rs, world, ch, &mc, crate::seed::derive(seed, &[i as u64])))
        .collect::<Result<_>>()?;
    let mut sums = vec![(0.0f64, 0usize); actions.len()];
    for scores in &per_tree {
        for s in scores {
            sums[s.index].0 += s.mean;
            sums[s.index].1 += 1;
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, &(sum, n)) in sums.iter().enumerate() {
        if n == 0 {
            continue;
        }
        let m = sum / n as f64;
        if best.is_none_or(|(_, b)| m > b) {
            best = Some((i, m));
        }
    }
    let (i, m) = best.expect("at least one action scored");
    Ok(Some(Recommendation {
        region: rs.region,
        action: RegionState::bind(&rs.state, &actions[i]),
        mean_score: Some(m),
        n_trees: chains.len(),
        iterations: cfg.iterations,
    }))
}

/// Samples region-restricted chains from `model` starting at the state's
/// clock and plans on them. `None` means the region has no free agents.
pub fn plan_region(
    rs: &RegionState,
    world: &World,
    model: &PoissonModel,
    spikes: Option<&SpikeSchedule>,
    cfg: &PlannerConfig,
    seed: u64,
) -> Result<Option<Recommendation>> {
    if RegionState::free_agents(&rs.state).is_empty() {
        return Ok(None);
    }
    let local = model.restricted(&rs.cells);
    let start = rs.state.clock() / 60.0;
    let chains = (0..cfg.n_chains)
        .map(|i| {
            sample_chain(
                &local,
                start,
                start + cfg.lookahead_min,
                crate::seed::derive(seed, &[u64::from(rs.region.0), i as u64]),
                spikes,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    plan_on_chains(
        rs,
        world,
        &chains,
        cfg,
        crate::seed::derive(seed, &[u64::from(rs.region.0)]),
    )
}

/// Plans every region in id order.
pub fn plan_regions(
    regions: &[Region],
    state: &SimState,
    world: &World,
    model: &PoissonModel,
    spikes: Option<&SpikeSchedule>,
    cfg: &PlannerConfig,
    seed: u64,
) -> Result<Vec<Recommendation>> {
    let mut out = Vec::new();
    for r in regions {
        if r.depot_ids.is_empty() {
            continue;
        }
        let rs = decompose(state, world, r)?;
        if let Some(rec) = plan_region(&rs, world, model, spikes, cfg, seed)? {
            out.push(rec);
        }
    }
    Ok(out)
}
