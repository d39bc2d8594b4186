//! Experiment pipeline: loading a city, fitting demand, segmenting regions,
//! placing agents, the planner policies and the run matrix.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod synthetic;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::{
    fit_poisson, region_rate, sample_chain, IncidentChain, IncidentRecord, PoissonModel,
    SpikeSchedule,
};
use crate::dispatch::Greedy;
use crate::error::{Error, Result};
use crate::highlevel::{allocate, rebalance, region_counts, Allocation, Move, RegionDemand};
use crate::ids::AgentId;
use crate::lowlevel::{plan_regions, PlannerConfig, Recommendation};
use crate::seed::derive;
use crate::sim::{
    run, Actuation, AgentState, AllocationPolicy, Depot, FailureEvent, PlanTrigger, ResponseRecord,
    RunOptions, ServiceModel, SimState, World,
};
use crate::spatial::{
    build_grid, load_depots, load_incidents, segment_regions, Grid, Segmentation,
};
use crate::travel::TravelModel;
use crate::waittime::{
    generate_training_data, placement_order, train_forest, SurrogateSample, SurrogateSet,
    TrainingChain, WaitEstimator,
};

pub use config::{CitySource, ExperimentConfig, FailureSpec, Policy, Scenario, TrainingSpec};
pub use metrics::{summarize, Summary};
pub use synthetic::{Hotspot, SyntheticCity};

// stream tags for seed derivation
const HISTORY: u64 = 1;
const SEGMENT: u64 = 2;
const EVAL: u64 = 3;
const FAILURE: u64 = 4;
const PLAN: u64 = 5;
const SERVICE: u64 = 6;
const FOREST: u64 = 7;
pub(crate) const TRAIN: u64 = 8;
pub(crate) const HOLDOUT: u64 = 9;

/// Everything known about the city before any model is fitted.
#[derive(Debug, Clone)]
pub struct City {
    pub grid: Grid,
    pub records: Vec<IncidentRecord>,
    pub depots: Vec<Depot>,
    pub observed_minutes: f64,
    /// True arrival rates of a generated city.
    pub truth: Option<PoissonModel>,
    pub world: World,
}

pub fn load_city(cfg: &ExperimentConfig) -> Result<City> {
    let service = ServiceModel {
        mean_minutes: cfg.service_minutes,
        exponential: cfg.service_exponential,
        dropoff_minutes: cfg.dropoff_minutes,
    };
    match &cfg.city {
        CitySource::Synthetic(city) => {
            let grid = city.grid()?;
            let records = city.history(&grid, derive(cfg.seed, &[HISTORY]))?;
            let depots = city.depots(&grid, cfg.depot_capacity)?;
            let world = World::new(
                TravelModel::euclidean(grid.clone(), cfg.speed_mph)?,
                depots.clone(),
                service,
            )?;
            Ok(City {
                truth: Some(city.truth(&grid)),
                observed_minutes: city.history_days * 1440.0,
                grid,
                records,
                depots,
                world,
            })
        }
        CitySource::Files {
            bbox,
            cell_size_miles,
            incidents,
            depots,
            travel,
            observed_minutes,
        } => {
            let grid = build_grid(*bbox, *cell_size_miles)?;
            let records = load_incidents(incidents, &grid)?;
            let depots = load_depots(depots, &grid)?;
            let travel = match travel {
                Some(p) => TravelModel::load_lookup_csv(p, grid.clone())?,
                None => TravelModel::euclidean(grid.clone(), cfg.speed_mph)?,
            };
            let observed_minutes = match observed_minutes {
                Some(m) => *m,
                None => {
                    let lo = records.iter().map(|r| r.time).min();
                    let hi = records.iter().map(|r| r.time).max();
                    match (lo, hi) {
                        (Some(lo), Some(hi)) => (hi - lo).num_milliseconds() as f64 / 60_000.0,
                        _ => return Err(Error::Empty("incident records")),
                    }
                }
            };
            let world = World::new(travel, depots.clone(), service)?;
            Ok(City {
                grid,
                records,
                depots,
                observed_minutes,
                truth: None,
                world,
            })
        }
    }
}

/// A city with its fitted demand model and region segmentation.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub city: City,
    pub fitted: PoissonModel,
    pub seg: Segmentation,
}

impl Prepared {
    pub fn new(cfg: &ExperimentConfig, k: usize) -> Result<Prepared> {
        Prepared::from_city(load_city(cfg)?, cfg, k)
    }

    pub fn from_city(city: City, cfg: &ExperimentConfig, k: usize) -> Result<Prepared> {
        let fitted = fit_poisson(&city.records, &city.grid, city.observed_minutes)?;
        let seg = segment_regions(
            &city.grid,
            &city.records,
            &city.depots,
            k,
            derive(cfg.seed, &[SEGMENT]),
        )?;
        for w in &seg.warnings {
            log::warn!("{w}");
        }
        Ok(Prepared { city, fitted, seg })
    }

    pub fn world(&self) -> &World {
        &self.city.world
    }

    /// Rates incidents are drawn from in evaluation: the true rates when
    /// known, the fitted ones otherwise.
    pub fn eval_model(&self) -> &PoissonModel {
        self.city.truth.as_ref().unwrap_or(&self.fitted)
    }
}

/// Arrival rate and usable capacity of every region. Slots held by failed
/// agents are not usable.
pub fn region_demands(
    seg: &Segmentation,
    world: &World,
    rates: &PoissonModel,
    state: Option<&SimState>,
) -> Result<Vec<RegionDemand>> {
    seg.regions
        .iter()
        .map(|r| {
            let mut capacity = 0usize;
            for d in &r.depot_ids {
                capacity += world.depot(*d)?.capacity as usize;
            }
            let blocked = state.map_or(0, |s| {
                s.agents()
                    .iter()
                    .filter(|a| !a.available && r.depot_ids.contains(&a.depot))
                    .count()
            });
            Ok(RegionDemand {
                id: r.id,
                gamma: region_rate(rates, r),
                capacity: capacity.saturating_sub(blocked),
            })
        })
        .collect()
}

/// Agents per region at the start of every run, from the queue estimator
/// on the fitted rates.
pub fn initial_allocation(prep: &Prepared, cfg: &ExperimentConfig) -> Result<Allocation> {
    let demands = region_demands(&prep.seg, prep.world(), &prep.fitted, None)?;
    allocate(
        &demands,
        cfg.eta(),
        &WaitEstimator::Queue { mu: cfg.eta() },
        cfg.n_agents,
    )
}

/// Agents placed by the initial allocation, each region's share on its
/// depots in Greedy-Add order. Ids run region by region.
pub fn initial_state(prep: &Prepared, cfg: &ExperimentConfig, seed: u64) -> Result<SimState> {
    let alloc = initial_allocation(prep, cfg)?;
    let mut agents = Vec::with_capacity(cfg.n_agents);
    for region in &prep.seg.regions {
        let p = alloc.get(region.id);
        if p == 0 {
            continue;
        }
        let order = placement_order(region, prep.world(), &prep.fitted)?;
        let max_cap = order.iter().map(|d| d.capacity).max().unwrap_or(0);
        let slots = (0..max_cap).flat_map(|round| order.iter().filter(move |d| d.capacity > round));
        for d in slots.take(p) {
            agents.push(AgentState::parked(
                AgentId(agents.len() as u32),
                region.id,
                d,
            ));
        }
    }
    SimState::new(prep.world(), 0.0, agents, derive(seed, &[SERVICE]))
}

/// Evaluation incidents for one (seed, chain), shared by every policy.
pub fn eval_chain(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    scenario: Scenario,
    seed: u64,
    chain: usize,
) -> Result<IncidentChain> {
    let spikes = (scenario == Scenario::Spikes).then_some(&cfg.spikes);
    sample_chain(
        prep.eval_model(),
        0.0,
        cfg.horizon_min,
        derive(seed, &[EVAL, chain as u64]),
        spikes,
    )
}

/// `n` distinct agents failing together. The start time and the agent
/// order depend only on (seed, chain), so smaller counts fail a subset of
/// the agents failed by larger ones.
pub fn failure_schedule(
    cfg: &ExperimentConfig,
    n: usize,
    seed: u64,
    chain: usize,
) -> Vec<FailureEvent> {
    if n == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive(seed, &[FAILURE, chain as u64]));
    let drawn = rng.gen_range(0.1..0.3) * cfg.horizon_min;
    let start_min = cfg.failures.start_min.unwrap_or(drawn);
    let mut ids: Vec<u32> = (0..cfg.n_agents as u32).collect();
    ids.shuffle(&mut rng);
    ids.into_iter()
        .take(n)
        .map(|a| FailureEvent {
            agent: AgentId(a),
            start_min,
            duration_min: Some(cfg.failures.duration_hours * 60.0),
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannerStats {
    pub calls: usize,
    /// Cross-region moves.
    pub moves: usize,
    /// Calls where some region held fewer agents than allocated.
    pub deficit_calls: usize,
    pub deficit_calls_with_moves: usize,
    /// Depot changes made by region planners.
    pub depot_changes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub time_s: f64,
    pub trigger: PlanTrigger,
    pub allocation: Option<Allocation>,
    pub moves: Vec<Move>,
    pub recommendations: Vec<Recommendation>,
}

/// Region planning, optionally preceded by the high level: counts per
/// region from `high`, cross-region rebalancing, then MCTS per region.
pub struct HierarchicalPlanner<'a> {
    prep: &'a Prepared,
    spikes: Option<&'a SpikeSchedule>,
    high: Option<&'a WaitEstimator>,
    cfg: PlannerConfig,
    eta: f64,
    seed: u64,
    pub stats: PlannerStats,
    /// Filled when tracing is on.
    pub trace: Option<Vec<TraceEntry>>,
}

impl<'a> HierarchicalPlanner<'a> {
    pub fn new(
        prep: &'a Prepared,
        cfg: &ExperimentConfig,
        spikes: Option<&'a SpikeSchedule>,
        high: Option<&'a WaitEstimator>,
        seed: u64,
    ) -> Self {
        HierarchicalPlanner {
            prep,
            spikes,
            high,
            cfg: cfg.planner(),
            eta: cfg.eta(),
            seed,
            stats: PlannerStats::default(),
            trace: cfg.trace.then(Vec::new),
        }
    }
}

impl AllocationPolicy for HierarchicalPlanner<'_> {
    fn plan(
        &mut self,
        state: &SimState,
        world: &World,
        trigger: PlanTrigger,
    ) -> Result<Vec<Actuation>> {
        let started = Instant::now();
        let call = self.stats.calls as u64;
        self.stats.calls += 1;
        let seg = &self.prep.seg;
        let mut work = state.clone();
        let mut out = Vec::new();
        let mut allocation = None;
        let mut moves = Vec::new();

        if let Some(est) = self.high {
            let now_min = state.clock() / 60.0;
            let rates = match self.spikes {
                Some(s) => self.prep.fitted.at_time(now_min, s),
                None => self.prep.fitted.clone(),
            };
            let available = state.agents().iter().filter(|a| a.available).count();
            let demands = region_demands(seg, world, &rates, Some(state))?;
            let alloc = allocate(&demands, self.eta, est, available)?;
            let counts = region_counts(state, seg);
            let deficit = seg.regions.iter().any(|r| counts[&r.id] < alloc.get(r.id));
            moves = rebalance(state, world, seg, &alloc)?;
            if deficit {
                self.stats.deficit_calls += 1;
                if !moves.is_empty() {
                    self.stats.deficit_calls_with_moves += 1;
                }
            }
            self.stats.moves += moves.len();
            for m in &moves {
                out.push(Actuation::Region {
                    agent: m.agent,
                    region: m.to,
                });
            }
            if !moves.is_empty() {
                out.push(Actuation::Depots(
                    moves.iter().map(|m| (m.agent, m.depot)).collect(),
                ));
            }
            for a in &out {
                work.actuate(world, a)?;
            }
            allocation = Some(alloc);
        }

        let recs = plan_regions(
            &seg.regions,
            &work,
            world,
            &self.prep.fitted,
            self.spikes,
            &self.cfg,
            derive(self.seed, &[PLAN, call]),
        )?;
        for rec in &recs {
            let changes: Vec<_> = rec
                .action
                .iter()
                .filter(|(a, d)| work.agent(*a).is_ok_and(|s| s.depot != *d))
                .copied()
                .collect();
            if !changes.is_empty() {
                self.stats.depot_changes += changes.len();
                let act = Actuation::Depots(changes);
                work.actuate(world, &act)?;
                out.push(act);
            }
        }
        if let Some(trace) = &mut self.trace {
            trace.push(TraceEntry {
                time_s: state.clock(),
                trigger,
                allocation,
                moves,
                recommendations: recs,
            });
        }
        log::debug!(
            "planner call {call} at {:.0}s took {:.3}s",
            state.clock(),
            started.elapsed().as_secs_f64()
        );
        Ok(out)
    }
}

/// High-level estimators available to a run matrix.
#[derive(Debug, Clone)]
pub struct Estimators {
    pub queue: WaitEstimator,
    pub forest: Option<WaitEstimator>,
}

impl Estimators {
    /// The queue estimator, plus forests when a forest policy is listed:
    /// read from `cfg.surrogate` or trained on the spot.
    pub fn for_config(prep: &Prepared, cfg: &ExperimentConfig) -> Result<Estimators> {
        let forest = if cfg.policies.contains(&Policy::HlLlForest) {
            let set = match &cfg.surrogate {
                Some(p) => SurrogateSet::read(p)?,
                None => train_surrogates(
                    prep,
                    cfg,
                    &simulate_samples(prep, cfg, TRAIN, cfg.training.chains_per_scale)?,
                )?,
            };
            Some(set.into_estimator())
        } else {
            None
        };
        Ok(Estimators {
            queue: WaitEstimator::Queue { mu: cfg.eta() },
            forest,
        })
    }

    fn for_policy(&self, policy: Policy) -> Result<Option<&WaitEstimator>> {
        match policy {
            Policy::Baseline | Policy::LlOnly => Ok(None),
            Policy::HlLlQueue => Ok(Some(&self.queue)),
            Policy::HlLlForest => self
                .forest
                .as_ref()
                .map(Some)
                .ok_or_else(|| Error::Config("hl_ll_forest needs a trained surrogate".into())),
        }
    }
}

/// Training chains for every region with depots at each configured rate
/// scale, simulated into samples. `tag` separates training from hold-out
/// streams.
pub fn simulate_samples(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    tag: u64,
    per_scale: usize,
) -> Result<Vec<SurrogateSample>> {
    let mut out = Vec::new();
    for region in prep.seg.regions.iter().filter(|r| !r.depot_ids.is_empty()) {
        let rid = u64::from(region.id.0);
        let local = prep.fitted.restricted(&region.cell_ids);
        let base = region_rate(&prep.fitted, region);
        let mut chains = Vec::new();
        for (si, &scale) in cfg.training.rate_scales.iter().enumerate() {
            let model = local.scaled(scale);
            for j in 0..per_scale {
                let seed = derive(cfg.seed, &[tag, rid, si as u64, j as u64]);
                chains.push(TrainingChain {
                    chain: sample_chain(&model, 0.0, cfg.training.window_min, seed, None)?,
                    gamma: base * scale,
                });
            }
        }
        out.extend(generate_training_data(
            region,
            prep.world(),
            &prep.fitted,
            &chains,
            derive(cfg.seed, &[tag, rid]),
        )?);
    }
    Ok(out)
}

/// One forest per region on features `(p, gamma)`.
pub fn train_surrogates(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    samples: &[SurrogateSample],
) -> Result<SurrogateSet> {
    let mut by_region: BTreeMap<_, (Vec<Vec<f64>>, Vec<f64>)> = BTreeMap::new();
    for s in samples {
        let e = by_region.entry(s.region).or_default();
        e.0.push(vec![s.p as f64, s.gamma_per_min]);
        e.1.push(s.mean_response_s);
    }
    let mut regions = BTreeMap::new();
    for r in &prep.seg.regions {
        if let Some((x, y)) = by_region.get(&r.id) {
            let seed = derive(cfg.seed, &[FOREST, u64::from(r.id.0)]);
            regions.insert(r.id, train_forest(x, y, cfg.training.forest, seed)?);
        }
    }
    Ok(SurrogateSet { regions })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RunKey {
    pub policy: Policy,
    pub n_failures: usize,
    pub seed: u64,
    pub chain: usize,
}

impl RunKey {
    pub fn file_stem(&self, scenario: Scenario) -> String {
        format!(
            "{}_{}_f{}_s{}_c{}",
            scenario.name(),
            self.policy,
            self.n_failures,
            self.seed,
            self.chain
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub key: RunKey,
    pub records: Vec<ResponseRecord>,
    pub planner_calls: usize,
    pub stats: PlannerStats,
    pub trace: Option<Vec<TraceEntry>>,
}

pub fn run_one(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    est: &Estimators,
    scenario: Scenario,
    key: RunKey,
) -> Result<RunResult> {
    let world = prep.world();
    let state = initial_state(prep, cfg, key.seed)?;
    let chain = eval_chain(prep, cfg, scenario, key.seed, key.chain)?;
    let opts = RunOptions {
        max_realloc_gap_min: cfg.max_realloc_gap_min,
        failures: failure_schedule(cfg, key.n_failures, key.seed, key.chain),
    };
    if key.policy == Policy::Baseline {
        let out = run(world, state, &chain, &Greedy, None, &opts)?;
        return Ok(RunResult {
            key,
            records: out.records,
            planner_calls: 0,
            stats: PlannerStats::default(),
            trace: None,
        });
    }
    let spikes = (scenario == Scenario::Spikes).then_some(&cfg.spikes);
    let plan_seed = derive(key.seed, &[key.chain as u64]);
    let mut planner =
        HierarchicalPlanner::new(prep, cfg, spikes, est.for_policy(key.policy)?, plan_seed);
    let out = run(world, state, &chain, &Greedy, Some(&mut planner), &opts)?;
    Ok(RunResult {
        key,
        records: out.records,
        planner_calls: out.planner_calls,
        stats: planner.stats,
        trace: planner.trace,
    })
}

/// Runs every key on the worker pool; results come back in key order.
pub fn run_matrix(
    prep: &Prepared,
    cfg: &ExperimentConfig,
    est: &Estimators,
    scenario: Scenario,
    keys: &[RunKey],
) -> Result<Vec<RunResult>> {
    keys.par_iter()
        .map(|k| {
            let r = run_one(prep, cfg, est, scenario, *k);
            if let Ok(r) = &r {
                log::info!(
                    "{} done: {} incidents",
                    k.file_stem(scenario),
                    r.records.len()
                );
            }
            r
        })
        .collect()
}

/// Every (policy, failure count, seed, chain) combination, in that order.
pub fn matrix_keys(
    cfg: &ExperimentConfig,
    policies: &[Policy],
    failures: &[usize],
    seeds: &[u64],
) -> Vec<RunKey> {
    let mut keys = Vec::new();
    for &policy in policies {
        for &n_failures in failures {
            for &seed in seeds {
                for chain in 0..cfg.n_eval_chains {
                    keys.push(RunKey {
                        policy,
                        n_failures,
                        seed,
                        chain,
                    });
                }
            }
        }
    }
    keys
}
