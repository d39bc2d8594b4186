use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PendingIncident, ResponseRecord, SimState, World};
use crate::demand::IncidentChain;
use crate::error::{Error, Result};
use crate::ids::{AgentId, DepotId, IncidentId, RegionId};

/// Picks the agent for the incident at the head of the queue, or `None` to
/// leave it queued.
pub trait DispatchPolicy {
    fn choose(
        &self,
        state: &SimState,
        world: &World,
        incident: &PendingIncident,
    ) -> Result<Option<AgentId>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanTrigger {
    Incident(IncidentId),
    Tick,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Actuation {
    Region { agent: AgentId, region: RegionId },
    Depots(Vec<(AgentId, DepotId)>),
}

pub trait AllocationPolicy {
    fn plan(
        &mut self,
        state: &SimState,
        world: &World,
        trigger: PlanTrigger,
    ) -> Result<Vec<Actuation>>;
}

/// An agent goes offline at `start_min`; it comes back after
/// `duration_min`, or never when that is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub agent: AgentId,
    pub start_min: f64,
    #[serde(default)]
    pub duration_min: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    /// Longest stretch without a planner call while incidents remain.
    pub max_realloc_gap_min: f64,
    pub failures: Vec<FailureEvent>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_realloc_gap_min: 60.0,
            failures: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedActuation {
    pub time_s: f64,
    pub actuation: Actuation,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Sorted by incident id.
    pub records: Vec<ResponseRecord>,
    pub state: SimState,
    pub actuations: Vec<LoggedActuation>,
    pub planner_calls: usize,
}

impl RunOutput {
    pub fn response_times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.response_s).collect()
    }
}

impl SimState {
    /// Dispatches from the head of the queue until it empties or the policy
    /// declines.
    pub fn drain_with(
        &mut self,
        world: &World,
        policy: &dyn DispatchPolicy,
    ) -> Result<Vec<ResponseRecord>> {
        let mut out = Vec::new();
        while let Some(head) = self.pending.front().copied() {
            match policy.choose(self, world, &head)? {
                Some(agent) => out.push(self.dispatch(world, agent, head.id)?),
                None => break,
            }
        }
        Ok(out)
    }

    pub fn actuate(&mut self, world: &World, a: &Actuation) -> Result<()> {
        match a {
            Actuation::Region { agent, region } => self.assign_region(*agent, *region),
            Actuation::Depots(moves) => self.assign_depots(world, moves),
        }
    }
}

/// Plays `chain` forward from `state` until every incident is served and
/// every agent has settled.
///
/// Events sharing a timestamp are handled in a fixed order: incident
/// arrivals, then agent transitions and failures, then planner ticks. The
/// allocation policy runs after each arrival and whenever
/// `max_realloc_gap_min` passes without a call while arrivals remain.
pub fn run(
    world: &World,
    mut state: SimState,
    chain: &IncidentChain,
    dispatch: &dyn DispatchPolicy,
    mut allocation: Option<&mut dyn AllocationPolicy>,
    opts: &RunOptions,
) -> Result<RunOutput> {
    if !(opts.max_realloc_gap_min > 0.0) {
        return Err(Error::Config(format!(
            "max_realloc_gap_min must be positive, got {}",
            opts.max_realloc_gap_min
        )));
    }
    let mut failures = opts.failures.clone();
    failures.sort_by(|a, b| {
        a.start_min
            .total_cmp(&b.start_min)
            .then(a.agent.cmp(&b.agent))
    });
    for f in &failures {
        state.agent(f.agent)?;
    }
    let gap_s = opts.max_realloc_gap_min * 60.0;

    let mut records = Vec::with_capacity(chain.len());
    let mut actuations = Vec::new();
    let mut planner_calls = 0;
    let mut next_inc = 0;
    let mut next_fail = 0;
    let mut last_plan = state.clock();
    let planning = allocation.is_some();

    let mut plan = |state: &mut SimState,
                    trigger: PlanTrigger,
                    actuations: &mut Vec<LoggedActuation>,
                    calls: &mut usize|
     -> Result<()> {
        if let Some(policy) = allocation.as_deref_mut() {
            *calls += 1;
            for a in policy.plan(state, world, trigger)? {
                state.actuate(world, &a)?;
                actuations.push(LoggedActuation {
                    time_s: state.clock(),
                    actuation: a,
                });
            }
        }
        Ok(())
    };
    loop {
        let t_inc = chain
            .incidents
            .get(next_inc)
            .map_or(f64::INFINITY, |i| i.time_min * 60.0);
        let t_fail = failures
            .get(next_fail)
            .map_or(f64::INFINITY, |f| f.start_min * 60.0);
        let t_agent = state
            .next_agent_event()
            .unwrap_or(f64::INFINITY)
            .min(t_fail);
        let t_tick = if planning && next_inc < chain.len() {
            last_plan + gap_s
        } else {
            f64::INFINITY
        };
        let t = t_inc.min(t_agent).min(t_tick);
        if t == f64::INFINITY {
            break;
        }
        let t = t.max(state.clock());

        if t_inc <= t_agent && t_inc <= t_tick {
            let inc = chain.incidents[next_inc];
            next_inc += 1;
            state.advance(world, t, false)?;
            state.report(PendingIncident {
                id: inc.id,
                cell: inc.cell,
                report_s: t,
            });
            records.extend(state.drain_with(world, dispatch)?);
            plan(
                &mut state,
                PlanTrigger::Incident(inc.id),
                &mut actuations,
                &mut planner_calls,
            )?;
            last_plan = t;
        } else if t_agent <= t_tick {
            state.advance(world, t, true)?;
            while let Some(f) = failures.get(next_fail).filter(|f| f.start_min * 60.0 <= t) {
                let until = f.duration_min.map(|d| (f.start_min + d) * 60.0);
                state.set_agent_available(f.agent, false, until)?;
                next_fail += 1;
            }
            records.extend(state.drain_with(world, dispatch)?);
        } else {
            state.advance(world, t, true)?;
            plan(
                &mut state,
                PlanTrigger::Tick,
                &mut actuations,
                &mut planner_calls,
            )?;
            last_plan = t;
            records.extend(state.drain_with(world, dispatch)?);
        }
    }

    records.sort_by_key(|r| r.incident);
    Ok(RunOutput {
        records,
        state,
        actuations,
        planner_calls,
    })
}

/// Writes the run log with columns
/// `incident_time,cell,dispatch_time,arrival_time,response_s,agent_id`.
pub fn write_records_csv(path: &Path, records: &[ResponseRecord]) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        incident_time: f64,
        cell: u32,
        dispatch_time: f64,
        arrival_time: f64,
        response_s: f64,
        agent_id: u32,
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in records {
        w.serialize(Row {
            incident_time: r.incident_time,
            cell: r.cell.0,
            dispatch_time: r.dispatch_time,
            arrival_time: r.arrival_time,
            response_s: r.response_s,
            agent_id: r.agent.0,
        })
        .map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
