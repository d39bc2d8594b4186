//! Discrete-event simulator of responders servicing incidents.
//!
//! [`SimState`] holds the pending-incident queue and every agent. Time is in
//! seconds on the simulator clock; incident chains report in minutes and are
//! converted on ingest. Agent positions are a pure function of the current
//! leg and the clock, so stepping through intermediate times never changes
//! later outcomes.

mod run;

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{AgentId, CellId, DepotId, IncidentId, RegionId};
use crate::spatial::Grid;
use crate::travel::TravelModel;

pub use run::{
    run, write_records_csv, Actuation, AllocationPolicy, DispatchPolicy, FailureEvent,
    LoggedActuation, PlanTrigger, RunOptions, RunOutput,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Depot {
    pub id: DepotId,
    pub cell: CellId,
    pub capacity: u32,
}

/// How long an agent stays on scene once it arrives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ServiceModel {
    pub mean_minutes: f64,
    /// Draw durations from an exponential with the same mean instead of
    /// using the mean as a fixed duration.
    #[serde(default)]
    pub exponential: bool,
    /// Fixed extra busy time, e.g. hospital drop-off.
    #[serde(default)]
    pub dropoff_minutes: f64,
}

impl Default for ServiceModel {
    fn default() -> Self {
        ServiceModel {
            mean_minutes: 20.0,
            exponential: false,
            dropoff_minutes: 0.0,
        }
    }
}

impl ServiceModel {
    fn draw_seconds(&self, rng: &mut ChaCha8Rng) -> f64 {
        let on_scene = if self.exponential {
            let e: f64 = rng.sample(Exp1);
            e * self.mean_minutes
        } else {
            self.mean_minutes
        };
        (on_scene + self.dropoff_minutes) * 60.0
    }

    /// Service rate of one agent, per minute.
    pub fn rate_per_minute(&self) -> f64 {
        1.0 / (self.mean_minutes + self.dropoff_minutes)
    }
}

/// Static environment shared by every simulator state.
#[derive(Debug, Clone)]
pub struct World {
    pub travel: TravelModel,
    depots: Vec<Depot>,
    pub service: ServiceModel,
}

impl World {
    pub fn new(travel: TravelModel, mut depots: Vec<Depot>, service: ServiceModel) -> Result<Self> {
        depots.sort_by_key(|d| d.id);
        for w in depots.windows(2) {
            if w[0].id == w[1].id {
                return Err(Error::Config(format!("duplicate {}", w[0].id)));
            }
        }
        for d in &depots {
            if d.capacity == 0 {
                return Err(Error::Config(format!("{} has zero capacity", d.id)));
            }
            if !travel.grid().contains(d.cell) {
                return Err(Error::UnknownCell(d.cell));
            }
        }
        if !(service.mean_minutes > 0.0) || service.dropoff_minutes < 0.0 {
            return Err(Error::Config(format!("invalid service model {service:?}")));
        }
        Ok(World {
            travel,
            depots,
            service,
        })
    }

    pub fn grid(&self) -> &Grid {
        self.travel.grid()
    }

    pub fn depots(&self) -> &[Depot] {
        &self.depots
    }

    pub fn depot(&self, id: DepotId) -> Result<&Depot> {
        self.depots
            .binary_search_by_key(&id, |d| d.id)
            .map(|i| &self.depots[i])
            .map_err(|_| Error::UnknownDepot(id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentStatus {
    /// Parked at its depot.
    Waiting,
    /// Heading to its depot; interruptible by a dispatch.
    InTransit,
    /// Heading to an incident.
    Responding,
    /// On scene.
    Servicing,
}

/// Movement currently under way.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leg {
    pub from: CellId,
    pub depart_s: f64,
    pub arrive_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub id: AgentId,
    pub position: CellId,
    pub status: AgentStatus,
    pub destination: CellId,
    pub region: RegionId,
    pub depot: DepotId,
    /// End of on-scene service; set only while servicing.
    pub busy_until: Option<f64>,
    /// False while failed.
    pub available: bool,
    pub restore_at: Option<f64>,
    pub leg: Option<Leg>,
    service_s: f64,
}

impl AgentState {
    /// An agent parked at `depot`.
    pub fn parked(id: AgentId, region: RegionId, depot: &Depot) -> Self {
        AgentState {
            id,
            position: depot.cell,
            status: AgentStatus::Waiting,
            destination: depot.cell,
            region,
            depot: depot.id,
            busy_until: None,
            available: true,
            restore_at: None,
            leg: None,
            service_s: 0.0,
        }
    }

    /// Available and not tied to an incident.
    pub fn is_free(&self) -> bool {
        self.available && matches!(self.status, AgentStatus::Waiting | AgentStatus::InTransit)
    }

    /// Time of this agent's next scheduled transition.
    pub fn next_event(&self) -> Option<f64> {
        let own = match self.status {
            AgentStatus::Waiting => None,
            AgentStatus::InTransit | AgentStatus::Responding => self.leg.map(|l| l.arrive_s),
            AgentStatus::Servicing => self.busy_until,
        };
        match (own, self.restore_at) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PendingIncident {
    pub id: IncidentId,
    pub cell: CellId,
    pub report_s: f64,
}

/// One serviced incident. Times are simulator seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub incident: IncidentId,
    pub cell: CellId,
    pub incident_time: f64,
    pub dispatch_time: f64,
    pub arrival_time: f64,
    /// Arrival minus report, queueing delay included.
    pub response_s: f64,
    pub agent: AgentId,
}

impl ResponseRecord {
    pub fn travel_s(&self) -> f64 {
        self.arrival_time - self.dispatch_time
    }
}

/// Pending queue plus agent states at `clock`.
#[derive(Debug, Clone)]
pub struct SimState {
    clock: f64,
    pub pending: VecDeque<PendingIncident>,
    agents: Vec<AgentState>,
    rng: ChaCha8Rng,
}

impl PartialEq for SimState {
    fn eq(&self, other: &Self) -> bool {
        self.clock == other.clock && self.pending == other.pending && self.agents == other.agents
    }
}

impl SimState {
    /// `agents` must carry distinct ids; they are kept sorted by id. `seed`
    /// drives exponential service draws.
    pub fn new(world: &World, clock: f64, mut agents: Vec<AgentState>, seed: u64) -> Result<Self> {
        agents.sort_by_key(|a| a.id);
        if let Some(w) = agents.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Config(format!("duplicate {}", w[0].id)));
        }
        let state = SimState {
            clock,
            pending: VecDeque::new(),
            agents,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        for d in world.depots() {
            let load = state.depot_load(d.id);
            if load > d.capacity as usize {
                return Err(Error::OverCapacity {
                    depot: d.id,
                    capacity: d.capacity,
                });
            }
        }
        for a in &state.agents {
            world.depot(a.depot)?;
        }
        Ok(state)
    }

    /// A subset of this state's agents and pending incidents sharing its
    /// clock and service stream.
    pub fn filtered(
        &self,
        keep_agent: impl Fn(&AgentState) -> bool,
        keep_incident: impl Fn(&PendingIncident) -> bool,
    ) -> SimState {
        SimState {
            clock: self.clock,
            pending: self
                .pending
                .iter()
                .filter(|i| keep_incident(i))
                .copied()
                .collect(),
            agents: self
                .agents
                .iter()
                .filter(|a| keep_agent(a))
                .cloned()
                .collect(),
            rng: self.rng.clone(),
        }
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn agent(&self, id: AgentId) -> Result<&AgentState> {
        self.index_of(id).map(|i| &self.agents[i])
    }

    fn index_of(&self, id: AgentId) -> Result<usize> {
        self.agents
            .binary_search_by_key(&id, |a| a.id)
            .map_err(|_| Error::UnknownAgent(id))
    }

    pub fn free_agents(&self) -> impl Iterator<Item = &AgentState> {
        self.agents.iter().filter(|a| a.is_free())
    }

    /// Agents assigned to `depot`, busy or not.
    pub fn depot_load(&self, depot: DepotId) -> usize {
        self.agents.iter().filter(|a| a.depot == depot).count()
    }

    /// Earliest pending agent transition (arrival, service end, restore).
    pub fn next_agent_event(&self) -> Option<f64> {
        self.agents
            .iter()
            .filter_map(AgentState::next_event)
            .min_by(f64::total_cmp)
    }

    /// Appends a newly reported incident to the back of the queue.
    pub fn report(&mut self, incident: PendingIncident) {
        self.pending.push_back(incident);
    }

    /// Advances every agent to `t`, applying all transitions due at or
    /// before `t`.
    pub fn step_to(&mut self, world: &World, t: f64) -> Result<()> {
        self.advance(world, t, true)
    }

    /// With `inclusive == false`, transitions due exactly at `t` stay
    /// pending so events at the same instant can be ordered by the caller.
    pub(crate) fn advance(&mut self, world: &World, t: f64, inclusive: bool) -> Result<()> {
        if t < self.clock {
            return Err(Error::ClockRegression {
                clock: self.clock,
                requested: t,
            });
        }
        let due = |at: f64| if inclusive { at <= t } else { at < t };
        for agent in &mut self.agents {
            loop {
                if agent.restore_at.is_some_and(due) {
                    agent.available = true;
                    agent.restore_at = None;
                    continue;
                }
                match agent.status {
                    AgentStatus::Waiting => break,
                    AgentStatus::Responding => {
                        let leg = agent.leg.expect("responding agent has a leg");
                        if !due(leg.arrive_s) {
                            break;
                        }
                        agent.position = agent.destination;
                        agent.status = AgentStatus::Servicing;
                        agent.busy_until = Some(leg.arrive_s + agent.service_s);
                        agent.leg = None;
                    }
                    AgentStatus::Servicing => {
                        let done = agent.busy_until.expect("servicing agent has busy_until");
                        if !due(done) {
                            break;
                        }
                        agent.busy_until = None;
                        let home = world.depot(agent.depot)?.cell;
                        agent.destination = home;
                        if agent.position == home {
                            agent.status = AgentStatus::Waiting;
                        } else {
                            let travel = world.travel.travel_time(agent.position, home)?;
                            agent.status = AgentStatus::InTransit;
                            agent.leg = Some(Leg {
                                from: agent.position,
                                depart_s: done,
                                arrive_s: done + travel,
                            });
                        }
                    }
                    AgentStatus::InTransit => {
                        let leg = agent.leg.expect("in-transit agent has a leg");
                        if !due(leg.arrive_s) {
                            break;
                        }
                        agent.position = agent.destination;
                        agent.status = AgentStatus::Waiting;
                        agent.leg = None;
                    }
                }
            }
            if let Some(leg) = agent.leg {
                let total = leg.arrive_s - leg.depart_s;
                let elapsed = (t - leg.depart_s).clamp(0.0, total);
                agent.position = if elapsed >= total {
                    agent.destination
                } else {
                    world
                        .travel
                        .interpolate_position(leg.from, agent.destination, elapsed)?
                };
            }
        }
        self.clock = t;
        Ok(())
    }

    /// Sends a free agent to a pending incident, removing it from the queue.
    pub fn dispatch(
        &mut self,
        world: &World,
        agent_id: AgentId,
        incident: IncidentId,
    ) -> Result<ResponseRecord> {
        let idx = self.index_of(agent_id)?;
        let agent = &self.agents[idx];
        if !agent.available {
            return Err(Error::AgentUnavailable(agent_id));
        }
        if !agent.is_free() {
            return Err(Error::AgentBusy(agent_id));
        }
        let qpos = self
            .pending
            .iter()
            .position(|i| i.id == incident)
            .ok_or(Error::UnknownIncident(incident))?;
        let inc = self.pending[qpos];
        let travel = world.travel.travel_time(agent.position, inc.cell)?;
        self.pending.remove(qpos);

        let service_s = world.service.draw_seconds(&mut self.rng);
        let clock = self.clock;
        let agent = &mut self.agents[idx];
        agent.leg = Some(Leg {
            from: agent.position,
            depart_s: clock,
            arrive_s: clock + travel,
        });
        agent.destination = inc.cell;
        agent.status = AgentStatus::Responding;
        agent.service_s = service_s;

        let arrival = clock + travel;
        Ok(ResponseRecord {
            incident: inc.id,
            cell: inc.cell,
            incident_time: inc.report_s,
            dispatch_time: clock,
            arrival_time: arrival,
            response_s: arrival - inc.report_s,
            agent: agent_id,
        })
    }

    pub fn assign_region(&mut self, agent: AgentId, region: RegionId) -> Result<()> {
        let idx = self.index_of(agent)?;
        self.agents[idx].region = region;
        Ok(())
    }

    /// Reassigns one agent's depot. Free agents head there at once; busy
    /// agents go there after their current incident.
    pub fn assign_depot(&mut self, world: &World, agent: AgentId, depot: DepotId) -> Result<()> {
        self.assign_depots(world, &[(agent, depot)])
    }

    /// Applies several depot assignments as one move, so swaps between
    /// full depots are allowed as long as the end state respects capacity.
    pub fn assign_depots(&mut self, world: &World, moves: &[(AgentId, DepotId)]) -> Result<()> {
        let mut idxs = Vec::with_capacity(moves.len());
        for &(a, d) in moves {
            idxs.push(self.index_of(a)?);
            world.depot(d)?;
        }
        let target = |i: usize, a: &AgentState| {
            idxs.iter()
                .rposition(|&j| j == i)
                .map_or(a.depot, |k| moves[k].1)
        };
        for &(_, d) in moves {
            let cap = world.depot(d)?.capacity;
            let load = self
                .agents
                .iter()
                .enumerate()
                .filter(|(i, a)| target(*i, a) == d)
                .count();
            if load > cap as usize {
                return Err(Error::OverCapacity {
                    depot: d,
                    capacity: cap,
                });
            }
        }
        let clock = self.clock;
        for (&i, &(_, d)) in idxs.iter().zip(moves) {
            let agent = &mut self.agents[i];
            if agent.depot == d {
                continue;
            }
            agent.depot = d;
            if !matches!(agent.status, AgentStatus::Waiting | AgentStatus::InTransit) {
                continue;
            }
            let home = world.depot(d)?.cell;
            agent.destination = home;
            if agent.position == home {
                agent.status = AgentStatus::Waiting;
                agent.leg = None;
            } else {
                let travel = world.travel.travel_time(agent.position, home)?;
                agent.status = AgentStatus::InTransit;
                agent.leg = Some(Leg {
                    from: agent.position,
                    depart_s: clock,
                    arrive_s: clock + travel,
                });
            }
        }
        Ok(())
    }

    /// Marks an agent failed (`available == false`) or restored. A failed
    /// agent with `until` comes back on its own once the clock passes it.
    pub fn set_agent_available(
        &mut self,
        agent: AgentId,
        available: bool,
        until: Option<f64>,
    ) -> Result<()> {
        let idx = self.index_of(agent)?;
        let a = &mut self.agents[idx];
        a.available = available;
        a.restore_at = if available { None } else { until };
        Ok(())
    }
}
