//! Greedy nearest-free-agent dispatch.

use crate::error::Result;
use crate::ids::{AgentId, CellId};
use crate::sim::{DispatchPolicy, PendingIncident, ResponseRecord, SimState, World};

/// Sends the free agent with the shortest travel time; ties go to the
/// lowest agent id.
#[derive(Debug, Clone, Copy, Default)]
pub struct Greedy;

impl DispatchPolicy for Greedy {
    fn choose(
        &self,
        state: &SimState,
        world: &World,
        incident: &PendingIncident,
    ) -> Result<Option<AgentId>> {
        greedy_dispatch(state, world, incident.cell)
    }
}

/// The agent [`Greedy`] would send to `cell`, or `None` when every agent is
/// busy or failed.
pub fn greedy_dispatch(state: &SimState, world: &World, cell: CellId) -> Result<Option<AgentId>> {
    let mut best: Option<(f64, AgentId)> = None;
    for a in state.free_agents() {
        let t = world.travel.travel_time(a.position, cell)?;
        if best.is_none_or(|(bt, _)| t < bt) {
            best = Some((t, a.id));
        }
    }
    Ok(best.map(|(_, id)| id))
}

/// Serves the queue in arrival order with [`Greedy`] until it empties or no
/// agent is free.
pub fn drain_queue(state: &mut SimState, world: &World) -> Result<Vec<ResponseRecord>> {
    state.drain_with(world, &Greedy)
}
