use std::collections::HashMap;

use hiplan::dispatch::{drain_queue, greedy_dispatch};
use hiplan::sim::{AgentState, Depot, PendingIncident, ServiceModel, SimState, World};
use hiplan::spatial::Grid;
use hiplan::travel::TravelModel;
use hiplan::{AgentId, CellId, DepotId, IncidentId, RegionId};
use proptest::prelude::*;

// Cell 0 is the incident. Depots sit on cells 1..=3.
fn lookup_world(times: [f64; 3]) -> World {
    let grid = Grid::planar(1, 4, 1.0).unwrap();
    let mut table = HashMap::new();
    for a in 0..4u32 {
        for b in 0..4u32 {
            let s = if a == b {
                0.0
            } else if a == 0 || b == 0 {
                times[(a.max(b) - 1) as usize]
            } else {
                60.0
            };
            table.insert((CellId(a), CellId(b)), s);
        }
    }
    let depots = (1..=3)
        .map(|c| Depot {
            id: DepotId(c),
            cell: CellId(c),
            capacity: 8,
        })
        .collect();
    World::new(
        TravelModel::lookup(grid, &table).unwrap(),
        depots,
        ServiceModel::default(),
    )
    .unwrap()
}

fn parked(w: &World, at: &[(u32, u32)]) -> SimState {
    let agents = at
        .iter()
        .map(|&(id, d)| {
            AgentState::parked(AgentId(id), RegionId(id % 2), w.depot(DepotId(d)).unwrap())
        })
        .collect();
    SimState::new(w, 0.0, agents, 1).unwrap()
}

#[test]
fn nearer_agent_is_sent() {
    let w = lookup_world([240.0, 480.0, 900.0]);
    let s = parked(&w, &[(0, 2), (1, 1)]);
    assert_eq!(
        greedy_dispatch(&s, &w, CellId(0)).unwrap(),
        Some(AgentId(1))
    );
}

#[test]
fn exact_tie_goes_to_the_lower_id() {
    let w = lookup_world([300.0, 300.0, 900.0]);
    let mut at: Vec<(u32, u32)> = (0..8).map(|i| (i, 3)).collect();
    at[4].1 = 2;
    at[7].1 = 1;
    let s = parked(&w, &at);
    assert_eq!(
        greedy_dispatch(&s, &w, CellId(0)).unwrap(),
        Some(AgentId(4))
    );
}

#[test]
fn nothing_free_leaves_the_incident_queued() {
    let w = lookup_world([240.0, 480.0, 900.0]);
    let mut s = parked(&w, &[(0, 1), (1, 2)]);
    s.report(PendingIncident {
        id: IncidentId(0),
        cell: CellId(3),
        report_s: 0.0,
    });
    s.report(PendingIncident {
        id: IncidentId(1),
        cell: CellId(3),
        report_s: 0.0,
    });
    s.set_agent_available(AgentId(1), false, None).unwrap();
    let served = drain_queue(&mut s, &w).unwrap();
    assert_eq!(served.len(), 1);
    assert_eq!(served[0].agent, AgentId(0));
    assert_eq!(greedy_dispatch(&s, &w, CellId(0)).unwrap(), None);
    assert_eq!(s.pending.len(), 1);
    assert_eq!(s.pending[0].id, IncidentId(1));
}

proptest! {
    #[test]
    fn chosen_agent_is_never_farther_than_another_free_one(
        depots in prop::collection::vec(1u32..=3, 1..8),
        failed in prop::collection::vec(any::<bool>(), 8),
        target in 0u32..4,
    ) {
        let w = lookup_world([240.0, 300.0, 300.0]);
        let at: Vec<(u32, u32)> = depots.iter().enumerate().map(|(i, d)| (i as u32, *d)).collect();
        let mut s = parked(&w, &at);
        for (i, f) in failed.iter().take(at.len()).enumerate() {
            if *f {
                s.set_agent_available(AgentId(i as u32), false, None).unwrap();
            }
        }
        let chosen = greedy_dispatch(&s, &w, CellId(target)).unwrap();
        let free: Vec<&AgentState> = s.free_agents().collect();
        prop_assert_eq!(chosen.is_none(), free.is_empty());
        if let Some(id) = chosen {
            let t = |a: &AgentState| w.travel.travel_time(a.position, CellId(target)).unwrap();
            let mine = t(s.agent(id).unwrap());
            for a in &free {
                prop_assert!(mine < t(a) || (mine == t(a) && id <= a.id));
            }
        }
    }
}
