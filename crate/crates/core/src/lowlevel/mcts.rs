use serde::{Deserialize, Serialize};

use super::{advance_epoch, rollout, total_reward, uct_score, Action, RegionState};
use crate::demand::IncidentChain;
use crate::error::{Error, Result};
use crate::sim::{SimState, World};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MctsConfig {
    pub iterations: usize,
    pub c: f64,
    pub alpha: f64,
    pub max_actions: usize,
}

/// Mean backed-up value of one root action. Values are negated discounted
/// costs, so larger is better.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionScore {
    /// Position of the action in the canonical root action list.
    pub index: usize,
    pub action: Action,
    pub mean: f64,
    pub visits: u32,
}

/// A decision epoch: the state right after an incident was reported and
/// dispatched, before depots are reassigned.
#[derive(Debug, Clone)]
pub struct Node {
    state: SimState,
    next: usize,
    /// Discounted cost accrued from the root to this node.
    cost: f64,
    actions: Option<Vec<Action>>,
    pub action: Option<usize>,
    pub children: Vec<usize>,
    pub parent: Option<usize>,
    pub visits: u32,
    pub value_sum: f64,
    /// Rollouts started at this node.
    pub rollouts: u32,
    terminal: bool,
}

impl Node {
    fn new(
        state: SimState,
        next: usize,
        cost: f64,
        terminal: bool,
        parent: Option<usize>,
        action: Option<usize>,
    ) -> Node {
        Node {
            state,
            next,
            cost,
            actions: None,
            action,
            children: Vec::new(),
            parent,
            visits: 0,
            value_sum: 0.0,
            rollouts: 0,
            terminal,
        }
    }

    pub fn mean(&self) -> f64 {
        self.value_sum / self.visits as f64
    }
}

#[derive(Debug, Clone)]
pub struct SearchTree {
    pub nodes: Vec<Node>,
    /// Smallest and largest backed-up return so far.
    bounds: (f64, f64),
}

impl SearchTree {
    pub fn root(&self) -> &Node {
        &self.nodes[0]
    }

    /// Scores of every visited root action, in canonical order.
    pub fn root_scores(&self) -> Vec<ActionScore> {
        let root = self.root();
        let actions = root.actions.as_deref().unwrap_or(&[]);
        let mut out: Vec<ActionScore> = root
            .children
            .iter()
            .map(|&c| {
                let n = &self.nodes[c];
                let index = n.action.expect("child has an action");
                ActionScore {
                    index,
                    action: actions[index].clone(),
                    mean: n.mean(),
                    visits: n.visits,
                }
            })
            .collect();
        out.sort_by_key(|s| s.index);
        out
    }

    fn normalized(&self, v: f64) -> f64 {
        let (lo, hi) = self.bounds;
        if hi > lo {
            (v - lo) / (hi - lo)
        } else {
            0.5
        }
    }
}

/// UCT search over depot assignments for one region on one chain.
///
/// Each node is the state right after an incident; its actions assign the
/// free agents to depots. Selection uses UCT on means rescaled to `[0, 1]`
/// by the range of returns seen so far, expansion takes untried actions in
/// canonical order, and leaves are valued by a greedy-dispatch rollout to
/// the end of the chain. Every node on the path is credited with the full
/// return from the root.
pub fn search(
    root: &RegionState,
    world: &World,
    chain: &IncidentChain,
    cfg: &MctsConfig,
    seed: u64,
) -> Result<SearchTree> {
    if cfg.iterations == 0 {
        return Err(Error::Config("MCTS needs at least one iteration".into()));
    }
    let mut start = root.state.clone();
    start.reseed(seed);
    let t0 = start.clock();
    let mut tree = SearchTree {
        nodes: vec![Node::new(start, 0, 0.0, false, None, None)],
        bounds: (f64::INFINITY, f64::NEG_INFINITY),
    };
    for _ in 0..cfg.iterations {
        // selection
        let mut cur = 0;
        loop {
            let node = &mut tree.nodes[cur];
            if node.terminal {
                break;
            }
            if node.actions.is_none() {
                let acts = root.actions(&node.state, cfg.max_actions)?;
                if acts.is_empty() {
                    return Err(Error::TooFewDepots {
                        p: RegionState::free_agents(&node.state).len(),
                        depots: 0,
                    });
                }
                node.actions = Some(acts);
            }
            let n_actions = node.actions.as_ref().map_or(0, Vec::len);
            if node.children.len() < n_actions {
                break;
            }
            let parent_visits = node.visits;
            let mut best: Option<(usize, f64)> = None;
            for &ch in &tree.nodes[cur].children {
                let n = &tree.nodes[ch];
                let mean = if n.visits == 0 {
                    0.0
                } else {
                    tree.normalized(n.mean())
                };
                let s = uct_score(mean, parent_visits, n.visits, cfg.c);
                if best.is_none_or(|(_, b)| s > b) {
                    best = Some((ch, s));
                }
            }
            cur = best.expect("expanded node has children").0;
        }

        // expansion
        if !tree.nodes[cur].terminal {
            let node = &tree.nodes[cur];
            let idx = node.children.len();
            let action = &node.actions.as_ref().expect("actions listed")[idx];
            let mut state = node.state.clone();
            state.assign_depots(world, &RegionState::bind(&state, action))?;
            let mut next = node.next;
            let mut records = Vec::new();
            let more = advance_epoch(&mut state, world, chain, &mut next, &mut records)?;
            let cost = node.cost + total_reward(&records, t0, cfg.alpha);
            let child = tree.nodes.len();
            tree.nodes
                .push(Node::new(state, next, cost, !more, Some(cur), Some(idx)));
            tree.nodes[cur].children.push(child);
            cur = child;
        }

        // simulation
        let leaf = &tree.nodes[cur];
        let cost = if leaf.terminal {
            leaf.cost
        } else {
            leaf.cost + rollout(&leaf.state, world, chain, leaf.next, t0, cfg.alpha)?
        };
        let value = -cost;
        tree.bounds.0 = tree.bounds.0.min(value);
        tree.bounds.1 = tree.bounds.1.max(value);
        tree.nodes[cur].rollouts += 1;

        // backpropagation
        let mut at = Some(cur);
        while let Some(i) = at {
            let n = &mut tree.nodes[i];
            n.visits += 1;
            n.value_sum += value;
            at = n.parent;
        }
    }
    Ok(tree)
}

/// Root action scores of one search.
pub fn mcts(
    root: &RegionState,
    world: &World,
    chain: &IncidentChain,
    cfg: &MctsConfig,
    seed: u64,
) -> Result<Vec<ActionScore>> {
    Ok(search(root, world, chain, cfg, seed)?.root_scores())
}
