//! Hierarchical planning for responder allocation under spatiotemporal
//! uncertainty.
//!
//! The crate is organised bottom-up:
//!
//! - [`spatial`]: the cell grid, k-means region segmentation, point location.
//! - [`demand`]: per-cell Poisson arrival models and incident-chain sampling.
//! - [`travel`]: Euclidean and lookup-table travel times.
//! - [`sim`]: the discrete-event simulator of responders and incidents.
//! - [`dispatch`]: the greedy nearest-free-agent dispatch policy.
//! - [`waittime`]: Erlang-C waits, Greedy-Add p-median placement, the
//!   random-forest surrogate and its training-data generator.
//! - [`highlevel`]: distribution of agents across regions and rebalancing.
//! - [`lowlevel`]: per-region MCTS over depot assignments with root
//!   parallelization.
//! - [`harness`]: experiment configuration, policies, metrics and the
//!   subcommands behind the `hiplan` binary.

pub mod demand;
pub mod dispatch;
pub mod error;
pub mod harness;
pub mod highlevel;
pub mod ids;
mod jsonio;
pub mod lowlevel;
pub mod seed;
pub mod sim;
pub mod spatial;
pub mod travel;
pub mod waittime;

pub use error::{Error, Result};
pub use ids::{AgentId, CellId, DepotId, IncidentId, RegionId};
