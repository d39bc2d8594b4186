use std::path::PathBuf;

use thiserror::Error;

use crate::ids::{AgentId, CellId, DepotId, IncidentId, RegionId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate bounding box: {0}")]
    DegenerateBox(String),
    #[error("cell size must be positive, got {0}")]
    CellSize(f64),
    #[error("point ({lat}, {lon}) lies outside the grid")]
    OutsideGrid { lat: f64, lon: f64 },
    #[error("unknown {0}")]
    UnknownCell(CellId),
    #[error("k-means needs 1 <= k <= distinct points, got k={k} with {distinct} distinct points")]
    InvalidK { k: usize, distinct: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("observation window must be positive, got {0} minutes")]
    ObservationWindow(f64),
    #[error("invalid horizon [{start}, {end}]")]
    Horizon { start: f64, end: f64 },
    #[error("invalid spike: {0}")]
    Spike(String),

    #[error("travel table has no entry for {from} -> {to}")]
    TravelMiss { from: CellId, to: CellId },
    #[error("invalid travel model: {0}")]
    TravelModel(String),
    #[error("elapsed {elapsed}s exceeds travel time {total}s")]
    ElapsedBeyondTrip { elapsed: f64, total: f64 },

    #[error("cannot step clock back from {clock}s to {requested}s")]
    ClockRegression { clock: f64, requested: f64 },
    #[error("unknown {0}")]
    UnknownAgent(AgentId),
    #[error("unknown {0}")]
    UnknownDepot(DepotId),
    #[error("unknown {0}")]
    UnknownRegion(RegionId),
    #[error("{0} is not pending")]
    UnknownIncident(IncidentId),
    #[error("{0} is busy and cannot be dispatched")]
    AgentBusy(AgentId),
    #[error("{0} is unavailable")]
    AgentUnavailable(AgentId),
    #[error("{depot} would exceed its capacity of {capacity}")]
    OverCapacity { depot: DepotId, capacity: u32 },

    #[error("cannot place {p} agents on {depots} candidate depots")]
    TooFewDepots { p: usize, depots: usize },
    #[error("{0} has no depots")]
    RegionWithoutDepots(RegionId),
    #[error("total depot capacity {capacity} is below the {agents} agents to allocate")]
    InsufficientCapacity { capacity: usize, agents: usize },
    #[error("{actions} allocation actions exceed the enumeration limit of {limit}")]
    TooManyActions { actions: u128, limit: usize },
    #[error("surrogate training needs at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
