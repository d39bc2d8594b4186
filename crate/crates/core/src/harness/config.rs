use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::demand::SpikeSchedule;
use crate::error::{Error, Result};
use crate::jsonio::{read_json, write_json};
use crate::lowlevel::PlannerConfig;
use crate::spatial::BoundingBox;
use crate::waittime::ForestHyperparams;

use super::synthetic::SyntheticCity;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    /// Agents stay at their initial depots.
    Baseline,
    /// Depot planning inside fixed regions.
    LlOnly,
    /// Agent counts by the queue model, then depot planning.
    HlLlQueue,
    /// Agent counts by the forest surrogate, then depot planning.
    HlLlForest,
}

impl Policy {
    pub const ALL: [Policy; 4] = [
        Policy::Baseline,
        Policy::LlOnly,
        Policy::HlLlQueue,
        Policy::HlLlForest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Policy::Baseline => "baseline",
            Policy::LlOnly => "ll_only",
            Policy::HlLlQueue => "hl_ll_queue",
            Policy::HlLlForest => "hl_ll_forest",
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Policy> {
        Policy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Stationary,
    /// Rates follow the configured spike schedule.
    Spikes,
    /// Stationary rates with agent failures.
    Failures,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Stationary => "stationary",
            Scenario::Spikes => "spikes",
            Scenario::Failures => "failures",
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Scenario> {
        [Scenario::Stationary, Scenario::Spikes, Scenario::Failures]
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FailureSpec {
    /// Agents failing together.
    pub n_failures: usize,
    pub duration_hours: f64,
    /// Start of the failures; drawn per run between 10% and 30% of the
    /// horizon when absent.
    pub start_min: Option<f64>,
    /// Failure counts swept by `inject-failures`.
    pub sweep: Vec<usize>,
}

impl Default for FailureSpec {
    fn default() -> Self {
        FailureSpec {
            n_failures: 3,
            duration_hours: 8.0,
            start_min: None,
            sweep: vec![0, 1, 2, 3],
        }
    }
}

/// Simulated training and hold-out data for the surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSpec {
    /// Multipliers on each region's fitted rate.
    pub rate_scales: Vec<f64>,
    pub chains_per_scale: usize,
    pub window_min: f64,
    pub forest: ForestHyperparams,
    /// Hold-out chains per scale for `compare-estimators`.
    pub holdout_chains_per_scale: usize,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        TrainingSpec {
            rate_scales: vec![0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0],
            chains_per_scale: 6,
            window_min: 480.0,
            forest: ForestHyperparams::default(),
            holdout_chains_per_scale: 3,
        }
    }
}

/// Where the city comes from: CSV inputs or the built-in generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CitySource {
    Files {
        bbox: BoundingBox,
        cell_size_miles: f64,
        incidents: PathBuf,
        depots: PathBuf,
        /// `from_cell,to_cell,seconds`; Euclidean travel when absent.
        #[serde(default)]
        travel: Option<PathBuf>,
        /// Observation window of the incident file; the span between the
        /// first and last timestamp when absent.
        #[serde(default)]
        observed_minutes: Option<f64>,
    },
    Synthetic(SyntheticCity),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub city: CitySource,
    pub k: usize,
    /// Region counts compared by `compare-estimators`.
    pub compare_k: Vec<usize>,
    pub n_agents: usize,
    /// Capacity given to generated depots.
    pub depot_capacity: u32,
    pub service_minutes: f64,
    pub service_exponential: bool,
    pub dropoff_minutes: f64,
    pub speed_mph: f64,
    pub mcts_iterations: usize,
    pub n_chains: usize,
    pub alpha: f64,
    pub c: f64,
    pub max_realloc_gap_min: f64,
    pub lookahead_min: f64,
    pub max_actions: usize,
    /// Base seed; every random stream derives from it.
    pub seed: u64,
    /// Evaluation repetitions, each with its own chains.
    pub n_seeds: usize,
    /// Evaluation chains per seed.
    pub n_eval_chains: usize,
    pub horizon_min: f64,
    pub scenario: Scenario,
    pub spikes: SpikeSchedule,
    pub failures: FailureSpec,
    pub policies: Vec<Policy>,
    pub training: TrainingSpec,
    /// Pre-trained forests; trained on the fly when absent.
    pub surrogate: Option<PathBuf>,
    /// Write planner recommendations as JSON lines.
    pub trace: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let city = SyntheticCity::default();
        let spikes = city.default_spikes();
        ExperimentConfig {
            city: CitySource::Synthetic(city),
            k: 5,
            compare_k: vec![5, 6, 7],
            n_agents: 26,
            depot_capacity: 1,
            service_minutes: 20.0,
            service_exponential: false,
            dropoff_minutes: 0.0,
            speed_mph: 30.0,
            mcts_iterations: 1000,
            n_chains: 50,
            alpha: 0.99995,
            c: 1.44,
            max_realloc_gap_min: 60.0,
            lookahead_min: 120.0,
            max_actions: 20_000,
            seed: 0,
            n_seeds: 3,
            n_eval_chains: 5,
            horizon_min: 720.0,
            scenario: Scenario::Stationary,
            spikes,
            failures: FailureSpec::default(),
            policies: vec![
                Policy::Baseline,
                Policy::LlOnly,
                Policy::HlLlQueue,
                Policy::HlLlForest,
            ],
            training: TrainingSpec::default(),
            surrogate: None,
            trace: false,
        }
    }
}

impl ExperimentConfig {
    /// The built-in city at desk scale: 10x10 one-mile cells, 12 depots,
    /// 8 agents, about half utilization, and lighter search budgets.
    pub fn synthetic_default() -> Self {
        ExperimentConfig {
            n_agents: 8,
            mcts_iterations: 300,
            n_chains: 30,
            lookahead_min: 60.0,
            training: TrainingSpec {
                forest: ForestHyperparams {
                    n_trees: 50,
                    min_leaf: 2,
                    ..ForestHyperparams::default()
                },
                ..TrainingSpec::default()
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.n_agents == 0 {
            return bad("n_agents must be positive".into());
        }
        if self.depot_capacity == 0 {
            return bad("depot_capacity must be positive".into());
        }
        if !(self.service_minutes > 0.0) || self.dropoff_minutes < 0.0 {
            return bad("service_minutes must be positive and dropoff_minutes non-negative".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if self.c < 0.0 {
            return bad(format!("c must be non-negative, got {}", self.c));
        }
        if self.mcts_iterations == 0 || self.n_chains == 0 {
            return bad("mcts_iterations and n_chains must be positive".into());
        }
        if !(self.horizon_min > 0.0) || !(self.lookahead_min > 0.0) {
            return bad("horizon_min and lookahead_min must be positive".into());
        }
        if self.n_seeds == 0 || self.n_eval_chains == 0 {
            return bad("n_seeds and n_eval_chains must be positive".into());
        }
        if self.failures.n_failures >= self.n_agents
            || self.failures.sweep.iter().any(|n| *n >= self.n_agents)
        {
            return bad("failure counts must stay below n_agents".into());
        }
        if self.policies.is_empty() {
            return bad("at least one policy is required".into());
        }
        self.spikes.validate()
    }

    pub fn seeds(&self) -> Vec<u64> {
        (0..self.n_seeds as u64)
            .map(|i| self.seed.wrapping_add(i))
            .collect()
    }

    pub fn planner(&self) -> PlannerConfig {
        PlannerConfig {
            iterations: self.mcts_iterations,
            c: self.c,
            alpha: self.alpha,
            n_chains: self.n_chains,
            lookahead_min: self.lookahead_min,
            max_actions: self.max_actions,
        }
    }

    /// Service rate of one agent, per minute.
    pub fn eta(&self) -> f64 {
        1.0 / (self.service_minutes + self.dropoff_minutes)
    }
}
