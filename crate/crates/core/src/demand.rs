//! Per-cell Poisson incident model, chain sampling and rate spikes.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::Path;

use chrono::{DateTime, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::{CellId, IncidentId};
use crate::jsonio::{read_json, write_json};
use crate::spatial::{Grid, LatLon, Region};

/// A historical incident located on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidentRecord {
    pub time: DateTime<Utc>,
    pub cell: CellId,
    pub location: LatLon,
}

/// Arrival rate (incidents per minute) for every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoissonModel {
    pub rates: BTreeMap<CellId, f64>,
    pub fitted_over_minutes: f64,
}

/// Maximum-likelihood rates: the incident count of each cell divided by the
/// observation window. Cells without records get rate zero.
pub fn fit_poisson(
    records: &[IncidentRecord],
    grid: &Grid,
    observed_minutes: f64,
) -> Result<PoissonModel> {
    if !(observed_minutes > 0.0 && observed_minutes.is_finite()) {
        return Err(Error::ObservationWindow(observed_minutes));
    }
    let mut counts = vec![0u64; grid.len()];
    for r in records {
        if !grid.contains(r.cell) {
            return Err(Error::UnknownCell(r.cell));
        }
        counts[r.cell.index()] += 1;
    }
    let rates = grid
        .cells()
        .iter()
        .map(|c| (c.id, counts[c.id.index()] as f64 / observed_minutes))
        .collect();
    Ok(PoissonModel {
        rates,
        fitted_over_minutes: observed_minutes,
    })
}

impl PoissonModel {
    pub fn rate(&self, cell: CellId) -> f64 {
        self.rates.get(&cell).copied().unwrap_or(0.0)
    }

    pub fn total_rate(&self) -> f64 {
        self.rates.values().sum()
    }

    /// The model with every cell outside `cells` removed.
    pub fn restricted(&self, cells: &[CellId]) -> PoissonModel {
        let rates = cells
            .iter()
            .filter_map(|c| self.rates.get(c).map(|r| (*c, *r)))
            .collect();
        PoissonModel {
            rates,
            fitted_over_minutes: self.fitted_over_minutes,
        }
    }

    /// Every rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> PoissonModel {
        PoissonModel {
            rates: self.rates.iter().map(|(c, r)| (*c, r * factor)).collect(),
            fitted_over_minutes: self.fitted_over_minutes,
        }
    }

    /// Rates in force at `time_min` once `spikes` are applied.
    pub fn at_time(&self, time_min: f64, spikes: &SpikeSchedule) -> PoissonModel {
        PoissonModel {
            rates: self
                .rates
                .iter()
                .map(|(c, r)| (*c, r * spikes.multiplier(*c, time_min)))
                .collect(),
            fitted_over_minutes: self.fitted_over_minutes,
        }
    }

    fn validate(&self) -> Result<()> {
        match self
            .rates
            .iter()
            .find(|(_, r)| !(**r >= 0.0 && r.is_finite()))
        {
            Some((c, r)) => Err(Error::Config(format!("{c} has invalid rate {r}"))),
            None => Ok(()),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<PoissonModel> {
        let m: PoissonModel = read_json(path)?;
        m.validate()?;
        if !(m.fitted_over_minutes > 0.0) {
            return Err(Error::ObservationWindow(m.fitted_over_minutes));
        }
        Ok(m)
    }
}

/// Exact sum of member-cell rates.
pub fn region_rate(model: &PoissonModel, region: &Region) -> f64 {
    region.cell_ids.iter().map(|c| model.rate(*c)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Incident {
    pub id: IncidentId,
    /// Report time in minutes.
    pub time_min: f64,
    pub cell: CellId,
}

/// Time-ordered sampled incidents over `[start_min, end_min]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IncidentChain {
    pub incidents: Vec<Incident>,
    pub start_min: f64,
    pub end_min: f64,
}

impl IncidentChain {
    pub fn empty(start_min: f64, end_min: f64) -> Self {
        IncidentChain {
            incidents: Vec::new(),
            start_min,
            end_min,
        }
    }

    pub fn len(&self) -> usize {
        self.incidents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.incidents.is_empty()
    }

    /// Incidents in `cells` only, ids preserved.
    pub fn restricted_to(&self, cells: &[CellId]) -> IncidentChain {
        IncidentChain {
            incidents: self
                .incidents
                .iter()
                .filter(|i| cells.contains(&i.cell))
                .copied()
                .collect(),
            start_min: self.start_min,
            end_min: self.end_min,
        }
    }
}

/// A multiplicative rate spike on a set of cells over a time window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spike {
    pub cells: Vec<CellId>,
    pub start_min: f64,
    pub end_min: f64,
    pub multiplier: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpikeSchedule(pub Vec<Spike>);

impl SpikeSchedule {
    pub fn validate(&self) -> Result<()> {
        for s in &self.0 {
            if !(s.multiplier >= 1.0 && s.multiplier.is_finite()) {
                return Err(Error::Spike(format!("multiplier {} < 1", s.multiplier)));
            }
            if !(s.end_min > s.start_min) {
                return Err(Error::Spike(format!(
                    "empty window [{}, {}]",
                    s.start_min, s.end_min
                )));
            }
        }
        Ok(())
    }

    /// Product of the multipliers active on `cell` at `time_min`.
    pub fn multiplier(&self, cell: CellId, time_min: f64) -> f64 {
        self.0
            .iter()
            .filter(|s| s.start_min <= time_min && time_min < s.end_min && s.cells.contains(&cell))
            .map(|s| s.multiplier)
            .product()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<SpikeSchedule> {
        let s: SpikeSchedule = read_json(path)?;
        s.validate()?;
        Ok(s)
    }
}

/// Piecewise-constant rate of one cell over the horizon.
fn rate_segments(
    cell: CellId,
    base: f64,
    start: f64,
    end: f64,
    spikes: Option<&SpikeSchedule>,
) -> Vec<(f64, f64, f64)> {
    let mut cuts = vec![start, end];
    if let Some(sched) = spikes {
        for s in sched.0.iter().filter(|s| s.cells.contains(&cell)) {
            for t in [s.start_min, s.end_min] {
                if t > start && t < end {
                    cuts.push(t);
                }
            }
        }
    }
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.windows(2)
        .map(|w| {
            let m = spikes.map_or(1.0, |s| s.multiplier(cell, w[0]));
            (w[0], w[1], base * m)
        })
        .collect()
}

/// Arrival times of one cell via unit-rate exponential gaps mapped through
/// the cumulative intensity. The same draws serve every spike schedule, so a
/// spike only stretches or compresses the cell's own timeline.
fn sample_cell(segments: &[(f64, f64, f64)], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = Vec::new();
    let mut seg = 0;
    let mut spent = 0.0; // intensity consumed inside the current segment
    let mut budget: f64 = rng.sample(Exp1);
    while seg < segments.len() {
        let (a, b, rate) = segments[seg];
        let capacity = rate * (b - a) - spent;
        if budget <= capacity && rate > 0.0 {
            spent += budget;
            out.push(a + spent / rate);
            budget = rng.sample(Exp1);
        } else {
            budget -= capacity.max(0.0);
            seg += 1;
            spent = 0.0;
        }
    }
    out
}

/// Samples every cell independently and merges the streams by time.
///
/// Each cell draws from its own ChaCha stream keyed by `(seed, cell)`.
/// Simultaneous arrivals are separated by the smallest representable step so
/// report times are strictly increasing.
pub fn sample_chain(
    model: &PoissonModel,
    start_min: f64,
    end_min: f64,
    seed: u64,
    spikes: Option<&SpikeSchedule>,
) -> Result<IncidentChain> {
    if !(end_min > start_min) || !start_min.is_finite() || !end_min.is_finite() {
        return Err(Error::Horizon {
            start: start_min,
            end: end_min,
        });
    }
    model.validate()?;
    if let Some(s) = spikes {
        s.validate()?;
    }

    let mut streams: Vec<(CellId, Vec<f64>)> = Vec::new();
    for (&cell, &base) in &model.rates {
        if base <= 0.0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::from(cell.0));
        let segs = rate_segments(cell, base, start_min, end_min, spikes);
        let times = sample_cell(&segs, &mut rng);
        if !times.is_empty() {
            streams.push((cell, times));
        }
    }

    // k-way merge keyed on (time, cell)
    let mut heap = BinaryHeap::new();
    for (s, (cell, times)) in streams.iter().enumerate() {
        heap.push(Reverse((OrdF64(times[0]), *cell, s, 0usize)));
    }
    let mut incidents: Vec<Incident> = Vec::new();
    while let Some(Reverse((OrdF64(t), cell, s, i))) = heap.pop() {
        let mut time = t;
        if let Some(prev) = incidents.last() {
            if time <= prev.time_min {
                time = prev.time_min.next_up();
            }
        }
        incidents.push(Incident {
            id: IncidentId(incidents.len() as u32),
            time_min: time,
            cell,
        });
        if let Some(&next) = streams[s].1.get(i + 1) {
            heap.push(Reverse((OrdF64(next), cell, s, i + 1)));
        }
    }
    Ok(IncidentChain {
        incidents,
        start_min,
        end_min,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OrdF64(f64);

impl Eq for OrdF64 {}

impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}
