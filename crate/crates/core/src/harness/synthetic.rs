//! A generated city: a demand surface with hotspots, a depot lattice and
//! sampled incident history.

use chrono::{DateTime, Duration, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demand::{sample_chain, IncidentRecord, PoissonModel, Spike, SpikeSchedule};
use crate::error::{Error, Result};
use crate::ids::{CellId, DepotId};
use crate::sim::Depot;
use crate::spatial::{build_grid, BoundingBox, Grid, LatLon, Point, EARTH_RADIUS_MILES};

/// Gaussian bump of demand centred on a fractional (row, col).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hotspot {
    pub row: f64,
    pub col: f64,
    pub sigma_cells: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticCity {
    /// South-west corner.
    pub origin: LatLon,
    pub n_rows: usize,
    pub n_cols: usize,
    pub cell_size_miles: f64,
    /// Citywide arrivals per minute.
    pub total_rate_per_min: f64,
    /// Share of demand spread evenly over all cells.
    pub background_share: f64,
    pub hotspots: Vec<Hotspot>,
    /// (row, col) of every depot; ids follow list order.
    pub depot_cells: Vec<(usize, usize)>,
    pub history_days: f64,
    pub history_start: DateTime<Utc>,
}

impl Default for SyntheticCity {
    fn default() -> Self {
        SyntheticCity {
            origin: LatLon::new(36.05, -86.90),
            n_rows: 10,
            n_cols: 10,
            cell_size_miles: 1.0,
            // 8 agents with 20-minute service at half utilization
            total_rate_per_min: 0.15,
            background_share: 0.25,
            hotspots: vec![
                Hotspot {
                    row: 2.5,
                    col: 2.5,
                    sigma_cells: 1.5,
                    weight: 0.4,
                },
                Hotspot {
                    row: 6.5,
                    col: 2.0,
                    sigma_cells: 1.2,
                    weight: 0.3,
                },
                Hotspot {
                    row: 3.5,
                    col: 7.0,
                    sigma_cells: 1.5,
                    weight: 0.3,
                },
            ],
            depot_cells: vec![
                (1, 2),
                (3, 1),
                (3, 3),
                (6, 1),
                (7, 3),
                (2, 6),
                (4, 8),
                (1, 8),
                (5, 5),
                (6, 6),
                (8, 8),
                (8, 6),
            ],
            history_days: 14.0,
            history_start: DateTime::parse_from_rfc3339("2019-01-07T00:00:00Z")
                .expect("valid literal")
                .with_timezone(&Utc),
        }
    }
}

impl SyntheticCity {
    pub fn bbox(&self) -> BoundingBox {
        let h = self.n_rows as f64 * self.cell_size_miles;
        let w = self.n_cols as f64 * self.cell_size_miles;
        let cos = self.origin.lat.to_radians().cos();
        BoundingBox {
            south: self.origin.lat,
            west: self.origin.lon,
            north: self.origin.lat + (h / EARTH_RADIUS_MILES).to_degrees(),
            east: self.origin.lon + (w / (EARTH_RADIUS_MILES * cos)).to_degrees(),
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        let g = build_grid(self.bbox(), self.cell_size_miles)?;
        if g.n_rows() != self.n_rows || g.n_cols() != self.n_cols {
            return Err(Error::Config(format!(
                "synthetic grid came out {}x{}",
                g.n_rows(),
                g.n_cols()
            )));
        }
        Ok(g)
    }

    /// The true arrival rates.
    pub fn truth(&self, grid: &Grid) -> PoissonModel {
        let n = grid.len() as f64;
        let bumps: Vec<f64> = grid
            .cells()
            .iter()
            .map(|c| {
                let (r, k) = (c.row as f64 + 0.5, c.col as f64 + 0.5);
                self.hotspots
                    .iter()
                    .map(|h| {
                        let d2 = (r - h.row).powi(2) + (k - h.col).powi(2);
                        h.weight * (-d2 / (2.0 * h.sigma_cells * h.sigma_cells)).exp()
                    })
                    .sum()
            })
            .collect();
        let z: f64 = bumps.iter().sum();
        let rates = grid
            .cells()
            .iter()
            .zip(&bumps)
            .map(|(c, b)| {
                let share = self.background_share / n
                    + if z > 0.0 {
                        (1.0 - self.background_share) * b / z
                    } else {
                        0.0
                    };
                (c.id, self.total_rate_per_min * share)
            })
            .collect();
        PoissonModel {
            rates,
            fitted_over_minutes: 1.0,
        }
    }

    pub fn depots(&self, grid: &Grid, capacity: u32) -> Result<Vec<Depot>> {
        self.depot_cells
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let cell = grid.cell_at(r, c).ok_or_else(|| {
                    Error::Config(format!("depot cell ({r}, {c}) is off the grid"))
                })?;
                Ok(Depot {
                    id: DepotId(i as u32),
                    cell,
                    capacity,
                })
            })
            .collect()
    }

    /// Incident history drawn from the true rates, each incident placed
    /// uniformly inside its cell.
    pub fn history(&self, grid: &Grid, seed: u64) -> Result<Vec<IncidentRecord>> {
        let minutes = self.history_days * 1440.0;
        let chain = sample_chain(&self.truth(grid), 0.0, minutes, seed, None)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let size = grid.cell_size_miles();
        chain
            .incidents
            .iter()
            .map(|inc| {
                let c = grid.cell(inc.cell)?;
                let p = Point::new(
                    c.center.x + (rng.gen::<f64>() - 0.5) * 0.98 * size,
                    c.center.y + (rng.gen::<f64>() - 0.5) * 0.98 * size,
                );
                let ms = (inc.time_min * 60_000.0).round() as i64;
                Ok(IncidentRecord {
                    time: self.history_start + Duration::milliseconds(ms),
                    cell: inc.cell,
                    location: grid.unproject(p),
                })
            })
            .collect()
    }

    /// A fifteenfold surge in the 3x3 north-east corner during the first
    /// hours of the horizon.
    pub fn default_spikes(&self) -> SpikeSchedule {
        let cells = (self.n_rows.saturating_sub(3)..self.n_rows)
            .flat_map(|r| (self.n_cols.saturating_sub(3)..self.n_cols).map(move |c| (r, c)))
            .map(|(r, c)| CellId((r * self.n_cols + c) as u32))
            .collect();
        SpikeSchedule(vec![Spike {
            cells,
            start_min: 60.0,
            end_min: 420.0,
            multiplier: 15.0,
        }])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_and_truth_have_expected_shape() {
        let city = SyntheticCity::default();
        let g = city.grid().unwrap();
        assert_eq!(g.len(), 100);
        let t = city.truth(&g);
        assert!((t.total_rate() - 0.15).abs() < 1e-12);
        assert_eq!(city.depots(&g, 1).unwrap().len(), 12);
    }

    #[test]
    fn history_is_seeded_and_located() {
        let city = SyntheticCity {
            history_days: 1.0,
            ..Default::default()
        };
        let g = city.grid().unwrap();
        let h = city.history(&g, 4).unwrap();
        assert!(!h.is_empty());
        for r in &h {
            assert_eq!(g.locate(r.location).unwrap(), r.cell);
        }
        assert_eq!(city.history(&g, 4).unwrap(), h);
    }
}
