//! Travel times between cells and en-route position interpolation.

use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::ids::CellId;
use crate::spatial::Grid;

#[derive(Debug, Clone, PartialEq)]
pub enum TravelKind {
    /// Straight-line distance between centroids at a constant speed.
    Euclidean { speed_mph: f64 },
    /// Dense `n x n` table of seconds; `NaN` marks a missing pair.
    Lookup { seconds: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TravelModel {
    grid: Grid,
    kind: TravelKind,
}

impl TravelModel {
    pub fn euclidean(grid: Grid, speed_mph: f64) -> Result<Self> {
        if !(speed_mph > 0.0 && speed_mph.is_finite()) {
            return Err(Error::TravelModel(format!(
                "speed must be positive, got {speed_mph}"
            )));
        }
        Ok(TravelModel {
            grid,
            kind: TravelKind::Euclidean { speed_mph },
        })
    }

    /// Table-backed model. Pairs absent from `table` fail at query time.
    pub fn lookup(grid: Grid, table: &HashMap<(CellId, CellId), f64>) -> Result<Self> {
        let n = grid.len();
        let mut seconds = vec![f64::NAN; n * n];
        for (&(from, to), &s) in table {
            if !grid.contains(from) || !grid.contains(to) {
                return Err(Error::TravelModel(format!(
                    "pair {from} -> {to} is off the grid"
                )));
            }
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::TravelModel(format!(
                    "{from} -> {to} has invalid time {s}"
                )));
            }
            seconds[from.index() * n + to.index()] = s;
        }
        Ok(TravelModel {
            grid,
            kind: TravelKind::Lookup { seconds },
        })
    }

    /// Loads a `from_cell,to_cell,seconds` CSV. Every ordered pair of
    /// distinct grid cells must be present; the first missing pair is
    /// reported.
    pub fn load_lookup_csv(path: &Path, grid: Grid) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            from_cell: u32,
            to_cell: u32,
            seconds: f64,
        }
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(file);
        let headers = rdr
            .headers()
            .map_err(|e| Error::parse(path, format!("line 1: {e}")))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["from_cell", "to_cell", "seconds"] {
            return Err(Error::parse(
                path,
                "line 1: expected header from_cell,to_cell,seconds",
            ));
        }
        let mut table = HashMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            let row: Row = rec
                .deserialize(Some(&headers))
                .map_err(|e| Error::parse(path, format!("line {line}: {e}")))?;
            table.insert((CellId(row.from_cell), CellId(row.to_cell)), row.seconds);
        }
        let model =
            TravelModel::lookup(grid, &table).map_err(|e| Error::parse(path, e.to_string()))?;
        for a in model.grid.cells() {
            for b in model.grid.cells() {
                if a.id != b.id && !table.contains_key(&(a.id, b.id)) {
                    return Err(Error::parse(
                        path,
                        format!("missing pair {} -> {}", a.id.0, b.id.0),
                    ));
                }
            }
        }
        Ok(model)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind(&self) -> &TravelKind {
        &self.kind
    }

    /// Seconds from `from` to `to`; zero when they coincide.
    pub fn travel_time(&self, from: CellId, to: CellId) -> Result<f64> {
        if !self.grid.contains(from) {
            return Err(Error::UnknownCell(from));
        }
        if !self.grid.contains(to) {
            return Err(Error::UnknownCell(to));
        }
        if from == to {
            return Ok(0.0);
        }
        match &self.kind {
            TravelKind::Euclidean { speed_mph } => {
                let miles = self.grid.center(from).dist(self.grid.center(to));
                Ok(miles / speed_mph * 3600.0)
            }
            TravelKind::Lookup { seconds } => {
                let s = seconds[from.index() * self.grid.len() + to.index()];
                if s.is_nan() {
                    Err(Error::TravelMiss { from, to })
                } else {
                    Ok(s)
                }
            }
        }
    }

    /// Cell reached after `elapsed` seconds of the trip `from -> to`, taking
    /// the straight segment between centroids at the trip's mean pace.
    ///
    /// On a regular grid the cell containing a point is also the cell with
    /// the nearest centroid (boundary ties go to the lower id in both
    /// readings), so both travel variants resolve positions the same way.
    pub fn interpolate_position(&self, from: CellId, to: CellId, elapsed: f64) -> Result<CellId> {
        let total = self.travel_time(from, to)?;
        let slack = 1e-9 * total.max(1.0);
        if !(elapsed >= -slack && elapsed <= total + slack) {
            return Err(Error::ElapsedBeyondTrip { elapsed, total });
        }
        if total == 0.0 || elapsed <= 0.0 {
            return Ok(from);
        }
        if elapsed >= total {
            return Ok(to);
        }
        let p = self
            .grid
            .center(from)
            .lerp(self.grid.center(to), elapsed / total);
        self.grid.locate_point(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(n: usize) -> TravelModel {
        TravelModel::euclidean(Grid::planar(1, n, 1.0).unwrap(), 30.0).unwrap()
    }

    #[test]
    fn same_cell_is_free() {
        assert_eq!(line(4).travel_time(CellId(2), CellId(2)).unwrap(), 0.0);
    }

    #[test]
    fn three_miles_at_thirty_mph() {
        let t = line(4).travel_time(CellId(0), CellId(3)).unwrap();
        assert!((t - 360.0).abs() < 1e-9);
    }

    #[test]
    fn lookup_reads_table_and_reports_misses() {
        let g = Grid::planar(2, 3, 1.0).unwrap();
        let mut table = HashMap::new();
        table.insert((CellId(2), CellId(5)), 420.0);
        let m = TravelModel::lookup(g, &table).unwrap();
        assert_eq!(m.travel_time(CellId(2), CellId(5)).unwrap(), 420.0);
        assert!(matches!(
            m.travel_time(CellId(5), CellId(2)),
            Err(Error::TravelMiss {
                from: CellId(5),
                to: CellId(2)
            })
        ));
        assert!(TravelModel::euclidean(Grid::planar(1, 1, 1.0).unwrap(), 0.0).is_err());
    }

    #[test]
    fn interpolation_endpoints_and_midpoint() {
        let m = line(4);
        let total = m.travel_time(CellId(0), CellId(3)).unwrap();
        assert_eq!(
            m.interpolate_position(CellId(0), CellId(3), 0.0).unwrap(),
            CellId(0)
        );
        assert_eq!(
            m.interpolate_position(CellId(0), CellId(3), total).unwrap(),
            CellId(3)
        );
        // analytic midpoint of centroids 0.5 and 3.5 is x = 2.0, an edge
        let mid = m
            .grid()
            .locate_point(crate::spatial::Point::new(2.0, 0.5))
            .unwrap();
        assert_eq!(
            m.interpolate_position(CellId(0), CellId(3), total / 2.0)
                .unwrap(),
            mid
        );
        assert_eq!(mid, CellId(1));
        assert!(matches!(
            m.interpolate_position(CellId(0), CellId(3), total + 1.0),
            Err(Error::ElapsedBeyondTrip { .. })
        ));
    }

    #[test]
    fn lookup_interpolation_uses_nearest_centroid() {
        let g = Grid::planar(3, 3, 1.0).unwrap();
        let mut table = HashMap::new();
        for a in g.cells() {
            for b in g.cells() {
                table.insert((a.id, b.id), 100.0);
            }
        }
        let m = TravelModel::lookup(g.clone(), &table).unwrap();
        for step in 0..=20 {
            let e = step as f64 * 5.0;
            let got = m.interpolate_position(CellId(0), CellId(8), e).unwrap();
            let p = g.center(CellId(0)).lerp(g.center(CellId(8)), e / 100.0);
            let expect = if step == 0 {
                CellId(0)
            } else if step == 20 {
                CellId(8)
            } else {
                g.nearest_cell(p)
            };
            assert_eq!(got, expect, "step {step}");
        }
    }

    #[test]
    fn lookup_csv_requires_every_pair() {
        let g = Grid::planar(1, 2, 1.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("ok.csv");
        std::fs::write(&ok, "from_cell,to_cell,seconds\n0,1,100\n1,0,110\n").unwrap();
        let m = TravelModel::load_lookup_csv(&ok, g.clone()).unwrap();
        assert_eq!(m.travel_time(CellId(1), CellId(0)).unwrap(), 110.0);
        let missing = dir.path().join("missing.csv");
        std::fs::write(&missing, "from_cell,to_cell,seconds\n0,1,100\n").unwrap();
        let err = TravelModel::load_lookup_csv(&missing, g)
            .unwrap_err()
            .to_string();
        assert!(err.contains("missing pair 1 -> 0"), "{err}");
    }

    proptest! {
        #[test]
        fn euclidean_is_symmetric_and_triangular(a in 0u32..25, b in 0u32..25, c in 0u32..25) {
            let m = TravelModel::euclidean(Grid::planar(5, 5, 1.0).unwrap(), 30.0).unwrap();
            let (a, b, c) = (CellId(a), CellId(b), CellId(c));
            let t = |x, y| m.travel_time(x, y).unwrap();
            prop_assert_eq!(t(a, b), t(b, a));
            prop_assert!(t(a, c) <= t(a, b) + t(b, c) + 1e-9);
        }
    }
}
