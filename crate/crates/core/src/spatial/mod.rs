//! Cell grid, region segmentation and point location.
//!
//! Coordinates are handled in two frames: geographic [`LatLon`] for file
//! interchange and a local planar frame ([`Point`], miles east/north of the
//! grid's south-west corner) for every distance computation. The planar frame
//! is an equirectangular projection fixed at the grid origin.

mod io;
mod kmeans;
mod segment;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ids::CellId;

pub use io::{
    load_depots, load_incidents, read_regions, write_depots, write_incidents, write_regions,
};
pub use kmeans::{kmeans, KMeansConfig, KMeansResult};
pub use segment::{segment_regions, Region, Segmentation};

/// Mean Earth radius in statute miles.
pub const EARTH_RADIUS_MILES: f64 = 3958.7613;

// Relative slack used when snapping coordinates onto cell boundaries.
const SNAP: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub const fn new(lat: f64, lon: f64) -> Self {
        LatLon { lat, lon }
    }
}

/// Planar position in miles relative to the grid origin.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        self.dist2(other).sqrt()
    }

    pub fn dist2(self, other: Point) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn lerp(self, other: Point, frac: f64) -> Point {
        Point::new(
            self.x + (other.x - self.x) * frac,
            self.y + (other.y - self.y) * frac,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub south: f64,
    pub west: f64,
    pub north: f64,
    pub east: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: CellId,
    pub row: usize,
    pub col: usize,
    pub centroid: LatLon,
    /// Centroid in the planar frame.
    pub center: Point,
}

/// Square cells tiling a bounding box, row-major from the south-west corner.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    origin: LatLon,
    cos_lat0: f64,
    cell_size_miles: f64,
    n_rows: usize,
    n_cols: usize,
    cells: Vec<Cell>,
}

/// Tiles `bbox` with square cells of `cell_size_miles`. A trailing partial
/// row or column is padded to a full cell.
pub fn build_grid(bbox: BoundingBox, cell_size_miles: f64) -> Result<Grid> {
    if !(cell_size_miles > 0.0 && cell_size_miles.is_finite()) {
        return Err(Error::CellSize(cell_size_miles));
    }
    let finite = [bbox.south, bbox.west, bbox.north, bbox.east]
        .iter()
        .all(|v| v.is_finite());
    if !finite || bbox.north <= bbox.south || bbox.east <= bbox.west {
        return Err(Error::DegenerateBox(format!("{bbox:?}")));
    }
    if bbox.south.abs() >= 90.0 || bbox.north.abs() >= 90.0 {
        return Err(Error::DegenerateBox("latitude out of range".into()));
    }
    let origin = LatLon::new(bbox.south, bbox.west);
    let cos_lat0 = origin.lat.to_radians().cos();
    let mut grid = Grid {
        origin,
        cos_lat0,
        cell_size_miles,
        n_rows: 0,
        n_cols: 0,
        cells: Vec::new(),
    };
    let corner = grid.project(LatLon::new(bbox.north, bbox.east));
    grid.n_cols = cells_along(corner.x, cell_size_miles);
    grid.n_rows = cells_along(corner.y, cell_size_miles);

    let mut cells = Vec::with_capacity(grid.n_rows * grid.n_cols);
    for row in 0..grid.n_rows {
        for col in 0..grid.n_cols {
            let center = Point::new(
                (col as f64 + 0.5) * cell_size_miles,
                (row as f64 + 0.5) * cell_size_miles,
            );
            cells.push(Cell {
                id: CellId((row * grid.n_cols + col) as u32),
                row,
                col,
                centroid: grid.unproject(center),
                center,
            });
        }
    }
    grid.cells = cells;
    Ok(grid)
}

fn cells_along(extent: f64, size: f64) -> usize {
    let n = (extent / size - SNAP).ceil();
    (n as usize).max(1)
}

impl Grid {
    /// A grid of `n_rows` x `n_cols` cells anchored at latitude/longitude 0,
    /// where the projection is exact. Used for synthetic cities.
    pub fn planar(n_rows: usize, n_cols: usize, cell_size_miles: f64) -> Result<Grid> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::DegenerateBox(format!("{n_rows}x{n_cols} cells")));
        }
        let probe = Grid {
            origin: LatLon::new(0.0, 0.0),
            cos_lat0: 1.0,
            cell_size_miles,
            n_rows: 0,
            n_cols: 0,
            cells: Vec::new(),
        };
        let ne = probe.unproject(Point::new(
            n_cols as f64 * cell_size_miles,
            n_rows as f64 * cell_size_miles,
        ));
        build_grid(
            BoundingBox {
                south: 0.0,
                west: 0.0,
                north: ne.lat,
                east: ne.lon,
            },
            cell_size_miles,
        )
    }

    pub fn origin(&self) -> LatLon {
        self.origin
    }

    pub fn cell_size_miles(&self) -> f64 {
        self.cell_size_miles
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, id: CellId) -> Result<&Cell> {
        self.cells.get(id.index()).ok_or(Error::UnknownCell(id))
    }

    pub fn contains(&self, id: CellId) -> bool {
        id.index() < self.cells.len()
    }

    /// Planar centroid of a cell. Panics on an id outside the grid.
    #[inline]
    pub fn center(&self, id: CellId) -> Point {
        self.cells[id.index()].center
    }

    pub fn cell_at(&self, row: usize, col: usize) -> Option<CellId> {
        (row < self.n_rows && col < self.n_cols).then(|| CellId((row * self.n_cols + col) as u32))
    }

    pub fn width_miles(&self) -> f64 {
        self.n_cols as f64 * self.cell_size_miles
    }

    pub fn height_miles(&self) -> f64 {
        self.n_rows as f64 * self.cell_size_miles
    }

    pub fn project(&self, p: LatLon) -> Point {
        Point::new(
            (p.lon - self.origin.lon).to_radians() * EARTH_RADIUS_MILES * self.cos_lat0,
            (p.lat - self.origin.lat).to_radians() * EARTH_RADIUS_MILES,
        )
    }

    pub fn unproject(&self, p: Point) -> LatLon {
        LatLon::new(
            self.origin.lat + (p.y / EARTH_RADIUS_MILES).to_degrees(),
            self.origin.lon + (p.x / (EARTH_RADIUS_MILES * self.cos_lat0)).to_degrees(),
        )
    }

    /// Cell containing `p`. Points on a shared edge or corner belong to the
    /// cell with the lower (row, col).
    pub fn locate(&self, p: LatLon) -> Result<CellId> {
        self.locate_point(self.project(p))
    }

    pub fn locate_point(&self, p: Point) -> Result<CellId> {
        let tol = SNAP * self.cell_size_miles.max(1.0);
        let outside = !(p.x.is_finite() && p.y.is_finite())
            || p.x < -tol
            || p.y < -tol
            || p.x > self.width_miles() + tol
            || p.y > self.height_miles() + tol;
        if outside {
            let ll = self.unproject(p);
            return Err(Error::OutsideGrid {
                lat: ll.lat,
                lon: ll.lon,
            });
        }
        let col = self.axis_index(p.x, self.n_cols);
        let row = self.axis_index(p.y, self.n_rows);
        Ok(CellId((row * self.n_cols + col) as u32))
    }

    fn axis_index(&self, v: f64, n: usize) -> usize {
        let mut u = v / self.cell_size_miles;
        let r = u.round();
        if (u - r).abs() < SNAP {
            u = r;
        }
        // ceil - 1 puts a point lying exactly on an edge in the lower cell.
        let idx = u.ceil() as i64 - 1;
        idx.clamp(0, n as i64 - 1) as usize
    }

    /// Cell whose centroid is nearest `p`; ties go to the lower id.
    pub fn nearest_cell(&self, p: Point) -> CellId {
        let mut best = (f64::INFINITY, CellId(0));
        for c in &self.cells {
            let d = c.center.dist2(p);
            if d < best.0 {
                best = (d, c.id);
            }
        }
        best.1
    }
}
