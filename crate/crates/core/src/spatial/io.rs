use std::fs::File;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use super::{Grid, LatLon, Segmentation};
use crate::demand::IncidentRecord;
use crate::error::{Error, Result};
use crate::ids::DepotId;
use crate::jsonio::{read_json, write_json};
use crate::sim::Depot;

#[derive(Serialize, Deserialize)]
struct IncidentRow {
    timestamp: String,
    lat: f64,
    lon: f64,
}

#[derive(Serialize, Deserialize)]
struct DepotRow {
    depot_id: u32,
    lat: f64,
    lon: f64,
    capacity: u32,
}

/// Deserializes every data row, tagging failures with their line number.
fn rows<T: for<'de> Deserialize<'de>>(
    path: &Path,
    rdr: &mut csv::Reader<File>,
) -> Result<Vec<(u64, T)>> {
    let headers = rdr
        .headers()
        .cloned()
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::parse(path, format!("line {line}: {e}"))
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = rec
            .deserialize(Some(&headers))
            .map_err(|e| Error::parse(path, format!("line {line}: {e}")))?;
        out.push((line, row));
    }
    Ok(out)
}

fn reader(path: &Path, header: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let found: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::parse(path, format!("line 1: {e}")))?
        .iter()
        .map(str::to_owned)
        .collect();
    if found != header {
        return Err(Error::parse(
            path,
            format!(
                "line 1: expected header {}, found {}",
                header.join(","),
                found.join(",")
            ),
        ));
    }
    Ok(rdr)
}

/// Reads `timestamp,lat,lon` rows (RFC 3339 / ISO-8601 timestamps) and
/// locates each incident in `grid`.
pub fn load_incidents(path: &Path, grid: &Grid) -> Result<Vec<IncidentRecord>> {
    let mut rdr = reader(path, &["timestamp", "lat", "lon"])?;
    let mut out = Vec::new();
    for (line, row) in rows::<IncidentRow>(path, &mut rdr)? {
        let time: DateTime<Utc> = DateTime::parse_from_rfc3339(&row.timestamp)
            .map_err(|e| {
                Error::parse(
                    path,
                    format!("line {line}: bad timestamp {:?}: {e}", row.timestamp),
                )
            })?
            .with_timezone(&Utc);
        let location = LatLon::new(row.lat, row.lon);
        let cell = grid
            .locate(location)
            .map_err(|e| Error::parse(path, format!("line {line}: {e}")))?;
        out.push(IncidentRecord {
            time,
            cell,
            location,
        });
    }
    Ok(out)
}

/// Reads `depot_id,lat,lon,capacity` rows; ids must be unique and
/// capacities at least one. The result is sorted by id.
pub fn load_depots(path: &Path, grid: &Grid) -> Result<Vec<Depot>> {
    let mut rdr = reader(path, &["depot_id", "lat", "lon", "capacity"])?;
    let mut out: Vec<Depot> = Vec::new();
    for (line, row) in rows::<DepotRow>(path, &mut rdr)? {
        if row.capacity == 0 {
            return Err(Error::parse(
                path,
                format!("line {line}: capacity must be >= 1"),
            ));
        }
        let cell = grid
            .locate(LatLon::new(row.lat, row.lon))
            .map_err(|e| Error::parse(path, format!("line {line}: {e}")))?;
        out.push(Depot {
            id: DepotId(row.depot_id),
            cell,
            capacity: row.capacity,
        });
    }
    out.sort_by_key(|d| d.id);
    if let Some(w) = out.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::parse(
            path,
            format!("duplicate depot id {}", w[0].id.0),
        ));
    }
    Ok(out)
}

/// Writes records in the format read by [`load_incidents`].
pub fn write_incidents(path: &Path, records: &[IncidentRecord]) -> Result<()> {
    write_rows(
        path,
        records.iter().map(|r| IncidentRow {
            timestamp: r.time.to_rfc3339_opts(SecondsFormat::Millis, true),
            lat: r.location.lat,
            lon: r.location.lon,
        }),
    )
}

/// Writes depots at their cell centroids in the format read by
/// [`load_depots`].
pub fn write_depots(path: &Path, depots: &[Depot], grid: &Grid) -> Result<()> {
    let rows = depots
        .iter()
        .map(|d| {
            let c = grid.cell(d.cell)?.centroid;
            Ok(DepotRow {
                depot_id: d.id.0,
                lat: c.lat,
                lon: c.lon,
                capacity: d.capacity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_rows(path, rows)
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Region file: `{regions: [{id, cell_ids, depot_ids}], k, seed}`.
pub fn write_regions(path: &Path, seg: &Segmentation) -> Result<()> {
    write_json(path, seg)
}

pub fn read_regions(path: &Path) -> Result<Segmentation> {
    read_json::<Segmentation>(path)?.reindex()
}
