use serde::{Deserialize, Serialize};

use super::{kmeans, Grid, KMeansConfig, Point};
use crate::demand::IncidentRecord;
use crate::error::{Error, Result};
use crate::ids::{CellId, DepotId, RegionId};
use crate::sim::Depot;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub id: RegionId,
    pub cell_ids: Vec<CellId>,
    pub depot_ids: Vec<DepotId>,
}

/// A partition of the grid into planning regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub regions: Vec<Region>,
    pub k: usize,
    pub seed: u64,
    #[serde(skip)]
    pub warnings: Vec<String>,
    #[serde(skip)]
    cell_region: Vec<Option<RegionId>>,
}

impl Segmentation {
    /// Builds the cell lookup. Region ids must equal their position.
    pub fn new(regions: Vec<Region>, k: usize, seed: u64) -> Result<Self> {
        let mut cell_region: Vec<Option<RegionId>> = Vec::new();
        for (i, r) in regions.iter().enumerate() {
            if r.id.index() != i {
                return Err(Error::Config(format!(
                    "region ids must be 0..n in order, found {} at position {i}",
                    r.id
                )));
            }
            if r.cell_ids.is_empty() {
                return Err(Error::Config(format!("{} has no cells", r.id)));
            }
            for c in &r.cell_ids {
                if cell_region.len() <= c.index() {
                    cell_region.resize(c.index() + 1, None);
                }
                if let Some(prev) = cell_region[c.index()] {
                    return Err(Error::Config(format!(
                        "{c} belongs to both {prev} and {}",
                        r.id
                    )));
                }
                cell_region[c.index()] = Some(r.id);
            }
        }
        Ok(Segmentation {
            regions,
            k,
            seed,
            warnings: Vec::new(),
            cell_region,
        })
    }

    /// Rebuilds derived lookups after deserialization.
    pub fn reindex(self) -> Result<Self> {
        Segmentation::new(self.regions, self.k, self.seed)
    }

    pub fn region_of(&self, cell: CellId) -> Option<RegionId> {
        self.cell_region.get(cell.index()).copied().flatten()
    }

    pub fn region(&self, id: RegionId) -> Result<&Region> {
        self.regions.get(id.index()).ok_or(Error::UnknownRegion(id))
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }
}

/// Clusters incident locations with k-means and maps every grid cell to a
/// region: cells with incidents by majority vote, the rest by their nearest
/// incident-bearing cell. Depots inherit the region of their cell.
pub fn segment_regions(
    grid: &Grid,
    incidents: &[IncidentRecord],
    depots: &[Depot],
    k: usize,
    seed: u64,
) -> Result<Segmentation> {
    if incidents.is_empty() {
        return Err(Error::Empty("incident records for segmentation"));
    }
    let points: Vec<Point> = incidents.iter().map(|r| grid.project(r.location)).collect();
    let clusters = kmeans(&points, &KMeansConfig::new(k, seed))?;

    let mut votes = vec![vec![0usize; k]; grid.len()];
    for (rec, &cluster) in incidents.iter().zip(&clusters.assignment) {
        if !grid.contains(rec.cell) {
            return Err(Error::UnknownCell(rec.cell));
        }
        votes[rec.cell.index()][cluster] += 1;
    }
    let mut cell_cluster: Vec<Option<usize>> = votes.iter().map(|v| majority(v)).collect();

    let voted: Vec<usize> = (0..grid.len())
        .filter(|&i| cell_cluster[i].is_some())
        .collect();
    for i in 0..grid.len() {
        if cell_cluster[i].is_none() {
            let here = grid.cells()[i].center;
            let mut best = (f64::INFINITY, voted[0]);
            for &j in &voted {
                let d = here.dist2(grid.cells()[j].center);
                if d < best.0 {
                    best = (d, j);
                }
            }
            cell_cluster[i] = cell_cluster[best.1];
        }
    }

    // Clusters that won no cell vanish; the rest are renumbered densely.
    let mut cluster_to_region = vec![None; k];
    let mut next = 0u32;
    for cluster in 0..k {
        if cell_cluster.contains(&Some(cluster)) {
            cluster_to_region[cluster] = Some(RegionId(next));
            next += 1;
        }
    }
    let mut regions: Vec<Region> = (0..next)
        .map(|id| Region {
            id: RegionId(id),
            cell_ids: Vec::new(),
            depot_ids: Vec::new(),
        })
        .collect();
    for (i, c) in cell_cluster.iter().enumerate() {
        let region = cluster_to_region[c.expect("every cell assigned")].expect("live cluster");
        regions[region.index()].cell_ids.push(CellId(i as u32));
    }
    for d in depots {
        if !grid.contains(d.cell) {
            return Err(Error::UnknownCell(d.cell));
        }
        let c = cell_cluster[d.cell.index()].expect("every cell assigned");
        let region = cluster_to_region[c].expect("live cluster");
        regions[region.index()].depot_ids.push(d.id);
    }
    for r in &mut regions {
        r.depot_ids.sort();
    }

    let mut seg = Segmentation::new(regions, k, seed)?;
    for r in &seg.regions {
        if r.depot_ids.is_empty() {
            let msg = format!("{} has no depots and cannot host agents", r.id);
            log::warn!("{msg}");
            seg.warnings.push(msg);
        }
    }
    Ok(seg)
}

/// Cluster with the most votes; ties go to the lowest cluster id.
fn majority(votes: &[usize]) -> Option<usize> {
    let (best, count) = votes
        .iter()
        .enumerate()
        .fold((0, 0), |acc, (j, &n)| if n > acc.1 { (j, n) } else { acc });
    (count > 0).then_some(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};

    fn record(grid: &Grid, x: f64, y: f64) -> IncidentRecord {
        let location = grid.unproject(Point::new(x, y));
        IncidentRecord {
            time: Utc.timestamp_opt(1_600_000_000, 0).unwrap(),
            cell: grid.locate(location).unwrap(),
            location,
        }
    }

    fn depot(grid: &Grid, id: u32, x: f64, y: f64) -> Depot {
        Depot {
            id: DepotId(id),
            cell: grid.locate_point(Point::new(x, y)).unwrap(),
            capacity: 1,
        }
    }

    #[test]
    fn k_one_covers_whole_grid() {
        let g = Grid::planar(3, 3, 1.0).unwrap();
        let inc = vec![record(&g, 0.5, 0.5), record(&g, 2.5, 2.5)];
        let seg = segment_regions(&g, &inc, &[depot(&g, 0, 1.5, 1.5)], 1, 0).unwrap();
        assert_eq!(seg.len(), 1);
        assert_eq!(seg.regions[0].cell_ids.len(), 9);
        assert_eq!(seg.regions[0].depot_ids, vec![DepotId(0)]);
    }

    #[test]
    fn majority_vote_and_tie_rule() {
        assert_eq!(majority(&[3, 1]), Some(0));
        assert_eq!(majority(&[1, 3]), Some(1));
        assert_eq!(majority(&[0, 2, 2]), Some(1));
        assert_eq!(majority(&[0, 0]), None);
    }

    #[test]
    fn regions_without_depots_are_flagged() {
        let g = Grid::planar(1, 6, 1.0).unwrap();
        let inc: Vec<_> = [0.2, 0.4, 0.6, 5.4, 5.6, 5.8]
            .iter()
            .map(|&x| record(&g, x, 0.5))
            .collect();
        let seg = segment_regions(&g, &inc, &[depot(&g, 0, 0.5, 0.5)], 2, 1).unwrap();
        assert_eq!(seg.len(), 2);
        assert_eq!(seg.warnings.len(), 1);
    }

    #[test]
    fn two_blobs_each_with_a_depot() {
        let g = Grid::planar(6, 6, 1.0).unwrap();
        let mut inc = Vec::new();
        for i in 0..20 {
            let t = i as f64 / 20.0;
            inc.push(record(&g, 0.2 + t * 1.5, 0.3 + t));
            inc.push(record(&g, 4.2 + t * 1.5, 4.5 + t));
        }
        let depots = [depot(&g, 0, 0.5, 0.5), depot(&g, 1, 5.5, 5.5)];
        let seg = segment_regions(&g, &inc, &depots, 2, 5).unwrap();
        assert_eq!(seg.len(), 2);
        for r in &seg.regions {
            assert_eq!(r.depot_ids.len(), 1);
        }
        // exhaustive check: every cell is in exactly one region, and each
        // incident-free cell sits with its nearest incident cell
        let incident_cells: Vec<CellId> = inc.iter().map(|r| r.cell).collect();
        for c in g.cells() {
            let owners = seg
                .regions
                .iter()
                .filter(|r| r.cell_ids.contains(&c.id))
                .count();
            assert_eq!(owners, 1);
            if !incident_cells.contains(&c.id) {
                let nearest = incident_cells
                    .iter()
                    .min_by(|a, b| {
                        c.center
                            .dist2(g.center(**a))
                            .total_cmp(&c.center.dist2(g.center(**b)))
                            .then(a.cmp(b))
                    })
                    .unwrap();
                assert_eq!(seg.region_of(c.id), seg.region_of(*nearest));
            }
        }
        assert_ne!(seg.region_of(CellId(0)), seg.region_of(CellId(35)));
    }

    #[test]
    fn empty_incidents_rejected() {
        let g = Grid::planar(2, 2, 1.0).unwrap();
        assert!(segment_regions(&g, &[], &[], 1, 0).is_err());
    }
}
