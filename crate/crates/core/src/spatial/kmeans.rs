use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Point;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Stop once no center moves farther than this.
    pub tol: f64,
    /// Independent restarts; the lowest-SSE run wins.
    pub n_init: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            seed,
            max_iter: 300,
            tol: 1e-6,
            n_init: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centers: Vec<Point>,
    pub assignment: Vec<usize>,
    pub sse: f64,
    pub iterations: usize,
    /// SSE after every assignment step of the winning run.
    pub sse_trace: Vec<f64>,
}

/// Lloyd's algorithm with centers initialised uniformly at random from the
/// distinct input points. Deterministic for a given config.
pub fn kmeans(points: &[Point], cfg: &KMeansConfig) -> Result<KMeansResult> {
    let mut distinct: Vec<Point> = points.to_vec();
    distinct.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    distinct.dedup();
    if cfg.k == 0 || cfg.k > distinct.len() {
        return Err(Error::InvalidK {
            k: cfg.k,
            distinct: distinct.len(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.n_init.max(1) {
        let init: Vec<Point> = sample(&mut rng, distinct.len(), cfg.k)
            .into_iter()
            .map(|i| distinct[i])
            .collect();
        let run = lloyd(points, init, cfg.max_iter, cfg.tol);
        if best.as_ref().is_none_or(|b| run.sse < b.sse) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn nearest(p: Point, centers: &[Point]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = p.dist2(*c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign(points: &[Point], centers: &[Point], out: &mut [usize], dist: &mut [f64]) -> f64 {
    let mut sse = 0.0;
    for (i, p) in points.iter().enumerate() {
        let (j, d) = nearest(*p, centers);
        out[i] = j;
        dist[i] = d;
        sse += d;
    }
    sse
}

fn lloyd(points: &[Point], mut centers: Vec<Point>, max_iter: usize, tol: f64) -> KMeansResult {
    let k = centers.len();
    let mut assignment = vec![0; points.len()];
    let mut dist = vec![0.0; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;
        trace.push(assign(points, &centers, &mut assignment, &mut dist));

        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (p, &j) in points.iter().zip(&assignment) {
            sums[j].0 += p.x;
            sums[j].1 += p.y;
            sums[j].2 += 1;
        }
        let mut next: Vec<Option<Point>> = sums
            .iter()
            .map(|&(sx, sy, n)| (n > 0).then(|| Point::new(sx / n as f64, sy / n as f64)))
            .collect();

        // Empty clusters restart at the points farthest from their centers.
        if next.iter().any(Option::is_none) {
            let mut order: Vec<usize> = (0..points.len()).collect();
            order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
            let mut donors = order.into_iter();
            for slot in next.iter_mut().filter(|c| c.is_none()) {
                *slot = donors.next().map(|i| points[i]);
            }
        }

        let next: Vec<Point> = next
            .into_iter()
            .zip(&centers)
            .map(|(n, old)| n.unwrap_or(*old))
            .collect();
        let shift = next
            .iter()
            .zip(&centers)
            .map(|(a, b)| a.dist(*b))
            .fold(0.0, f64::max);
        centers = next;
        if shift < tol {
            break;
        }
    }
    let sse = assign(points, &centers, &mut assignment, &mut dist);
    trace.push(sse);
    KMeansResult {
        centers,
        assignment,
        sse,
        iterations,
        sse_trace: trace,
    }
}
