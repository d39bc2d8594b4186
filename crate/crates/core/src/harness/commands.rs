//! The subcommands. Each reads a config, writes its outputs under `out`
//! and returns what it wrote.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    load_city, matrix_keys, run_matrix, simulate_samples, train_surrogates, CitySource, Estimators,
    ExperimentConfig, PlannerStats, Policy, Prepared, RunResult, Scenario, Summary, HOLDOUT, TRAIN,
};
use crate::demand::{fit_poisson, PoissonModel};
use crate::error::{Error, Result};
use crate::jsonio::write_json;
use crate::sim::write_records_csv;
use crate::spatial::{write_depots, write_incidents, write_regions, Segmentation};
use crate::waittime::{write_samples_csv, SurrogateSample, SurrogateSet, WaitEstimator};

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Fits `demand.json`. A generated city also gets its history and depots
/// written out as `incidents.csv` and `depots.csv`.
pub fn fit_demand(cfg: &ExperimentConfig, out: &Path) -> Result<PoissonModel> {
    ensure_dir(out)?;
    let city = load_city(cfg)?;
    let model = fit_poisson(&city.records, &city.grid, city.observed_minutes)?;
    model.write(&out.join("demand.json"))?;
    if let CitySource::Synthetic(_) = cfg.city {
        write_incidents(&out.join("incidents.csv"), &city.records)?;
        write_depots(&out.join("depots.csv"), &city.depots, &city.grid)?;
    }
    Ok(model)
}

/// Writes `regions.json`.
pub fn segment(cfg: &ExperimentConfig, out: &Path) -> Result<Segmentation> {
    ensure_dir(out)?;
    let prep = Prepared::new(cfg, cfg.k)?;
    write_regions(&out.join("regions.json"), &prep.seg)?;
    Ok(prep.seg)
}

/// Writes the simulated samples to `samples.csv` and the forests to
/// `surrogate.json`.
pub fn train_surrogate(cfg: &ExperimentConfig, out: &Path) -> Result<SurrogateSet> {
    ensure_dir(out)?;
    let prep = Prepared::new(cfg, cfg.k)?;
    let samples = simulate_samples(&prep, cfg, TRAIN, cfg.training.chains_per_scale)?;
    write_samples_csv(&out.join("samples.csv"), &samples)?;
    let set = train_surrogates(&prep, cfg, &samples)?;
    set.write(&out.join("surrogate.json"))?;
    Ok(set)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub policy: Policy,
    pub n_failures: usize,
    pub seed: u64,
    pub chain: usize,
    /// Response-record file, relative to the output directory.
    pub records: String,
    pub planner_calls: usize,
    pub planner: PlannerStats,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledReport {
    pub policy: Policy,
    pub n_failures: usize,
    pub runs: usize,
    pub summary: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scenario: Scenario,
    pub runs: Vec<RunReport>,
    /// Responses of all seeds and chains pooled per policy and failure
    /// count.
    pub pooled: Vec<PooledReport>,
}

impl MetricsReport {
    pub fn pooled(&self, policy: Policy, n_failures: usize) -> Option<&PooledReport> {
        self.pooled
            .iter()
            .find(|p| p.policy == policy && p.n_failures == n_failures)
    }

    pub fn pooled_mean(&self, policy: Policy, n_failures: usize) -> Option<f64> {
        self.pooled(policy, n_failures)
            .and_then(|p| p.summary.mean())
    }
}

/// Writes per-run record files (and traces when enabled) and builds the
/// report.
fn report(
    cfg: &ExperimentConfig,
    scenario: Scenario,
    results: &[RunResult],
    out: &Path,
) -> Result<MetricsReport> {
    let rec_dir = out.join("records");
    ensure_dir(&rec_dir)?;
    if cfg.trace {
        ensure_dir(&out.join("traces"))?;
    }
    let mut runs = Vec::with_capacity(results.len());
    for r in results {
        let stem = r.key.file_stem(scenario);
        let rel = format!("records/{stem}.csv");
        write_records_csv(&out.join(&rel), &r.records)?;
        if let Some(trace) = &r.trace {
            let path = out.join(format!("traces/{stem}.jsonl"));
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(file);
            for entry in trace {
                let line = serde_json::to_string(entry).map_err(|source| Error::Json {
                    path: path.clone(),
                    source,
                })?;
                writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        let times: Vec<f64> = r.records.iter().map(|x| x.response_s).collect();
        runs.push(RunReport {
            policy: r.key.policy,
            n_failures: r.key.n_failures,
            seed: r.key.seed,
            chain: r.key.chain,
            records: rel,
            planner_calls: r.planner_calls,
            planner: r.stats.clone(),
            summary: super::summarize(&times),
        });
    }
    let mut groups: Vec<(Policy, usize)> = results
        .iter()
        .map(|r| (r.key.policy, r.key.n_failures))
        .collect();
    groups.dedup();
    let pooled = groups
        .into_iter()
        .map(|(policy, n_failures)| {
            let members: Vec<&RunResult> = results
                .iter()
                .filter(|r| r.key.policy == policy && r.key.n_failures == n_failures)
                .collect();
            let times: Vec<f64> = members
                .iter()
                .flat_map(|r| r.records.iter().map(|x| x.response_s))
                .collect();
            PooledReport {
                policy,
                n_failures,
                runs: members.len(),
                summary: super::summarize(&times),
            }
        })
        .collect();
    Ok(MetricsReport {
        scenario,
        runs,
        pooled,
    })
}

fn matrix(
    cfg: &ExperimentConfig,
    out: &Path,
    policies: &[Policy],
    failures: &[usize],
    seeds: &[u64],
    scenario: Scenario,
    file: &str,
) -> Result<MetricsReport> {
    ensure_dir(out)?;
    let prep = Prepared::new(cfg, cfg.k)?;
    let est = Estimators::for_config(&prep, cfg)?;
    let keys = matrix_keys(cfg, policies, failures, seeds);
    let results = run_matrix(&prep, cfg, &est, scenario, &keys)?;
    let rep = report(cfg, scenario, &results, out)?;
    write_json(&out.join(file), &rep)?;
    Ok(rep)
}

fn scenario_failures(cfg: &ExperimentConfig) -> usize {
    match cfg.scenario {
        Scenario::Failures => cfg.failures.n_failures,
        _ => 0,
    }
}

/// The first configured policy on every chain of the base seed; writes
/// `metrics.json` and `records/`.
pub fn simulate(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsReport> {
    let policy = cfg.policies[0];
    matrix(
        cfg,
        out,
        &[policy],
        &[scenario_failures(cfg)],
        &[cfg.seed],
        cfg.scenario,
        "metrics.json",
    )
}

/// Every configured policy on every seed and chain of the configured
/// scenario; writes `metrics.json` and `records/`.
pub fn experiment(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsReport> {
    matrix(
        cfg,
        out,
        &cfg.policies,
        &[scenario_failures(cfg)],
        &cfg.seeds(),
        cfg.scenario,
        "metrics.json",
    )
}

/// Every configured policy for each failure count of the sweep; writes
/// `failures.json` and `records/`.
pub fn inject_failures(cfg: &ExperimentConfig, out: &Path) -> Result<MetricsReport> {
    matrix(
        cfg,
        out,
        &cfg.policies,
        &cfg.failures.sweep,
        &cfg.seeds(),
        Scenario::Failures,
        "failures.json",
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorScore {
    pub k: usize,
    pub n_train: usize,
    pub n_holdout: usize,
    /// Hold-out samples where the queue model is stable (`rho < 1`).
    pub n_stable: usize,
    /// Both errors over the stable samples, seconds squared.
    pub queue_mse: f64,
    pub forest_mse: f64,
    /// Forest error over every hold-out sample.
    pub forest_mse_all: f64,
}

/// Mean squared error of the queue model and a freshly trained forest on
/// hold-out samples, for each region count in `compare_k`. Writes
/// `estimators.json` and the hold-out samples per `k`.
pub fn compare_estimators(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<EstimatorScore>> {
    ensure_dir(out)?;
    let city = load_city(cfg)?;
    let queue = WaitEstimator::Queue { mu: cfg.eta() };
    let mut rows = Vec::new();
    for &k in &cfg.compare_k {
        let prep = Prepared::from_city(city.clone(), cfg, k)?;
        let train = simulate_samples(&prep, cfg, TRAIN, cfg.training.chains_per_scale)?;
        let forest = train_surrogates(&prep, cfg, &train)?.into_estimator();
        let holdout = simulate_samples(&prep, cfg, HOLDOUT, cfg.training.holdout_chains_per_scale)?;
        write_samples_csv(&out.join(format!("holdout_k{k}.csv")), &holdout)?;
        rows.push(score(k, train.len(), &holdout, &queue, &forest)?);
    }
    write_json(&out.join("estimators.json"), &rows)?;
    Ok(rows)
}

fn score(
    k: usize,
    n_train: usize,
    holdout: &[SurrogateSample],
    queue: &WaitEstimator,
    forest: &WaitEstimator,
) -> Result<EstimatorScore> {
    let (mut q_sum, mut f_sum, mut f_all, mut stable) = (0.0, 0.0, 0.0, 0usize);
    for s in holdout {
        let q = queue.wait(s.region, s.p, s.gamma_per_min)?;
        let f = forest.wait(s.region, s.p, s.gamma_per_min)?;
        let fe = (f - s.mean_response_s).powi(2);
        f_all += fe;
        if q.is_finite() {
            stable += 1;
            q_sum += (q - s.mean_response_s).powi(2);
            f_sum += fe;
        }
    }
    let mean = |x: f64, n: usize| if n == 0 { f64::NAN } else { x / n as f64 };
    Ok(EstimatorScore {
        k,
        n_train,
        n_holdout: holdout.len(),
        n_stable: stable,
        queue_mse: mean(q_sum, stable),
        forest_mse: mean(f_sum, stable),
        forest_mse_all: mean(f_all, holdout.len()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ids::RegionId;
    use crate::waittime::{train_forest, ForestHyperparams};
    use std::collections::BTreeMap;

    fn sample(p: usize, gamma: f64, y: f64) -> SurrogateSample {
        SurrogateSample {
            region: RegionId(0),
            p,
            gamma_per_min: gamma,
            mean_response_s: y,
        }
    }

    #[test]
    fn queue_on_idle_samples_scores_squared_labels() {
        let holdout = vec![sample(1, 0.0, 100.0), sample(2, 0.0, 300.0)];
        let forest = WaitEstimator::Forest(BTreeMap::from([(
            RegionId(0),
            train_forest(
                &[vec![1.0, 0.0], vec![2.0, 0.0]],
                &[100.0, 300.0],
                memorize(),
                1,
            )
            .unwrap(),
        )]));
        let s = score(1, 2, &holdout, &WaitEstimator::Queue { mu: 0.05 }, &forest).unwrap();
        assert_eq!(s.queue_mse, (100.0f64.powi(2) + 300.0f64.powi(2)) / 2.0);
        assert_eq!(s.forest_mse, 0.0);
        assert_eq!(s.n_stable, 2);
    }

    fn memorize() -> ForestHyperparams {
        ForestHyperparams {
            n_trees: 1,
            bootstrap: false,
            ..ForestHyperparams::default()
        }
    }
}
