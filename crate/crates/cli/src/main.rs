use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use hiplan::harness::commands;
use hiplan::harness::{ExperimentConfig, Policy, Scenario};

/// Hierarchical responder allocation: demand fitting, region segmentation,
/// surrogate training and simulated experiments.
#[derive(Debug, Parser)]
#[command(name = "hiplan", version)]
struct Cli {
    /// JSON experiment config; the built-in synthetic city when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Overrides the config's scenario.
    #[arg(long, global = true)]
    scenario: Option<Scenario>,
    /// Overrides the config's policy list; repeatable.
    #[arg(long, global = true)]
    policy: Vec<Policy>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit per-cell arrival rates.
    FitDemand,
    /// Cluster incidents into regions.
    Segment,
    /// Simulate training samples and fit the per-region forests.
    TrainSurrogate,
    /// Run the first policy on the base seed.
    Simulate,
    /// Run every policy on every seed and chain.
    Experiment,
    /// Score the queue and forest estimators on hold-out samples.
    CompareEstimators,
    /// Sweep simultaneous failure counts for every policy.
    InjectFailures,
    /// Write the effective config and exit.
    PrintConfig,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::read(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::synthetic_default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.scenario {
        cfg.scenario = s;
    }
    if !cli.policy.is_empty() {
        cfg.policies = cli.policy.clone();
    }
    cfg.validate()?;

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("building the worker pool")?;
    let out = cli.out.as_path();

    pool.install(|| -> Result<()> {
        match cli.command {
            Command::FitDemand => {
                let m = commands::fit_demand(&cfg, out)?;
                log::info!("total rate {:.4} per minute", m.total_rate());
            }
            Command::Segment => {
                let seg = commands::segment(&cfg, out)?;
                for r in &seg.regions {
                    log::info!(
                        "{}: {} cells, {} depots",
                        r.id,
                        r.cell_ids.len(),
                        r.depot_ids.len()
                    );
                }
            }
            Command::TrainSurrogate => {
                let set = commands::train_surrogate(&cfg, out)?;
                log::info!("trained forests for {} regions", set.regions.len());
            }
            Command::Simulate | Command::Experiment | Command::InjectFailures => {
                let rep = match cli.command {
                    Command::Simulate => commands::simulate(&cfg, out)?,
                    Command::Experiment => commands::experiment(&cfg, out)?,
                    _ => commands::inject_failures(&cfg, out)?,
                };
                for p in &rep.pooled {
                    let mean = p
                        .summary
                        .mean()
                        .map_or("-".to_string(), |m| format!("{m:.1}"));
                    println!(
                        "{:<14} failures={} runs={} incidents={} mean_response_s={}",
                        p.policy, p.n_failures, p.runs, p.summary.count, mean
                    );
                }
            }
            Command::CompareEstimators => {
                for row in commands::compare_estimators(&cfg, out)? {
                    println!(
                        "k={} holdout={} stable={} queue_mse={:.1} forest_mse={:.1}",
                        row.k, row.n_holdout, row.n_stable, row.queue_mse, row.forest_mse
                    );
                }
            }
            Command::PrintConfig => {
                std::fs::create_dir_all(out)
                    .with_context(|| format!("creating {}", out.display()))?;
                cfg.write(&out.join("config.json"))?;
            }
        }
        Ok(())
    })
}
