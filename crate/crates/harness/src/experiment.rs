//! Experiment specs, source selection and multi-seed execution.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use aasc_core::policy::{classify_pool, quantile_thresholds};
use aasc_core::trainer::{self, stream, AgentCheckpoint};
use aasc_core::{KvMap, Policy, SourcePool, TrainConfig};
use rayon::prelude::*;

use crate::config;
use crate::error::{HarnessError, Result};

/// Stream id for per-seed source selection.
const STREAM_SELECTION: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Aasc,
    Multipolar,
    /// From scratch: the auxiliary network alone.
    Mlp,
}

impl Method {
    pub fn aggregation_mode(self) -> &'static str {
        match self {
            Method::Aasc => "aasc",
            Method::Multipolar => "multipolar",
            Method::Mlp => "none",
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "aasc" => Ok(Method::Aasc),
            "multipolar" => Ok(Method::Multipolar),
            "mlp" => Ok(Method::Mlp),
            other => Err(format!("unknown method `{other}` (expected aasc, multipolar or mlp)")),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Aasc => "aasc",
            Method::Multipolar => "multipolar",
            Method::Mlp => "mlp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Selection {
    None,
    Random(usize),
    KHigh(usize),
    Mixed { high: usize, low: usize },
    KLow(usize),
}

impl Selection {
    pub fn count(self) -> usize {
        match self {
            Selection::None => 0,
            Selection::Random(k) | Selection::KHigh(k) | Selection::KLow(k) => k,
            Selection::Mixed { high, low } => high + low,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Thresholds {
    /// Pool reward quantiles.
    Quantile { high: f64, low: f64 },
    Absolute { high: f64, low: f64 },
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds::Quantile { high: 0.6, low: 0.4 }
    }
}

impl Thresholds {
    pub fn resolve(self, pool: &SourcePool) -> (f64, f64) {
        match self {
            Thresholds::Quantile { high, low } => quantile_thresholds(pool, high, low),
            Thresholds::Absolute { high, low } => (high, low),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub name: String,
    pub method: Method,
    pub selection: Selection,
    pub seeds: Vec<u64>,
    pub budget: usize,
    pub checkpoints: Vec<usize>,
    pub sources: Option<PathBuf>,
    pub thresholds: Thresholds,
    /// Environment, optimizer and safeguard settings; `seed`, `total_steps`
    /// and `aggregation_mode` are overwritten per run.
    pub train: TrainConfig,
}

impl ExperimentSpec {
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let name: String = config::require(kv, "experiment.name")?;
        let method: Method = config::require(kv, "experiment.method")?;
        let kind: String = config::get_or(kv, "experiment.selection", default_selection(method).into())?;
        let k: usize = config::get_or(kv, "experiment.k", 4)?;
        let selection = match kind.as_str() {
            "none" => Selection::None,
            "random" => Selection::Random(k),
            "k_high" => Selection::KHigh(k),
            "k_low" => Selection::KLow(k),
            "mixed" => Selection::Mixed {
                high: config::require(kv, "experiment.mixed_high")?,
                low: config::require(kv, "experiment.mixed_low")?,
            },
            other => {
                return Err(HarnessError::Usage(format!(
                    "experiment.selection: unknown rule `{other}` (expected none, random, k_high, mixed or k_low)"
                )))
            }
        };
        let thresholds = match config::get_or(kv, "experiment.thresholds", "quantile".to_string())?.as_str() {
            "quantile" => Thresholds::Quantile {
                high: config::get_or(kv, "experiment.high_threshold", 0.6)?,
                low: config::get_or(kv, "experiment.low_threshold", 0.4)?,
            },
            "absolute" => Thresholds::Absolute {
                high: config::require(kv, "experiment.high_threshold")?,
                low: config::require(kv, "experiment.low_threshold")?,
            },
            other => {
                return Err(HarnessError::Usage(format!(
                    "experiment.thresholds: expected quantile or absolute, got `{other}`"
                )))
            }
        };
        let spec = Self {
            name,
            method,
            selection,
            seeds: config::list_or(kv, "experiment.seeds", vec![0, 1, 2, 3, 4])?,
            budget: config::get_or(kv, "experiment.budget", 200_000)?,
            checkpoints: config::list_or(kv, "experiment.checkpoints", vec![100_000, 200_000])?,
            sources: kv.get_raw("experiment.sources").map(PathBuf::from),
            thresholds,
            train: config::train_config(kv)?,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(HarnessError::Usage(format!("invalid experiment name `{}`", self.name)));
        }
        if self.seeds.is_empty() {
            return Err(HarnessError::Usage("experiment.seeds is empty".into()));
        }
        let mut seen = self.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.seeds.len() {
            return Err(HarnessError::Usage("experiment.seeds must be distinct".into()));
        }
        if let Some(c) = self.checkpoints.iter().find(|c| **c > self.budget) {
            return Err(HarnessError::Usage(format!(
                "checkpoint {c} exceeds experiment.budget {}",
                self.budget
            )));
        }
        if self.method == Method::Mlp && self.selection != Selection::None {
            return Err(HarnessError::Usage("method mlp takes no sources (experiment.selection = none)".into()));
        }
        if self.method != Method::Mlp && self.selection.count() == 0 {
            return Err(HarnessError::Usage(format!("method {} needs at least one source", self.method)));
        }
        Ok(())
    }

    /// The training configuration of one seed.
    pub fn run_config(&self, seed: u64) -> TrainConfig {
        let mut cfg = self.train.clone();
        cfg.seed = seed;
        cfg.total_steps = self.budget;
        cfg.aggregation_mode = self.method.aggregation_mode().into();
        cfg
    }
}

fn default_selection(method: Method) -> &'static str {
    match method {
        Method::Mlp => "none",
        _ => "random",
    }
}

/// Indices into `pool` chosen by `selection` for one seed; draws are without
/// replacement inside each quality class.
pub fn select_sources(
    arm: &str,
    pool: &SourcePool,
    selection: Selection,
    thresholds: Thresholds,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = stream(seed, STREAM_SELECTION);
    let (hi_t, lo_t) = thresholds.resolve(pool);
    let (high, low) = classify_pool(pool, hi_t, lo_t)?;
    let mut draw = |from: &[usize], k: usize, class: &str| -> Result<Vec<usize>> {
        if from.len() < k {
            return Err(HarnessError::Infeasible {
                arm: arm.into(),
                reason: format!("needs {k} {class} sources, pool has {}", from.len()),
            });
        }
        let picks = rand::seq::index::sample(&mut rng, from.len(), k).into_vec();
        Ok(picks.into_iter().map(|i| from[i]).collect())
    };
    let all: Vec<usize> = (0..pool.len()).collect();
    let mut out = match selection {
        Selection::None => Vec::new(),
        Selection::Random(k) => draw(&all, k, "")?,
        Selection::KHigh(k) => draw(&high, k, "high-quality")?,
        Selection::KLow(k) => draw(&low, k, "low-quality")?,
        Selection::Mixed { high: h, low: l } => {
            let mut v = draw(&high, h, "high-quality")?;
            v.extend(draw(&low, l, "low-quality")?);
            v
        }
    };
    out.sort_unstable();
    Ok(out)
}

/// One (arm, seed) training run.
#[derive(Debug, Clone)]
pub struct Job {
    pub arm: String,
    pub seed: u64,
    pub cfg: TrainConfig,
    pub sources: Vec<usize>,
    pub dir: PathBuf,
}

pub fn run_dir(out: &Path, arm: &str, seed: u64) -> PathBuf {
    out.join("run").join(arm).join(seed.to_string())
}

/// Jobs of every seed of `spec`, with sources already selected.
pub fn plan(spec: &ExperimentSpec, pool: Option<&SourcePool>, out: &Path) -> Result<Vec<Job>> {
    spec.validate()?;
    spec.seeds
        .iter()
        .map(|&seed| {
            let sources = match (spec.selection, pool) {
                (Selection::None, _) => Vec::new(),
                (_, Some(pool)) => select_sources(&spec.name, pool, spec.selection, spec.thresholds, seed)?,
                (_, None) => {
                    return Err(HarnessError::Core(aasc_core::Error::Config(format!(
                        "experiment `{}` needs a source pool (experiment.sources)",
                        spec.name
                    ))))
                }
            };
            Ok(Job {
                arm: spec.name.clone(),
                seed,
                cfg: spec.run_config(seed),
                sources,
                dir: run_dir(out, &spec.name, seed),
            })
        })
        .collect()
}

/// Runs `jobs` on `workers` threads. Each run writes `metrics.csv`,
/// `agent.json` and `run.txt` (master seed, sources and full config) into
/// its own directory.
pub fn execute(jobs: &[Job], policies: &[Arc<Policy>], pool: Option<&SourcePool>, workers: usize) -> Result<()> {
    let threads = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Usage(format!("cannot build worker pool: {e}")))?;
    let results: Vec<Result<()>> = threads.install(|| jobs.par_iter().map(|j| run_job(j, policies, pool)).collect());
    results.into_iter().collect()
}

fn run_job(job: &Job, policies: &[Arc<Policy>], pool: Option<&SourcePool>) -> Result<()> {
    let sources: Vec<Arc<Policy>> = job.sources.iter().map(|&i| policies[i].clone()).collect();
    let out = trainer::run(&job.cfg, sources)?;
    std::fs::create_dir_all(&job.dir)?;
    std::fs::write(job.dir.join("metrics.csv"), out.metrics_csv())?;
    AgentCheckpoint::new(&out.aggregator, &out.value_fn).save(&job.dir.join("agent.json"))?;
    let mut record = KvMap::new();
    record.insert("run.arm", &job.arm);
    record.insert("run.master_seed", job.seed);
    let picked: Vec<String> = job.sources.iter().map(usize::to_string).collect();
    record.insert("run.sources", picked.join(","));
    if let Some(pool) = pool {
        let paths: Vec<String> = job
            .sources
            .iter()
            .map(|&i| pool.entries[i].checkpoint.display().to_string())
            .collect();
        record.insert("run.source_checkpoints", paths.join(","));
    }
    record.insert("run.final_episodic_reward", out.final_episodic_reward());
    record.merge(&job.cfg.to_kv());
    std::fs::write(job.dir.join("run.txt"), record.render())?;
    Ok(())
}

/// Plans and runs every seed of one experiment.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path, workers: usize) -> Result<Vec<Job>> {
    let pool = match &spec.sources {
        Some(path) => Some(SourcePool::load(path).map_err(|e| HarnessError::in_file(path, e))?),
        None => None,
    };
    let jobs = plan(spec, pool.as_ref(), out)?;
    let policies = match &pool {
        Some(p) if spec.selection != Selection::None => crate::sources::load_policies(p)?,
        _ => Vec::new(),
    };
    execute(&jobs, &policies, pool.as_ref(), workers)?;
    Ok(jobs)
}
