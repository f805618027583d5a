//! Source-pool generation: sample environment instances, train a policy on
//! each, write checkpoints and a manifest.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use aasc_core::policy::{train_source, SourceEntry};
use aasc_core::simenv::{sample_instance, ParamRanges};
use aasc_core::trainer::stream;
use aasc_core::{EnvParams, KvMap, Policy, SourcePool, TrainConfig};
use rayon::prelude::*;

use crate::config;
use crate::error::{HarnessError, Result};

/// Stream id for instance sampling.
const STREAM_INSTANCES: u64 = 32;

#[derive(Debug, Clone)]
pub struct GenSpec {
    pub pool_size: usize,
    pub budget: usize,
    pub seed: u64,
    pub ranges: ParamRanges,
    pub base: EnvParams,
    pub train: TrainConfig,
}

impl GenSpec {
    pub fn from_kv(kv: &KvMap, seed: u64) -> Result<Self> {
        let pool_size: usize = config::require(kv, "sources.pool_size")?;
        let budget: usize = config::require(kv, "sources.budget")?;
        if pool_size == 0 {
            return Err(HarnessError::Usage("sources.pool_size must be positive".into()));
        }
        let train = config::train_config(kv)?;
        if budget < train.batch_steps {
            return Err(HarnessError::Usage(format!(
                "sources.budget ({budget}) is below one batch ({})",
                train.batch_steps
            )));
        }
        Ok(Self {
            pool_size,
            budget,
            seed,
            ranges: ParamRanges::from_kv(&kv.section("ranges"))?,
            base: train.env,
            train,
        })
    }

    /// Training seed of the `i`-th instance.
    pub fn instance_seed(&self, i: usize) -> u64 {
        self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1)
    }

    pub fn instances(&self) -> Result<Vec<EnvParams>> {
        let mut rng = stream(self.seed, STREAM_INSTANCES);
        (0..self.pool_size)
            .map(|_| Ok(sample_instance(&self.ranges, &self.base, &mut rng)?))
            .collect()
    }
}

/// Trains the pool into `dir` (checkpoints `source_<i>.json` and
/// `manifest.txt`) using at most `workers` threads.
pub fn generate(spec: &GenSpec, dir: &Path, workers: usize) -> Result<SourcePool> {
    std::fs::create_dir_all(dir)?;
    let instances = spec.instances()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| HarnessError::Usage(format!("cannot build worker pool: {e}")))?;
    let trained: Vec<Result<(Policy, f64)>> = pool.install(|| {
        instances
            .par_iter()
            .enumerate()
            .map(|(i, params)| Ok(train_source(params, &spec.train, spec.budget, spec.instance_seed(i))?))
            .collect()
    });
    let mut entries = Vec::with_capacity(trained.len());
    for (i, (params, result)) in instances.iter().zip(trained).enumerate() {
        let (policy, reward) = result?;
        let name = format!("source_{i}.json");
        policy.save(&dir.join(&name))?;
        entries.push(SourceEntry {
            checkpoint: PathBuf::from(name),
            params: *params,
            final_episodic_reward: reward,
        });
    }
    let pool = SourcePool { entries };
    std::fs::write(dir.join("manifest.txt"), pool.to_manifest())?;
    SourcePool::load(&dir.join("manifest.txt")).map_err(Into::into)
}

/// Loads every checkpoint of a pool once.
pub fn load_policies(pool: &SourcePool) -> Result<Vec<Arc<Policy>>> {
    pool.entries
        .iter()
        .map(|e| Policy::load(&e.checkpoint).map(Arc::new).map_err(|err| HarnessError::in_file(&e.checkpoint, err)))
        .collect()
}

/// Ratio of the best to the worst source reward; infinite when the worst is
/// non-positive and the best is not.
pub fn reward_spread(pool: &SourcePool) -> f64 {
    let r = pool.rewards();
    let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo > 0.0 {
        hi / lo
    } else if hi > lo {
        f64::INFINITY
    } else {
        1.0
    }
}
