//! Experiment orchestration for the policy-transfer library: source pool
//! generation, multi-seed training, ablations, result tables and plots.

pub mod ablate;
pub mod config;
pub mod error;
pub mod experiment;
pub mod plot;
pub mod report;
pub mod sources;

use std::path::{Path, PathBuf};

use aasc_core::trainer::{evaluate, AgentCheckpoint, EvalStats};
use aasc_core::KvMap;

pub use error::{HarnessError, Result};

/// Output root: `--out`, else `$AASC_OUT`, else `./aasc-out`.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os("AASC_OUT") {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from("aasc-out"),
    }
}

/// Rolls out a saved agent on the configured environment without screening.
pub fn evaluate_agent(agent: &Path, kv: &KvMap, seed: u64) -> Result<EvalStats> {
    let ck = AgentCheckpoint::load(agent).map_err(|e| HarnessError::in_file(agent, e))?;
    let (agg, _) = ck.restore()?;
    let cfg = config::train_config(kv)?;
    let episodes = config::get_or(kv, "evaluate.episodes", 100)?;
    let deterministic = config::get_or(kv, "evaluate.deterministic", true)?;
    Ok(evaluate(&agg, None, &cfg.env, episodes, deterministic, seed)?)
}
