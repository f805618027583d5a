//! Flat `key = value` run configuration.

use std::path::Path;

use aasc_core::{KvMap, TrainConfig};

use crate::error::{HarnessError, Result};

/// Every key the harness reads outside `train.`, `env.` and `safeguard.`,
/// with a one-line description. Rendered into `--help`.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("experiment.name", "run directory name under <out>/run/"),
    ("experiment.method", "aasc | multipolar | mlp"),
    ("experiment.selection", "none | random | k_high | mixed | k_low"),
    ("experiment.k", "number of sources for random, k_high and k_low"),
    ("experiment.mixed_high", "high-quality sources in a mixed selection"),
    ("experiment.mixed_low", "low-quality sources in a mixed selection"),
    ("experiment.seeds", "comma separated master seeds (default 0,1,2,3,4)"),
    ("experiment.budget", "environment steps per seed (default 200000)"),
    ("experiment.checkpoints", "reporting steps (default 100000,200000)"),
    ("experiment.sources", "source pool manifest path"),
    ("experiment.thresholds", "quantile | absolute source quality thresholds"),
    ("experiment.high_threshold", "0.6 as a quantile, or an absolute reward"),
    ("experiment.low_threshold", "0.4 as a quantile, or an absolute reward"),
    ("sources.pool_size", "number of source instances to train"),
    ("sources.budget", "training steps per source instance"),
    ("ranges.m.low / ranges.m.high", "mass sampling interval (also x_max, y_max, v_max)"),
    ("ablate.k", "sources per source-quality arm (default 4)"),
    ("ablate.counts", "source counts for the count ablation (default 1,4,10)"),
    ("ablate.include_mlp", "add the from-scratch baseline arm (default true)"),
    ("report.window", "trailing batches averaged at each checkpoint (default 5)"),
    ("evaluate.episodes", "episodes per evaluation (default 100)"),
    ("evaluate.deterministic", "act with the mean action (default true)"),
    ("train.*", "optimizer settings, see TrainConfig::TRAIN_KEYS"),
    ("aggregator.mode", "set from experiment.method; rarely given directly"),
    ("env.*", "target environment: m, v_max, a_max, x_max, y_max, d_circle, dt, horizon"),
    ("safeguard.*", "mode, eta, gamma_risk, penalty_b, alpha, tau_target, warmup_batches, bootstrap (executed|backup|max), record (executed|proposed|both), buffer_capacity, critic_samples, critic_minibatch, critic_epochs, lr"),
];

const SECTIONS: &[&str] = &[
    "experiment",
    "sources",
    "ranges",
    "ablate",
    "report",
    "evaluate",
    "train",
    "aggregator",
    "env",
    "safeguard",
];

pub fn help_text() -> String {
    let mut out = String::from("Config keys (flat `key = value`, `#` comments):\n");
    for (k, d) in KEY_DOCS {
        out.push_str(&format!("  {k:<30} {d}\n"));
    }
    out
}

/// Reads a config file; a missing path yields an empty map.
pub fn load(path: Option<&Path>) -> Result<KvMap> {
    let Some(path) = path else {
        return Ok(KvMap::new());
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let kv = KvMap::parse(&text).map_err(|e| HarnessError::in_file(path, e))?;
    check_sections(&kv)?;
    Ok(kv)
}

pub fn check_sections(kv: &KvMap) -> Result<()> {
    for key in kv.keys() {
        let section = key.split('.').next().unwrap_or(key);
        if !SECTIONS.contains(&section) || !key.contains('.') {
            return Err(HarnessError::Usage(format!("unknown config key `{key}`")));
        }
    }
    Ok(())
}

/// Training settings from the `train.`, `aggregator.`, `env.` and
/// `safeguard.` sections.
pub fn train_config(kv: &KvMap) -> Result<TrainConfig> {
    let mut sub = KvMap::new();
    for section in ["train", "aggregator", "env", "safeguard"] {
        sub.extend_prefixed(section, &kv.section(section));
    }
    Ok(TrainConfig::from_kv(&sub)?)
}

pub fn require<T: std::str::FromStr>(kv: &KvMap, key: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    kv.get(key)?.ok_or_else(|| HarnessError::missing_key(key))
}

pub fn get_or<T: std::str::FromStr>(kv: &KvMap, key: &str, default: T) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    Ok(kv.get(key)?.unwrap_or(default))
}

pub fn list_or<T: std::str::FromStr>(kv: &KvMap, key: &str, default: Vec<T>) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    match kv.get_raw(key) {
        Some(raw) => Ok(aasc_core::kv::parse_list(key, raw)?),
        None => Ok(default),
    }
}
