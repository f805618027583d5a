//! Policies, value functions and the pool of pre-trained source policies.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::nn::{GaussianPolicyHead, Network, OutputHead};
use crate::simenv::{Action, EnvParams, State};
use crate::trainer::{self, TrainConfig};

/// A Gaussian policy. Source policies are shared behind `Arc<Policy>` and
/// never mutated.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    head: GaussianPolicyHead,
}

impl Policy {
    pub fn new(head: GaussianPolicyHead) -> Self {
        Self { head }
    }

    pub fn head(&self) -> &GaussianPolicyHead {
        &self.head
    }

    pub fn state_dim(&self) -> usize {
        self.head.mean.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.head.action_dim()
    }

    pub fn mean_action(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.head.mean_action(s)
    }

    /// Mean action when `deterministic`, otherwise a Gaussian draw. Output is
    /// not clipped.
    pub fn act(&self, s: &State, rng: &mut ChaCha8Rng, deterministic: bool) -> Result<Action> {
        let mean = self.head.mean_action(&s.to_array())?;
        if deterministic {
            return Ok(Action::from_slice(&mean));
        }
        let a: Vec<f64> = mean
            .iter()
            .zip(&self.head.log_std)
            .map(|(m, ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + ls.exp() * z
            })
            .collect();
        Ok(Action::from_slice(&a))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.head.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(GaussianPolicyHead::load(path)?))
    }
}

/// State-value estimate with a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub net: Network,
}

impl ValueFunction {
    pub fn new(hidden: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut sizes = vec![State::DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Ok(Self {
            net: Network::new(&sizes, OutputHead::Linear, rng)?,
        })
    }

    pub fn value(&self, s: &State) -> Result<f64> {
        Ok(self.net.forward(&s.to_array())?[0])
    }
}

/// One candidate source policy.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceEntry {
    pub checkpoint: PathBuf,
    pub params: EnvParams,
    /// Mean raw return of the last 100 training episodes.
    pub final_episodic_reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourcePool {
    pub entries: Vec<SourceEntry>,
}

impl SourcePool {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.final_episodic_reward).collect()
    }

    /// Text manifest: one `[entry]` block per source. Checkpoint paths are
    /// written as given; relative paths are resolved against the manifest's
    /// directory on load.
    pub fn to_manifest(&self) -> String {
        let mut out = String::from("# source pool manifest v1\n");
        for e in &self.entries {
            out.push_str("\n[entry]\n");
            out.push_str(&format!("checkpoint = {}\n", e.checkpoint.display()));
            out.push_str(&format!("final_episodic_reward = {}\n", e.final_episodic_reward));
            for line in e.params.to_text().lines() {
                out.push_str("env.");
                out.push_str(line);
                out.push('\n');
            }
        }
        out
    }

    pub fn from_manifest(text: &str, base_dir: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        let mut blocks: Vec<(usize, String)> = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim() == "[entry]" {
                blocks.push((idx + 1, String::new()));
            } else if let Some((_, body)) = blocks.last_mut() {
                body.push_str(line);
                body.push('\n');
            } else if !line.trim().is_empty() && !line.trim_start().starts_with('#') {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: "content before the first [entry]".into(),
                });
            }
        }
        for (line, body) in blocks {
            let kv = KvMap::parse(&body).map_err(|e| match e {
                Error::Parse { line: l, msg } => Error::Parse { line: line + l, msg },
                other => other,
            })?;
            let raw: PathBuf = kv.require::<String>("checkpoint")?.into();
            let checkpoint = if raw.is_relative() { base_dir.join(raw) } else { raw };
            entries.push(SourceEntry {
                checkpoint,
                params: EnvParams::from_kv(&kv.section("env"))?,
                final_episodic_reward: kv.require("final_episodic_reward")?,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_manifest(&text, base)
    }
}

/// Trains a from-scratch policy (no sources, no safeguard) on `params`.
pub fn train_source(params: &EnvParams, base: &TrainConfig, budget: usize, seed: u64) -> Result<(Policy, f64)> {
    let mut cfg = base.clone();
    cfg.env = *params;
    cfg.total_steps = budget;
    cfg.seed = seed;
    cfg.aggregation_mode = "none".into();
    cfg.safeguard.mode = "off".into();
    let out = trainer::run(&cfg, Vec::new())?;
    let reward = out.final_episodic_reward();
    Ok((Policy::new(out.aggregator.aux_policy()), reward))
}

/// Indices of high- and low-performing entries. Entries strictly between the
/// thresholds belong to neither list.
pub fn classify_pool(pool: &SourcePool, high_threshold: f64, low_threshold: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if high_threshold <= low_threshold {
        return Err(Error::Config(format!(
            "high threshold {high_threshold} must exceed low threshold {low_threshold}"
        )));
    }
    let mut high = Vec::new();
    let mut low = Vec::new();
    for (i, e) in pool.entries.iter().enumerate() {
        if e.final_episodic_reward > high_threshold {
            high.push(i);
        } else if e.final_episodic_reward < low_threshold {
            low.push(i);
        }
    }
    Ok((high, low))
}

/// Linear-interpolation quantile of `values`, `q` in `[0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Thresholds at the given pool quantiles, for pools trained at reduced
/// budgets where absolute thresholds are out of reach.
pub fn quantile_thresholds(pool: &SourcePool, high_q: f64, low_q: f64) -> (f64, f64) {
    let r = pool.rewards();
    (quantile(&r, high_q), quantile(&r, low_q))
}
