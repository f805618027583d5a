//! Outer training loop: rollouts through aggregation and the safeguard,
//! clipped-surrogate updates with GAE, and risk-critic refinement.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::{build_weighting, weighting_names, Aggregator, PolicyBatch, WeightingSpec};
use crate::error::{Error, Result};
use crate::kv::{parse_list, KvMap};
use crate::nn::{clip_global_norm, gaussian_log_density, Adam, GaussianPolicyHead, Network, NetworkCheckpoint};
use crate::policy::{Policy, ValueFunction};
use crate::safeguard::{update_risk_critic, Bootstrap, Record, RiskSample, SafeguardConfig, SafeguardRule};
use crate::simenv::{self, Action, EnvParams, State};

/// Action recorded in the task buffer when the safeguard overrides a proposal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervenedAction {
    /// The exploratory proposal that triggered the penalty.
    Proposed,
    /// The backup action that was executed.
    Executed,
}

impl FromStr for IntervenedAction {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "proposed" => Ok(Self::Proposed),
            "executed" => Ok(Self::Executed),
            other => Err(format!("expected proposed|executed, got `{other}`")),
        }
    }
}

impl fmt::Display for IntervenedAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Proposed => "proposed",
            Self::Executed => "executed",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub gamma: f64,
    pub batch_steps: usize,
    pub lr: f64,
    pub clip_ratio: f64,
    pub gae_lambda: f64,
    pub update_epochs: usize,
    pub minibatch_size: usize,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub total_steps: usize,
    pub seed: u64,
    /// Tolerated failure probability; reported next to the empirical
    /// per-batch violation rate.
    pub delta: f64,
    pub hidden: Vec<usize>,
    pub intervened_action: IntervenedAction,
    pub env: EnvParams,
    pub aggregation_mode: String,
    pub safeguard: SafeguardConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            batch_steps: 4000,
            lr: 1e-3,
            clip_ratio: 0.2,
            gae_lambda: 0.95,
            update_epochs: 10,
            minibatch_size: 128,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            total_steps: 200_000,
            seed: 0,
            delta: 0.01,
            hidden: vec![64, 64],
            intervened_action: IntervenedAction::Proposed,
            env: EnvParams::target(),
            aggregation_mode: "aasc".into(),
            safeguard: SafeguardConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Keys accepted under the `train.` prefix.
    pub const TRAIN_KEYS: [&'static str; 14] = [
        "gamma",
        "batch_steps",
        "lr",
        "clip_ratio",
        "gae_lambda",
        "update_epochs",
        "minibatch_size",
        "value_coef",
        "max_grad_norm",
        "total_steps",
        "seed",
        "delta",
        "hidden",
        "intervened_action",
    ];

    pub const SAFEGUARD_KEYS: [&'static str; 14] = [
        "mode",
        "eta",
        "gamma_risk",
        "penalty_b",
        "alpha",
        "tau_target",
        "warmup_batches",
        "bootstrap",
        "record",
        "buffer_capacity",
        "critic_samples",
        "critic_minibatch",
        "critic_epochs",
        "lr",
    ];

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("train.{name} must lie in (0, 1], got {v}")))
            }
        };
        unit("gamma", self.gamma)?;
        unit("gae_lambda", self.gae_lambda)?;
        if self.minibatch_size == 0 || self.batch_steps < self.minibatch_size {
            return Err(Error::Config(format!(
                "train.batch_steps ({}) must be >= train.minibatch_size ({}) >= 1",
                self.batch_steps, self.minibatch_size
            )));
        }
        if !(self.lr > 0.0) || !(self.clip_ratio > 0.0) || !(self.max_grad_norm > 0.0) {
            return Err(Error::Config("train.lr, train.clip_ratio and train.max_grad_norm must be > 0".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("train.hidden must list positive widths".into()));
        }
        if !weighting_names().contains(&self.aggregation_mode.as_str()) {
            return Err(Error::Config(format!(
                "unknown aggregator.mode `{}` (expected one of {:?})",
                self.aggregation_mode,
                weighting_names()
            )));
        }
        self.env.validate()?;
        self.safeguard.validate()
    }

    /// Reads `train.*`, `aggregator.mode`, `env.*` and `safeguard.*` keys
    /// over the defaults. Unknown keys in those sections are rejected.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv(kv)?;
        Ok(cfg)
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        let check = |prefix: &str, allowed: &[&str]| -> Result<KvMap> {
            let sec = kv.section(prefix);
            for key in sec.keys() {
                if !allowed.contains(&key) {
                    return Err(Error::Config(format!("unknown key `{prefix}.{key}`")));
                }
            }
            Ok(sec)
        };
        let train = check("train", &Self::TRAIN_KEYS)?;
        train.read_into("gamma", &mut self.gamma)?;
        train.read_into("batch_steps", &mut self.batch_steps)?;
        train.read_into("lr", &mut self.lr)?;
        train.read_into("clip_ratio", &mut self.clip_ratio)?;
        train.read_into("gae_lambda", &mut self.gae_lambda)?;
        train.read_into("update_epochs", &mut self.update_epochs)?;
        train.read_into("minibatch_size", &mut self.minibatch_size)?;
        train.read_into("value_coef", &mut self.value_coef)?;
        train.read_into("max_grad_norm", &mut self.max_grad_norm)?;
        train.read_into("total_steps", &mut self.total_steps)?;
        train.read_into("seed", &mut self.seed)?;
        train.read_into("delta", &mut self.delta)?;
        train.read_into("intervened_action", &mut self.intervened_action)?;
        if let Some(raw) = train.get_raw("hidden") {
            self.hidden = parse_list("train.hidden", raw)?;
        }
        let agg = check("aggregator", &["mode"])?;
        agg.read_into("mode", &mut self.aggregation_mode)?;
        let env = check("env", &EnvParams::KEYS)?;
        self.env = self.env.overridden(&env)?;
        let sg = check("safeguard", &Self::SAFEGUARD_KEYS)?;
        self.safeguard.apply_kv(&sg)?;
        self.validate()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut train = KvMap::new();
        train.insert("gamma", self.gamma);
        train.insert("batch_steps", self.batch_steps);
        train.insert("lr", self.lr);
        train.insert("clip_ratio", self.clip_ratio);
        train.insert("gae_lambda", self.gae_lambda);
        train.insert("update_epochs", self.update_epochs);
        train.insert("minibatch_size", self.minibatch_size);
        train.insert("value_coef", self.value_coef);
        train.insert("max_grad_norm", self.max_grad_norm);
        train.insert("total_steps", self.total_steps);
        train.insert("seed", self.seed);
        train.insert("delta", self.delta);
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        train.insert("hidden", hidden.join(","));
        train.insert("intervened_action", self.intervened_action);
        let mut kv = KvMap::new();
        kv.extend_prefixed("train", &train);
        let mut agg = KvMap::new();
        agg.insert("mode", &self.aggregation_mode);
        kv.extend_prefixed("aggregator", &agg);
        kv.extend_prefixed("env", &self.env.to_kv());
        kv.extend_prefixed("safeguard", &self.safeguard.to_kv());
        kv
    }

    /// Whether the risk critic is trained and consulted at all.
    pub fn safeguard_active(&self) -> bool {
        self.safeguard.mode != "off"
    }
}

/// One learner transition.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEntry {
    pub state: State,
    pub action: [f64; 2],
    /// Frozen source actions at `state`, `I x D` row-major.
    pub source_actions: Vec<f64>,
    pub next_state: State,
    /// Shaped reward.
    pub reward: f64,
    /// The learner episode terminated (violation or intervention).
    pub terminal: bool,
    /// Last entry of a learner segment: terminal, truncated or batch end.
    pub segment_end: bool,
    pub log_prob: f64,
    pub intervened: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskBuffer {
    pub entries: Vec<TaskEntry>,
}

impl TaskBuffer {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// One executed transition for the risk critic. `next_action` is the action
/// executed at `next_state`, or the policy mean there after truncation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeguardEntry {
    pub state: State,
    pub action: Action,
    pub next_state: State,
    pub reward: f64,
    pub cost: f64,
    pub next_action: Action,
    pub done: bool,
}

/// Fixed-capacity ring buffer; the oldest entries are overwritten.
#[derive(Debug, Clone, PartialEq)]
pub struct SafeguardBuffer {
    capacity: usize,
    entries: Vec<SafeguardEntry>,
    head: usize,
}

impl SafeguardBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: Vec::new(),
            head: 0,
        }
    }

    pub fn push(&mut self, e: SafeguardEntry) {
        if self.entries.len() < self.capacity {
            self.entries.push(e);
        } else {
            self.entries[self.head] = e;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Entries in storage order (not insertion order once wrapped).
    pub fn entries(&self) -> &[SafeguardEntry] {
        &self.entries
    }
}

/// Physical-episode statistics for one batch.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodeStats {
    /// Raw returns of physical episodes completed in the batch.
    pub returns: Vec<f64>,
    pub violations: usize,
    pub interventions: usize,
    pub steps: usize,
    /// New learner segments started by an intervention.
    pub learner_boundaries: usize,
}

/// Rollout state carried across batches.
#[derive(Debug, Clone, PartialEq)]
pub struct Collector {
    pub state: State,
    pub t: usize,
    pub episode_return: f64,
    /// Entries of the previous step waiting for the next executed action.
    pending: Vec<SafeguardEntry>,
}

impl Collector {
    pub fn new(env: &EnvParams, rng: &mut ChaCha8Rng) -> Self {
        Self {
            state: simenv::reset(env, rng),
            t: 0,
            episode_return: 0.0,
            pending: Vec::new(),
        }
    }
}

/// Runs `cfg.batch_steps` environment steps. `rule = None` disables
/// screening (warmup or mode off). Executed transitions go to `sg_buffer`.
pub fn collect_batch(
    cfg: &TrainConfig,
    env: &EnvParams,
    agg: &Aggregator,
    rule: Option<&SafeguardRule>,
    collector: &mut Collector,
    sg_buffer: &mut SafeguardBuffer,
    rng: &mut ChaCha8Rng,
) -> Result<(TaskBuffer, EpisodeStats)> {
    let mut buf = TaskBuffer {
        entries: Vec::with_capacity(cfg.batch_steps),
    };
    let mut stats = EpisodeStats::default();
    let alpha = cfg.safeguard.alpha;
    for _ in 0..cfg.batch_steps {
        let s = collector.state;
        let prop = agg.sample(&s, rng)?;
        let a_expl = Action::from_slice(&prop.action);
        let decision = match rule {
            Some(r) => r.evaluate(&s, &a_expl),
            None => crate::safeguard::SafeguardDecision::pass(a_expl),
        };
        let a_task = decision.a_task;
        for mut p in collector.pending.drain(..) {
            p.next_action = a_task;
            sg_buffer.push(p);
        }

        let out = simenv::step(env, &s, &a_task)?;
        collector.t += 1;
        collector.episode_return += out.reward;
        stats.steps += 1;
        let cost = simenv::cost_hinge(env, &out.next_state, alpha);
        let truncated = !out.done && collector.t >= env.horizon;

        let (action, log_prob) = if decision.intervened && cfg.intervened_action == IntervenedAction::Executed {
            let a = a_task.to_array();
            (a, gaussian_log_density(&a, &prop.mean, agg.log_std()))
        } else {
            let a = [prop.action[0], prop.action[1]];
            (a, prop.log_prob)
        };
        let reward = match decision.reward_branch(out.violated) {
            crate::safeguard::RewardBranch::Penalty => cfg.safeguard.penalty_b,
            crate::safeguard::RewardBranch::Absorbing => 0.0,
            crate::safeguard::RewardBranch::PassThrough => out.reward,
        };
        let terminal = decision.intervened || out.done;
        if decision.intervened {
            stats.interventions += 1;
            if !out.done && !truncated {
                stats.learner_boundaries += 1;
            }
        }
        buf.entries.push(TaskEntry {
            state: s,
            action,
            source_actions: prop.source_actions,
            next_state: out.next_state,
            reward,
            terminal,
            segment_end: terminal || truncated,
            log_prob,
            intervened: decision.intervened,
        });

        let entry = SafeguardEntry {
            state: s,
            action: a_task,
            next_state: out.next_state,
            reward: out.reward,
            cost,
            next_action: Action::default(),
            done: out.done,
        };
        let recorded: &[Action] = match (decision.intervened, cfg.safeguard.record) {
            (false, _) | (true, Record::Executed) => &[a_task],
            (true, Record::Proposed) => &[a_expl],
            (true, Record::Both) => &[a_task, a_expl],
        };
        let truncation_action = if truncated && !out.done {
            Some(Action::from_slice(&agg.aggregate(&out.next_state)?.distribution.mean))
        } else {
            None
        };
        for &action in recorded {
            let e = SafeguardEntry { action, ..entry };
            match truncation_action {
                _ if out.done => sg_buffer.push(e),
                Some(next_action) => sg_buffer.push(SafeguardEntry { next_action, ..e }),
                None => collector.pending.push(e),
            }
        }

        if out.violated {
            stats.violations += 1;
        }
        if out.done || truncated {
            stats.returns.push(collector.episode_return);
            collector.episode_return = 0.0;
            collector.t = 0;
            collector.state = simenv::reset(env, rng);
        } else {
            collector.state = out.next_state;
        }
    }
    if let Some(last) = buf.entries.last_mut() {
        last.segment_end = true;
    }
    Ok((buf, stats))
}

/// GAE(λ) over learner segments. `next_values[t]` is only read at segment
/// ends that are not terminal. Returns unnormalized advantages and returns.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    next_values: &[f64],
    terminal: &[bool],
    segment_end: &[bool],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next_v = if terminal[t] {
            0.0
        } else if segment_end[t] {
            next_values[t]
        } else {
            values[t + 1]
        };
        if segment_end[t] {
            running = 0.0;
        }
        let delta = rewards[t] + gamma * next_v - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Zero-mean, unit-variance rescaling; a constant vector maps to zeros.
pub fn normalize(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    for x in v.iter_mut() {
        *x = (*x - mean) / (std + 1e-8);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    /// Normalized per batch.
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

fn states_matrix<'a>(states: impl Iterator<Item = &'a State>, n: usize) -> Array2<f64> {
    let mut flat = Vec::with_capacity(n * State::DIM);
    for s in states {
        flat.extend_from_slice(&s.to_array());
    }
    Array2::from_shape_vec((n, State::DIM), flat).unwrap()
}

pub fn compute_gae(buffer: &TaskBuffer, value_fn: &ValueFunction, gamma: f64, lambda: f64) -> Result<Advantages> {
    let n = buffer.len();
    if n == 0 {
        return Ok(Advantages {
            advantages: Vec::new(),
            returns: Vec::new(),
        });
    }
    let states = states_matrix(buffer.entries.iter().map(|e| &e.state), n);
    let values: Vec<f64> = value_fn.net.forward_batch(states.view())?.column(0).to_vec();
    let boot: Vec<usize> = (0..n)
        .filter(|&t| buffer.entries[t].segment_end && !buffer.entries[t].terminal)
        .collect();
    let mut next_values = vec![0.0; n];
    if !boot.is_empty() {
        let ns = states_matrix(boot.iter().map(|&t| &buffer.entries[t].next_state), boot.len());
        let out = value_fn.net.forward_batch(ns.view())?;
        for (k, &t) in boot.iter().enumerate() {
            next_values[t] = out[[k, 0]];
        }
    }
    let rewards: Vec<f64> = buffer.entries.iter().map(|e| e.reward).collect();
    let terminal: Vec<bool> = buffer.entries.iter().map(|e| e.terminal).collect();
    let ends: Vec<bool> = buffer.entries.iter().map(|e| e.segment_end).collect();
    let (mut advantages, returns) = gae(&rewards, &values, &next_values, &terminal, &ends, gamma, lambda);
    normalize(&mut advantages);
    Ok(Advantages { advantages, returns })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub last_policy_loss: f64,
    pub minibatches: usize,
}

/// Gradient of the clipped surrogate loss `-min(r A, clip(r) A)` with respect
/// to the log-probability, given `r = exp(logp - logp_old)`.
pub fn surrogate_grad(log_prob: f64, old_log_prob: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let ratio = (log_prob - old_log_prob).exp();
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip);
    let unclipped_term = ratio * advantage;
    let clipped_term = clipped * advantage;
    let loss = -unclipped_term.min(clipped_term);
    let grad = if unclipped_term <= clipped_term { -ratio * advantage } else { 0.0 };
    (loss, grad)
}

fn minibatch_dump(buffer: &TaskBuffer, idx: &[usize]) -> String {
    let mut out = String::new();
    for &i in idx.iter().take(8) {
        let e = &buffer.entries[i];
        out.push_str(&format!(
            "\n  #{i}: state={:?} action={:?} logp_old={} reward={}",
            e.state.to_array(),
            e.action,
            e.log_prob,
            e.reward
        ));
    }
    if idx.len() > 8 {
        out.push_str(&format!("\n  ... {} more", idx.len() - 8));
    }
    out
}

/// One minibatch step on the combined policy/value loss. Returns
/// `(policy_loss, value_loss)`.
#[allow(clippy::too_many_arguments)]
pub fn minibatch_step(
    cfg: &TrainConfig,
    agg: &mut Aggregator,
    value_fn: &mut ValueFunction,
    optimizer: &mut Adam,
    buffer: &TaskBuffer,
    adv: &Advantages,
    idx: &[usize],
) -> Result<(f64, f64)> {
    let n = idx.len();
    let d = agg.action_dim();
    let src_w = agg.n_sources() * d;
    let states = states_matrix(idx.iter().map(|&i| &buffer.entries[i].state), n);
    let mut actions = Array2::<f64>::zeros((n, d));
    let mut sources = Array2::<f64>::zeros((n, src_w));
    for (k, &i) in idx.iter().enumerate() {
        let e = &buffer.entries[i];
        for j in 0..d {
            actions[[k, j]] = e.action[j];
        }
        for j in 0..src_w {
            sources[[k, j]] = e.source_actions[j];
        }
    }
    let batch = PolicyBatch {
        states,
        actions,
        source_actions: sources,
    };
    let mut policy_loss = 0.0;
    let (_, pgrad) = agg.log_probs_and_grads(&batch, |lps| {
        lps.iter()
            .zip(idx)
            .map(|(lp, &i)| {
                let (l, g) = surrogate_grad(*lp, buffer.entries[i].log_prob, adv.advantages[i], cfg.clip_ratio);
                policy_loss += l / n as f64;
                g / n as f64
            })
            .collect()
    })?;

    let cache = value_fn.net.forward_cached(batch.states.view())?;
    let mut upstream = Array2::<f64>::zeros((n, 1));
    let mut value_loss = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        let err = cache.output()[[k, 0]] - adv.returns[i];
        value_loss += err * err / n as f64;
        upstream[[k, 0]] = cfg.value_coef * 2.0 * err / n as f64;
    }
    let total = policy_loss + cfg.value_coef * value_loss;
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (policy {policy_loss}, value {value_loss}); minibatch:{}",
            minibatch_dump(buffer, idx)
        )));
    }
    let (vgrad, _) = value_fn.net.backward(&cache, upstream.view())?;

    let mut grad = pgrad.flatten();
    grad.extend_from_slice(&vgrad);
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient; minibatch:{}",
            minibatch_dump(buffer, idx)
        )));
    }
    clip_global_norm(&mut grad, cfg.max_grad_norm);
    let mut params = agg.flat_params();
    let n_agg = params.len();
    params.extend_from_slice(value_fn.net.params());
    optimizer.step(&mut params, &grad)?;
    agg.set_flat_params(&params[..n_agg])?;
    value_fn.net.params_mut().copy_from_slice(&params[n_agg..]);
    Ok((policy_loss, value_loss))
}

/// Shuffled minibatch passes over the task buffer.
pub fn optimize_policy(
    cfg: &TrainConfig,
    agg: &mut Aggregator,
    value_fn: &mut ValueFunction,
    optimizer: &mut Adam,
    buffer: &TaskBuffer,
    adv: &Advantages,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateStats> {
    use rand::seq::SliceRandom;
    let mut stats = UpdateStats::default();
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    for _ in 0..cfg.update_epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.minibatch_size) {
            let (pl, vl) = minibatch_step(cfg, agg, value_fn, optimizer, buffer, adv, chunk)?;
            stats.policy_loss += pl;
            stats.value_loss += vl;
            stats.last_policy_loss = pl;
            stats.minibatches += 1;
        }
    }
    if stats.minibatches > 0 {
        stats.policy_loss /= stats.minibatches as f64;
        stats.value_loss /= stats.minibatches as f64;
    }
    Ok(stats)
}

/// The nine actions `{-a_max, 0, a_max}^2`.
pub fn action_grid(a_max: f64) -> [Action; 9] {
    let v = [-a_max, 0.0, a_max];
    let mut out = [Action::default(); 9];
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = Action::new(v[k / 3], v[k % 3]);
    }
    out
}

/// Regression samples for the risk critic from buffer entries.
pub fn risk_samples(rule: &SafeguardRule, entries: &[&SafeguardEntry]) -> Vec<RiskSample<[f64; 6]>> {
    entries
        .iter()
        .map(|e| {
            let next_inputs = match rule.cfg.bootstrap {
                Bootstrap::Executed => vec![rule.input(&e.next_state, &e.next_action)],
                Bootstrap::Backup => vec![rule.input(&e.next_state, &rule.backup.action(&e.next_state))],
                Bootstrap::Max => action_grid(rule.a_max())
                    .iter()
                    .map(|a| rule.input(&e.next_state, a))
                    .collect(),
            };
            RiskSample {
                input: rule.input(&e.state, &e.action),
                cost: e.cost,
                done: e.done,
                next_inputs,
            }
        })
        .collect()
}

/// One metrics row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchReport {
    pub step: usize,
    pub batch: usize,
    pub mean_episodic_reward_raw: f64,
    pub cumulative_violations: usize,
    pub interventions: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub risk_loss: f64,
    pub seed: u64,
    pub episodes: usize,
    /// Violations per completed episode in this batch.
    pub violation_rate: f64,
}

pub const METRICS_HEADER: &str =
    "step,batch,mean_episodic_reward_raw,cumulative_violations,interventions,policy_loss,value_loss,risk_loss,seed";

pub fn metrics_csv(rows: &[BatchReport]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.step,
            r.batch,
            r.mean_episodic_reward_raw,
            r.cumulative_violations,
            r.interventions,
            r.policy_loss,
            r.value_loss,
            r.risk_loss,
            r.seed
        ));
    }
    out
}

pub fn write_metrics_csv(rows: &[BatchReport], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(metrics_csv(rows).as_bytes())?;
    f.flush()?;
    Ok(())
}

/// A seeded stream derived from the master seed.
pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

pub const STREAM_INIT: u64 = 0;
pub const STREAM_ROLLOUT: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_CRITIC: u64 = 3;

/// Owns every piece of learner state for one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub aggregator: Aggregator,
    pub value_fn: ValueFunction,
    pub rule: Option<SafeguardRule>,
    pub optimizer: Adam,
    pub collector: Collector,
    pub sg_buffer: SafeguardBuffer,
    pub rollout_rng: ChaCha8Rng,
    pub shuffle_rng: ChaCha8Rng,
    pub critic_rng: ChaCha8Rng,
    pub steps: usize,
    pub batches: usize,
    pub cumulative_violations: usize,
    pub episode_returns: Vec<f64>,
    last_reward: f64,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, sources: Vec<Arc<Policy>>) -> Result<Self> {
        cfg.validate()?;
        if cfg.aggregation_mode != "none" && sources.is_empty() {
            return Err(Error::Config(format!(
                "aggregator.mode `{}` needs at least one source policy",
                cfg.aggregation_mode
            )));
        }
        let mut init = stream(cfg.seed, STREAM_INIT);
        let aggregator = Aggregator::new(&cfg.aggregation_mode, sources, &cfg.hidden, &mut init)?;
        let value_fn = ValueFunction::new(&cfg.hidden, &mut init)?;
        let rule = if cfg.safeguard_active() {
            Some(SafeguardRule::new(&cfg.safeguard, &cfg.env, &cfg.hidden, cfg.max_grad_norm, &mut init)?)
        } else {
            None
        };
        let optimizer = Adam::new(aggregator.n_trainable() + value_fn.net.param_count(), cfg.lr);
        let mut rollout_rng = stream(cfg.seed, STREAM_ROLLOUT);
        let collector = Collector::new(&cfg.env, &mut rollout_rng);
        Ok(Self {
            cfg: cfg.clone(),
            aggregator,
            value_fn,
            rule,
            optimizer,
            collector,
            sg_buffer: SafeguardBuffer::new(cfg.safeguard.buffer_capacity),
            rollout_rng,
            shuffle_rng: stream(cfg.seed, STREAM_SHUFFLE),
            critic_rng: stream(cfg.seed, STREAM_CRITIC),
            steps: 0,
            batches: 0,
            cumulative_violations: 0,
            episode_returns: Vec::new(),
            last_reward: f64::NAN,
        })
    }

    pub fn finished(&self) -> bool {
        self.steps >= self.cfg.total_steps
    }

    /// Safeguard used for screening in the current batch, if any.
    pub fn gate(&self) -> Option<&SafeguardRule> {
        if self.batches < self.cfg.safeguard.warmup_batches {
            None
        } else {
            self.rule.as_ref()
        }
    }

    /// One pass over up to `critic_samples` buffer entries drawn without
    /// replacement, in minibatches.
    pub fn update_safeguard(&mut self) -> Result<f64> {
        let Some(rule) = self.rule.as_mut() else {
            return Ok(0.0);
        };
        let n = self.cfg.safeguard.critic_samples.min(self.sg_buffer.len());
        if n == 0 {
            return Ok(0.0);
        }
        let picks = rand::seq::index::sample(&mut self.critic_rng, self.sg_buffer.len(), n).into_vec();
        let mut total = 0.0;
        let mut count = 0;
        let passes = picks.chunks(self.cfg.safeguard.critic_minibatch).cycle();
        let n_chunks = n.div_ceil(self.cfg.safeguard.critic_minibatch) * self.cfg.safeguard.critic_epochs;
        for chunk in passes.take(n_chunks) {
            let entries: Vec<&SafeguardEntry> = chunk.iter().map(|&i| &self.sg_buffer.entries()[i]).collect();
            let samples = risk_samples(rule, &entries);
            total += update_risk_critic(
                &mut rule.critic,
                &samples,
                rule.cfg.gamma_risk,
                rule.cfg.tau_target,
            )?;
            count += 1;
        }
        Ok(total / count as f64)
    }

    /// Collect, optimize, refine the safeguard; returns the metrics row.
    pub fn train_batch(&mut self) -> Result<BatchReport> {
        let env = self.cfg.env;
        let gate = self.gate().cloned();
        let (buffer, stats) = collect_batch(
            &self.cfg,
            &env,
            &self.aggregator,
            gate.as_ref(),
            &mut self.collector,
            &mut self.sg_buffer,
            &mut self.rollout_rng,
        )?;
        let adv = compute_gae(&buffer, &self.value_fn, self.cfg.gamma, self.cfg.gae_lambda)?;
        let upd = optimize_policy(
            &self.cfg,
            &mut self.aggregator,
            &mut self.value_fn,
            &mut self.optimizer,
            &buffer,
            &adv,
            &mut self.shuffle_rng,
        )?;
        let risk_loss = self.update_safeguard()?;

        self.steps += stats.steps;
        self.batches += 1;
        self.cumulative_violations += stats.violations;
        if !stats.returns.is_empty() {
            self.last_reward = stats.returns.iter().sum::<f64>() / stats.returns.len() as f64;
        }
        self.episode_returns.extend_from_slice(&stats.returns);
        Ok(BatchReport {
            step: self.steps,
            batch: self.batches,
            mean_episodic_reward_raw: self.last_reward,
            cumulative_violations: self.cumulative_violations,
            interventions: stats.interventions,
            policy_loss: upd.policy_loss,
            value_loss: upd.value_loss,
            risk_loss,
            seed: self.cfg.seed,
            episodes: stats.returns.len(),
            violation_rate: if stats.returns.is_empty() {
                0.0
            } else {
                stats.violations as f64 / stats.returns.len() as f64
            },
        })
    }

    pub fn checkpoint(&self) -> AgentCheckpoint {
        AgentCheckpoint::new(&self.aggregator, &self.value_fn)
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub aggregator: Aggregator,
    pub value_fn: ValueFunction,
    pub rule: Option<SafeguardRule>,
    pub metrics: Vec<BatchReport>,
    pub episode_returns: Vec<f64>,
    pub total_steps: usize,
}

impl RunOutput {
    /// Mean raw return of the last 100 completed episodes.
    pub fn final_episodic_reward(&self) -> f64 {
        let n = self.episode_returns.len().min(100);
        if n == 0 {
            return f64::NAN;
        }
        self.episode_returns[self.episode_returns.len() - n..].iter().sum::<f64>() / n as f64
    }

    pub fn metrics_csv(&self) -> String {
        metrics_csv(&self.metrics)
    }
}

/// Trains until the budget is consumed. `observer` sees every batch.
pub fn run_with<F>(cfg: &TrainConfig, sources: Vec<Arc<Policy>>, mut observer: F) -> Result<RunOutput>
where
    F: FnMut(&BatchReport, &Trainer) -> Result<()>,
{
    let mut trainer = Trainer::new(cfg, sources)?;
    let mut metrics = Vec::new();
    while !trainer.finished() {
        let row = trainer.train_batch()?;
        observer(&row, &trainer)?;
        metrics.push(row);
    }
    Ok(RunOutput {
        aggregator: trainer.aggregator,
        value_fn: trainer.value_fn,
        rule: trainer.rule,
        metrics,
        episode_returns: trainer.episode_returns,
        total_steps: trainer.steps,
    })
}

pub fn run(cfg: &TrainConfig, sources: Vec<Arc<Policy>>) -> Result<RunOutput> {
    run_with(cfg, sources, |_, _| Ok(()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SourceRecord {
    mean: NetworkCheckpoint,
    log_std: Vec<f64>,
}

/// Self-contained trained agent: weighting, auxiliary network, log-std,
/// value function and embedded copies of the frozen sources.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AgentCheckpoint {
    format: String,
    version: u32,
    mode: String,
    weighting: NetworkCheckpoint,
    aux: NetworkCheckpoint,
    log_std: Vec<f64>,
    value: NetworkCheckpoint,
    sources: Vec<SourceRecord>,
}

const AGENT_FORMAT: &str = "aasc-agent";

impl AgentCheckpoint {
    pub fn new(agg: &Aggregator, value_fn: &ValueFunction) -> Self {
        Self {
            format: AGENT_FORMAT.into(),
            version: 1,
            mode: agg.mode().into(),
            weighting: NetworkCheckpoint::from(&agg.weighting().to_network()),
            aux: NetworkCheckpoint::from(agg.aux()),
            log_std: agg.log_std().to_vec(),
            value: NetworkCheckpoint::from(&value_fn.net),
            sources: agg
                .sources()
                .iter()
                .map(|p| SourceRecord {
                    mean: NetworkCheckpoint::from(&p.head().mean),
                    log_std: p.head().log_std.clone(),
                })
                .collect(),
        }
    }

    pub fn restore(&self) -> Result<(Aggregator, ValueFunction)> {
        if self.format != AGENT_FORMAT || self.version != 1 {
            return Err(Error::Checkpoint(format!(
                "unsupported agent checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let sources: Vec<Arc<Policy>> = self
            .sources
            .iter()
            .map(|r| {
                Ok(Arc::new(Policy::new(GaussianPolicyHead {
                    mean: Network::try_from(r.mean.clone())?,
                    log_std: r.log_std.clone(),
                })))
            })
            .collect::<Result<_>>()?;
        let aux = Network::try_from(self.aux.clone())?;
        let weighting_net = Network::try_from(self.weighting.clone())?;
        let hidden: Vec<usize> = aux.layer_sizes()[1..aux.layer_sizes().len() - 1].to_vec();
        let spec = WeightingSpec {
            rows: sources.len() + 1,
            cols: self.log_std.len(),
            state_dim: State::DIM,
            hidden,
        };
        let mut weighting = build_weighting(&self.mode, &spec, &mut ChaCha8Rng::seed_from_u64(0))?;
        weighting.load_network(weighting_net)?;
        let agg = Aggregator::from_parts(sources, aux, weighting, self.log_std.clone())?;
        let value_fn = ValueFunction {
            net: Network::try_from(self.value.clone())?,
        };
        Ok((agg, value_fn))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalStats {
    pub episodes: usize,
    pub mean_return: f64,
    pub violations: usize,
    pub interventions: usize,
}

/// Rolls out full episodes with the aggregated mean (`deterministic`) or
/// sampled actions, optionally screened by `rule`.
pub fn evaluate(
    agg: &Aggregator,
    rule: Option<&SafeguardRule>,
    env: &EnvParams,
    episodes: usize,
    deterministic: bool,
    seed: u64,
) -> Result<EvalStats> {
    let mut rng = stream(seed, STREAM_ROLLOUT);
    let mut total = 0.0;
    let mut violations = 0;
    let mut interventions = 0;
    for _ in 0..episodes {
        let mut s = simenv::reset(env, &mut rng);
        for _ in 0..env.horizon {
            let a = if deterministic {
                Action::from_slice(&agg.aggregate(&s)?.distribution.mean)
            } else {
                Action::from_slice(&agg.sample(&s, &mut rng)?.action)
            };
            let a = match rule {
                Some(r) => {
                    let d = r.evaluate(&s, &a);
                    interventions += d.intervened as usize;
                    d.a_task
                }
                None => a,
            };
            let out = simenv::step(env, &s, &a)?;
            total += out.reward;
            if out.violated {
                violations += 1;
                break;
            }
            s = out.next_state;
        }
    }
    Ok(EvalStats {
        episodes,
        mean_return: if episodes == 0 { f64::NAN } else { total / episodes as f64 },
        violations,
        interventions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_hand_evaluated_returns() {
        let (adv, ret) = gae(
            &[1.0, 1.0, 1.0],
            &[0.0; 3],
            &[0.0; 3],
            &[false, false, true],
            &[false, false, true],
            0.99,
            1.0,
        );
        let expect = [2.9701, 1.99, 1.0];
        for k in 0..3 {
            assert!((ret[k] - expect[k]).abs() < 1e-12);
            assert!((adv[k] - expect[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_lambda_zero_is_one_step_td() {
        let r = [0.5, -1.0, 2.0, 0.3];
        let v = [0.1, 0.2, -0.3, 0.4];
        let nv = [0.0, 0.0, 0.0, 0.7];
        let (adv, _) = gae(&r, &v, &nv, &[false; 4], &[false, false, false, true], 0.9, 0.0);
        for t in 0..3 {
            assert!((adv[t] - (r[t] + 0.9 * v[t + 1] - v[t])).abs() < 1e-12);
        }
        assert!((adv[3] - (0.3 + 0.9 * 0.7 - 0.4)).abs() < 1e-12);
    }

    #[test]
    fn gae_segments_do_not_leak() {
        let (adv, _) = gae(
            &[0.0, 5.0],
            &[0.0, 0.0],
            &[0.0, 0.0],
            &[true, false],
            &[true, true],
            0.99,
            0.95,
        );
        assert_eq!(adv[0], 0.0);
        assert_eq!(adv[1], 5.0);
    }

    #[test]
    fn zero_rewards_zero_values_zero_advantages() {
        let (mut adv, _) = gae(&[0.0; 5], &[0.0; 5], &[0.0; 5], &[false; 5], &[false, false, false, false, true], 0.99, 0.95);
        assert!(adv.iter().all(|a| *a == 0.0));
        normalize(&mut adv);
        assert!(adv.iter().all(|a| *a == 0.0));
    }

    #[test]
    fn clipped_surrogate_has_no_gradient_outside_the_band() {
        let (_, g) = surrogate_grad(0.5, 0.0, 1.0, 0.2);
        assert_eq!(g, 0.0);
        let (_, g) = surrogate_grad(-0.5, 0.0, -1.0, 0.2);
        assert_eq!(g, 0.0);
        let (l, g) = surrogate_grad(0.0, 0.0, 2.0, 0.2);
        assert_eq!((l, g), (-2.0, -2.0));
        let (_, g) = surrogate_grad(0.5, 0.0, -1.0, 0.2);
        assert!((g - 0.5f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn ring_buffer_overwrites_oldest() {
        let mut b = SafeguardBuffer::new(2);
        let mut e = SafeguardEntry {
            state: State::default(),
            action: Action::default(),
            next_state: State::default(),
            reward: 0.0,
            cost: 0.0,
            next_action: Action::default(),
            done: false,
        };
        for k in 0..3 {
            e.reward = k as f64;
            b.push(e);
        }
        let r: Vec<f64> = b.entries().iter().map(|e| e.reward).collect();
        assert_eq!(r, vec![2.0, 1.0]);
    }

    #[test]
    fn config_round_trips_through_kv() {
        let mut cfg = TrainConfig::default();
        cfg.safeguard.eta = 0.12;
        cfg.env.m = 1.25;
        cfg.hidden = vec![32, 16];
        cfg.intervened_action = IntervenedAction::Executed;
        let back = TrainConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        let mut bad = KvMap::new();
        bad.insert("safeguard.etaa", 0.1);
        assert!(TrainConfig::from_kv(&bad).is_err());
    }

    #[test]
    fn action_grid_covers_corners() {
        let g = action_grid(1.0);
        assert!(g.contains(&Action::new(-1.0, 1.0)));
        assert!(g.contains(&Action::new(0.0, 0.0)));
    }
}
