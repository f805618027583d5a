//! Advantage-based safeguard.
//!
//! A risk critic estimates the discounted hinge cost `Q̄(s, a)` in `[0, 1]`.
//! A proposed action is overridden by the decelerating backup controller `μ`
//! when the intervention criterion reaches the threshold `η`. The default
//! criterion is the advantage `Q̄(s, a) − Q̄(s, μ(s))`; criteria are selected
//! by name from [`INTERVENTION_REGISTRY`].

use std::fmt;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::nn::{clip_global_norm, Adam, Network, OutputHead};
use crate::simenv::{Action, EnvParams, State};

/// Decelerates each velocity component towards zero with force up to `a_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackupPolicy {
    pub m: f64,
    pub dt: f64,
    pub a_max: f64,
}

impl BackupPolicy {
    pub fn new(params: &EnvParams) -> Self {
        Self {
            m: params.m,
            dt: params.dt,
            a_max: params.a_max,
        }
    }

    /// Force that zeroes the velocity in one step when feasible, maximal
    /// deceleration otherwise.
    pub fn action(&self, s: &State) -> Action {
        let brake = |v: f64| (-v * self.m / self.dt).clamp(-self.a_max, self.a_max);
        Action::new(brake(s.vx), brake(s.vy))
    }
}

/// Critic input: the state followed by the action clipped to the feasible box.
pub fn critic_input(s: &State, a: &Action, a_max: f64) -> [f64; 6] {
    let a = a.clipped(a_max);
    [s.x, s.y, s.vx, s.vy, a.ax, a.ay]
}

/// One regression sample for the risk critic. The bootstrap uses the largest
/// target value over `next_inputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskSample<X> {
    pub input: X,
    pub cost: f64,
    pub done: bool,
    pub next_inputs: Vec<X>,
}

/// A learnable estimate of `Q̄` with a slowly tracking target copy.
pub trait RiskEstimator {
    type Input;

    /// Online estimate, clamped to `[0, 1]`.
    fn online(&self, x: &Self::Input) -> f64;

    /// Target-copy estimate, clamped to `[0, 1]`.
    fn target(&self, x: &Self::Input) -> f64;

    fn target_batch(&self, xs: &[&Self::Input]) -> Vec<f64> {
        xs.iter().map(|x| self.target(x)).collect()
    }

    /// One regression step of the online estimate towards `targets`.
    /// Returns the mean squared error before the step.
    fn fit(&mut self, inputs: &[&Self::Input], targets: &[f64]) -> Result<f64>;

    /// `target <- (1 - tau) * target + tau * online`.
    fn polyak(&mut self, tau: f64);
}

/// Regresses the critic towards `clamp(c + (1 - done) γ Q̄_target(s', a'), 0, 1)`
/// and then moves the target copy. An empty batch is a no-op.
pub fn update_risk_critic<E: RiskEstimator>(
    critic: &mut E,
    batch: &[RiskSample<E::Input>],
    gamma_risk: f64,
    tau: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let next: Vec<&E::Input> = batch.iter().flat_map(|s| s.next_inputs.iter()).collect();
    let next_vals = critic.target_batch(&next);
    let mut targets = Vec::with_capacity(batch.len());
    let mut cursor = 0;
    for sample in batch {
        let k = sample.next_inputs.len();
        let boot = next_vals[cursor..cursor + k]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        cursor += k;
        let future = if sample.done || k == 0 { 0.0 } else { gamma_risk * boot };
        targets.push((sample.cost + future).clamp(0.0, 1.0));
    }
    let inputs: Vec<&E::Input> = batch.iter().map(|s| &s.input).collect();
    let loss = critic.fit(&inputs, &targets)?;
    critic.polyak(tau);
    Ok(loss)
}

/// Neural risk critic over `(state, action)`.
#[derive(Debug, Clone)]
pub struct NetworkCritic {
    online: Network,
    target: Network,
    optimizer: Adam,
    max_grad_norm: f64,
}

impl NetworkCritic {
    pub fn new(hidden: &[usize], lr: f64, max_grad_norm: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut sizes = vec![6];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let online = Network::new(&sizes, OutputHead::Linear, rng)?;
        Ok(Self::from_network(online, lr, max_grad_norm))
    }

    pub fn from_network(online: Network, lr: f64, max_grad_norm: f64) -> Self {
        Self {
            target: online.clone(),
            optimizer: Adam::new(online.param_count(), lr),
            online,
            max_grad_norm,
        }
    }

    pub fn network(&self) -> &Network {
        &self.online
    }

    pub fn target_network(&self) -> &Network {
        &self.target
    }
}

impl RiskEstimator for NetworkCritic {
    type Input = [f64; 6];

    fn online(&self, x: &[f64; 6]) -> f64 {
        self.online.forward(x).expect("critic input width")[0].clamp(0.0, 1.0)
    }

    fn target(&self, x: &[f64; 6]) -> f64 {
        self.target.forward(x).expect("critic input width")[0].clamp(0.0, 1.0)
    }

    fn target_batch(&self, xs: &[&[f64; 6]]) -> Vec<f64> {
        if xs.is_empty() {
            return Vec::new();
        }
        let flat: Vec<f64> = xs.iter().flat_map(|x| x.iter().copied()).collect();
        let batch = Array2::from_shape_vec((xs.len(), 6), flat).unwrap();
        let out = self.target.forward_batch(batch.view()).expect("critic input width");
        out.column(0).iter().map(|v| v.clamp(0.0, 1.0)).collect()
    }

    fn fit(&mut self, inputs: &[&[f64; 6]], targets: &[f64]) -> Result<f64> {
        let n = inputs.len();
        let flat: Vec<f64> = inputs.iter().flat_map(|x| x.iter().copied()).collect();
        let batch = Array2::from_shape_vec((n, 6), flat).unwrap();
        let cache = self.online.forward_cached(batch.view())?;
        let pred = cache.output().column(0).to_owned();
        let mut loss = 0.0;
        let mut upstream = Array2::<f64>::zeros((n, 1));
        for k in 0..n {
            let err = pred[k] - targets[k];
            loss += err * err;
            upstream[[k, 0]] = 2.0 * err / n as f64;
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("risk critic loss is {loss}")));
        }
        let (mut grad, _) = self.online.backward(&cache, upstream.view())?;
        clip_global_norm(&mut grad, self.max_grad_norm);
        self.optimizer.step(self.online.params_mut(), &grad)?;
        Ok(loss)
    }

    fn polyak(&mut self, tau: f64) {
        for (t, o) in self.target.params_mut().iter_mut().zip(self.online.params()) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }
}

/// Lookup-table risk critic over `(state index, action index)`; `fit`
/// assigns targets exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularCritic {
    n_actions: usize,
    online: Vec<f64>,
    target: Vec<f64>,
}

impl TabularCritic {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_actions,
            online: vec![0.0; n_states * n_actions],
            target: vec![0.0; n_states * n_actions],
        }
    }

    pub fn table(&self) -> &[f64] {
        &self.online
    }

    fn index(&self, x: &(usize, usize)) -> usize {
        x.0 * self.n_actions + x.1
    }
}

impl RiskEstimator for TabularCritic {
    type Input = (usize, usize);

    fn online(&self, x: &(usize, usize)) -> f64 {
        self.online[self.index(x)].clamp(0.0, 1.0)
    }

    fn target(&self, x: &(usize, usize)) -> f64 {
        self.target[self.index(x)].clamp(0.0, 1.0)
    }

    fn fit(&mut self, inputs: &[&(usize, usize)], targets: &[f64]) -> Result<f64> {
        let mut loss = 0.0;
        for (x, y) in inputs.iter().zip(targets) {
            let i = self.index(x);
            loss += (self.online[i] - y).powi(2);
            self.online[i] = *y;
        }
        Ok(loss / inputs.len().max(1) as f64)
    }

    fn polyak(&mut self, tau: f64) {
        for (t, o) in self.target.iter_mut().zip(&self.online) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }
}

/// Decides whether a proposal is overridden.
pub trait InterventionCriterion: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    /// Whether the criterion reads `Q̄(s, μ(s))`.
    fn needs_backup_value(&self) -> bool;

    /// Score compared against `η`; `None` means the criterion never fires.
    fn score(&self, q_proposed: f64, q_backup: f64) -> Option<f64>;

    fn box_clone(&self) -> Box<dyn InterventionCriterion>;
}

impl Clone for Box<dyn InterventionCriterion> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// Fires when `Q̄(s, a) − Q̄(s, μ(s)) >= η`.
#[derive(Debug, Clone, Copy)]
pub struct AdvantageCriterion;

impl InterventionCriterion for AdvantageCriterion {
    fn name(&self) -> &'static str {
        "advantage"
    }
    fn needs_backup_value(&self) -> bool {
        true
    }
    fn score(&self, q_proposed: f64, q_backup: f64) -> Option<f64> {
        Some(q_proposed - q_backup)
    }
    fn box_clone(&self) -> Box<dyn InterventionCriterion> {
        Box::new(*self)
    }
}

/// Fires when `Q̄(s, a) >= η`, the recovery-style rule.
#[derive(Debug, Clone, Copy)]
pub struct QThresholdCriterion;

impl InterventionCriterion for QThresholdCriterion {
    fn name(&self) -> &'static str {
        "q_threshold"
    }
    fn needs_backup_value(&self) -> bool {
        false
    }
    fn score(&self, q_proposed: f64, _q_backup: f64) -> Option<f64> {
        Some(q_proposed)
    }
    fn box_clone(&self) -> Box<dyn InterventionCriterion> {
        Box::new(*self)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NeverIntervene;

impl InterventionCriterion for NeverIntervene {
    fn name(&self) -> &'static str {
        "off"
    }
    fn needs_backup_value(&self) -> bool {
        false
    }
    fn score(&self, _q_proposed: f64, _q_backup: f64) -> Option<f64> {
        None
    }
    fn box_clone(&self) -> Box<dyn InterventionCriterion> {
        Box::new(*self)
    }
}

pub type CriterionBuilder = fn() -> Box<dyn InterventionCriterion>;

/// Intervention criteria selectable by name.
pub const INTERVENTION_REGISTRY: &[(&str, CriterionBuilder)] = &[
    ("advantage", || Box::new(AdvantageCriterion)),
    ("q_threshold", || Box::new(QThresholdCriterion)),
    ("off", || Box::new(NeverIntervene)),
];

pub fn criterion_names() -> Vec<&'static str> {
    INTERVENTION_REGISTRY.iter().map(|(n, _)| *n).collect()
}

pub fn build_criterion(name: &str) -> Result<Box<dyn InterventionCriterion>> {
    INTERVENTION_REGISTRY
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, b)| b())
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown safeguard mode `{name}` (expected one of {:?})",
                criterion_names()
            ))
        })
}

/// Which action the risk critic bootstraps from at the next state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bootstrap {
    /// The action actually executed there.
    Executed,
    /// The backup action.
    Backup,
    /// The riskiest of the nine corner/centre actions `{-a_max, 0, a_max}^2`.
    Max,
}

impl std::str::FromStr for Bootstrap {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "executed" => Ok(Bootstrap::Executed),
            "backup" => Ok(Bootstrap::Backup),
            "max" => Ok(Bootstrap::Max),
            other => Err(format!("expected executed|backup|max, got `{other}`")),
        }
    }
}

impl fmt::Display for Bootstrap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Bootstrap::Executed => "executed",
            Bootstrap::Backup => "backup",
            Bootstrap::Max => "max",
        })
    }
}

/// Which `(s, a)` pairs of an overridden step enter the critic's buffer.
/// The next state is always the one the executed backup action reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Record {
    /// Only the executed backup action.
    Executed,
    /// Only the rejected proposal.
    Proposed,
    Both,
}

impl std::str::FromStr for Record {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "executed" => Ok(Record::Executed),
            "proposed" => Ok(Record::Proposed),
            "both" => Ok(Record::Both),
            other => Err(format!("expected executed|proposed|both, got `{other}`")),
        }
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Record::Executed => "executed",
            Record::Proposed => "proposed",
            Record::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SafeguardConfig {
    pub mode: String,
    pub eta: f64,
    pub gamma_risk: f64,
    pub penalty_b: f64,
    pub alpha: f64,
    pub tau_target: f64,
    pub warmup_batches: usize,
    pub bootstrap: Bootstrap,
    pub record: Record,
    pub buffer_capacity: usize,
    /// Transitions drawn from the buffer per outer iteration.
    pub critic_samples: usize,
    /// Samples per critic regression step; each step is followed by a
    /// target update.
    pub critic_minibatch: usize,
    /// Passes over the drawn transitions per outer iteration.
    pub critic_epochs: usize,
    pub lr: f64,
}

impl Default for SafeguardConfig {
    fn default() -> Self {
        Self {
            mode: "advantage".into(),
            eta: 0.08,
            gamma_risk: 0.8,
            penalty_b: -2.0,
            alpha: 0.5,
            tau_target: 1e-3,
            warmup_batches: 5,
            bootstrap: Bootstrap::Executed,
            record: Record::Executed,
            buffer_capacity: 100_000,
            critic_samples: 4000,
            critic_minibatch: 128,
            critic_epochs: 1,
            lr: 1e-3,
        }
    }
}

impl SafeguardConfig {
    pub fn validate(&self) -> Result<()> {
        build_criterion(&self.mode)?;
        if self.eta.is_nan() {
            return Err(Error::Config("safeguard.eta is NaN".into()));
        }
        if !(self.penalty_b <= 0.0) {
            return Err(Error::Config(format!(
                "safeguard.penalty_b must be <= 0, got {}",
                self.penalty_b
            )));
        }
        if !(self.gamma_risk > 0.0 && self.gamma_risk < 1.0) {
            return Err(Error::Config(format!(
                "safeguard.gamma_risk must lie in (0, 1), got {}",
                self.gamma_risk
            )));
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::Config("safeguard.alpha must be >= 0".into()));
        }
        if !(self.tau_target > 0.0 && self.tau_target <= 1.0) {
            return Err(Error::Config("safeguard.tau_target must lie in (0, 1]".into()));
        }
        if self.critic_minibatch == 0 {
            return Err(Error::Config("safeguard.critic_minibatch must be >= 1".into()));
        }
        if self.buffer_capacity == 0 {
            return Err(Error::Config("safeguard.buffer_capacity must be >= 1".into()));
        }
        Ok(())
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.read_into("mode", &mut self.mode)?;
        kv.read_into("eta", &mut self.eta)?;
        kv.read_into("gamma_risk", &mut self.gamma_risk)?;
        kv.read_into("penalty_b", &mut self.penalty_b)?;
        kv.read_into("alpha", &mut self.alpha)?;
        kv.read_into("tau_target", &mut self.tau_target)?;
        kv.read_into("warmup_batches", &mut self.warmup_batches)?;
        kv.read_into("bootstrap", &mut self.bootstrap)?;
        kv.read_into("record", &mut self.record)?;
        kv.read_into("buffer_capacity", &mut self.buffer_capacity)?;
        kv.read_into("critic_samples", &mut self.critic_samples)?;
        kv.read_into("critic_minibatch", &mut self.critic_minibatch)?;
        kv.read_into("critic_epochs", &mut self.critic_epochs)?;
        kv.read_into("lr", &mut self.lr)?;
        self.validate()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("mode", &self.mode);
        kv.insert("eta", self.eta);
        kv.insert("gamma_risk", self.gamma_risk);
        kv.insert("penalty_b", self.penalty_b);
        kv.insert("alpha", self.alpha);
        kv.insert("tau_target", self.tau_target);
        kv.insert("warmup_batches", self.warmup_batches);
        kv.insert("bootstrap", self.bootstrap);
        kv.insert("record", self.record);
        kv.insert("buffer_capacity", self.buffer_capacity);
        kv.insert("critic_samples", self.critic_samples);
        kv.insert("critic_minibatch", self.critic_minibatch);
        kv.insert("critic_epochs", self.critic_epochs);
        kv.insert("lr", self.lr);
        kv
    }
}

/// Branch of the shaped reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardBranch {
    /// The proposal was overridden: penalty `b`.
    Penalty,
    /// The transition ended in the unsafe absorbing set: zero.
    Absorbing,
    PassThrough,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SafeguardDecision {
    pub intervened: bool,
    pub a_task: Action,
    /// Criterion score; NaN when the critic was not consulted.
    pub score: f64,
}

impl SafeguardDecision {
    pub fn pass(a: Action) -> Self {
        Self {
            intervened: false,
            a_task: a,
            score: f64::NAN,
        }
    }

    pub fn reward_branch(&self, absorbing: bool) -> RewardBranch {
        if self.intervened {
            RewardBranch::Penalty
        } else if absorbing {
            RewardBranch::Absorbing
        } else {
            RewardBranch::PassThrough
        }
    }
}

/// The safeguard: risk critic, backup controller, criterion and threshold.
#[derive(Debug, Clone)]
pub struct SafeguardRule {
    pub critic: NetworkCritic,
    pub backup: BackupPolicy,
    pub criterion: Box<dyn InterventionCriterion>,
    pub cfg: SafeguardConfig,
    a_max: f64,
    scale: [f64; 6],
}

/// Per-feature divisors that bring critic inputs to roughly unit range.
pub fn input_scale(env: &EnvParams) -> [f64; 6] {
    [env.x_max, env.y_max, env.v_max, env.v_max, env.a_max, env.a_max]
}

impl SafeguardRule {
    pub fn new(cfg: &SafeguardConfig, env: &EnvParams, hidden: &[usize], max_grad_norm: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            critic: NetworkCritic::new(hidden, cfg.lr, max_grad_norm, rng)?,
            backup: BackupPolicy::new(env),
            criterion: build_criterion(&cfg.mode)?,
            cfg: cfg.clone(),
            a_max: env.a_max,
            scale: input_scale(env),
        })
    }

    pub fn with_critic(cfg: &SafeguardConfig, env: &EnvParams, critic: NetworkCritic) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            critic,
            backup: BackupPolicy::new(env),
            criterion: build_criterion(&cfg.mode)?,
            cfg: cfg.clone(),
            a_max: env.a_max,
            scale: input_scale(env),
        })
    }

    pub fn a_max(&self) -> f64 {
        self.a_max
    }

    /// Critic features: clipped `(state, action)` divided by the environment bounds.
    pub fn input(&self, s: &State, a: &Action) -> [f64; 6] {
        let mut x = critic_input(s, a, self.a_max);
        for (v, d) in x.iter_mut().zip(&self.scale) {
            *v /= d;
        }
        x
    }

    /// `Q̄(s, a)` from the online critic, in `[0, 1]`.
    pub fn q(&self, s: &State, a: &Action) -> f64 {
        self.critic.online(&self.input(s, a))
    }

    /// `Q̄(s, a) − Q̄(s, μ(s))`.
    pub fn advantage(&self, s: &State, a: &Action) -> f64 {
        self.q(s, a) - self.q(s, &self.backup.action(s))
    }

    pub fn evaluate(&self, s: &State, a_expl: &Action) -> SafeguardDecision {
        if self.criterion.score(0.0, 0.0).is_none() {
            return SafeguardDecision::pass(*a_expl);
        }
        let q_prop = self.q(s, a_expl);
        let backup = self.backup.action(s);
        let q_back = if self.criterion.needs_backup_value() {
            self.q(s, &backup)
        } else {
            f64::NAN
        };
        let score = self.criterion.score(q_prop, q_back).unwrap_or(f64::NAN);
        let intervened = score >= self.cfg.eta;
        SafeguardDecision {
            intervened,
            a_task: if intervened { backup } else { *a_expl },
            score,
        }
    }

    pub fn shaped_reward(&self, decision: &SafeguardDecision, raw_r: f64, absorbing: bool) -> f64 {
        match decision.reward_branch(absorbing) {
            RewardBranch::Penalty => self.cfg.penalty_b,
            RewardBranch::Absorbing => 0.0,
            RewardBranch::PassThrough => raw_r,
        }
    }
}
