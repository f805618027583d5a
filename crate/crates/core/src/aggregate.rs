//! Attention-weighted aggregation of frozen source actions and a trainable
//! auxiliary action.
//!
//! Candidate actions are stacked into an `(I+1) x D` matrix `A` whose last row
//! is the auxiliary action. A weighting strategy produces a matrix `W` of the
//! same shape and the exploratory mean is the column sum of `W ⊙ A`. The
//! strategy is chosen by name from [`WEIGHTING_REGISTRY`].

use std::fmt;
use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{gaussian_log_density, ForwardCache, GaussianPolicyHead, Network, OutputHead};
use crate::policy::Policy;
use crate::simenv::State;

/// Shape information handed to weighting builders.
#[derive(Debug, Clone)]
pub struct WeightingSpec {
    pub rows: usize,
    pub cols: usize,
    pub state_dim: usize,
    pub hidden: Vec<usize>,
}

/// Produces the per-state weight matrix `W` (row-major, `rows x cols`).
pub trait WeightingStrategy: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn rows(&self) -> usize;

    fn cols(&self) -> usize;

    fn weights(&self, state: &[f64]) -> Result<Vec<f64>>;

    /// Weights for a batch of states plus whatever the backward pass needs.
    fn weights_batch(&self, states: ArrayView2<f64>) -> Result<(Array2<f64>, Option<ForwardCache>)>;

    /// Parameter gradient of `sum(upstream * W)`.
    fn backward(&self, cache: Option<&ForwardCache>, upstream: ArrayView2<f64>) -> Result<Vec<f64>>;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    /// The parameters in the network checkpoint format.
    fn to_network(&self) -> Network;

    fn load_network(&mut self, net: Network) -> Result<()>;

    fn box_clone(&self) -> Box<dyn WeightingStrategy>;
}

impl Clone for Box<dyn WeightingStrategy> {
    fn clone(&self) -> Self {
        self.box_clone()
    }
}

/// State-conditioned attention network with a per-column softmax.
#[derive(Debug, Clone)]
pub struct AttentionWeighting {
    net: Network,
}

impl AttentionWeighting {
    pub fn new(spec: &WeightingSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut sizes = vec![spec.state_dim];
        sizes.extend_from_slice(&spec.hidden);
        sizes.push(spec.rows * spec.cols);
        let head = OutputHead::Softmax {
            rows: spec.rows,
            cols: spec.cols,
        };
        Ok(Self {
            net: Network::new(&sizes, head, rng)?,
        })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Network {
        &mut self.net
    }
}

impl WeightingStrategy for AttentionWeighting {
    fn name(&self) -> &'static str {
        "aasc"
    }

    fn rows(&self) -> usize {
        match self.net.head() {
            OutputHead::Softmax { rows, .. } => rows,
            _ => unreachable!("attention head is always softmax"),
        }
    }

    fn cols(&self) -> usize {
        self.net.output_dim() / self.rows()
    }

    fn weights(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.net.forward(state)
    }

    fn weights_batch(&self, states: ArrayView2<f64>) -> Result<(Array2<f64>, Option<ForwardCache>)> {
        let cache = self.net.forward_cached(states)?;
        Ok((cache.output().clone(), Some(cache)))
    }

    fn backward(&self, cache: Option<&ForwardCache>, upstream: ArrayView2<f64>) -> Result<Vec<f64>> {
        let cache = cache.ok_or_else(|| Error::Numeric("attention backward without cache".into()))?;
        Ok(self.net.backward(cache, upstream)?.0)
    }

    fn params(&self) -> &[f64] {
        self.net.params()
    }

    fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    fn to_network(&self) -> Network {
        self.net.clone()
    }

    fn load_network(&mut self, net: Network) -> Result<()> {
        if net.layer_sizes() != self.net.layer_sizes() || net.head() != self.net.head() {
            return Err(Error::Checkpoint("attention network shape mismatch".into()));
        }
        self.net = net;
        Ok(())
    }

    fn box_clone(&self) -> Box<dyn WeightingStrategy> {
        Box::new(self.clone())
    }
}

/// A learnable, state-independent and unnormalized weight matrix.
#[derive(Debug, Clone)]
pub struct MatrixWeighting {
    rows: usize,
    cols: usize,
    matrix: Vec<f64>,
}

impl MatrixWeighting {
    pub fn new(spec: &WeightingSpec, _rng: &mut ChaCha8Rng) -> Result<Self> {
        let init = 1.0 / spec.rows as f64;
        Ok(Self {
            rows: spec.rows,
            cols: spec.cols,
            matrix: vec![init; spec.rows * spec.cols],
        })
    }

    pub fn from_matrix(rows: usize, cols: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != rows * cols {
            return Err(Error::shape("weight matrix", rows * cols, matrix.len()));
        }
        Ok(Self { rows, cols, matrix })
    }
}

impl WeightingStrategy for MatrixWeighting {
    fn name(&self) -> &'static str {
        "multipolar"
    }

    fn rows(&self) -> usize {
        self.rows
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn weights(&self, _state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.matrix.clone())
    }

    fn weights_batch(&self, states: ArrayView2<f64>) -> Result<(Array2<f64>, Option<ForwardCache>)> {
        let n = states.nrows();
        let mut w = Array2::zeros((n, self.matrix.len()));
        for mut row in w.rows_mut() {
            row.as_slice_mut().unwrap().copy_from_slice(&self.matrix);
        }
        Ok((w, None))
    }

    fn backward(&self, _cache: Option<&ForwardCache>, upstream: ArrayView2<f64>) -> Result<Vec<f64>> {
        if upstream.ncols() != self.matrix.len() {
            return Err(Error::shape("matrix upstream", self.matrix.len(), upstream.ncols()));
        }
        Ok(upstream.sum_axis(ndarray::Axis(0)).to_vec())
    }

    fn params(&self) -> &[f64] {
        &self.matrix
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.matrix
    }

    /// Stored as the bias of a `1 -> rows*cols` linear layer with zero weights.
    fn to_network(&self) -> Network {
        let n = self.matrix.len();
        let mut params = vec![0.0; n];
        params.extend_from_slice(&self.matrix);
        Network::from_parts(&[1, n], OutputHead::Linear, params).expect("consistent shape")
    }

    fn load_network(&mut self, net: Network) -> Result<()> {
        let n = self.matrix.len();
        if net.layer_sizes() != [1, n] {
            return Err(Error::Checkpoint("weight matrix shape mismatch".into()));
        }
        self.matrix.copy_from_slice(&net.params()[n..]);
        Ok(())
    }

    fn box_clone(&self) -> Box<dyn WeightingStrategy> {
        Box::new(self.clone())
    }
}

/// The auxiliary action alone, weight one. Used for the from-scratch baseline.
#[derive(Debug, Clone)]
pub struct AuxOnlyWeighting {
    cols: usize,
    ones: Vec<f64>,
}

impl AuxOnlyWeighting {
    pub fn new(spec: &WeightingSpec, _rng: &mut ChaCha8Rng) -> Result<Self> {
        if spec.rows != 1 {
            return Err(Error::Config(format!(
                "mode `none` takes no source policies, got {}",
                spec.rows - 1
            )));
        }
        Ok(Self {
            cols: spec.cols,
            ones: vec![1.0; spec.cols],
        })
    }
}

impl WeightingStrategy for AuxOnlyWeighting {
    fn name(&self) -> &'static str {
        "none"
    }

    fn rows(&self) -> usize {
        1
    }

    fn cols(&self) -> usize {
        self.cols
    }

    fn weights(&self, _state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.ones.clone())
    }

    fn weights_batch(&self, states: ArrayView2<f64>) -> Result<(Array2<f64>, Option<ForwardCache>)> {
        Ok((Array2::ones((states.nrows(), self.cols)), None))
    }

    fn backward(&self, _cache: Option<&ForwardCache>, _upstream: ArrayView2<f64>) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }

    fn params(&self) -> &[f64] {
        &[]
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut []
    }

    fn to_network(&self) -> Network {
        Network::zeros(&[1, 1], OutputHead::Linear).expect("valid shape")
    }

    fn load_network(&mut self, _net: Network) -> Result<()> {
        Ok(())
    }

    fn box_clone(&self) -> Box<dyn WeightingStrategy> {
        Box::new(self.clone())
    }
}

pub type WeightingBuilder = fn(&WeightingSpec, &mut ChaCha8Rng) -> Result<Box<dyn WeightingStrategy>>;

/// Weighting strategies selectable by name.
pub const WEIGHTING_REGISTRY: &[(&str, WeightingBuilder)] = &[
    ("aasc", |spec, rng| Ok(Box::new(AttentionWeighting::new(spec, rng)?))),
    ("multipolar", |spec, rng| Ok(Box::new(MatrixWeighting::new(spec, rng)?))),
    ("none", |spec, rng| Ok(Box::new(AuxOnlyWeighting::new(spec, rng)?))),
];

pub fn weighting_names() -> Vec<&'static str> {
    WEIGHTING_REGISTRY.iter().map(|(n, _)| *n).collect()
}

pub fn build_weighting(
    name: &str,
    spec: &WeightingSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Box<dyn WeightingStrategy>> {
    let (_, builder) = WEIGHTING_REGISTRY
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown aggregation mode `{name}` (expected one of {:?})",
                weighting_names()
            ))
        })?;
    builder(spec, rng)
}

/// Diagonal Gaussian over the aggregated action.
#[derive(Debug, Clone, PartialEq)]
pub struct ExploratoryDistribution {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl ExploratoryDistribution {
    pub fn log_prob(&self, a: &[f64]) -> f64 {
        gaussian_log_density(a, &self.mean, &self.log_std)
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + ls.exp() * z
            })
            .collect()
    }
}

/// Result of aggregating at one state.
#[derive(Debug, Clone)]
pub struct Aggregation {
    pub distribution: ExploratoryDistribution,
    /// `rows x cols`, row-major.
    pub weights: Vec<f64>,
    /// Candidate matrix `A`, last row is the auxiliary action.
    pub actions: Vec<f64>,
}

/// A sampled exploratory action with the bookkeeping the optimizer needs.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub action: Vec<f64>,
    pub log_prob: f64,
    pub mean: Vec<f64>,
    /// Source rows of `A` (`I x D`), frozen so they are cached for updates.
    pub source_actions: Vec<f64>,
}

/// Training inputs for [`Aggregator::log_probs_and_grads`].
#[derive(Debug, Clone)]
pub struct PolicyBatch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    /// Row `n` holds the `I x D` source actions for sample `n`.
    pub source_actions: Array2<f64>,
}

/// Gradients for the three trainable parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorGrads {
    pub weighting: Vec<f64>,
    pub aux: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl AggregatorGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.weighting.len() + self.aux.len() + self.log_std.len());
        v.extend_from_slice(&self.weighting);
        v.extend_from_slice(&self.aux);
        v.extend_from_slice(&self.log_std);
        v
    }
}

/// The exploratory policy: frozen sources, auxiliary network, weighting
/// strategy and a shared exploration log-std.
#[derive(Debug, Clone)]
pub struct Aggregator {
    sources: Vec<Arc<Policy>>,
    aux: Network,
    weighting: Box<dyn WeightingStrategy>,
    log_std: Vec<f64>,
}

impl Aggregator {
    /// Builds an aggregator. Mode `none` discards `sources`.
    pub fn new(
        mode: &str,
        sources: Vec<Arc<Policy>>,
        hidden: &[usize],
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let sources = if mode == "none" { Vec::new() } else { sources };
        let dim = crate::simenv::Action::DIM;
        for (i, s) in sources.iter().enumerate() {
            if s.action_dim() != dim || s.state_dim() != State::DIM {
                return Err(Error::Config(format!(
                    "source {i} maps {} -> {}, expected {} -> {dim}",
                    s.state_dim(),
                    s.action_dim(),
                    State::DIM
                )));
            }
        }
        let mut sizes = vec![State::DIM];
        sizes.extend_from_slice(hidden);
        sizes.push(dim);
        let aux = Network::new(&sizes, OutputHead::GaussianMean, rng)?;
        let spec = WeightingSpec {
            rows: sources.len() + 1,
            cols: dim,
            state_dim: State::DIM,
            hidden: hidden.to_vec(),
        };
        let weighting = build_weighting(mode, &spec, rng)?;
        Ok(Self {
            sources,
            aux,
            weighting,
            log_std: vec![GaussianPolicyHead::INIT_LOG_STD; dim],
        })
    }

    pub fn from_parts(
        sources: Vec<Arc<Policy>>,
        aux: Network,
        weighting: Box<dyn WeightingStrategy>,
        log_std: Vec<f64>,
    ) -> Result<Self> {
        if weighting.rows() != sources.len() + 1 {
            return Err(Error::shape("weighting rows", sources.len() + 1, weighting.rows()));
        }
        if aux.output_dim() != log_std.len() || weighting.cols() != log_std.len() {
            return Err(Error::shape("action dim", log_std.len(), aux.output_dim()));
        }
        Ok(Self {
            sources,
            aux,
            weighting,
            log_std,
        })
    }

    pub fn mode(&self) -> &'static str {
        self.weighting.name()
    }

    pub fn n_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn sources(&self) -> &[Arc<Policy>] {
        &self.sources
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn aux(&self) -> &Network {
        &self.aux
    }

    pub fn aux_mut(&mut self) -> &mut Network {
        &mut self.aux
    }

    pub fn weighting(&self) -> &dyn WeightingStrategy {
        self.weighting.as_ref()
    }

    pub fn weighting_mut(&mut self) -> &mut dyn WeightingStrategy {
        self.weighting.as_mut()
    }

    pub fn log_std(&self) -> &[f64] {
        &self.log_std
    }

    pub fn log_std_mut(&mut self) -> &mut [f64] {
        &mut self.log_std
    }

    /// Deterministic source actions at `s`, row-major `I x D`.
    pub fn source_actions(&self, s: &State) -> Result<Vec<f64>> {
        let x = s.to_array();
        let mut out = Vec::with_capacity(self.sources.len() * self.action_dim());
        for src in &self.sources {
            out.extend(src.mean_action(&x)?);
        }
        Ok(out)
    }

    pub fn aggregate(&self, s: &State) -> Result<Aggregation> {
        let x = s.to_array();
        let mut actions = self.source_actions(s)?;
        actions.extend(self.aux.forward(&x)?);
        let weights = self.weighting.weights(&x)?;
        let dim = self.action_dim();
        let mut mean = vec![0.0; dim];
        for (i, (w, a)) in weights.iter().zip(&actions).enumerate() {
            mean[i % dim] += w * a;
        }
        Ok(Aggregation {
            distribution: ExploratoryDistribution {
                mean,
                log_std: self.log_std.clone(),
            },
            weights,
            actions,
        })
    }

    pub fn sample(&self, s: &State, rng: &mut ChaCha8Rng) -> Result<Proposal> {
        let agg = self.aggregate(s)?;
        let action = agg.distribution.sample(rng);
        let log_prob = agg.distribution.log_prob(&action);
        let n_src = self.sources.len() * self.action_dim();
        let mut source_actions = agg.actions;
        source_actions.truncate(n_src);
        Ok(Proposal {
            action,
            log_prob,
            mean: agg.distribution.mean,
            source_actions,
        })
    }

    /// Log-probabilities of `batch.actions` under the current parameters,
    /// and the gradient of `sum_n w_n * logprob_n` where `w = weight_fn(logprobs)`.
    ///
    /// Two channels: the weighting strategy and log-std see the aggregated
    /// density with the auxiliary action held constant; the auxiliary
    /// network sees the density of a Gaussian centred on its own output, as
    /// if it alone had produced the action. Sources never receive gradient.
    pub fn log_probs_and_grads<F>(&self, batch: &PolicyBatch, weight_fn: F) -> Result<(Vec<f64>, AggregatorGrads)>
    where
        F: FnOnce(&[f64]) -> Vec<f64>,
    {
        let n = batch.states.nrows();
        let dim = self.action_dim();
        let rows = self.sources.len() + 1;
        if batch.actions.dim() != (n, dim) {
            return Err(Error::shape("batch actions", n * dim, batch.actions.len()));
        }
        if batch.source_actions.dim() != (n, (rows - 1) * dim) {
            return Err(Error::shape(
                "batch source actions",
                n * (rows - 1) * dim,
                batch.source_actions.len(),
            ));
        }
        let aux_cache = self.aux.forward_cached(batch.states.view())?;
        let aux_out = aux_cache.output();
        let (weights, w_cache) = self.weighting.weights_batch(batch.states.view())?;
        let inv_var: Vec<f64> = self.log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();

        let mut means = Array2::<f64>::zeros((n, dim));
        let mut log_probs = Vec::with_capacity(n);
        for k in 0..n {
            let src = batch.source_actions.row(k);
            let w = weights.row(k);
            let mut lp = 0.0;
            for d in 0..dim {
                let mut m = 0.0;
                for r in 0..rows - 1 {
                    m += w[r * dim + d] * src[r * dim + d];
                }
                m += w[(rows - 1) * dim + d] * aux_out[[k, d]];
                means[[k, d]] = m;
                lp += gaussian_log_density(&[batch.actions[[k, d]]], &[m], &[self.log_std[d]]);
            }
            log_probs.push(lp);
        }

        let sample_weights = weight_fn(&log_probs);
        if sample_weights.len() != n {
            return Err(Error::shape("sample weights", n, sample_weights.len()));
        }

        let mut d_weights = Array2::<f64>::zeros((n, rows * dim));
        let mut d_aux = Array2::<f64>::zeros((n, dim));
        let mut d_log_std = vec![0.0; dim];
        for k in 0..n {
            let g = sample_weights[k];
            if g == 0.0 {
                continue;
            }
            let src = batch.source_actions.row(k);
            for d in 0..dim {
                let a = batch.actions[[k, d]];
                let diff = a - means[[k, d]];
                let d_mean = g * diff * inv_var[d];
                for r in 0..rows - 1 {
                    d_weights[[k, r * dim + d]] = d_mean * src[r * dim + d];
                }
                d_weights[[k, (rows - 1) * dim + d]] = d_mean * aux_out[[k, d]];
                d_log_std[d] += g * (diff * diff * inv_var[d] - 1.0);
                d_aux[[k, d]] = g * (a - aux_out[[k, d]]) * inv_var[d];
            }
        }
        let weighting = self.weighting.backward(w_cache.as_ref(), d_weights.view())?;
        let (aux, _) = self.aux.backward(&aux_cache, d_aux.view())?;
        Ok((
            log_probs,
            AggregatorGrads {
                weighting,
                aux,
                log_std: d_log_std,
            },
        ))
    }

    /// Single-transition form of [`Aggregator::log_probs_and_grads`].
    pub fn gradients_for_update(&self, s: &State, a_task: &[f64], ppo_weight: f64) -> Result<AggregatorGrads> {
        let batch = PolicyBatch {
            states: Array2::from_shape_vec((1, State::DIM), s.to_array().to_vec()).unwrap(),
            actions: Array2::from_shape_vec((1, a_task.len()), a_task.to_vec())
                .map_err(|_| Error::shape("action", self.action_dim(), a_task.len()))?,
            source_actions: Array2::from_shape_vec(
                (1, self.sources.len() * self.action_dim()),
                self.source_actions(s)?,
            )
            .unwrap(),
        };
        Ok(self.log_probs_and_grads(&batch, |_| vec![ppo_weight])?.1)
    }

    /// Trainable parameters in the order `[weighting, aux, log_std]`.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_trainable());
        v.extend_from_slice(self.weighting.params());
        v.extend_from_slice(self.aux.params());
        v.extend_from_slice(&self.log_std);
        v
    }

    pub fn n_trainable(&self) -> usize {
        self.weighting.params().len() + self.aux.param_count() + self.log_std.len()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_trainable() {
            return Err(Error::shape("aggregator parameters", self.n_trainable(), flat.len()));
        }
        let nw = self.weighting.params().len();
        let na = self.aux.param_count();
        self.weighting.params_mut().copy_from_slice(&flat[..nw]);
        self.aux.params_mut().copy_from_slice(&flat[nw..nw + na]);
        self.log_std.copy_from_slice(&flat[nw + na..]);
        Ok(())
    }

    /// The auxiliary network with the exploration log-std, as a standalone policy.
    pub fn aux_policy(&self) -> GaussianPolicyHead {
        GaussianPolicyHead {
            mean: self.aux.clone(),
            log_std: self.log_std.clone(),
        }
    }
}
