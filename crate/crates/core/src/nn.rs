//! Feed-forward networks with analytic gradients.
//!
//! Parameters live in one flat vector; layer `l` stores its weight matrix
//! (`out x in`, row-major) followed by its bias. Hidden layers use tanh.

use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transformation applied to the last affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputHead {
    Linear,
    /// Linear output interpreted as the mean of a Gaussian policy.
    GaussianMean,
    /// Output reshaped to `rows x cols` (row-major) with a softmax over the
    /// rows of every column.
    Softmax { rows: usize, cols: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layer_sizes: Vec<usize>,
    params: Vec<f64>,
    head: OutputHead,
}

/// Intermediate activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input, `activations[l]` the output of hidden layer `l`.
    activations: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

fn param_count_for(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl Network {
    /// Glorot-uniform weights, zero biases.
    pub fn new(layer_sizes: &[usize], head: OutputHead, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, head)?;
        let mut offset = 0;
        for w in layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            for p in &mut net.params[offset..offset + n_in * n_out] {
                *p = rng.random_range(-limit..=limit);
            }
            offset += (n_in + 1) * n_out;
        }
        Ok(net)
    }

    pub fn zeros(layer_sizes: &[usize], head: OutputHead) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Config(format!(
                "network needs at least two non-zero layer sizes, got {layer_sizes:?}"
            )));
        }
        if let OutputHead::Softmax { rows, cols } = head {
            let out = *layer_sizes.last().unwrap();
            if rows * cols != out {
                return Err(Error::shape("softmax head", rows * cols, out));
            }
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params: vec![0.0; param_count_for(layer_sizes)],
            head,
        })
    }

    pub fn from_parts(layer_sizes: &[usize], head: OutputHead, params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes, head)?;
        if params.len() != net.params.len() {
            return Err(Error::shape("network parameters", net.params.len(), params.len()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn head(&self) -> OutputHead {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    /// (weight offset, bias offset, n_in, n_out) of layer `l`.
    fn layout(&self, l: usize) -> (usize, usize, usize, usize) {
        let offset = param_count_for(&self.layer_sizes[..=l]);
        let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        (offset, offset + n_in * n_out, n_in, n_out)
    }

    fn weights(&self, l: usize) -> (ArrayView2<'_, f64>, &[f64]) {
        let (w, b, n_in, n_out) = self.layout(l);
        let wv = ArrayView2::from_shape((n_out, n_in), &self.params[w..b]).unwrap();
        (wv, &self.params[b..b + n_out])
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), x.len()));
        }
        let mut cur = x.to_vec();
        for l in 0..self.n_layers() {
            let (w, b, n_in, n_out) = self.layout(l);
            let weights = &self.params[w..b];
            let bias = &self.params[b..b + n_out];
            let hidden = l + 1 < self.n_layers();
            let mut next = Vec::with_capacity(n_out);
            for o in 0..n_out {
                let row = &weights[o * n_in..(o + 1) * n_in];
                let mut z = bias[o];
                for (wi, xi) in row.iter().zip(&cur) {
                    z += wi * xi;
                }
                next.push(if hidden { z.tanh() } else { z });
            }
            cur = next;
        }
        apply_head_inplace(self.head, &mut cur);
        Ok(cur)
    }

    /// Batched forward pass, rows are samples.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::shape("network input", self.input_dim(), x.ncols()));
        }
        let mut activations = Vec::with_capacity(self.n_layers());
        let mut cur = x.to_owned();
        for l in 0..self.n_layers() {
            let (w, b) = self.weights(l);
            let mut z = cur.dot(&w.t());
            for mut row in z.rows_mut() {
                for (zi, bi) in row.iter_mut().zip(b) {
                    *zi += bi;
                }
            }
            if l + 1 < self.n_layers() {
                z.mapv_inplace(f64::tanh);
            }
            activations.push(cur);
            cur = z;
        }
        for mut row in cur.rows_mut() {
            apply_head_inplace(self.head, row.as_slice_mut().unwrap());
        }
        Ok(ForwardCache {
            activations,
            output: cur,
        })
    }

    /// Gradients of `sum(upstream * output)` with respect to the parameters
    /// and the inputs, given a cache from [`Network::forward_cached`].
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        let out = &cache.output;
        if upstream.dim() != out.dim() {
            return Err(Error::shape(
                "upstream gradient",
                out.len(),
                upstream.len(),
            ));
        }
        let mut delta = match self.head {
            OutputHead::Softmax { rows, cols } => {
                let mut d = upstream.to_owned();
                for (mut drow, yrow) in d.rows_mut().into_iter().zip(out.rows()) {
                    let g = drow.as_slice_mut().unwrap();
                    let y = yrow.as_slice().unwrap();
                    for c in 0..cols {
                        let dot: f64 = (0..rows).map(|r| y[r * cols + c] * g[r * cols + c]).sum();
                        for r in 0..rows {
                            let i = r * cols + c;
                            g[i] = y[i] * (g[i] - dot);
                        }
                    }
                }
                d
            }
            _ => upstream.to_owned(),
        };

        let mut grad = vec![0.0; self.params.len()];
        for l in (0..self.n_layers()).rev() {
            let (w_off, b_off, n_in, n_out) = self.layout(l);
            let input = &cache.activations[l];
            {
                let mut gw =
                    ArrayViewMut2::from_shape((n_out, n_in), &mut grad[w_off..b_off]).unwrap();
                gw.assign(&delta.t().dot(input));
            }
            let gb = delta.sum_axis(Axis(0));
            grad[b_off..b_off + n_out].copy_from_slice(gb.as_slice().unwrap());

            let (w, _) = self.weights(l);
            let mut d_in = delta.dot(&w);
            if l > 0 {
                d_in.zip_mut_with(input, |d, a| *d *= 1.0 - a * a);
            }
            delta = d_in;
        }
        Ok((grad, delta))
    }

    /// Single-sample backward pass: (parameter gradient, input gradient).
    pub fn backward_single(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let xv = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|_| Error::shape("network input", self.input_dim(), x.len()))?;
        let cache = self.forward_cached(xv)?;
        if upstream.len() != self.output_dim() {
            return Err(Error::shape("upstream gradient", self.output_dim(), upstream.len()));
        }
        let up = ArrayView2::from_shape((1, upstream.len()), upstream).unwrap();
        let (g, gi) = self.backward(&cache, up)?;
        Ok((g, gi.into_raw_vec_and_offset().0))
    }
}

fn apply_head_inplace(head: OutputHead, out: &mut [f64]) {
    if let OutputHead::Softmax { rows, cols } = head {
        for c in 0..cols {
            let max = (0..rows)
                .map(|r| out[r * cols + c])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for r in 0..rows {
                let e = (out[r * cols + c] - max).exp();
                out[r * cols + c] = e;
                total += e;
            }
            for r in 0..rows {
                out[r * cols + c] /= total;
            }
        }
    }
}

/// Rescales `grad` in place so its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    step_count: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.first_moment, &self.second_moment)
    }

    /// One update. A non-finite gradient leaves parameters and state untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::shape("adam parameters", self.first_moment.len(), params.len()));
        }
        if grad.len() != params.len() {
            return Err(Error::shape("adam gradient", params.len(), grad.len()));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient component {i}: {}",
                grad[i]
            )));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

const LN_TWO_PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal Gaussian log-density.
pub fn gaussian_log_density(a: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    a.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((a, m), ls)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_TWO_PI
        })
        .sum()
}

/// Diagonal Gaussian policy: a mean network plus a free log-std vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolicyHead {
    pub mean: Network,
    pub log_std: Vec<f64>,
}

/// Log-probability together with its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbGrad {
    pub log_prob: f64,
    pub mean_params: Vec<f64>,
    pub log_std: Vec<f64>,
}

impl GaussianPolicyHead {
    pub const INIT_LOG_STD: f64 = -0.5;

    pub fn new(layer_sizes: &[usize], rng: &mut ChaCha8Rng) -> Result<Self> {
        let mean = Network::new(layer_sizes, OutputHead::GaussianMean, rng)?;
        let dim = mean.output_dim();
        Ok(Self {
            mean,
            log_std: vec![Self::INIT_LOG_STD; dim],
        })
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn mean_action(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.mean.forward(s)
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|l| l.exp()).collect()
    }

    pub fn log_prob(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        if a.len() != self.action_dim() {
            return Err(Error::shape("action", self.action_dim(), a.len()));
        }
        let mean = self.mean.forward(s)?;
        Ok(gaussian_log_density(a, &mean, &self.log_std))
    }

    pub fn log_prob_grad(&self, s: &[f64], a: &[f64]) -> Result<LogProbGrad> {
        if a.len() != self.action_dim() {
            return Err(Error::shape("action", self.action_dim(), a.len()));
        }
        let mean = self.mean.forward(s)?;
        let mut d_mean = Vec::with_capacity(a.len());
        let mut d_log_std = Vec::with_capacity(a.len());
        for ((ai, mi), ls) in a.iter().zip(&mean).zip(&self.log_std) {
            let var = (2.0 * ls).exp();
            let diff = ai - mi;
            d_mean.push(diff / var);
            d_log_std.push(diff * diff / var - 1.0);
        }
        let (mean_params, _) = self.mean.backward_single(s, &d_mean)?;
        Ok(LogProbGrad {
            log_prob: gaussian_log_density(a, &mean, &self.log_std),
            mean_params,
            log_std: d_log_std,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerRecord {
    shape: [usize; 2],
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// On-disk form of a [`Network`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkCheckpoint {
    format: String,
    version: u32,
    layer_sizes: Vec<usize>,
    head: OutputHead,
    layers: Vec<LayerRecord>,
}

const NETWORK_FORMAT: &str = "aasc-network";
const POLICY_FORMAT: &str = "aasc-gaussian-policy";
const CHECKPOINT_VERSION: u32 = 1;

impl From<&Network> for NetworkCheckpoint {
    fn from(net: &Network) -> Self {
        let layers = (0..net.n_layers())
            .map(|l| {
                let (w, b, n_in, n_out) = net.layout(l);
                LayerRecord {
                    shape: [n_out, n_in],
                    weights: net.params[w..b].to_vec(),
                    bias: net.params[b..b + n_out].to_vec(),
                }
            })
            .collect();
        Self {
            format: NETWORK_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            layer_sizes: net.layer_sizes.clone(),
            head: net.head,
            layers,
        }
    }
}

impl TryFrom<NetworkCheckpoint> for Network {
    type Error = Error;

    fn try_from(ck: NetworkCheckpoint) -> Result<Self> {
        if ck.format != NETWORK_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported network checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        if ck.layers.len() + 1 != ck.layer_sizes.len() {
            return Err(Error::Checkpoint("layer count does not match layer_sizes".into()));
        }
        let mut params = Vec::new();
        for (l, rec) in ck.layers.iter().enumerate() {
            let expect = [ck.layer_sizes[l + 1], ck.layer_sizes[l]];
            if rec.shape != expect
                || rec.weights.len() != expect[0] * expect[1]
                || rec.bias.len() != expect[0]
            {
                return Err(Error::Checkpoint(format!("layer {l} has inconsistent shape")));
            }
            params.extend_from_slice(&rec.weights);
            params.extend_from_slice(&rec.bias);
        }
        Network::from_parts(&ck.layer_sizes, ck.head, params)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PolicyCheckpoint {
    format: String,
    version: u32,
    mean: NetworkCheckpoint,
    log_std: Vec<f64>,
}

impl Network {
    pub fn to_checkpoint_string(&self) -> String {
        serde_json::to_string_pretty(&NetworkCheckpoint::from(self)).expect("serializable")
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ck: NetworkCheckpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Network::try_from(ck)
    }
}

impl GaussianPolicyHead {
    pub fn to_checkpoint_string(&self) -> String {
        let ck = PolicyCheckpoint {
            format: POLICY_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            mean: NetworkCheckpoint::from(&self.mean),
            log_std: self.log_std.clone(),
        };
        serde_json::to_string_pretty(&ck).expect("serializable")
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let ck: PolicyCheckpoint =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ck.format != POLICY_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported policy checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mean = Network::try_from(ck.mean)?;
        if ck.log_std.len() != mean.output_dim() {
            return Err(Error::Checkpoint("log_std length does not match mean output".into()));
        }
        Ok(Self {
            mean,
            log_std: ck.log_std,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}
