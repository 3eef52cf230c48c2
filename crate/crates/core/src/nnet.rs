//! A small feed-forward network with hand-written backpropagation and Adam.
//!
//! Hidden layers use ReLU, the last layer emits a single logit. The training
//! loss is the mean binary cross-entropy on logits plus `l2 * sum(w^2)` over
//! weight matrices (biases are not regularized).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Cross-entropy of a logit against a 0/1 label.
pub fn logit_cross_entropy(logit: f64, label: f64) -> f64 {
    softplus(logit) - label * logit
}

/// One affine layer. `weights` is `(fan_in, fan_out)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }
}

/// Network parameters. Also used as the gradient container, since gradients
/// have exactly the parameter shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations kept from the forward pass for backpropagation.
pub(crate) struct ForwardCache {
    /// `inputs[l]` is the input to layer `l` (post-ReLU for `l > 0`).
    inputs: Vec<Array2<f64>>,
    pub logits: Array1<f64>,
}

impl Mlp {
    fn check_sizes(layer_sizes: &[usize]) -> Result<()> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid("an MLP needs at least an input and an output size"));
        }
        if *layer_sizes.last().unwrap() != 1 {
            return Err(Error::invalid("the output layer must have size 1"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        Ok(())
    }

    /// All-zero parameters.
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        Self::check_sizes(layer_sizes)?;
        Ok(Self {
            layers: layer_sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    /// Glorot-uniform weights, `U(-s, s)` with `s = sqrt(6 / (fan_in + fan_out))`,
    /// and zero biases.
    pub fn init(layer_sizes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(layer_sizes)?;
        for layer in &mut net.layers {
            let (fan_in, fan_out) = layer.weights.dim();
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            layer.weights.mapv_inplace(|_| rng.random_range(-s..s));
        }
        Ok(net)
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::invalid("an MLP needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.weights.ncols() {
                return Err(Error::DimensionMismatch {
                    context: "layer bias",
                    expected: l.weights.ncols(),
                    got: l.bias.len(),
                });
            }
            if let Some(next) = layers.get(i + 1) {
                if next.weights.nrows() != l.weights.ncols() {
                    return Err(Error::DimensionMismatch {
                        context: "consecutive layers",
                        expected: l.weights.ncols(),
                        got: next.weights.nrows(),
                    });
                }
            }
        }
        if layers.last().unwrap().weights.ncols() != 1 {
            return Err(Error::invalid("the output layer must have size 1"));
        }
        let net = Self { layers };
        if !net.values().all(f64::is_finite) {
            return Err(Error::NonFinite("parameters".into()));
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.weights.ncols()));
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters in a fixed order: per layer, weights row-major then bias.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for l in &mut self.layers {
            if idx < l.weights.len() {
                let cols = l.weights.ncols();
                return &mut l.weights[(idx / cols, idx % cols)];
            }
            idx -= l.weights.len();
            if idx < l.bias.len() {
                return &mut l.bias[idx];
            }
            idx -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn param(&self, idx: usize) -> f64 {
        self.values().nth(idx).expect("parameter index out of range")
    }

    /// Sum of squared weights, biases excluded.
    pub fn weight_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weights.iter().map(|w| w * w).sum::<f64>())
            .sum()
    }

    /// Logit for a single input vector.
    pub fn forward(&self, input: &[f64]) -> Result<f64> {
        let x = ArrayView2::from_shape((1, input.len()), input).expect("row view");
        Ok(self.forward_batch(x)?[0])
    }

    /// Logits for each row of `x`.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array1<f64>> {
        Ok(self.forward_cached(x)?.logits)
    }

    pub(crate) fn forward_cached(&self, x: ArrayView2<f64>) -> Result<ForwardCache> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "network input",
                expected: self.input_dim(),
                got: x.ncols(),
            });
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = h.dot(&layer.weights);
            z += &layer.bias;
            if !z.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {l} pre-activation")));
            }
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(std::mem::replace(&mut h, z));
        }
        let logits = h.index_axis_move(Axis(1), 0);
        Ok(ForwardCache { inputs, logits })
    }

    /// Gradient of `sum_n dlogits[n] * logit_n` with respect to the parameters.
    pub(crate) fn backward(&self, cache: &ForwardCache, dlogits: ArrayView1<f64>) -> Mlp {
        let n = dlogits.len();
        let mut delta = dlogits.to_owned().into_shape_with_order((n, 1)).expect("column");
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let input = &cache.inputs[l];
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut next = delta.dot(&self.layers[l].weights.t());
                // ReLU derivative: the layer input is the post-ReLU activation.
                Zip::from(&mut next).and(input).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = next;
            }
            grads.push(Dense { weights: gw, bias: gb });
        }
        grads.reverse();
        Mlp { layers: grads }
    }

    /// Adds the gradient of `l2 * sum(w^2)` to `grads`.
    pub(crate) fn add_l2_grad(&self, grads: &mut Mlp, l2: f64) {
        if l2 == 0.0 {
            return;
        }
        for (g, p) in grads.layers.iter_mut().zip(&self.layers) {
            g.weights.scaled_add(2.0 * l2, &p.weights);
        }
    }

    /// Mean cross-entropy plus `l2 * sum(w^2)`, and its exact gradient.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>, labels: ArrayView1<f64>, l2: f64) -> Result<(f64, Mlp)> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Empty("batch"));
        }
        if x.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "batch labels",
                expected: x.nrows(),
                got: n,
            });
        }
        let cache = self.forward_cached(x)?;
        let inv_n = 1.0 / n as f64;
        let mut ce = 0.0;
        let mut dlogits = Array1::zeros(n);
        for i in 0..n {
            let z = cache.logits[i];
            ce += logit_cross_entropy(z, labels[i]);
            dlogits[i] = (logistic(z) - labels[i]) * inv_n;
        }
        let loss = ce * inv_n + l2 * self.weight_norm_sq();
        if !loss.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads = self.backward(&cache, dlogits.view());
        self.add_l2_grad(&mut grads, l2);
        Ok((loss, grads))
    }

    fn loss_only(&self, x: ArrayView2<f64>, labels: ArrayView1<f64>, l2: f64) -> Result<f64> {
        let logits = self.forward_batch(x)?;
        let ce: f64 = logits
            .iter()
            .zip(labels)
            .map(|(&z, &y)| logit_cross_entropy(z, y))
            .sum();
        Ok(ce / labels.len() as f64 + l2 * self.weight_norm_sq())
    }
}

/// Smallest finite-difference step accepted by [`finite_diff_check`].
/// Below this the difference quotient is dominated by rounding error.
pub const MIN_FD_STEP: f64 = 1e-10;

/// Compares analytic gradients with central differences at up to `n_probe`
/// randomly chosen parameters (all of them when the net is smaller) and
/// returns the largest `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn finite_diff_check(
    params: &Mlp,
    x: ArrayView2<f64>,
    labels: ArrayView1<f64>,
    l2: f64,
    step: f64,
    n_probe: usize,
    seed: u64,
) -> Result<f64> {
    if !(step >= MIN_FD_STEP) {
        return Err(Error::invalid(format!(
            "finite-difference step {step:e} is below the precision floor {MIN_FD_STEP:e}"
        )));
    }
    if n_probe == 0 {
        return Ok(0.0);
    }
    let (_, grads) = params.loss_and_grad(x, labels, l2)?;
    let total = params.num_params();
    let indices: Vec<usize> = if n_probe >= total {
        (0..total).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::index::sample(&mut rng, total, n_probe).into_vec()
    };

    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for idx in indices {
        let orig = params.param(idx);
        *probe.param_mut(idx) = orig + step;
        let plus = probe.loss_only(x, labels, l2)?;
        *probe.param_mut(idx) = orig - step;
        let minus = probe.loss_only(x, labels, l2)?;
        *probe.param_mut(idx) = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads.param(idx);
        worst = worst.max((analytic - numeric).abs() / (numeric.abs() + 1e-8));
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Hidden layer widths of the main network.
    pub hidden_sizes: Vec<usize>,
    /// Hidden layer widths of the position tower; empty means a single linear layer.
    pub tower_hidden_sizes: Vec<usize>,
    /// Feed user features to the position tower alongside the position one-hot.
    pub tower_user_features: bool,
    pub l2_coeff: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub max_epochs: usize,
    /// Early stopping: validation evaluations without improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![64, 32],
            tower_hidden_sizes: Vec::new(),
            tower_user_features: false,
            l2_coeff: 1e-4,
            learning_rate: 1e-3,
            batch_size: 1024,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            max_epochs: 30,
            patience: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2_coeff >= 0.0) {
            return Err(Error::invalid("l2_coeff must be >= 0"));
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::invalid("beta1 and beta2 must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.learning_rate > 0.0) || !(self.adam_epsilon > 0.0) {
            return Err(Error::invalid("learning_rate and adam_epsilon must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(Error::invalid("max_epochs must be >= 1"));
        }
        if self.hidden_sizes.contains(&0) || self.tower_hidden_sizes.contains(&0) {
            return Err(Error::invalid("hidden sizes must be positive"));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the JSON-encoded config.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}

/// First and second moment estimates for one network.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Mlp,
    v: Mlp,
    t: u64,
}

impl AdamState {
    pub fn new(params: &Mlp) -> Self {
        let zeros = Mlp {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weights.nrows(), l.weights.ncols()))
                .collect(),
        };
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut Mlp, grads: &Mlp, state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if params.layer_sizes() != grads.layer_sizes() || params.layer_sizes() != state.m.layer_sizes() {
        return Err(Error::invalid("parameter, gradient and optimizer shapes differ"));
    }
    state.t += 1;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    let lr = config.learning_rate;
    let eps = config.adam_epsilon;

    let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (((p, g), m), v) in params
        .layers
        .iter_mut()
        .zip(&grads.layers)
        .zip(&mut state.m.layers)
        .zip(&mut state.v.layers)
    {
        Zip::from(&mut p.weights)
            .and(&g.weights)
            .and(&mut m.weights)
            .and(&mut v.weights)
            .for_each(update);
        Zip::from(&mut p.bias)
            .and(&g.bias)
            .and(&mut m.bias)
            .and(&mut v.bias)
            .for_each(update);
    }
    Ok(())
}
