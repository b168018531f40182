//! The classifier `f(x; w)` and the two scalar coefficient networks.

use std::ops::Deref;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, affine_backward_rows, affine_rows, sigmoid};
use crate::rng;
use crate::tensor::{ParamVector, Tensor};

/// Probability vector over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SoftLabel(Vec<f64>);

impl SoftLabel {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        layers::validate_distribution(&probs)?;
        Ok(Self(probs))
    }

    pub fn one_hot(class: usize, classes: usize) -> Self {
        let mut v = vec![0.0; classes];
        v[class] = 1.0;
        Self(v)
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for SoftLabel {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Plain relu MLP over a flat parameter vector. Output layer is linear;
/// wrappers apply their own output nonlinearity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: ParamVector,
}

/// Activations saved by a forward pass.
pub struct ForwardCache {
    rows: usize,
    /// `acts[0]` is the input; `acts[l]` the post-relu output of hidden layer `l`.
    acts: Vec<Vec<f64>>,
    /// Pre-activations of every layer, the last one being the network output.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    HeUniform,
    /// Weights and biases `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform,
}

impl Mlp {
    /// He-uniform weights, zero biases.
    pub fn init(sizes: &[usize], seed: u64, stream: u64) -> Result<Self> {
        Self::init_with(sizes, seed, stream, Init::HeUniform)
    }

    pub fn init_with(sizes: &[usize], seed: u64, stream: u64, scheme: Init) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = rng::rng_for(seed, stream);
        let mut parts = Vec::new();
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = match scheme {
                Init::HeUniform => (6.0 / fan_in as f64).sqrt(),
                Init::FanInUniform => 1.0 / (fan_in as f64).sqrt(),
            };
            let weights = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect();
            let bias = match scheme {
                Init::HeUniform => vec![0.0; fan_out],
                Init::FanInUniform => (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect(),
            };
            parts.push((format!("fc{l}.weight"), Tensor::matrix(fan_in, fan_out, weights)?));
            parts.push((format!("fc{l}.bias"), Tensor::vector(bias)));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            params: ParamVector::flatten(parts),
        })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        let mut m = Self::init(sizes, 0, 0)?;
        m.params.values_mut().iter_mut().for_each(|v| *v = 0.0);
        Ok(m)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Forward pass with the given parameter values (which may differ from
    /// the stored ones, e.g. a virtual update).
    pub fn forward_with(&self, params: &[f64], x: &[f64], rows: usize) -> Result<ForwardCache> {
        if params.len() != self.params.len() {
            return Err(Error::dim("params", self.params.len(), params.len()));
        }
        if x.len() != rows * self.input_dim() {
            return Err(Error::dim("input", format!("{rows} x {}", self.input_dim()), x.len()));
        }
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        acts.push(x.to_vec());
        let mut offset = 0;
        for l in 0..n_layers {
            let (d_in, d_out) = (self.sizes[l], self.sizes[l + 1]);
            let w = &params[offset..offset + d_in * d_out];
            let b = &params[offset + d_in * d_out..offset + d_in * d_out + d_out];
            offset += d_in * d_out + d_out;
            let mut z = vec![0.0; rows * d_out];
            affine_rows(&acts[l], w, b, d_in, d_out, &mut z);
            if l + 1 < n_layers {
                acts.push(z.iter().map(|v| v.max(0.0)).collect());
            }
            pre.push(z);
        }
        Ok(ForwardCache { rows, acts, pre })
    }

    /// Gradient of `sum(grad_out * output)` with respect to the parameters.
    pub fn backward_with(&self, params: &[f64], cache: &ForwardCache, grad_out: &[f64]) -> Vec<f64> {
        let n_layers = self.sizes.len() - 1;
        let mut grad = vec![0.0; params.len()];
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in 0..n_layers {
            offsets.push(off);
            off += self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        }
        let mut g = grad_out.to_vec();
        for l in (0..n_layers).rev() {
            let (d_in, d_out) = (self.sizes[l], self.sizes[l + 1]);
            let o = offsets[l];
            let w = &params[o..o + d_in * d_out];
            let (gw, gb) = grad[o..o + d_in * d_out + d_out].split_at_mut(d_in * d_out);
            if l > 0 {
                let mut gx = vec![0.0; cache.rows * d_in];
                affine_backward_rows(&cache.acts[l], w, &g, d_in, d_out, Some(&mut gx), gw, gb);
                for (gv, &z) in gx.iter_mut().zip(&cache.pre[l - 1]) {
                    if z <= 0.0 {
                        *gv = 0.0;
                    }
                }
                g = gx;
            } else {
                affine_backward_rows(&cache.acts[0], w, &g, d_in, d_out, None, gw, gb);
            }
        }
        grad
    }
}

/// `f(x; w)`: relu MLP producing class logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMlp {
    net: Mlp,
}

impl ClassifierMlp {
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.last().copied().unwrap_or(0) < 2 {
            return Err(Error::Config("classifier needs at least 2 output classes".into()));
        }
        Ok(Self {
            net: Mlp::init(sizes, seed, rng::stream::CLASSIFIER_INIT)?,
        })
    }

    pub fn from_mlp(net: Mlp) -> Self {
        Self { net }
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn params(&self) -> &ParamVector {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        self.net.params_mut()
    }

    pub fn classes(&self) -> usize {
        self.net.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    /// Logits and their softmax.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.predict_with(self.params().values(), x)
    }

    pub fn predict_with(&self, params: &[f64], x: &Tensor) -> Result<(Tensor, Tensor)> {
        let rows = self.check_input(x)?;
        let cache = self.net.forward_with(params, x.data(), rows)?;
        let logits = Tensor::matrix(rows, self.classes(), cache.output().to_vec())?;
        let probs = layers::softmax_forward(&logits);
        Ok((logits, probs))
    }

    /// Mean soft-target cross-entropy and its gradient w.r.t. the parameters.
    pub fn loss_grad(&self, x: &Tensor, target: &Tensor) -> Result<(f64, Vec<f64>)> {
        self.loss_grad_with(self.params().values(), x, target)
    }

    pub fn loss_grad_with(&self, params: &[f64], x: &Tensor, target: &Tensor) -> Result<(f64, Vec<f64>)> {
        let rows = self.check_input(x)?;
        let cache = self.net.forward_with(params, x.data(), rows)?;
        let logits = Tensor::matrix(rows, self.classes(), cache.output().to_vec())?;
        let (loss, dlogits) = layers::cross_entropy_soft(&logits, target)?;
        Ok((loss, self.net.backward_with(params, &cache, dlogits.data())))
    }

    /// Same as [`loss_grad`](Self::loss_grad) but the targets are built from
    /// the softmax of the forward pass (treated as a constant).
    pub fn loss_grad_from_probs(
        &self,
        x: &Tensor,
        make_target: impl FnOnce(&Tensor) -> Result<Tensor>,
    ) -> Result<(f64, Vec<f64>, Tensor)> {
        let params = self.params().values();
        let rows = self.check_input(x)?;
        let cache = self.net.forward_with(params, x.data(), rows)?;
        let logits = Tensor::matrix(rows, self.classes(), cache.output().to_vec())?;
        let probs = layers::softmax_forward(&logits);
        let target = make_target(&probs)?;
        let (loss, dlogits) = layers::cross_entropy_soft(&logits, &target)?;
        Ok((loss, self.net.backward_with(params, &cache, dlogits.data()), probs))
    }

    /// For one sample, the gradient of `log softmax(f(x; w))[k]` w.r.t. `w`
    /// for every class `k`, plus the softmax itself.
    pub fn per_sample_logprob_grads(&self, x: &[f64]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        if x.len() != self.input_dim() {
            return Err(Error::dim("input", self.input_dim(), x.len()));
        }
        let params = self.params().values();
        let cache = self.net.forward_with(params, x, 1)?;
        let mut p = cache.output().to_vec();
        layers::softmax_in_place(&mut p);
        let c = p.len();
        let grads = (0..c)
            .map(|k| {
                let dlogits: Vec<f64> = (0..c)
                    .map(|j| if j == k { 1.0 - p[j] } else { -p[j] })
                    .collect();
                self.net.backward_with(params, &cache, &dlogits)
            })
            .collect();
        Ok((grads, p))
    }

    fn check_input(&self, x: &Tensor) -> Result<usize> {
        if x.shape().len() != 2 || x.cols() != self.input_dim() {
            return Err(Error::dim(
                "input",
                format!("[_, {}]", self.input_dim()),
                format!("{:?}", x.shape()),
            ));
        }
        Ok(x.rows())
    }
}

/// Hidden width of the coefficient networks.
pub const COEFFICIENT_HIDDEN: usize = 100;

/// Scalar-to-scalar net `1 -> hidden -> 1`, relu hidden, sigmoid output.
/// Initialized with [`Init::FanInUniform`], which keeps the initial sigmoid
/// away from saturation over the usual loss range.
///
/// The output is clamped into the open interval so that a saturated logit
/// never produces exactly 0 or 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientNet {
    net: Mlp,
}

const COEF_FLOOR: f64 = f64::MIN_POSITIVE;
const COEF_CEIL: f64 = 1.0 - f64::EPSILON / 2.0;

impl CoefficientNet {
    pub fn new(hidden: usize, seed: u64, stream: u64) -> Result<Self> {
        Ok(Self {
            net: Mlp::init_with(&[1, hidden, 1], seed, stream, Init::FanInUniform)?,
        })
    }

    pub fn zeros(hidden: usize) -> Result<Self> {
        Ok(Self {
            net: Mlp::zeros(&[1, hidden, 1])?,
        })
    }

    pub fn from_mlp(net: Mlp) -> Result<Self> {
        let s = net.sizes();
        if s.len() != 3 || s[0] != 1 || s[2] != 1 {
            return Err(Error::Config(format!("coefficient net must be 1 -> h -> 1, got {s:?}")));
        }
        Ok(Self { net })
    }

    pub fn mlp(&self) -> &Mlp {
        &self.net
    }

    pub fn params(&self) -> &ParamVector {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamVector {
        self.net.params_mut()
    }

    fn logit(&self, input: f64) -> (ForwardCache, f64) {
        let cache = self
            .net
            .forward_with(self.params().values(), &[input], 1)
            .expect("coefficient net shape is fixed");
        let z = cache.output()[0];
        (cache, z)
    }

    pub fn forward(&self, input: f64) -> f64 {
        sigmoid(self.logit(input).1).clamp(COEF_FLOOR, COEF_CEIL)
    }

    pub fn forward_batch(&self, inputs: &[f64]) -> Vec<f64> {
        let cache = self
            .net
            .forward_with(self.params().values(), inputs, inputs.len())
            .expect("coefficient net shape is fixed");
        cache
            .output()
            .iter()
            .map(|&z| sigmoid(z).clamp(COEF_FLOOR, COEF_CEIL))
            .collect()
    }

    /// Output value and its exact gradient w.r.t. every parameter.
    pub fn param_grad(&self, input: f64) -> (f64, Vec<f64>) {
        let (cache, z) = self.logit(input);
        let s = sigmoid(z);
        let grad = self
            .net
            .backward_with(self.params().values(), &cache, &[s * (1.0 - s)]);
        (s.clamp(COEF_FLOOR, COEF_CEIL), grad)
    }
}
