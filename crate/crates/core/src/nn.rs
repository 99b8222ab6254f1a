//! Minimal dense network stack: forward pass, reverse-mode gradients, and the
//! Adam optimizer. Enough for desk-scale generators, discriminators, and
//! evaluation classifiers; no convolutions, no general autodiff.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Numerically stable sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `ln sigmoid(x)` without saturation.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `ln(1 - sigmoid(x))` without saturation.
pub fn log_one_minus_sigmoid(x: f64) -> f64 {
    -softplus(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Softmax,
}

impl Activation {
    fn apply_rowwise(&self, pre: &DMatrix<f64>) -> DMatrix<f64> {
        match *self {
            Activation::Identity => pre.clone(),
            Activation::LeakyRelu(slope) => pre.map(|x| if x >= 0.0 { x } else { slope * x }),
            Activation::Sigmoid => pre.map(sigmoid),
            Activation::Tanh => pre.map(f64::tanh),
            Activation::Softmax => {
                let mut out = pre.clone();
                for mut row in out.row_iter_mut() {
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        total += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= total;
                    }
                }
                out
            }
        }
    }

    /// Upstream gradient through the activation: d(pre) from d(post).
    fn backprop(&self, pre: &DMatrix<f64>, post: &DMatrix<f64>, d_post: &DMatrix<f64>) -> DMatrix<f64> {
        match *self {
            Activation::Identity => d_post.clone(),
            Activation::LeakyRelu(slope) => {
                d_post.zip_map(pre, |g, x| if x >= 0.0 { g } else { slope * g })
            }
            Activation::Sigmoid => d_post.zip_map(post, |g, y| g * y * (1.0 - y)),
            Activation::Tanh => d_post.zip_map(post, |g, y| g * (1.0 - y * y)),
            Activation::Softmax => {
                // Rowwise Jacobian: d_pre_i = y_i (g_i - sum_j g_j y_j).
                let mut out = DMatrix::zeros(d_post.nrows(), d_post.ncols());
                for r in 0..d_post.nrows() {
                    let dot: f64 = (0..d_post.ncols()).map(|c| d_post[(r, c)] * post[(r, c)]).sum();
                    for c in 0..d_post.ncols() {
                        out[(r, c)] = post[(r, c)] * (d_post[(r, c)] - dot);
                    }
                }
                out
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    /// `input_dim x output_dim`.
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

/// Feed-forward network of dense layers. `feature_tap` designates the layer
/// whose post-activation output is exposed as the clamped feature layer; that
/// layer must use a sigmoid so the features read as firing probabilities.
#[derive(Debug, Clone)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
    pub feature_tap: Option<usize>,
}

impl DenseNet {
    pub fn new(layers: Vec<Layer>, feature_tap: Option<usize>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].weights.ncols() != w[1].weights.nrows() {
                return Err(Error::DimMismatch {
                    context: "layer chaining",
                    expected: w[0].weights.ncols(),
                    got: w[1].weights.nrows(),
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.weights.ncols() {
                return Err(Error::DimMismatch {
                    context: "layer bias",
                    expected: l.weights.ncols(),
                    got: l.bias.len(),
                });
            }
        }
        if let Some(t) = feature_tap {
            if t >= layers.len() {
                return Err(Error::InvalidConfig(format!("feature tap {t} out of range")));
            }
            if layers[t].activation != Activation::Sigmoid {
                return Err(Error::InvalidConfig(
                    "feature tap layer must use a sigmoid activation".into(),
                ));
            }
        }
        Ok(Self { layers, feature_tap })
    }

    /// Xavier-initialized network: `dims` chains layer sizes, one activation
    /// per layer, biases zero.
    pub fn xavier(
        dims: &[usize],
        activations: &[Activation],
        feature_tap: Option<usize>,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        if dims.len() < 2 || activations.len() != dims.len() - 1 {
            return Err(Error::InvalidConfig("dims/activations length mismatch".into()));
        }
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| Layer {
                weights: xavier_init(d[0], d[1], rng),
                bias: zero_init(d[1]),
                activation,
            })
            .collect();
        Self::new(layers, feature_tap)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weights.ncols()
    }

    /// Deterministic forward pass over a batch (rows are samples).
    pub fn forward(&self, input: &DMatrix<f64>) -> Result<ForwardCache> {
        if input.ncols() != self.input_dim() {
            return Err(Error::DimMismatch {
                context: "forward input",
                expected: self.input_dim(),
                got: input.ncols(),
            });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let mut z = &x * &layer.weights;
            for mut row in z.row_iter_mut() {
                row += layer.bias.transpose();
            }
            let y = layer.activation.apply_rowwise(&z);
            pre.push(z);
            post.push(y.clone());
            x = y;
        }
        Ok(ForwardCache {
            input: input.clone(),
            pre,
            post,
        })
    }

    /// Reverse-mode gradients from the gradient of a scalar loss with respect
    /// to the network output.
    pub fn backward(&self, cache: &ForwardCache, d_output: &DMatrix<f64>) -> Result<(NetGrads, DMatrix<f64>)> {
        let last = self.layers.len() - 1;
        let d_pre = self.layers[last].activation.backprop(
            &cache.pre[last],
            &cache.post[last],
            d_output,
        );
        self.backward_inner(cache, d_pre)
    }

    /// Like [`backward`](Self::backward) but seeded with the gradient with
    /// respect to the last layer's pre-activation. This is the stable entry
    /// point for sigmoid + cross-entropy and softmax + cross-entropy losses,
    /// where the combined gradient is simply `prediction - target`.
    pub fn backward_from_logits(
        &self,
        cache: &ForwardCache,
        d_last_pre: &DMatrix<f64>,
    ) -> Result<(NetGrads, DMatrix<f64>)> {
        self.backward_inner(cache, d_last_pre.clone())
    }

    fn backward_inner(&self, cache: &ForwardCache, mut d_pre: DMatrix<f64>) -> Result<(NetGrads, DMatrix<f64>)> {
        if cache.pre.len() != self.layers.len() {
            return Err(Error::InvalidConfig("stale forward cache".into()));
        }
        let mut grads = vec![
            LayerGrad {
                d_weights: DMatrix::zeros(0, 0),
                d_bias: DVector::zeros(0),
            };
            self.layers.len()
        ];
        for i in (0..self.layers.len()).rev() {
            let layer_input = if i == 0 { &cache.input } else { &cache.post[i - 1] };
            if d_pre.nrows() != layer_input.nrows() || d_pre.ncols() != self.layers[i].weights.ncols() {
                return Err(Error::DimMismatch {
                    context: "backward gradient",
                    expected: self.layers[i].weights.ncols(),
                    got: d_pre.ncols(),
                });
            }
            grads[i] = LayerGrad {
                d_weights: layer_input.tr_mul(&d_pre),
                d_bias: d_pre.row_sum().transpose(),
            };
            let d_input = &d_pre * self.layers[i].weights.transpose();
            if i > 0 {
                d_pre = self.layers[i - 1].activation.backprop(
                    &cache.pre[i - 1],
                    &cache.post[i - 1],
                    &d_input,
                );
            } else {
                return Ok((NetGrads { layers: grads }, d_input));
            }
        }
        unreachable!()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimMismatch {
                context: "set_params",
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let wn = l.weights.len();
            l.weights.as_mut_slice().copy_from_slice(&flat[offset..offset + wn]);
            offset += wn;
            let bn = l.bias.len();
            l.bias.as_mut_slice().copy_from_slice(&flat[offset..offset + bn]);
            offset += bn;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: DMatrix<f64>,
    pub pre: Vec<DMatrix<f64>>,
    pub post: Vec<DMatrix<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &DMatrix<f64> {
        self.post.last().unwrap()
    }

    /// Pre-activation of the final layer.
    pub fn logits(&self) -> &DMatrix<f64> {
        self.pre.last().unwrap()
    }

    pub fn features(&self, net: &DenseNet) -> Option<&DMatrix<f64>> {
        net.feature_tap.map(|t| &self.post[t])
    }
}

#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub d_weights: DMatrix<f64>,
    pub d_bias: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct NetGrads {
    pub layers: Vec<LayerGrad>,
}

impl NetGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.d_weights.as_slice());
            out.extend_from_slice(l.d_bias.as_slice());
        }
        out
    }

    pub fn add(&mut self, other: &NetGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.d_weights += &b.d_weights;
            a.d_bias += &b.d_bias;
        }
    }
}

/// Xavier-initialized weight matrix: zero-mean Gaussian entries with variance
/// `2 / (fan_in + fan_out)`.
pub fn xavier_init(fan_in: usize, fan_out: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).unwrap();
    DMatrix::from_fn(fan_in, fan_out, |_, _| normal.sample(rng))
}

pub fn zero_init(n: usize) -> DVector<f64> {
    DVector::zeros(n)
}

/// Bias-corrected Adam state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            step: 0,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    /// One Adam update in place.
    pub fn apply(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::DimMismatch {
                context: "adam_step",
                expected: self.first_moment.len(),
                got: grads.len(),
            });
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            self.second_moment[i] = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.first_moment[i] / c1;
            let v_hat = self.second_moment[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Uniform per-sample label smoothing in `[lo, hi]`.
pub fn smoothed_targets(count: usize, lo: f64, hi: f64, rng: &mut ChaCha12Rng) -> Vec<f64> {
    (0..count).map(|_| rng.random_range(lo..=hi)).collect()
}
