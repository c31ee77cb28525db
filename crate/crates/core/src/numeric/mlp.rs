//! Dense feed-forward networks with hand-written backpropagation.
//!
//! Weights are stored row-major with shape `(outputs, inputs)`. Batched
//! inputs are [`Matrix`] values with one sample per row. Gradients returned
//! by [`Mlp::backward`] are sums over the batch; callers scale them.
//!
//! Initialization draws every weight and bias from
//! `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, layer by layer, weights before
//! biases, from a ChaCha8 stream seeded with the caller's seed.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::{Matrix, Rng};
use crate::error::{check_width, Error, Result};

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
            Activation::Identity => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Relu),
            2 => Ok(Activation::Identity),
            t => Err(Error::Format(format!("unknown activation tag {t}"))),
        }
    }
}

/// Layer widths plus activations: `widths[0]` is the input width and each
/// following entry adds one dense layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl MlpSpec {
    pub fn new(widths: &[usize], hidden: Activation, output: Activation) -> Self {
        Self {
            widths: widths.to_vec(),
            hidden,
            output,
        }
    }

    /// `input -> hidden -> hidden -> output` with tanh hidden units and a
    /// linear output, the shape used for every learned component.
    pub fn two_hidden(input: usize, hidden: usize, output: usize) -> Self {
        Self::new(
            &[input, hidden, hidden, output],
            Activation::Tanh,
            Activation::Identity,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::Config(
                "layer spec needs an input width and at least one layer".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        Ok(())
    }

    fn activation(&self, layer: usize) -> Activation {
        if layer + 2 == self.widths.len() {
            self.output
        } else {
            self.hidden
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    inputs: usize,
    outputs: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl Layer {
    pub fn new(
        inputs: usize,
        outputs: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        check_width("layer weights", inputs * outputs, weights.len())?;
        check_width("layer bias", outputs, bias.len())?;
        if inputs == 0 || outputs == 0 {
            return Err(Error::Config("layer widths must be >= 1".into()));
        }
        Ok(Self {
            inputs,
            outputs,
            weights,
            bias,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    fn forward_into(&self, x: &Matrix, out: &mut Matrix) {
        for b in 0..x.rows() {
            let xr = x.row(b);
            let yr = out.row_mut(b);
            for (o, y) in yr.iter_mut().enumerate() {
                let w = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                let mut acc = self.bias[o];
                for (wi, xi) in w.iter().zip(xr) {
                    acc += wi * xi;
                }
                *y = self.activation.apply(acc);
            }
        }
    }
}

/// Per-layer gradients, same shapes as the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub(crate) weights: Vec<Vec<f64>>,
    pub(crate) bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: net.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn scale(&mut self, k: f64) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            v.iter_mut().for_each(|g| *g *= k);
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        check_width("gradient layers", self.weights.len(), other.weights.len())?;
        for (a, b) in self
            .weights
            .iter_mut()
            .zip(&other.weights)
            .chain(self.bias.iter_mut().zip(&other.bias))
        {
            check_width("gradient add", a.len(), b.len())?;
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        Ok(())
    }

    /// Flattened in parameter order (per layer: weights, then bias).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.bias) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        self.weights
            .iter()
            .chain(&self.bias)
            .all(|v| v.iter().all(|&g| g == 0.0))
    }

    pub(crate) fn layer_count(&self) -> usize {
        self.weights.len()
    }
}

/// Activations recorded by a forward pass, consumed by [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    net_id: u64,
    version: u64,
    input: Matrix,
    outputs: Vec<Matrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        self.outputs.last().expect("network has at least one layer")
    }

    pub fn into_output(mut self) -> Matrix {
        self.outputs.pop().expect("network has at least one layer")
    }
}

#[derive(Debug)]
pub struct Mlp {
    layers: Vec<Layer>,
    id: u64,
    version: u64,
}

impl Clone for Mlp {
    fn clone(&self) -> Self {
        Self {
            layers: self.layers.clone(),
            id: fresh_id(),
            version: self.version,
        }
    }
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
    }
}

impl Mlp {
    /// Seeded initialization; identical `(spec, seed)` gives bit-identical
    /// parameters.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self> {
        Self::init_with(spec, &mut Rng::seed_from(seed))
    }

    pub fn init_with(spec: &MlpSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights = (0..fan_in * fan_out)
                    .map(|_| rng.uniform(-bound, bound))
                    .collect();
                let bias = (0..fan_out).map(|_| rng.uniform(-bound, bound)).collect();
                Layer::new(fan_in, fan_out, weights, bias, spec.activation(i))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    /// All weights and biases zero.
    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                Layer::new(
                    w[0],
                    w[1],
                    vec![0.0; w[0] * w[1]],
                    vec![0.0; w[1]],
                    spec.activation(i),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            check_width("layer chaining", pair[0].outputs, pair[1].inputs)?;
        }
        Ok(Self {
            layers,
            id: fresh_id(),
            version: 0,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    /// Bumped whenever parameters change; caches from older versions are
    /// rejected by `backward`.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn spec(&self) -> MlpSpec {
        let mut widths = vec![self.input_dim()];
        widths.extend(self.layers.iter().map(|l| l.outputs));
        let output = self.layers[self.layers.len() - 1].activation;
        let hidden = if self.layers.len() > 1 {
            self.layers[0].activation
        } else {
            output
        };
        MlpSpec {
            widths,
            hidden,
            output,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_width("flat parameters", self.num_params(), flat.len())?;
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
        self.version += 1;
        Ok(())
    }

    /// Overwrites parameters with another network's, which must share the
    /// architecture.
    pub fn copy_from(&mut self, other: &Mlp) -> Result<()> {
        self.set_params_flat(&other.params_flat())
    }

    /// Polyak averaging: `self <- (1 - tau) * self + tau * other`.
    pub fn soft_update_from(&mut self, other: &Mlp, tau: f64) -> Result<()> {
        check_width("soft update", self.num_params(), other.num_params())?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weights.iter_mut().zip(&b.weights) {
                *x = (1.0 - tau) * *x + tau * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x = (1.0 - tau) * *x + tau * y;
            }
        }
        self.version += 1;
        Ok(())
    }

    /// Zeroes the final layer so the network outputs exactly zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.len() - 1;
        self.layers[last].weights.iter_mut().for_each(|w| *w = 0.0);
        self.layers[last].bias.iter_mut().for_each(|b| *b = 0.0);
        self.version += 1;
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    /// Single-sample forward pass.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_width("network input", self.input_dim(), x.len())?;
        let mut cur = Matrix::row_vector(x);
        for l in &self.layers {
            let mut next = Matrix::zeros(1, l.outputs);
            l.forward_into(&cur, &mut next);
            cur = next;
        }
        Ok(cur.into_vec())
    }

    /// Batched forward pass without keeping intermediate activations.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        check_width("network input", self.input_dim(), x.cols())?;
        let mut cur: Option<Matrix> = None;
        for l in &self.layers {
            let src = cur.as_ref().unwrap_or(x);
            let mut next = Matrix::zeros(x.rows(), l.outputs);
            l.forward_into(src, &mut next);
            cur = Some(next);
        }
        Ok(cur.expect("network has at least one layer"))
    }

    /// Batched forward pass recording activations for `backward`.
    pub fn forward_batch(&self, x: &Matrix) -> Result<ForwardCache> {
        check_width("network input", self.input_dim(), x.cols())?;
        let mut outputs: Vec<Matrix> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let src = outputs.last().unwrap_or(x);
            let mut next = Matrix::zeros(x.rows(), l.outputs);
            l.forward_into(src, &mut next);
            outputs.push(next);
        }
        Ok(ForwardCache {
            net_id: self.id,
            version: self.version,
            input: x.clone(),
            outputs,
        })
    }

    /// Reverse pass. Returns batch-summed parameter gradients and the
    /// gradient with respect to the input batch.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix) -> Result<(Gradients, Matrix)> {
        if cache.net_id != self.id || cache.version != self.version {
            return Err(Error::Usage(
                "forward cache does not belong to the current network parameters".into(),
            ));
        }
        check_width("output gradient width", self.output_dim(), grad_out.cols())?;
        check_width("output gradient rows", cache.input.rows(), grad_out.rows())?;
        let rows = grad_out.rows();
        let mut grads = Gradients::zeros_like(self);
        let mut delta = grad_out.clone();
        for li in (0..self.layers.len()).rev() {
            let layer = &self.layers[li];
            let y = &cache.outputs[li];
            let x = if li == 0 {
                &cache.input
            } else {
                &cache.outputs[li - 1]
            };
            for (d, yv) in delta.as_mut_slice().iter_mut().zip(y.as_slice()) {
                *d *= layer.activation.derivative_from_output(*yv);
            }
            let gw = &mut grads.weights[li];
            let gb = &mut grads.bias[li];
            for b in 0..rows {
                let dr = delta.row(b);
                let xr = x.row(b);
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    gb[o] += d;
                    let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                    for (g, xi) in row.iter_mut().zip(xr) {
                        *g += d * xi;
                    }
                }
            }
            let mut prev = Matrix::zeros(rows, layer.inputs);
            for b in 0..rows {
                let dr = delta.row(b);
                let pr = prev.row_mut(b);
                for (o, &d) in dr.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let w = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, wi) in pr.iter_mut().zip(w) {
                        *p += d * wi;
                    }
                }
            }
            delta = prev;
        }
        Ok((grads, delta))
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }
}

impl Layer {
    pub(crate) fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weights, &mut self.bias)
    }
}
