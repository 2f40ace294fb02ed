//! Dense feed-forward network with a softmax head.
//!
//! Parameters live in a [`ParamSet`], which is also the container used for
//! pseudo-gradients, momentum velocities and parameter deltas. Every
//! computation is batched: a [`ForwardTrace`] holds one row per example and
//! [`Network::backprop_from_delta`] sums the parameter sensitivities of all
//! rows.

use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::distr::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden-layer nonlinearity. The softmax layer is always affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Sigmoid,
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Tanh, Activation::Relu, Activation::Sigmoid];

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
        }
    }

    /// Derivative in terms of the pre-activation and the activation output.
    #[inline]
    pub fn derivative(self, pre: f64, post: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - post * post,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => post * (1.0 - post),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::InvalidConfig(format!("unknown activation '{other}'"))),
        }
    }
}

/// Weight initialization scheme.
///
/// `GlorotUniform` draws hidden weights from U(-r, r) with
/// r = sqrt(6 / (fan_in + fan_out)) and zeroes the softmax layer.
/// `Uniform` draws every weight matrix, the softmax layer included, from
/// U(low, high). Biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum InitScheme {
    GlorotUniform,
    Uniform { low: f64, high: f64 },
    Zeros,
}

/// Weights (out × in, row-major) and bias of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            weights: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.nrows()
    }
}

/// Identifies one scalar parameter of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ParamId {
    Weight { layer: usize, row: usize, col: usize },
    Bias { layer: usize, row: usize },
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::Weight { layer, row, col } => write!(f, "layer{layer}.w[{row},{col}]"),
            ParamId::Bias { layer, row } => write!(f, "layer{layer}.b[{row}]"),
        }
    }
}

/// A gradient-shaped collection of per-layer weights and biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    layers: Vec<Dense>,
}

impl ParamSet {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.outputs() {
                return Err(Error::shape(
                    format!("layer {l} bias of length {}", layer.outputs()),
                    layer.bias.len(),
                ));
            }
        }
        Ok(ParamSet {
            layers: layers
                .into_iter()
                .map(|d| Dense {
                    weights: d.weights.as_standard_layout().into_owned(),
                    bias: d.bias,
                })
                .collect(),
        })
    }

    pub fn zeros_like(other: &ParamSet) -> Self {
        ParamSet {
            layers: other
                .layers
                .iter()
                .map(|d| Dense::zeros(d.inputs(), d.outputs()))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.layers
            .iter()
            .map(|d| d.weights.len() + d.bias.len())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.dim() == b.weights.dim() && a.bias.len() == b.bias.len())
    }

    pub(crate) fn check_congruent(&self, other: &ParamSet) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(self.shape_string(), other.shape_string()))
        }
    }

    fn shape_string(&self) -> String {
        let dims: Vec<String> = self
            .layers
            .iter()
            .map(|d| format!("{}x{}", d.outputs(), d.inputs()))
            .collect();
        format!("[{}]", dims.join(", "))
    }

    /// Iterates over every scalar: per layer, weights row-major then bias.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|d| d.weights.iter().chain(d.bias.iter()).copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|d| d.weights.iter_mut().chain(d.bias.iter_mut()))
    }

    /// Identifiers in the same order as [`ParamSet::values`].
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::with_capacity(self.len());
        for (layer, d) in self.layers.iter().enumerate() {
            for row in 0..d.outputs() {
                for col in 0..d.inputs() {
                    ids.push(ParamId::Weight { layer, row, col });
                }
            }
            for row in 0..d.outputs() {
                ids.push(ParamId::Bias { layer, row });
            }
        }
        ids
    }

    pub fn get(&self, id: ParamId) -> f64 {
        match id {
            ParamId::Weight { layer, row, col } => self.layers[layer].weights[[row, col]],
            ParamId::Bias { layer, row } => self.layers[layer].bias[row],
        }
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut f64 {
        match id {
            ParamId::Weight { layer, row, col } => &mut self.layers[layer].weights[[row, col]],
            ParamId::Bias { layer, row } => &mut self.layers[layer].bias[row],
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.values().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.values().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    pub fn scale(&mut self, factor: f64) {
        for d in &mut self.layers {
            d.weights.mapv_inplace(|v| v * factor);
            d.bias.mapv_inplace(|v| v * factor);
        }
    }

    /// `self += alpha * other`.
    pub fn scaled_add(&mut self, alpha: f64, other: &ParamSet) -> Result<()> {
        self.check_congruent(other)?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.scaled_add(alpha, &b.weights);
            a.bias.scaled_add(alpha, &b.bias);
        }
        Ok(())
    }
}

/// Intermediate values of a batched forward pass, one row per example.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Array2<f64>,
    /// Pre-activations of the hidden layers.
    pub pre_activations: Vec<Array2<f64>>,
    /// Outputs of the hidden layers (`h` values).
    pub activations: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
    pub probabilities: Array2<f64>,
}

impl ForwardTrace {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }

    /// Probability vector of example `row`.
    pub fn probabilities_of(&self, row: usize) -> &[f64] {
        self.probabilities
            .row(row)
            .to_slice()
            .expect("probabilities are stored in standard layout")
    }
}

/// Numerically stable softmax with max-subtraction.
pub fn stable_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "softmax needs at least 2 logits, got {}",
            z.len()
        )));
    }
    if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite logit {bad}")));
    }
    let mut out = z.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Overwrites finite logits with their softmax probabilities.
#[inline]
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        // exp(0) is exactly 1.
        *v = if *v == max { 1.0 } else { (*v - max).exp() };
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest value, ties resolved toward the lowest index.
#[inline]
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = j;
        }
    }
    best
}

/// Dense feed-forward network whose last layer feeds a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    params: ParamSet,
    activation: Activation,
}

impl Network {
    pub fn new(params: ParamSet, activation: Activation) -> Result<Self> {
        let layers = params.layers();
        if layers.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[1].inputs() != pair[0].outputs() {
                return Err(Error::shape(
                    format!("layer {} input width {}", l + 1, pair[0].outputs()),
                    pair[1].inputs(),
                ));
            }
        }
        if layers.iter().any(|d| d.inputs() == 0 || d.outputs() == 0) {
            return Err(Error::InvalidConfig("layer widths must be positive".into()));
        }
        let n_classes = layers[layers.len() - 1].outputs();
        if n_classes < 2 {
            return Err(Error::InvalidConfig(format!(
                "softmax head needs at least 2 classes, got {n_classes}"
            )));
        }
        if !params.is_finite() {
            return Err(Error::InvalidInput("network parameters must be finite".into()));
        }
        Ok(Network { params, activation })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Mutable access for optimizers. Callers keep the parameters finite.
    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.params.layers()[0].inputs()
    }

    pub fn n_classes(&self) -> usize {
        self.params.layers().last().map(Dense::outputs).unwrap_or(0)
    }

    /// `[input, hidden..., n_classes]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.params.layers().iter().map(Dense::outputs));
        sizes
    }

    /// Forward pass for a single example.
    pub fn forward(&self, x: &[f64]) -> Result<ForwardTrace> {
        let input = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|_| Error::shape(self.input_dim(), x.len()))?;
        self.forward_batch(input)
    }

    /// Forward pass over a batch laid out one example per row.
    pub fn forward_batch(&self, inputs: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::shape(
                format!("input width {}", self.input_dim()),
                inputs.ncols(),
            ));
        }
        let layers = self.params.layers();
        let hidden = layers.len() - 1;
        let mut pre_activations = Vec::with_capacity(hidden);
        let mut activations: Vec<Array2<f64>> = Vec::with_capacity(hidden);
        for layer in &layers[..hidden] {
            let prev = activations.last().map(|a| a.view()).unwrap_or(inputs);
            let pre = affine(prev, layer);
            let act = pre.mapv(|v| self.activation.apply(v));
            pre_activations.push(pre);
            activations.push(act);
        }
        let last = activations.last().map(|a| a.view()).unwrap_or(inputs);
        let logits = affine(last, &layers[hidden]);
        let mut probabilities = logits.clone();
        let classes = probabilities.ncols();
        for row in probabilities
            .as_slice_mut()
            .expect("standard layout")
            .chunks_exact_mut(classes)
        {
            softmax_in_place(row);
        }
        Ok(ForwardTrace {
            input: inputs.to_owned(),
            pre_activations,
            activations,
            logits,
            probabilities,
        })
    }

    /// Most probable class, read off the logits; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let input = ArrayView2::from_shape((1, x.len()), x)
            .map_err(|_| Error::shape(self.input_dim(), x.len()))?;
        Ok(argmax(self.logits(input)?.row(0).as_slice().expect("standard layout")))
    }

    /// Rows whose predicted class differs from the label.
    pub fn count_errors(&self, inputs: ArrayView2<'_, f64>, labels: &[usize]) -> Result<usize> {
        if labels.len() != inputs.nrows() {
            return Err(Error::shape(format!("{} labels", inputs.nrows()), labels.len()));
        }
        let layers = self.params.layers();
        if layers.len() > 1 {
            let logits = self.logits(inputs)?;
            return Ok(logits
                .rows()
                .into_iter()
                .zip(labels)
                .filter(|(z, &y)| argmax(z.as_slice().expect("standard layout")) != y)
                .count());
        }
        let fan_in = self.input_dim();
        if inputs.ncols() != fan_in {
            return Err(Error::shape(format!("input width {fan_in}"), inputs.ncols()));
        }
        let weights = layers[0].weights.as_standard_layout();
        let w = weights.as_slice().expect("standard layout");
        let b = layers[0].bias.as_slice().expect("contiguous bias");
        let inputs = inputs.as_standard_layout();
        let xs = inputs.as_slice().expect("standard layout");
        Ok(match (fan_in, self.n_classes()) {
            (1, 2) => count_linear_errors::<1, 2>(w, b, xs, labels, 1, 2),
            (f, c) => count_linear_errors::<0, 0>(w, b, xs, labels, f, c),
        })
    }

    /// Logits only, without the softmax or a trace.
    pub fn logits(&self, inputs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if inputs.ncols() != self.input_dim() {
            return Err(Error::shape(
                format!("input width {}", self.input_dim()),
                inputs.ncols(),
            ));
        }
        let layers = self.params.layers();
        let hidden = layers.len() - 1;
        let mut current: Option<Array2<f64>> = None;
        for layer in &layers[..hidden] {
            let prev = current.as_ref().map(|a| a.view()).unwrap_or(inputs);
            let mut a = affine(prev, layer);
            a.mapv_inplace(|v| self.activation.apply(v));
            current = Some(a);
        }
        let last = current.as_ref().map(|a| a.view()).unwrap_or(inputs);
        Ok(affine(last, &layers[hidden]))
    }

    /// Reverse accumulation seeded with `delta` in place of dℓ/dz.
    ///
    /// Returns g with g(θ) = Σ_rows Σ_j (∂z_j/∂θ) · delta_j for every
    /// parameter θ.
    pub fn backprop_from_delta(
        &self,
        trace: &ForwardTrace,
        delta: ArrayView2<'_, f64>,
    ) -> Result<ParamSet> {
        let layers = self.params.layers();
        let hidden = layers.len() - 1;
        if delta.dim() != trace.logits.dim() {
            return Err(Error::shape(
                format!("delta {:?}", trace.logits.dim()),
                format!("{:?}", delta.dim()),
            ));
        }
        if trace.activations.len() != hidden || trace.input.ncols() != self.input_dim() {
            return Err(Error::shape(
                format!("trace for {:?}", self.layer_sizes()),
                "trace from a different network",
            ));
        }
        let mut grads: Vec<Dense> = Vec::with_capacity(layers.len());
        let mut current = delta.to_owned();
        for l in (0..layers.len()).rev() {
            let below = if l == 0 {
                trace.input.view()
            } else {
                trace.activations[l - 1].view()
            };
            let weights = current.t().dot(&below);
            let bias = current.sum_axis(Axis(0));
            if l > 0 {
                let mut back = current.dot(&layers[l].weights);
                let activation = self.activation;
                Zip::from(&mut back)
                    .and(&trace.pre_activations[l - 1])
                    .and(&trace.activations[l - 1])
                    .for_each(|d, &pre, &post| *d *= activation.derivative(pre, post));
                current = back;
            }
            grads.push(Dense { weights, bias });
        }
        grads.reverse();
        Ok(ParamSet { layers: grads })
    }

    pub fn save_checkpoint(&self, path: &Path, seed: Option<u64>) -> Result<()> {
        let json = serde_json::to_string_pretty(&Checkpoint::from_network(self, seed))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Network, Option<u64>)> {
        let text = std::fs::read_to_string(path)?;
        let checkpoint: Checkpoint = serde_json::from_str(&text)?;
        checkpoint.into_network()
    }
}

/// Streaming argmax count for a network without hidden layers. Nonzero
/// `F`/`C` fix the shape at compile time.
#[inline(always)]
fn count_linear_errors<const F: usize, const C: usize>(
    w: &[f64],
    b: &[f64],
    xs: &[f64],
    labels: &[usize],
    fan_in: usize,
    classes: usize,
) -> usize {
    let fan_in = if F > 0 { F } else { fan_in };
    let classes = if C > 0 { C } else { classes };
    let mut wrong = 0;
    for (x, &y) in xs.chunks_exact(fan_in).zip(labels) {
        let mut best = 0;
        let mut best_z = f64::NEG_INFINITY;
        for j in 0..classes {
            let mut acc = 0.0;
            for l in 0..fan_in {
                acc += x[l] * w[j * fan_in + l];
            }
            let z = acc + b[j];
            // Strict comparison keeps the lowest index on ties, as in argmax.
            if j == 0 || z > best_z {
                best = j;
                best_z = z;
            }
        }
        wrong += usize::from(best != y);
    }
    wrong
}

/// Below this fan-in a direct loop beats the blocked matrix product.
const DIRECT_FAN_IN: usize = 8;

fn affine(inputs: ArrayView2<'_, f64>, layer: &Dense) -> Array2<f64> {
    let (rows, fan_in) = inputs.dim();
    let outputs = layer.outputs();
    if fan_in <= DIRECT_FAN_IN {
        let w = layer.weights.as_standard_layout();
        let w = w.as_slice().expect("standard layout");
        let b = layer.bias.as_slice().expect("contiguous bias");
        let inputs = inputs.as_standard_layout();
        let xs = inputs.as_slice().expect("standard layout");
        let mut out = vec![0.0; rows * outputs];
        for i in 0..rows {
            let x = &xs[i * fan_in..(i + 1) * fan_in];
            let o = &mut out[i * outputs..(i + 1) * outputs];
            for j in 0..outputs {
                let wj = &w[j * fan_in..(j + 1) * fan_in];
                let mut acc = 0.0;
                for l in 0..fan_in {
                    acc += x[l] * wj[l];
                }
                o[j] = acc + b[j];
            }
        }
        return Array2::from_shape_vec((rows, outputs), out).expect("rows × outputs");
    }
    let mut out = inputs.dot(&layer.weights.t());
    if !out.is_standard_layout() {
        out = out.as_standard_layout().into_owned();
    }
    out += &layer.bias;
    out
}

/// Builds a network for `layer_sizes = [input, hidden..., n_classes]`.
pub fn init_network<R: Rng + ?Sized>(
    layer_sizes: &[usize],
    activation: Activation,
    scheme: InitScheme,
    rng: &mut R,
) -> Result<Network> {
    if layer_sizes.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "layer sizes need an input and an output width, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "layer widths must be positive: {layer_sizes:?}"
        )));
    }
    let n_layers = layer_sizes.len() - 1;
    let mut layers = Vec::with_capacity(n_layers);
    for (l, pair) in layer_sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let is_softmax = l + 1 == n_layers;
        let mut dense = Dense::zeros(fan_in, fan_out);
        let range = match scheme {
            InitScheme::Zeros => None,
            InitScheme::GlorotUniform if is_softmax => None,
            InitScheme::GlorotUniform => {
                let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Some((-r, r))
            }
            InitScheme::Uniform { low, high } => {
                if !(low < high) || !low.is_finite() || !high.is_finite() {
                    return Err(Error::InvalidConfig(format!(
                        "uniform init needs finite low < high, got ({low}, {high})"
                    )));
                }
                Some((low, high))
            }
        };
        if let Some((low, high)) = range {
            let dist = Uniform::new(low, high)
                .map_err(|e| Error::InvalidConfig(format!("uniform init: {e}")))?;
            dense.weights.iter_mut().for_each(|w| *w = dist.sample(rng));
        }
        layers.push(dense);
    }
    Network::new(ParamSet { layers }, activation)
}

const CHECKPOINT_VERSION: u32 = 1;

/// On-disk JSON form of a network. Floats are written in shortest
/// round-trip decimal form, so loading restores every bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    /// Row-major weights, one vector per layer.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub seed: Option<u64>,
}

impl Checkpoint {
    pub fn from_network(net: &Network, seed: Option<u64>) -> Self {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            layer_sizes: net.layer_sizes(),
            activation: net.activation(),
            weights: net
                .params()
                .layers()
                .iter()
                .map(|d| d.weights.iter().copied().collect())
                .collect(),
            biases: net
                .params()
                .layers()
                .iter()
                .map(|d| d.bias.to_vec())
                .collect(),
            seed,
        }
    }

    pub fn into_network(self) -> Result<(Network, Option<u64>)> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "format_version",
                format!("unsupported version {}", self.format_version),
            ));
        }
        let n_layers = self.layer_sizes.len().saturating_sub(1);
        if n_layers == 0 {
            return Err(Error::format("layer_sizes", "needs at least two entries"));
        }
        if self.weights.len() != n_layers || self.biases.len() != n_layers {
            return Err(Error::format(
                "weights",
                format!("expected {n_layers} layers"),
            ));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (l, pair) in self.layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weights = Array2::from_shape_vec((fan_out, fan_in), self.weights[l].clone())
                .map_err(|_| {
                    Error::format(
                        "weights",
                        format!("layer {l} needs {} values", fan_in * fan_out),
                    )
                })?;
            if self.biases[l].len() != fan_out {
                return Err(Error::format(
                    "biases",
                    format!("layer {l} needs {fan_out} values"),
                ));
            }
            layers.push(Dense {
                weights,
                bias: Array1::from(self.biases[l].clone()),
            });
        }
        let net = Network::new(ParamSet::new(layers)?, self.activation)?;
        Ok((net, self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn softmax_examples() {
        let p = stable_softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = stable_softmax(&[1000.0, 1000.0, 1000.0]).unwrap();
        for v in &p {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        // e^{j} / (e + e^2 + e^3) evaluated at high precision.
        let p = stable_softmax(&[1.0, 2.0, 3.0]).unwrap();
        let expected = [0.090_030_573_170_380_46, 0.244_728_471_054_797_64, 0.665_240_955_774_821_9];
        for (a, b) in p.iter().zip(expected) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(
            stable_softmax(&[1.0, f64::NAN]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            stable_softmax(&[f64::INFINITY, 0.0]),
            Err(Error::InvalidInput(_))
        ));
        assert!(stable_softmax(&[1.0]).is_err());
    }

    #[test]
    fn init_zeros_and_empty() {
        let net = init_network(&[4, 3, 2], Activation::Tanh, InitScheme::Zeros, &mut rng(1)).unwrap();
        assert!(net.params().values().all(|v| v == 0.0));
        assert!(matches!(
            init_network(&[], Activation::Tanh, InitScheme::Zeros, &mut rng(1)),
            Err(Error::InvalidConfig(_))
        ));
        assert!(init_network(&[3, 0, 2], Activation::Tanh, InitScheme::Zeros, &mut rng(1)).is_err());
    }

    #[test]
    fn init_toy_uniform() {
        let scheme = InitScheme::Uniform { low: -0.1, high: 0.1 };
        let net = init_network(&[1, 2], Activation::Tanh, scheme, &mut rng(7)).unwrap();
        let layer = &net.params().layers()[0];
        assert!(layer.weights.iter().all(|w| *w > -0.1 && *w < 0.1));
        assert!(layer.weights.iter().any(|w| *w != 0.0));
        assert!(layer.bias.iter().all(|b| *b == 0.0));
    }

    #[test]
    fn init_glorot_bounds_and_zero_softmax() {
        let net =
            init_network(&[3, 3, 3, 2], Activation::Tanh, InitScheme::GlorotUniform, &mut rng(3))
                .unwrap();
        let layers = net.params().layers();
        for hidden in &layers[..2] {
            // sqrt(6 / (3 + 3)) = 1
            assert!(hidden.weights.iter().all(|w| w.abs() <= 1.0));
            assert!(hidden.weights.iter().any(|w| *w != 0.0));
            assert!(hidden.bias.iter().all(|b| *b == 0.0));
        }
        assert!(layers[2].weights.iter().all(|w| *w == 0.0));
        assert!(layers[2].bias.iter().all(|b| *b == 0.0));

        let again =
            init_network(&[3, 3, 3, 2], Activation::Tanh, InitScheme::GlorotUniform, &mut rng(3))
                .unwrap();
        assert_eq!(net, again);
    }

    #[test]
    fn forward_zero_network_is_uniform() {
        let net = init_network(&[5, 4, 10], Activation::Relu, InitScheme::Zeros, &mut rng(0)).unwrap();
        let trace = net.forward(&[0.3, -1.0, 2.0, 0.0, 7.0]).unwrap();
        for p in trace.probabilities_of(0) {
            assert_abs_diff_eq!(*p, 0.1, epsilon = 1e-15);
        }
    }

    #[test]
    fn forward_two_class_logistic() {
        let layer = Dense {
            weights: array![[1.0], [0.0]],
            bias: array![0.0, 0.0],
        };
        let net = Network::new(ParamSet::new(vec![layer]).unwrap(), Activation::Tanh).unwrap();
        let trace = net.forward(&[0.5]).unwrap();
        assert_eq!(trace.logits.row(0).to_vec(), vec![0.5, 0.0]);
        let sigma = 1.0 / (1.0 + (-0.5f64).exp());
        let p = trace.probabilities_of(0);
        assert_abs_diff_eq!(p[0], sigma, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 1.0 - sigma, epsilon = 1e-15);
    }

    #[test]
    fn forward_toy_logits_are_affine() {
        let layer = Dense {
            weights: array![[0.25], [-1.5]],
            bias: array![0.125, 0.5],
        };
        let net = Network::new(ParamSet::new(vec![layer]).unwrap(), Activation::Tanh).unwrap();
        let x = 0.75;
        let trace = net.forward(&[x]).unwrap();
        assert_eq!(trace.logits[[0, 0]], 0.25 * x + 0.125);
        assert_eq!(trace.logits[[0, 1]], -1.5 * x + 0.5);
        assert!(net.forward(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn predict_tie_break() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.9]), 1);
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
        let net = init_network(&[2, 3], Activation::Tanh, InitScheme::Zeros, &mut rng(0)).unwrap();
        assert_eq!(net.predict(&[1.0, 1.0]).unwrap(), 0);
    }

    #[test]
    fn backprop_zero_delta_and_bias_components() {
        let net =
            init_network(&[3, 4, 3], Activation::Tanh, InitScheme::Uniform { low: -1.0, high: 1.0 }, &mut rng(5))
                .unwrap();
        let trace = net.forward(&[0.2, -0.4, 0.9]).unwrap();
        let zero = net.backprop_from_delta(&trace, Array2::zeros((1, 3)).view()).unwrap();
        assert!(zero.values().all(|v| v == 0.0));

        let delta = array![[0.3, -0.5, 0.2]];
        let g = net.backprop_from_delta(&trace, delta.view()).unwrap();
        assert_eq!(g.layers()[1].bias.to_vec(), vec![0.3, -0.5, 0.2]);
        assert!(net.backprop_from_delta(&trace, array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn backprop_equal_outgoing_weights_stationary() {
        let mut net =
            init_network(&[3, 4, 3], Activation::Tanh, InitScheme::Uniform { low: -1.0, high: 1.0 }, &mut rng(9))
                .unwrap();
        for j in 0..3 {
            net.params_mut().layers_mut()[1].weights[[j, 1]] = 0.8;
        }
        let trace = net.forward(&[0.5, -0.2, 0.7]).unwrap();
        let delta = array![[-0.6, 0.35, 0.25]];
        let g = net.backprop_from_delta(&trace, delta.view()).unwrap();
        for l in 0..3 {
            assert!(g.layers()[0].weights[[1, l]].abs() <= 1e-12);
        }
        assert!(g.layers()[0].weights[[0, 0]].abs() > 1e-6);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let net = init_network(&[4, 5, 3], Activation::Sigmoid, InitScheme::Uniform { low: -1.0, high: 1.0 }, &mut rng(11))
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        net.save_checkpoint(&path, Some(11)).unwrap();
        let (loaded, seed) = Network::load_checkpoint(&path).unwrap();
        assert_eq!(seed, Some(11));
        assert_eq!(loaded.activation(), Activation::Sigmoid);
        let a: Vec<u64> = net.params().values().map(f64::to_bits).collect();
        let b: Vec<u64> = loaded.params().values().map(f64::to_bits).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_rejects_bad_shapes() {
        let net = init_network(&[2, 2], Activation::Tanh, InitScheme::Zeros, &mut rng(0)).unwrap();
        let mut cp = Checkpoint::from_network(&net, None);
        cp.weights[0].pop();
        assert!(matches!(cp.into_network(), Err(Error::Format { .. })));
    }

    #[test]
    fn network_rejects_broken_chain() {
        let layers = vec![Dense::zeros(3, 4), Dense::zeros(5, 2)];
        assert!(matches!(
            Network::new(ParamSet::new(layers).unwrap(), Activation::Tanh),
            Err(Error::Shape { .. })
        ));
    }
}
