//! Dense feed-forward networks with hand-written reverse-mode gradients,
//! the losses used for training, and the Adam optimizer.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Clip applied to probabilities before taking logarithms.
pub const PROB_CLIP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// Output nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Identity,
    Softmax,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Mean over the batch of the summed squared error.
    SquaredError,
    /// Mean over the batch of the (binary or categorical) cross entropy.
    CrossEntropy,
}

/// Supervision for a batch.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    Values(ArrayView2<'a, f64>),
    Classes(&'a [usize]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MlpRepr", into = "MlpRepr")]
pub struct Mlp {
    layer_sizes: Vec<usize>,
    activation: Activation,
    head: Head,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct MlpRepr {
    layer_sizes: Vec<usize>,
    activation: Activation,
    head: Head,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    seed: u64,
}

impl TryFrom<MlpRepr> for Mlp {
    type Error = Error;

    fn try_from(r: MlpRepr) -> Result<Self> {
        let mut mlp = Mlp::zeros(r.layer_sizes, r.activation, r.head)?;
        mlp.seed = r.seed;
        if r.weights.len() != mlp.weights.len() || r.biases.len() != mlp.biases.len() {
            return Err(Error::shape("checkpoint layer count mismatch"));
        }
        for (w, flat) in mlp.weights.iter_mut().zip(r.weights) {
            *w = Array2::from_shape_vec(w.dim(), flat).map_err(|e| Error::shape(e.to_string()))?;
        }
        for (b, flat) in mlp.biases.iter_mut().zip(r.biases) {
            if flat.len() != b.len() {
                return Err(Error::shape("checkpoint bias length mismatch"));
            }
            *b = Array1::from(flat);
        }
        Ok(mlp)
    }
}

impl From<Mlp> for MlpRepr {
    fn from(m: Mlp) -> Self {
        MlpRepr {
            weights: m.weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: m.biases.iter().map(|b| b.to_vec()).collect(),
            layer_sizes: m.layer_sizes,
            activation: m.activation,
            head: m.head,
            seed: m.seed,
        }
    }
}

/// Per-parameter gradients of the mean batch loss, plus the gradient with
/// respect to each input row.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub loss: f64,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub inputs: Array2<f64>,
}

impl Gradients {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }
}

impl Mlp {
    pub fn zeros(layer_sizes: Vec<usize>, activation: Activation, head: Head) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::Parameter(format!("invalid layer sizes {layer_sizes:?}")));
        }
        if head == Head::Sigmoid && *layer_sizes.last().unwrap() != 1 {
            return Err(Error::Parameter("sigmoid head needs a single output".into()));
        }
        let weights = layer_sizes.windows(2).map(|w| Array2::zeros((w[1], w[0]))).collect();
        let biases = layer_sizes[1..].iter().map(|&n| Array1::zeros(n)).collect();
        Ok(Mlp {
            layer_sizes,
            activation,
            head,
            weights,
            biases,
            seed: 0,
        })
    }

    /// Glorot-uniform weights, zero biases, drawn from the `init` stream.
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, head: Head, seed: u64) -> Result<Self> {
        let mut mlp = Self::zeros(layer_sizes, activation, head)?;
        mlp.seed = seed;
        let mut rng = stream_rng(seed, "init", 0);
        for w in &mut mlp.weights {
            let (out, inp) = w.dim();
            let bound = (6.0 / (inp + out) as f64).sqrt();
            w.mapv_inplace(|_| rng.random_range(-bound..=bound));
        }
        Ok(mlp)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    pub fn biases_mut(&mut self) -> &mut [Array1<f64>] {
        &mut self.biases
    }

    /// Parameter buffers in the order weights_0, bias_0, weights_1, ...
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.as_slice_mut().expect("standard layout"));
            out.push(b.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_size() {
            return Err(Error::shape(format!(
                "network expects {} inputs, got {cols}",
                self.input_size()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let row = ArrayView2::from_shape((1, x.len()), x).map_err(|e| Error::shape(e.to_string()))?;
        Ok(self.forward_batch(row)?.row(0).to_vec())
    }

    /// Row-wise forward pass of a `batch x inputs` matrix.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let (_, z) = self.forward_cached(x);
        Ok(apply_head(self.head, z))
    }

    /// Returns the post-activation of every hidden layer (starting with the
    /// input) and the final pre-head output.
    fn forward_cached(&self, x: ArrayView2<f64>) -> (Vec<Array2<f64>>, Array2<f64>) {
        let last = self.weights.len() - 1;
        let mut acts = vec![x.to_owned()];
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = acts[l].dot(&w.t());
            z += b;
            if l == last {
                return (acts, z);
            }
            if self.activation == Activation::Relu {
                z.mapv_inplace(|v| v.max(0.0));
            }
            acts.push(z);
        }
        unreachable!("network has at least one layer")
    }

    /// Mean batch loss with gradients for every parameter and input.
    pub fn grad(&self, loss: LossKind, inputs: ArrayView2<f64>, targets: Targets<'_>) -> Result<Gradients> {
        self.check_input(inputs.ncols())?;
        let batch = inputs.nrows();
        if batch == 0 {
            return Err(Error::Empty("gradient batch".into()));
        }
        let (acts, z) = self.forward_cached(inputs);
        let out = apply_head(self.head, z.clone());
        let (value, mut dz) = loss_and_output_grad(self.head, loss, &z, &out, targets)?;

        let n_layers = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); n_layers];
        let mut gb = vec![Array1::zeros(0); n_layers];
        for l in (0..n_layers).rev() {
            // the product can come back column-major when a dimension is 1
            gw[l] = dz.t().dot(&acts[l]).as_standard_layout().into_owned();
            gb[l] = dz.sum_axis(Axis(0));
            let mut da = dz.dot(&self.weights[l]);
            if l > 0 && self.activation == Activation::Relu {
                da.zip_mut_with(&acts[l], |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            dz = da;
        }
        Ok(Gradients {
            loss: value,
            weights: gw,
            biases: gb,
            inputs: dz,
        })
    }

    /// Mean batch loss without gradients.
    pub fn loss(&self, loss: LossKind, inputs: ArrayView2<f64>, targets: Targets<'_>) -> Result<f64> {
        self.check_input(inputs.ncols())?;
        let (_, z) = self.forward_cached(inputs);
        let out = apply_head(self.head, z.clone());
        Ok(loss_and_output_grad(self.head, loss, &z, &out, targets)?.0)
    }
}

fn apply_head(head: Head, mut z: Array2<f64>) -> Array2<f64> {
    match head {
        Head::Identity => z,
        Head::Sigmoid => {
            z.mapv_inplace(sigmoid);
            z
        }
        Head::Softmax => {
            for mut row in z.rows_mut() {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row /= sum;
            }
            z
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean loss and its gradient with respect to the pre-head outputs.
fn loss_and_output_grad(
    head: Head,
    loss: LossKind,
    z: &Array2<f64>,
    out: &Array2<f64>,
    targets: Targets<'_>,
) -> Result<(f64, Array2<f64>)> {
    let batch = z.nrows();
    let scale = 1.0 / batch as f64;
    match (loss, head, targets) {
        (LossKind::SquaredError, Head::Identity, Targets::Values(y)) => {
            if y.dim() != z.dim() {
                return Err(Error::shape(format!("targets {:?} vs outputs {:?}", y.dim(), z.dim())));
            }
            let diff = z - &y;
            let value = diff.iter().map(|d| d * d).sum::<f64>() * scale;
            Ok((value, diff * (2.0 * scale)))
        }
        (LossKind::CrossEntropy, Head::Softmax | Head::Sigmoid, Targets::Classes(labels)) => {
            if labels.len() != batch {
                return Err(Error::shape(format!("{} labels for a batch of {batch}", labels.len())));
            }
            let k = if head == Head::Sigmoid { 2 } else { z.ncols() };
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::Label(format!("class {bad} outside 0..{k}")));
            }
            let probs: Vec<Vec<f64>> = out.rows().into_iter().map(|r| r.to_vec()).collect();
            let value = cross_entropy(&probs, labels)? * scale;
            let mut dz = out.clone();
            for (mut row, &y) in dz.rows_mut().into_iter().zip(labels) {
                if head == Head::Sigmoid {
                    row[0] -= y as f64;
                } else {
                    row[y] -= 1.0;
                }
            }
            dz *= scale;
            Ok((value, dz))
        }
        _ => Err(Error::Parameter(format!("loss {loss:?} is not supported with a {head:?} head"))),
    }
}

/// Summed cross entropy. Rows of length 1 are read as `P(class 1)`
/// (binary form); longer rows are class distributions. Probabilities are
/// clipped to `[PROB_CLIP, 1 - PROB_CLIP]`.
pub fn cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::shape(format!("{} predictions for {} labels", probs.len(), labels.len())));
    }
    let clip = |p: f64| p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    let mut total = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        total -= match p.len() {
            0 => return Err(Error::shape("empty probability vector")),
            1 => {
                let y = y as f64;
                let q = clip(p[0]);
                y * q.ln() + (1.0 - y) * (1.0 - q).ln()
            }
            k if y < k => clip(p[y]).ln(),
            k => return Err(Error::Label(format!("class {y} outside 0..{k}"))),
        };
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment accumulators for a fixed list of parameter buffers.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        OptimizerState {
            config,
            step: 0,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut OptimizerState, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
    if params.len() != state.first.len() || grads.len() != params.len() {
        return Err(Error::shape("parameter group count does not match optimizer state"));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.len() != g.len() || p.len() != m.len() {
            return Err(Error::shape("parameter and gradient lengths differ"));
        }
    }
    state.step += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(state.first.iter_mut())
        .zip(state.second.iter_mut())
    {
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            p[i] -= learning_rate * mhat / (vhat.sqrt() + epsilon);
        }
    }
    Ok(())
}
