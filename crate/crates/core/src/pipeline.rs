//! Models built on signature features: the logistic baseline, an MLP on
//! fixed signature features, and the CNN-Sig composition `Φ ∘ S^m ∘ K`
//! trained end to end.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conv::{encode_path, feature_count_nf, ChannelConvKernel, EncodedPaths};
use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{regression_metrics, MetricsReport};
use crate::nn::{adam_step, sigmoid, Activation, AdamConfig, Gradients, Head, LossKind, Mlp, OptimizerState, Targets};
use crate::rng::{derive_seed, stream_rng};
use crate::signature::{signature, signature_vjp, time_augment, Path};
use crate::tensor::{index_to_word, sig_feature_count, LinearFunctional, TruncatedTensor, Word};

/// Per-feature affine map `(x - mean) / std`. Zero spread maps to `std = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(n: usize) -> Self {
        Standardizer {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Column statistics of `x`. Columns are rescaled by their largest
    /// magnitude first so that heavy-tailed features do not overflow.
    pub fn fit(x: ArrayView2<f64>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::Empty("cannot standardize zero samples".into()));
        }
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        for col in x.axis_iter(Axis(1)) {
            let scale = col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if !scale.is_finite() {
                return Err(Error::Divergence {
                    epoch: 0,
                    reason: "non-finite feature".into(),
                });
            }
            if scale == 0.0 {
                mean.push(0.0);
                std.push(1.0);
                continue;
            }
            let mu = col.iter().map(|v| v / scale).sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v / scale - mu).powi(2)).sum::<f64>() / n as f64;
            let s = var.sqrt() * scale;
            mean.push(mu * scale);
            std.push(if s > 0.0 { s } else { 1.0 });
        }
        Ok(Standardizer { mean, std })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn transform(&self, x: &mut Array2<f64>) -> Result<()> {
        if x.ncols() != self.len() {
            return Err(Error::shape(format!("standardizer has {} features, got {}", self.len(), x.ncols())));
        }
        for mut row in x.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

impl Task {
    fn outputs(self) -> usize {
        match self {
            Task::Classification { classes } => classes,
            Task::Regression => 1,
        }
    }

    fn head(self) -> Head {
        match self {
            Task::Classification { .. } => Head::Softmax,
            Task::Regression => Head::Identity,
        }
    }

    fn loss(self) -> LossKind {
        match self {
            Task::Classification { .. } => LossKind::CrossEntropy,
            Task::Regression => LossKind::SquaredError,
        }
    }
}

/// Labels of a dataset in the form the task needs.
#[derive(Clone, Debug)]
enum Supervision {
    Classes(Vec<usize>),
    Values(Array2<f64>),
}

impl Supervision {
    fn from_dataset(task: Task, data: &LabeledDataset) -> Result<Self> {
        match task {
            Task::Classification { classes } => {
                let labels = data.classes()?;
                if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
                    return Err(Error::Label(format!("class {bad} outside 0..{classes}")));
                }
                Ok(Supervision::Classes(labels))
            }
            Task::Regression => {
                let y = data.targets();
                Ok(Supervision::Values(Array2::from_shape_vec((y.len(), 1), y).expect("column")))
            }
        }
    }

    fn subset(&self, idx: &[usize]) -> Supervision {
        match self {
            Supervision::Classes(c) => Supervision::Classes(idx.iter().map(|&i| c[i]).collect()),
            Supervision::Values(v) => Supervision::Values(v.select(Axis(0), idx)),
        }
    }

    fn targets(&self) -> Targets<'_> {
        match self {
            Supervision::Classes(c) => Targets::Classes(c),
            Supervision::Values(v) => Targets::Values(v.view()),
        }
    }
}

/// Argmax with ties resolved toward the smallest index.
pub fn predict_label(probabilities: &[f64]) -> Result<usize> {
    if probabilities.is_empty() {
        return Err(Error::shape("empty probability vector"));
    }
    let mut best = 0;
    for (i, &p) in probabilities.iter().enumerate().skip(1) {
        if p > probabilities[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Flattened signature of the time-augmented path, constant dropped.
pub fn sig_features(path: &Path, m: usize) -> Vec<f64> {
    signature(&time_augment(path, true), m).flatten(false)
}

fn feature_matrix<F>(paths: &[&Path], width: usize, f: F) -> Result<Array2<f64>>
where
    F: Fn(&Path) -> Result<Vec<f64>> + Sync,
{
    let rows: Vec<Vec<f64>> = paths.par_iter().map(|p| f(p)).collect::<Result<_>>()?;
    let mut x = Array2::zeros((rows.len(), width));
    for (mut dst, row) in x.rows_mut().into_iter().zip(rows) {
        if row.len() != width {
            return Err(Error::shape(format!("feature row has {} entries, expected {width}", row.len())));
        }
        dst.assign(&Array1::from(row));
    }
    Ok(x)
}

fn check_dim(path: &Path, dim: usize) -> Result<()> {
    if path.dim() != dim {
        return Err(Error::shape(format!("model expects {dim} channels, path has {}", path.dim())));
    }
    Ok(())
}

fn sig_feature_matrix(paths: &[&Path], dim: usize, m: usize) -> Result<Array2<f64>> {
    feature_matrix(paths, sig_feature_count(dim + 1, m, false), |p| {
        check_dim(p, dim)?;
        Ok(sig_features(p, m))
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub l2: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            l2: 0.0,
            max_iter: 5000,
            tol: 1e-6,
        }
    }
}

/// Result of [`logistic_fit`] on a feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

fn logistic_objective(x: ArrayView2<f64>, y: &Array1<f64>, w: &Array1<f64>, b: f64, l2: f64) -> f64 {
    let z = x.dot(w) + b;
    let n = y.len() as f64;
    // softplus(z) - y z, computed stably
    let data: f64 = z
        .iter()
        .zip(y)
        .map(|(&z, &y)| z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z)
        .sum();
    data / n + 0.5 * l2 * w.dot(w)
}

fn logistic_gradient(x: ArrayView2<f64>, y: &Array1<f64>, w: &Array1<f64>, b: f64, l2: f64) -> (Array1<f64>, f64) {
    let n = y.len() as f64;
    let r = (x.dot(w) + b).mapv(sigmoid) - y;
    let gw = x.t().dot(&r) / n + l2 * w;
    (gw, r.sum() / n)
}

/// Binary logistic regression by full-batch gradient descent with an
/// Armijo backtracking line search on the mean cross entropy plus
/// `l2 / 2 * |w|²`.
pub fn logistic_fit(x: ArrayView2<f64>, labels: &[usize], config: &LogisticConfig) -> Result<LogisticFit> {
    if x.nrows() != labels.len() {
        return Err(Error::shape(format!("{} rows for {} labels", x.nrows(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::Empty("logistic regression needs samples".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Label(format!("logistic regression needs binary labels, got {bad}")));
    }
    let y: Array1<f64> = labels.iter().map(|&l| l as f64).collect();
    let mut w = Array1::zeros(x.ncols());
    let mut b = 0.0;
    let mut step = 1.0;
    let mut value = logistic_objective(x, &y, &w, b, config.l2);
    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    while iterations < config.max_iter {
        let (gw, gb) = logistic_gradient(x, &y, &w, b, config.l2);
        let sq = gw.dot(&gw) + gb * gb;
        grad_norm = sq.sqrt();
        if grad_norm < config.tol {
            break;
        }
        iterations += 1;
        loop {
            let w_new = &w - &(step * &gw);
            let b_new = b - step * gb;
            let v_new = logistic_objective(x, &y, &w_new, b_new, config.l2);
            if v_new <= value - 0.5 * step * sq {
                w = w_new;
                b = b_new;
                value = v_new;
                break;
            }
            step *= 0.5;
            if step < 1e-20 {
                return Ok(LogisticFit {
                    weights: w.to_vec(),
                    intercept: b,
                    iterations,
                    grad_norm,
                    converged: false,
                });
            }
        }
        step *= 2.0;
    }
    if !value.is_finite() {
        return Err(Error::Divergence {
            epoch: iterations,
            reason: "non-finite logistic loss".into(),
        });
    }
    Ok(LogisticFit {
        weights: w.to_vec(),
        intercept: b,
        iterations,
        grad_norm,
        converged: grad_norm < config.tol,
    })
}

/// `log(p1 / (1 - p1)) = <l, S^m(t, x)>` with standardization folded in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureLogistic {
    pub dim: usize,
    pub depth: usize,
    pub standardizer: Standardizer,
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl SignatureLogistic {
    /// Extracts time-augmented signature features, standardizes them on the
    /// training set and fits the regression.
    pub fn train(data: &LabeledDataset, depth: usize, config: &LogisticConfig) -> Result<(Self, LogisticFit)> {
        let dim = data.dim()?;
        let paths: Vec<&Path> = data.paths().collect();
        let mut x = sig_feature_matrix(&paths, dim, depth)?;
        let standardizer = Standardizer::fit(x.view())?;
        standardizer.transform(&mut x)?;
        let fit = logistic_fit(x.view(), &data.classes()?, config)?;
        let model = SignatureLogistic {
            dim,
            depth,
            standardizer,
            weights: fit.weights.clone(),
            intercept: fit.intercept,
        };
        Ok((model, fit))
    }

    pub fn logits(&self, paths: &[&Path]) -> Result<Vec<f64>> {
        let mut x = sig_feature_matrix(paths, self.dim, self.depth)?;
        self.standardizer.transform(&mut x)?;
        Ok((x.dot(&Array1::from(self.weights.clone())) + self.intercept).to_vec())
    }

    /// Rows `(1 - p1, p1)`.
    pub fn probabilities(&self, paths: &[&Path]) -> Result<Array2<f64>> {
        let logits = self.logits(paths)?;
        let mut out = Array2::zeros((logits.len(), 2));
        for (i, z) in logits.into_iter().enumerate() {
            let p = sigmoid(z);
            out[[i, 0]] = 1.0 - p;
            out[[i, 1]] = p;
        }
        Ok(out)
    }

    /// The decision functional on the raw signature of the time-augmented
    /// path; the empty word carries the intercept.
    pub fn functional(&self) -> Result<LinearFunctional> {
        let d = self.dim + 1;
        let mut l = LinearFunctional::new(d);
        let mut bias = self.intercept;
        let mut idx = 0;
        for k in 1..=self.depth {
            for within in 0..d.pow(k as u32) {
                let w = self.weights[idx] / self.standardizer.std[idx];
                bias -= w * self.standardizer.mean[idx];
                l.add_term(index_to_word(within, k, d)?, w)?;
                idx += 1;
            }
        }
        l.add_term(Word::empty(), bias)?;
        Ok(l)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// When false the convolution kernel is frozen at its initial value.
    pub train_kernel: bool,
}

impl TrainConfig {
    pub fn new(hidden: Vec<usize>, seed: u64) -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            adam: AdamConfig::default(),
            hidden,
            seed,
            train_kernel: true,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch size must be at least 1".into()));
        }
        if !(self.adam.learning_rate >= 0.0) {
            return Err(Error::Parameter("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

/// Whole-split loss and metric after an epoch. The metric is accuracy for
/// classification and R² for regression (`None` if undefined).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_metric: Option<f64>,
    pub validation_loss: Option<f64>,
    pub validation_metric: Option<f64>,
}

fn task_metric(task: Task, outputs: &Array2<f64>, sup: &Supervision) -> Result<Option<f64>> {
    match sup {
        Supervision::Classes(labels) => {
            let k = task.outputs();
            let pred = labels_from_outputs(outputs)?;
            Ok(MetricsReport::classification(labels, &pred, k)?.accuracy)
        }
        Supervision::Values(v) => {
            let y = v.column(0).to_vec();
            let p = outputs.column(0).to_vec();
            match regression_metrics(&y, &p) {
                Ok((_, r2)) => Ok(Some(r2)),
                Err(Error::UndefinedR2) => Ok(None),
                Err(e) => Err(e),
            }
        }
    }
}

fn labels_from_outputs(outputs: &Array2<f64>) -> Result<Vec<usize>> {
    outputs
        .rows()
        .into_iter()
        .map(|r| predict_label(r.as_slice().expect("row-major")))
        .collect()
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            epoch,
            reason: format!("loss is {loss}"),
        })
    }
}

fn shuffled_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, "shuffle", epoch as u64));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// An MLP on standardized time-augmented signature features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignatureMlp {
    pub dim: usize,
    pub depth: usize,
    pub task: Task,
    pub standardizer: Standardizer,
    pub phi: Mlp,
}

impl SignatureMlp {
    pub fn train(
        data: &LabeledDataset,
        validation: Option<&LabeledDataset>,
        depth: usize,
        task: Task,
        config: &TrainConfig,
    ) -> Result<(Self, Vec<EpochRecord>)> {
        config.validate()?;
        let dim = data.dim()?;
        let paths: Vec<&Path> = data.paths().collect();
        let mut x = sig_feature_matrix(&paths, dim, depth)?;
        let standardizer = Standardizer::fit(x.view())?;
        standardizer.transform(&mut x)?;
        let sup = Supervision::from_dataset(task, data)?;

        let mut sizes = vec![x.ncols()];
        sizes.extend(&config.hidden);
        sizes.push(task.outputs());
        let mut model = SignatureMlp {
            dim,
            depth,
            task,
            standardizer,
            phi: Mlp::new(sizes, Activation::Relu, task.head(), derive_seed(config.seed, "init", 0))?,
        };

        let val = match validation {
            Some(v) => {
                let vp: Vec<&Path> = v.paths().collect();
                let mut vx = sig_feature_matrix(&vp, dim, depth)?;
                model.standardizer.transform(&mut vx)?;
                Some((vx, Supervision::from_dataset(task, v)?))
            }
            None => None,
        };

        let shapes: Vec<usize> = model.phi.params_mut().iter().map(|p| p.len()).collect();
        let mut opt = OptimizerState::new(config.adam, &shapes);
        let mut history = Vec::with_capacity(config.epochs);
        for epoch in 0..config.epochs {
            for batch in shuffled_batches(x.nrows(), config.batch_size, config.seed, epoch) {
                let bx = x.select(Axis(0), &batch);
                let bs = sup.subset(&batch);
                let g = model.phi.grad(task.loss(), bx.view(), bs.targets())?;
                check_finite(g.loss, epoch)?;
                adam_step(&mut opt, &mut model.phi.params_mut(), &g.slices())?;
            }
            let record = |x: &Array2<f64>, s: &Supervision| -> Result<(f64, Option<f64>)> {
                let loss = model.phi.loss(task.loss(), x.view(), s.targets())?;
                let out = model.phi.forward_batch(x.view())?;
                Ok((loss, task_metric(task, &out, s)?))
            };
            let (train_loss, train_metric) = record(&x, &sup)?;
            check_finite(train_loss, epoch)?;
            let (validation_loss, validation_metric) = match &val {
                Some((vx, vs)) => {
                    let (l, m) = record(vx, vs)?;
                    (Some(l), m)
                }
                None => (None, None),
            };
            history.push(EpochRecord {
                epoch,
                train_loss,
                train_metric,
                validation_loss,
                validation_metric,
            });
        }
        Ok((model, history))
    }

    pub fn outputs(&self, paths: &[&Path]) -> Result<Array2<f64>> {
        let mut x = sig_feature_matrix(paths, self.dim, self.depth)?;
        self.standardizer.transform(&mut x)?;
        self.phi.forward_batch(x.view())
    }
}

/// `Φ ∘ S^m ∘ K`: channel convolution, per-filter time augmentation and
/// signature, then a feed-forward network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnSigModel {
    pub dim: usize,
    pub kernel: ChannelConvKernel,
    pub depth: usize,
    pub gamma: usize,
    pub task: Task,
    pub standardizer: Standardizer,
    pub phi: Mlp,
}

/// Gradients of the mean batch loss for every trainable part of a
/// [`CnnSigModel`].
#[derive(Clone, Debug)]
pub struct CnnSigGradients {
    pub loss: f64,
    pub phi: Gradients,
    pub kernel: Array2<f64>,
    pub bias: Option<Vec<f64>>,
}

impl CnnSigModel {
    /// Random full-rank kernel with `c = d / γ`, Glorot-initialized `Φ`
    /// with ReLU hidden layers, identity standardization.
    pub fn new(dim: usize, gamma: usize, depth: usize, task: Task, hidden: &[usize], seed: u64) -> Result<Self> {
        if gamma == 0 || dim % gamma != 0 {
            return Err(Error::Divisibility {
                value: dim,
                divisor: gamma,
            });
        }
        let c = dim / gamma;
        let kernel = ChannelConvKernel::random(c, &mut stream_rng(seed, "init/kernel", 0));
        Self::with_kernel(dim, kernel, depth, task, hidden, seed)
    }

    pub fn with_kernel(
        dim: usize,
        kernel: ChannelConvKernel,
        depth: usize,
        task: Task,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let gamma = kernel.blocks(dim);
        let nf = feature_count_nf(dim, kernel.c(), depth)?;
        let mut sizes = vec![nf];
        sizes.extend(hidden);
        sizes.push(task.outputs());
        let phi = Mlp::new(sizes, Activation::Relu, task.head(), derive_seed(seed, "init", 0))?;
        Ok(CnnSigModel {
            dim,
            kernel,
            depth,
            gamma,
            task,
            standardizer: Standardizer::identity(nf),
            phi,
        })
    }

    pub fn feature_count(&self) -> usize {
        self.standardizer.len()
    }

    fn encode(&self, path: &Path) -> Result<EncodedPaths> {
        check_dim(path, self.dim)?;
        encode_path(path, &self.kernel)
    }

    fn features_of(&self, enc: &EncodedPaths) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.feature_count());
        for p in &enc.paths {
            out.extend(signature(p, self.depth).flatten(false));
        }
        out
    }

    /// Raw (unstandardized) feature rows for a batch of paths.
    pub fn feature_matrix(&self, paths: &[&Path]) -> Result<Array2<f64>> {
        feature_matrix(paths, self.feature_count(), |p| Ok(cnnsig_features(self, p)?))
    }

    /// Fixes the standardization from the features under the current kernel.
    pub fn fit_standardizer(&mut self, data: &LabeledDataset) -> Result<()> {
        let paths: Vec<&Path> = data.paths().collect();
        self.standardizer = Standardizer::fit(self.feature_matrix(&paths)?.view())?;
        Ok(())
    }

    fn standardized(&self, paths: &[&Path]) -> Result<Array2<f64>> {
        let mut x = self.feature_matrix(paths)?;
        self.standardizer.transform(&mut x)?;
        Ok(x)
    }

    /// Head outputs, one row per path.
    pub fn outputs(&self, paths: &[&Path]) -> Result<Array2<f64>> {
        self.phi.forward_batch(self.standardized(paths)?.view())
    }
}

pub fn cnnsig_features(model: &CnnSigModel, path: &Path) -> Result<Vec<f64>> {
    Ok(model.features_of(&model.encode(path)?))
}

/// Class probabilities, or a single regression value.
pub fn cnnsig_forward(model: &CnnSigModel, path: &Path) -> Result<Vec<f64>> {
    Ok(model.outputs(&[path])?.row(0).to_vec())
}

/// Mean batch loss and its gradient with respect to `Φ`, `K` and the bias,
/// backpropagated through the signatures and the (linear) encoder.
pub fn cnnsig_grad(model: &CnnSigModel, paths: &[&Path], targets: Targets<'_>) -> Result<CnnSigGradients> {
    let encoded: Vec<EncodedPaths> = paths.par_iter().map(|p| model.encode(p)).collect::<Result<_>>()?;
    let nf = model.feature_count();
    let mut x = Array2::zeros((paths.len(), nf));
    for (mut row, enc) in x.rows_mut().into_iter().zip(&encoded) {
        row.assign(&Array1::from(model.features_of(enc)));
    }
    model.standardizer.transform(&mut x)?;
    let phi = model.phi.grad(model.task.loss(), x.view(), targets)?;

    let c = model.kernel.c();
    let stride = model.kernel.stride();
    let per_filter = nf / c;
    let sig_dim = model.gamma + 1;
    let parts: Vec<(Array2<f64>, Vec<f64>)> = (0..paths.len())
        .into_par_iter()
        .map(|s| {
            let mut dk = Array2::zeros((c, c));
            let mut db = vec![0.0; c];
            let values = paths[s].values();
            let d = values.ncols();
            for i in 0..c {
                let flat: Vec<f64> = (0..per_filter)
                    .map(|q| {
                        let f = i * per_filter + q;
                        phi.inputs[[s, f]] / model.standardizer.std[f]
                    })
                    .collect();
                let cot = TruncatedTensor::from_flat(sig_dim, model.depth, &flat, false)?;
                let gy = signature_vjp(&encoded[s].paths[i], model.depth, &cot)?;
                for (j, grow) in gy.outer_iter().enumerate() {
                    for l in 0..model.gamma {
                        // column 0 is time, which does not depend on K
                        let dy = grow[l + 1];
                        db[i] += dy;
                        for r in 0..c {
                            let ch = l * stride + r;
                            if ch < d {
                                dk[[i, r]] += dy * values[[j, ch]];
                            }
                        }
                    }
                }
            }
            Ok((dk, db))
        })
        .collect::<Result<_>>()?;

    let mut kernel = Array2::zeros((c, c));
    let mut bias = vec![0.0; c];
    for (dk, db) in parts {
        kernel += &dk;
        for (a, b) in bias.iter_mut().zip(db) {
            *a += b;
        }
    }
    Ok(CnnSigGradients {
        loss: phi.loss,
        phi,
        kernel,
        bias: model.kernel.bias().map(|_| bias),
    })
}

/// Mini-batch Adam on `Φ` and (unless frozen) the kernel and its bias.
/// The standardizer is left as is.
pub fn cnnsig_train(
    model: &mut CnnSigModel,
    data: &LabeledDataset,
    validation: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    let task = model.task;
    let paths: Vec<&Path> = data.paths().collect();
    let sup = Supervision::from_dataset(task, data)?;
    let val = match validation {
        Some(v) => Some((v.paths().collect::<Vec<_>>(), Supervision::from_dataset(task, v)?)),
        None => None,
    };

    let mut shapes: Vec<usize> = model.phi.params_mut().iter().map(|p| p.len()).collect();
    if config.train_kernel {
        shapes.push(model.kernel.matrix().len());
        if let Some(b) = model.kernel.bias() {
            shapes.push(b.len());
        }
    }
    let mut opt = OptimizerState::new(config.adam, &shapes);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        for batch in shuffled_batches(paths.len(), config.batch_size, config.seed, epoch) {
            let bp: Vec<&Path> = batch.iter().map(|&i| paths[i]).collect();
            let bs = sup.subset(&batch);
            let g = cnnsig_grad(model, &bp, bs.targets())?;
            check_finite(g.loss, epoch)?;
            let mut grads = g.phi.slices();
            let CnnSigModel { phi, kernel, .. } = model;
            let mut params = phi.params_mut();
            if config.train_kernel {
                grads.push(g.kernel.as_slice().expect("standard layout"));
                if let Some(db) = &g.bias {
                    grads.push(db);
                }
                let (k, b) = kernel.params_mut();
                params.push(k);
                if let Some(b) = b {
                    params.push(b);
                }
            }
            adam_step(&mut opt, &mut params, &grads)?;
        }
        let evaluate = |ps: &[&Path], s: &Supervision| -> Result<(f64, Option<f64>)> {
            let x = model.standardized(ps)?;
            let loss = model.phi.loss(task.loss(), x.view(), s.targets())?;
            let out = model.phi.forward_batch(x.view())?;
            Ok((loss, task_metric(task, &out, s)?))
        };
        let (train_loss, train_metric) = evaluate(&paths, &sup)?;
        check_finite(train_loss, epoch)?;
        let (validation_loss, validation_metric) = match &val {
            Some((vp, vs)) => {
                let (l, m) = evaluate(vp, vs)?;
                (Some(l), m)
            }
            None => (None, None),
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            train_metric,
            validation_loss,
            validation_metric,
        });
    }
    Ok(history)
}

/// A trained model of any kind, as stored in a checkpoint file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum Checkpoint {
    SigLogistic(SignatureLogistic),
    SigMlp(SignatureMlp),
    Cnnsig(CnnSigModel),
}

impl Checkpoint {
    pub fn task(&self) -> Task {
        match self {
            Checkpoint::SigLogistic(_) => Task::Classification { classes: 2 },
            Checkpoint::SigMlp(m) => m.task,
            Checkpoint::Cnnsig(m) => m.task,
        }
    }

    /// Probabilities (classification) or a one-column prediction matrix.
    pub fn outputs(&self, paths: &[&Path]) -> Result<Array2<f64>> {
        match self {
            Checkpoint::SigLogistic(m) => m.probabilities(paths),
            Checkpoint::SigMlp(m) => m.outputs(paths),
            Checkpoint::Cnnsig(m) => m.outputs(paths),
        }
    }

    /// Metrics of the model on a labelled split, with the raw outputs.
    pub fn evaluate(&self, data: &LabeledDataset) -> Result<(MetricsReport, Array2<f64>)> {
        let paths: Vec<&Path> = data.paths().collect();
        let out = self.outputs(&paths)?;
        let report = match Supervision::from_dataset(self.task(), data)? {
            Supervision::Classes(labels) => {
                MetricsReport::classification(&labels, &labels_from_outputs(&out)?, self.task().outputs())?
            }
            Supervision::Values(y) => MetricsReport::regression(&y.column(0).to_vec(), &out.column(0).to_vec())?,
        };
        Ok((report, out))
    }
}
