//! Seeded synthetic datasets: two-class GARCH(2,2) series, directed-chain
//! series, and Black-Scholes baskets labelled with a max-call payoff.
//!
//! Every path draws from its own generator keyed by `(seed, stream, index)`,
//! so generation is parallel and still reproducible bit for bit.

use std::io::{BufRead, Write};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng};
use crate::signature::{uniform_times, Path};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Target(f64),
}

impl Label {
    pub fn class(&self) -> Option<usize> {
        match *self {
            Label::Class(c) => Some(c),
            Label::Target(_) => None,
        }
    }

    pub fn value(&self) -> f64 {
        match *self {
            Label::Class(c) => c as f64,
            Label::Target(v) => v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SampleRepr", into = "SampleRepr")]
pub struct Sample {
    pub label: Label,
    pub path: Path,
}

#[derive(Serialize, Deserialize)]
struct SampleRepr {
    label: Label,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl TryFrom<SampleRepr> for Sample {
    type Error = Error;

    fn try_from(r: SampleRepr) -> Result<Self> {
        Ok(Sample {
            label: r.label,
            path: Path::from_rows(r.times, &r.values)?,
        })
    }
}

impl From<Sample> for SampleRepr {
    fn from(s: Sample) -> Self {
        SampleRepr {
            label: s.label,
            times: s.path.times().to_vec(),
            values: s.path.values().outer_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

/// Labelled paths belonging to one split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledDataset {
    pub split: String,
    pub samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(split: impl Into<String>, samples: Vec<Sample>) -> Self {
        LabeledDataset {
            split: split.into(),
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn paths(&self) -> impl Iterator<Item = &Path> {
        self.samples.iter().map(|s| &s.path)
    }

    /// Class labels; errors if any label is a real-valued target.
    pub fn classes(&self) -> Result<Vec<usize>> {
        self.samples
            .iter()
            .map(|s| s.label.class().ok_or_else(|| Error::Label("expected class labels".into())))
            .collect()
    }

    pub fn targets(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.label.value()).collect()
    }

    /// Common channel count of all paths.
    pub fn dim(&self) -> Result<usize> {
        let d = self
            .samples
            .first()
            .map(|s| s.path.dim())
            .ok_or_else(|| Error::Empty(format!("dataset {:?}", self.split)))?;
        if self.samples.iter().any(|s| s.path.dim() != d) {
            return Err(Error::shape("paths differ in dimension"));
        }
        Ok(d)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.samples {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(split: impl Into<String>, r: R) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i as u64 + 1,
                message: e.to_string(),
            })?;
            samples.push(s);
        }
        Ok(Self::new(split, samples))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    pub w: f64,
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
    pub length: usize,
    pub burn_in: usize,
}

impl GarchParams {
    pub fn class_one() -> Self {
        GarchParams {
            w: 0.5,
            alpha: [0.4, 0.1],
            beta: [0.7, 0.5],
            length: 100,
            burn_in: 50,
        }
    }

    pub fn class_two() -> Self {
        GarchParams {
            w: 0.2,
            alpha: [0.8, 0.5],
            beta: [0.4, 0.1],
            ..Self::class_one()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0) {
            return Err(Error::Parameter(format!("GARCH w must be positive, got {}", self.w)));
        }
        if self.alpha.iter().chain(&self.beta).any(|&c| !(c >= 0.0)) {
            return Err(Error::Parameter("GARCH alpha and beta must be non-negative".into()));
        }
        if self.length == 0 {
            return Err(Error::Parameter("GARCH length must be at least 1".into()));
        }
        Ok(())
    }
}

/// One GARCH(2,2) realisation after burn-in: returns `(x, σ²)`.
pub fn garch_series<R: Rng + ?Sized>(p: &GarchParams, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let total = p.burn_in + p.length;
    // Pre-sample state: x_0 = x_{-1} = 0, σ²_0 = σ²_{-1} = w.
    let (mut x1, mut x2) = (0.0f64, 0.0f64);
    let (mut s1, mut s2) = (p.w, p.w);
    let mut xs = Vec::with_capacity(p.length);
    let mut sig = Vec::with_capacity(p.length);
    for k in 0..total {
        let s = p.w + p.alpha[0] * x1 * x1 + p.alpha[1] * x2 * x2 + p.beta[0] * s1 + p.beta[1] * s2;
        let eps: f64 = rng.sample(StandardNormal);
        let x = s.sqrt() * eps;
        if k >= p.burn_in {
            xs.push(x);
            sig.push(s);
        }
        (x2, x1) = (x1, x);
        (s2, s1) = (s1, s);
    }
    (xs, sig)
}

fn series_path(xs: Vec<f64>) -> Path {
    let n = xs.len();
    let values = Array2::from_shape_vec((n, 1), xs).expect("column");
    Path::new(uniform_times(n), values).expect("uniform times are increasing")
}

pub fn gen_garch(params: &GarchParams, n_paths: usize, seed: u64) -> Result<Vec<Path>> {
    params.validate()?;
    Ok((0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, "garch", i as u64);
            series_path(garch_series(params, &mut rng).0)
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    pub a: f64,
    pub u: f64,
    pub steps: usize,
    pub noise_variance: f64,
}

impl ChainParams {
    pub fn new(a: f64, u: f64, steps: usize) -> Self {
        ChainParams {
            a,
            u,
            steps,
            noise_variance: 1.0 / steps as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.a) || !(0.0..=1.0).contains(&self.u) {
            return Err(Error::Parameter("chain a and u must lie in [0, 1]".into()));
        }
        if self.steps == 0 {
            return Err(Error::Parameter("chain needs at least one step".into()));
        }
        if !(self.noise_variance >= 0.0) {
            return Err(Error::Parameter("noise variance must be non-negative".into()));
        }
        Ok(())
    }

    /// `coef[k][l] = C(k, l) u^l (1-a)^l a^(k-l)` for `0 <= l <= k < steps`,
    /// built with the Pascal recursion.
    pub fn coefficients(&self) -> Vec<Vec<f64>> {
        let q = self.u * (1.0 - self.a);
        let mut coef: Vec<Vec<f64>> = Vec::with_capacity(self.steps);
        coef.push(vec![1.0]);
        for k in 1..self.steps {
            let prev = &coef[k - 1];
            let row = (0..=k)
                .map(|l| {
                    let stay = if l < k { self.a * prev[l] } else { 0.0 };
                    let hop = if l > 0 { q * prev[l - 1] } else { 0.0 };
                    stay + hop
                })
                .collect();
            coef.push(row);
        }
        coef
    }
}

/// Moving-average form of the chain: `X_0 = 0` and for `n >= 1`
/// `X_n = sum_{0<=l<=k<=n-1} coef[k][l] ε_{n-k, l}` with an i.i.d.
/// `N x (N+1)` noise array. Cost is `O(N³)` per path.
pub fn chain_series<R: Rng + ?Sized>(p: &ChainParams, coef: &[Vec<f64>], rng: &mut R) -> Vec<f64> {
    let n = p.steps;
    let sd = p.noise_variance.sqrt();
    // noise[i - 1][l] = ε_{i, l}, i in 1..=N, l in 0..=N
    let noise: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..=n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let mut xs = Vec::with_capacity(n + 1);
    xs.push(0.0);
    for step in 1..=n {
        let mut x = 0.0;
        for (k, row) in coef.iter().enumerate().take(step) {
            let eps = &noise[step - k - 1];
            for (l, &c) in row.iter().enumerate() {
                x += c * eps[l];
            }
        }
        xs.push(x);
    }
    xs
}

pub fn gen_directed_chain(params: &ChainParams, n_paths: usize, seed: u64) -> Result<Vec<Path>> {
    params.validate()?;
    let coef = params.coefficients();
    Ok((0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, "chain", i as u64);
            series_path(chain_series(params, &coef, &mut rng))
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BsParams {
    pub d: usize,
    pub s0: f64,
    pub strike: f64,
    pub sigma: f64,
    pub rate: f64,
    pub maturity: f64,
    pub steps: usize,
}

impl BsParams {
    pub fn new(d: usize) -> Self {
        BsParams {
            d,
            s0: 1.0,
            strike: 1.0,
            sigma: 0.2,
            rate: 0.0,
            maturity: 1.0,
            steps: 50,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.steps == 0 {
            return Err(Error::Parameter("Black-Scholes needs d >= 1 and steps >= 1".into()));
        }
        if !(self.s0 > 0.0) || !(self.sigma >= 0.0) || !(self.maturity > 0.0) {
            return Err(Error::Parameter("Black-Scholes needs s0 > 0, sigma >= 0, T > 0".into()));
        }
        Ok(())
    }
}

/// Independent geometric Brownian motions stepped exactly in log space.
pub fn black_scholes_path<R: Rng + ?Sized>(p: &BsParams, rng: &mut R) -> Path {
    let dt = p.maturity / p.steps as f64;
    let drift = (p.rate - 0.5 * p.sigma * p.sigma) * dt;
    let vol = p.sigma * dt.sqrt();
    let mut values = Array2::zeros((p.steps + 1, p.d));
    for c in 0..p.d {
        values[[0, c]] = p.s0;
    }
    for j in 1..=p.steps {
        for c in 0..p.d {
            let z: f64 = rng.sample(StandardNormal);
            values[[j, c]] = values[[j - 1, c]] * (drift + vol * z).exp();
        }
    }
    Path::new(uniform_times(p.steps + 1), values).expect("uniform times are increasing")
}

pub fn gen_black_scholes(params: &BsParams, n_paths: usize, seed: u64) -> Result<Vec<Path>> {
    params.validate()?;
    Ok((0..n_paths)
        .into_par_iter()
        .map(|i| black_scholes_path(params, &mut stream_rng(seed, "black_scholes", i as u64)))
        .collect())
}

/// `max_k (X^k_T - K)^+` at the final observation.
pub fn max_call_payoff(path: &Path, strike: f64) -> f64 {
    path.point(path.len() - 1)
        .iter()
        .map(|&x| (x - strike).max(0.0))
        .fold(0.0, f64::max)
}

/// Two GARCH classes (label 0 and 1) split per class into train/test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarchTask {
    pub classes: [GarchParams; 2],
    pub per_class: usize,
    pub train_fraction: f64,
}

impl Default for GarchTask {
    fn default() -> Self {
        GarchTask {
            classes: [GarchParams::class_one(), GarchParams::class_two()],
            per_class: 500,
            train_fraction: 0.7,
        }
    }
}

/// Two chain classes differing only in `u` (label 0 for `u[0]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainTask {
    pub a: f64,
    pub u: [f64; 2],
    pub steps: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for ChainTask {
    fn default() -> Self {
        ChainTask {
            a: 0.5,
            u: [0.2, 0.8],
            steps: 100,
            train_per_class: 1000,
            test_per_class: 200,
        }
    }
}

/// Black-Scholes baskets labelled with the max-call payoff.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxCallTask {
    pub market: BsParams,
    pub n_train: usize,
    pub n_test: usize,
}

impl MaxCallTask {
    pub fn new(d: usize) -> Self {
        MaxCallTask {
            market: BsParams::new(d),
            n_train: 1000,
            n_test: 1000,
        }
    }
}

/// A generated experiment: training and test splits.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

fn labelled(paths: Vec<Path>, class: usize) -> impl Iterator<Item = Sample> {
    paths.into_iter().map(move |path| Sample {
        label: Label::Class(class),
        path,
    })
}

fn check_split_sizes(train: usize, test: usize) -> Result<()> {
    if train == 0 || test == 0 {
        return Err(Error::Parameter(format!("both splits need paths (train {train}, test {test})")));
    }
    Ok(())
}

impl GarchTask {
    pub fn validate(&self) -> Result<()> {
        for p in &self.classes {
            p.validate()?;
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Parameter("train fraction must lie in (0, 1)".into()));
        }
        let n_train = (self.per_class as f64 * self.train_fraction).round() as usize;
        check_split_sizes(n_train, self.per_class.saturating_sub(n_train))
    }

    pub fn generate(&self, seed: u64) -> Result<SplitData> {
        self.validate()?;
        let n_train = (self.per_class as f64 * self.train_fraction).round() as usize;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (class, params) in self.classes.iter().enumerate() {
            let mut paths = gen_garch(params, self.per_class, derive_seed(seed, "datagen/garch", class as u64))?;
            let held_out = paths.split_off(n_train.min(paths.len()));
            train.extend(labelled(paths, class));
            test.extend(labelled(held_out, class));
        }
        Ok(SplitData {
            train: LabeledDataset::new("train", train),
            test: LabeledDataset::new("test", test),
        })
    }
}

impl ChainTask {
    pub fn validate(&self) -> Result<()> {
        for &u in &self.u {
            ChainParams::new(self.a, u, self.steps).validate()?;
        }
        check_split_sizes(self.train_per_class, self.test_per_class)
    }

    pub fn generate(&self, seed: u64) -> Result<SplitData> {
        self.validate()?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (class, &u) in self.u.iter().enumerate() {
            let params = ChainParams::new(self.a, u, self.steps);
            let total = self.train_per_class + self.test_per_class;
            let mut paths = gen_directed_chain(&params, total, derive_seed(seed, "datagen/chain", class as u64))?;
            let held_out = paths.split_off(self.train_per_class);
            train.extend(labelled(paths, class));
            test.extend(labelled(held_out, class));
        }
        Ok(SplitData {
            train: LabeledDataset::new("train", train),
            test: LabeledDataset::new("test", test),
        })
    }
}

impl MaxCallTask {
    pub fn validate(&self) -> Result<()> {
        self.market.validate()?;
        check_split_sizes(self.n_train, self.n_test)
    }

    pub fn generate(&self, seed: u64) -> Result<SplitData> {
        self.validate()?;
        let build = |split: &str, n: usize, index: u64| -> Result<LabeledDataset> {
            let paths = gen_black_scholes(&self.market, n, derive_seed(seed, "datagen/maxcall", index))?;
            let samples = paths
                .into_iter()
                .map(|path| Sample {
                    label: Label::Target(max_call_payoff(&path, self.market.strike)),
                    path,
                })
                .collect();
            Ok(LabeledDataset::new(split, samples))
        };
        Ok(SplitData {
            train: build("train", self.n_train, 0)?,
            test: build("test", self.n_test, 1)?,
        })
    }
}
