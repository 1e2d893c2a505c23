//! Channel convolution encoder.
//!
//! A `(1 x c)` kernel window with stride `c` slides across the channel axis
//! of a `d`-channel path, never across time. With `c` filters stacked into a
//! square matrix `K` the layer maps each block of `c` consecutive channels
//! through `K`, producing `c` paths of `γ = d / c` channels each. When `K` is
//! invertible the map is one-to-one and [`decode_path`] recovers the input.

use nalgebra::DMatrix;
use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signature::{time_augment, Path};

/// Default singular-value threshold for [`is_full_rank`].
pub const RANK_TOL: f64 = 1e-10;

/// Valid-region 2D convolution (cross-correlation, no padding): output
/// `(p, q)` is the elementwise product-sum of the kernel with the window at
/// `(p * s, q * t)`.
pub fn conv2d(input: &Array2<f64>, kernel: &Array2<f64>, stride: (usize, usize)) -> Result<Array2<f64>> {
    let (rows, cols) = input.dim();
    let (kr, kc) = kernel.dim();
    let (s, t) = stride;
    if s == 0 || t == 0 {
        return Err(Error::Parameter("stride must be positive".into()));
    }
    if kr > rows || kc > cols || kr == 0 || kc == 0 {
        return Err(Error::shape(format!(
            "kernel {kr}x{kc} does not fit input {rows}x{cols}"
        )));
    }
    let out_rows = (rows - kr) / s + 1;
    let out_cols = (cols - kc) / t + 1;
    Ok(Array2::from_shape_fn((out_rows, out_cols), |(p, q)| {
        let window = input.slice(s![p * s..p * s + kr, q * t..q * t + kc]);
        window.iter().zip(kernel.iter()).map(|(a, b)| a * b).sum()
    }))
}

/// `c` filters of width `c`, stored as the rows of `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelRepr", into = "KernelRepr")]
pub struct ChannelConvKernel {
    c: usize,
    stride: usize,
    k: Array2<f64>,
    bias: Option<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct KernelRepr {
    c: usize,
    stride: usize,
    #[serde(rename = "K")]
    k: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl TryFrom<KernelRepr> for ChannelConvKernel {
    type Error = Error;

    fn try_from(r: KernelRepr) -> Result<Self> {
        let k = Array2::from_shape_vec((r.c, r.c), r.k).map_err(|e| Error::shape(e.to_string()))?;
        let mut kernel = ChannelConvKernel::new(k)?.with_stride(r.stride)?;
        if let Some(b) = r.bias {
            kernel = kernel.with_bias(b)?;
        }
        Ok(kernel)
    }
}

impl From<ChannelConvKernel> for KernelRepr {
    fn from(k: ChannelConvKernel) -> Self {
        KernelRepr {
            c: k.c,
            stride: k.stride,
            k: k.k.iter().copied().collect(),
            bias: k.bias,
        }
    }
}

impl ChannelConvKernel {
    /// Square kernel matrix, stride `c`, no bias.
    pub fn new(k: Array2<f64>) -> Result<Self> {
        let (r, c) = k.dim();
        if r != c || c == 0 {
            return Err(Error::shape(format!("kernel matrix must be square, got {r}x{c}")));
        }
        Ok(ChannelConvKernel {
            c,
            stride: c,
            k,
            bias: None,
        })
    }

    pub fn identity(c: usize) -> Self {
        Self::new(Array2::eye(c)).expect("identity is square")
    }

    /// Entries uniform in `[-1/√c, 1/√c]`, resampled until full rank.
    pub fn random<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (c as f64).sqrt();
        loop {
            let k = Array2::from_shape_fn((c, c), |_| rng.random_range(-bound..=bound));
            if is_full_rank(&k, RANK_TOL).unwrap_or(false) {
                return Self::new(k).expect("square");
            }
        }
    }

    /// Overlapping strides (`stride < c`) are allowed but lose invertibility.
    pub fn with_stride(mut self, stride: usize) -> Result<Self> {
        if stride == 0 || stride > self.c {
            return Err(Error::Parameter(format!(
                "stride {stride} must lie in 1..={}",
                self.c
            )));
        }
        self.stride = stride;
        Ok(self)
    }

    pub fn with_bias(mut self, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != self.c {
            return Err(Error::shape(format!("bias has {} entries, expected {}", bias.len(), self.c)));
        }
        self.bias = Some(bias);
        Ok(self)
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.k
    }

    pub fn matrix_mut(&mut self) -> &mut Array2<f64> {
        &mut self.k
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.bias.as_mut()
    }

    /// The kernel matrix (row-major) and the bias, borrowed together.
    pub fn params_mut(&mut self) -> (&mut [f64], Option<&mut [f64]>) {
        let k = self.k.as_slice_mut().expect("standard layout");
        (k, self.bias.as_deref_mut())
    }

    /// Channel count after zero-padding `d` so the windows tile exactly.
    pub fn padded_dim(&self, d: usize) -> usize {
        if d <= self.c {
            self.c
        } else {
            self.c + (d - self.c).div_ceil(self.stride) * self.stride
        }
    }

    /// Number of windows along the channel axis (`γ` for stride `c`).
    pub fn blocks(&self, d: usize) -> usize {
        (self.padded_dim(d) - self.c) / self.stride + 1
    }

    /// Convolves the channel axis of an `n x d` value matrix. Returns one
    /// `n x blocks` matrix per filter, before time augmentation.
    pub fn apply(&self, values: &Array2<f64>) -> Vec<Array2<f64>> {
        let (n, d) = values.dim();
        let blocks = self.blocks(d);
        (0..self.c)
            .map(|i| {
                let b = self.bias.as_ref().map_or(0.0, |b| b[i]);
                Array2::from_shape_fn((n, blocks), |(j, l)| {
                    let start = l * self.stride;
                    let mut acc = b;
                    for r in 0..self.c {
                        let ch = start + r;
                        if ch < d {
                            acc += self.k[[i, r]] * values[[j, ch]];
                        }
                    }
                    acc
                })
            })
            .collect()
    }
}

/// Output of [`encode_path`]: one time-augmented path per filter.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedPaths {
    /// Channel count of the path that was encoded (before padding).
    pub source_dim: usize,
    /// Filter `i`'s path: channel 0 is normalized time, channels `1..`
    /// are the filter outputs per block.
    pub paths: Vec<Path>,
}

pub fn encode_path(path: &Path, kernel: &ChannelConvKernel) -> Result<EncodedPaths> {
    let outputs = kernel.apply(path.values());
    let paths = outputs
        .into_iter()
        .map(|v| Path::new(path.times().to_vec(), v).map(|p| time_augment(&p, true)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EncodedPaths {
        source_dim: path.dim(),
        paths,
    })
}

/// Inverts [`encode_path`] by applying `K^{-1}` to every block (after
/// removing the bias). Time channels are dropped.
pub fn decode_path(enc: &EncodedPaths, kernel: &ChannelConvKernel) -> Result<Path> {
    let c = kernel.c();
    if kernel.stride() != c {
        return Err(Error::Parameter(
            "only non-overlapping strides can be inverted".into(),
        ));
    }
    if enc.paths.len() != c {
        return Err(Error::shape(format!("expected {c} encoded paths, got {}", enc.paths.len())));
    }
    if !is_full_rank(kernel.matrix(), RANK_TOL)? {
        return Err(Error::Rank);
    }
    let n = enc.paths[0].len();
    let gamma = enc.paths[0].dim() - 1;
    if enc.paths.iter().any(|p| p.len() != n || p.dim() != gamma + 1) {
        return Err(Error::shape("encoded paths disagree in shape"));
    }
    if kernel.blocks(enc.source_dim) != gamma {
        return Err(Error::shape("source dimension inconsistent with encoded width"));
    }
    let lu = to_dmatrix(kernel.matrix()).lu();
    let mut values = Array2::zeros((n, gamma * c));
    let zero_bias = vec![0.0; c];
    let bias = kernel.bias().unwrap_or(&zero_bias);
    for j in 0..n {
        for l in 0..gamma {
            let y = nalgebra::DVector::from_fn(c, |i, _| enc.paths[i].values()[[j, l + 1]] - bias[i]);
            let x = lu.solve(&y).ok_or(Error::Rank)?;
            for r in 0..c {
                values[[j, l * c + r]] = x[r];
            }
        }
    }
    let values = values.slice(s![.., ..enc.source_dim]).to_owned();
    Path::new(enc.paths[0].times().to_vec(), values)
}

fn to_dmatrix(k: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = k.dim();
    DMatrix::from_fn(r, c, |i, j| k[[i, j]])
}

/// True iff the smallest singular value of `k` exceeds `tol`.
pub fn is_full_rank(k: &Array2<f64>, tol: f64) -> Result<bool> {
    let (r, c) = k.dim();
    if r != c {
        return Err(Error::shape(format!("rank test needs a square matrix, got {r}x{c}")));
    }
    if r == 0 {
        return Ok(false);
    }
    let sv = to_dmatrix(k).singular_values();
    Ok(sv.iter().copied().fold(f64::INFINITY, f64::min) > tol)
}

fn check_divides(value: usize, divisor: usize) -> Result<()> {
    if divisor == 0 || value % divisor != 0 {
        return Err(Error::Divisibility { value, divisor });
    }
    Ok(())
}

/// Features emitted by `c` filters over a `d`-channel path: each filter
/// yields a `(γ + 1)`-channel path (time included) whose depth-`m`
/// signature, constant dropped, has `sum_{k=1}^m (γ + 1)^k` terms.
pub fn feature_count_nf(d: usize, c: usize, m: usize) -> Result<usize> {
    check_divides(d, c)?;
    let gamma = d / c;
    Ok(c * (1..=m).map(|k| (gamma + 1).pow(k as u32)).sum::<usize>())
}

/// Feature count plus `α` times the number of kernel parameters `(d/γ)²`.
pub fn regularized_count(gamma: usize, d: usize, m: usize, alpha: f64) -> Result<f64> {
    check_divides(d, gamma)?;
    let c = d / gamma;
    let features = feature_count_nf(d, c, m)? as f64;
    Ok(features + alpha * (c * c) as f64)
}

/// Closed form `((γ+1)^m - 1) / γ² · (γ+1) · d` of the feature term.
pub fn feature_count_closed_form(gamma: usize, d: usize, m: usize) -> f64 {
    let g = gamma as f64;
    ((g + 1.0).powi(m as i32) - 1.0) / (g * g) * (g + 1.0) * d as f64
}

pub fn divisors(d: usize) -> Vec<usize> {
    (1..=d).filter(|g| d % g == 0).collect()
}

/// Divisor `γ` of `d` minimizing [`regularized_count`]; ties go to the
/// smaller `γ`.
pub fn gamma_select(d: usize, m: usize, alpha: f64) -> usize {
    let mut best = (1, f64::INFINITY);
    for g in divisors(d) {
        let n = regularized_count(g, d, m, alpha).expect("divisor");
        if n < best.1 {
            best = (g, n);
        }
    }
    best.0
}
