//! Exact truncated signatures of piecewise-linear paths.
//!
//! On each linear segment the signature is the tensor exponential of the
//! increment, so the signature of the whole path is the ordered product of
//! segment exponentials (Chen's identity). No quadrature is involved.
//! Products are accumulated left to right in observation order.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{tensor_exp, ExpScratch, TruncatedTensor};

/// Time-stamped observations `(t_j, x_j)`, interpreted as the linear
/// interpolation between consecutive points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PathRepr", into = "PathRepr")]
pub struct Path {
    times: Vec<f64>,
    values: Array2<f64>,
}

#[derive(Serialize, Deserialize)]
struct PathRepr {
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl TryFrom<PathRepr> for Path {
    type Error = Error;

    fn try_from(r: PathRepr) -> Result<Self> {
        Path::from_rows(r.times, &r.values)
    }
}

impl From<Path> for PathRepr {
    fn from(p: Path) -> Self {
        PathRepr {
            values: p.values.outer_iter().map(|r| r.to_vec()).collect(),
            times: p.times,
        }
    }
}

impl Path {
    pub fn new(times: Vec<f64>, values: Array2<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::EmptyPath);
        }
        if values.nrows() != times.len() {
            return Err(Error::shape(format!(
                "{} times but {} observations",
                times.len(),
                values.nrows()
            )));
        }
        if values.ncols() == 0 {
            return Err(Error::shape("path needs at least one channel"));
        }
        if let Some(index) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::NonMonotoneTimes { index: index + 1 });
        }
        Ok(Path { times, values })
    }

    pub fn from_rows(times: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::shape("ragged observation rows"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::shape(e.to_string()))?;
        Self::new(times, values)
    }

    /// Observations at uniform times on `[0, 1]` (a single point sits at 0).
    pub fn uniform(values: Array2<f64>) -> Result<Self> {
        let n = values.nrows();
        Self::new(uniform_times(n), values)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn point(&self, j: usize) -> ArrayView1<'_, f64> {
        self.values.row(j)
    }

    /// Increment `x_{j+1} - x_j` of segment `j`.
    pub fn increment(&self, j: usize) -> Vec<f64> {
        let a = self.values.row(j);
        let b = self.values.row(j + 1);
        b.iter().zip(a.iter()).map(|(b, a)| b - a).collect()
    }

    /// Total 1-variation under the Euclidean norm.
    pub fn one_variation(&self) -> f64 {
        (0..self.len().saturating_sub(1))
            .map(|j| self.increment(j).iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum()
    }

    /// The same trajectory traversed backwards, on the mirrored time grid.
    pub fn reversed(&self) -> Path {
        let (t0, t1) = (self.times[0], self.times[self.len() - 1]);
        let times = self.times.iter().rev().map(|t| t0 + t1 - t).collect();
        let mut values = self.values.clone();
        values.invert_axis(ndarray::Axis(0));
        Path { times, values }
    }

    /// Concatenation with a path that starts where this one ends; the
    /// shared point is kept once.
    pub fn concat(&self, other: &Path) -> Result<Path> {
        if self.dim() != other.dim() {
            return Err(Error::shape("concatenated paths differ in dimension"));
        }
        let shift = self.times[self.len() - 1] - other.times[0];
        let mut times = self.times.clone();
        times.extend(other.times[1..].iter().map(|t| t + shift));
        let mut values = self.values.clone();
        for row in other.values.outer_iter().skip(1) {
            values
                .push_row(row)
                .map_err(|e| Error::shape(e.to_string()))?;
        }
        Path::new(times, values)
    }
}

pub(crate) fn uniform_times(n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![0.0; n];
    }
    let last = (n - 1) as f64;
    (0..n).map(|j| j as f64 / last).collect()
}

/// Truncated signature `S^m(path)`.
pub fn signature(path: &Path, m: usize) -> TruncatedTensor {
    let d = path.dim();
    let mut sig = TruncatedTensor::unit(d, m);
    let mut scratch = ExpScratch::default();
    for j in 0..path.len() - 1 {
        sig.mul_exp_in_place(&path.increment(j), &mut scratch);
    }
    if m >= 1 {
        // Level 1 telescopes to the total increment; write it directly.
        let first = path.point(0);
        let last = path.point(path.len() - 1);
        for (s, (a, b)) in sig.level_mut(1).iter_mut().zip(first.iter().zip(last.iter())) {
            *s = b - a;
        }
    }
    sig
}

/// Prefix signatures: entry `j` is the signature of the path up to `t_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct SignatureStream {
    pub dim: usize,
    pub depth: usize,
    pub prefix_sigs: Vec<TruncatedTensor>,
}

impl SignatureStream {
    pub fn last(&self) -> &TruncatedTensor {
        self.prefix_sigs.last().expect("stream is never empty")
    }
}

pub fn stream_signature(path: &Path, m: usize) -> SignatureStream {
    let d = path.dim();
    let mut prefix_sigs = Vec::with_capacity(path.len());
    let mut sig = TruncatedTensor::unit(d, m);
    let mut scratch = ExpScratch::default();
    prefix_sigs.push(sig.clone());
    for j in 0..path.len() - 1 {
        sig.mul_exp_in_place(&path.increment(j), &mut scratch);
        prefix_sigs.push(sig.clone());
    }
    SignatureStream {
        dim: d,
        depth: m,
        prefix_sigs,
    }
}

/// Prepends the time stamp as channel 0. With `normalize`, time is rescaled
/// affinely onto `[0, 1]` (a single observation maps to 0).
pub fn time_augment(path: &Path, normalize: bool) -> Path {
    let n = path.len();
    let d = path.dim();
    let (t0, t1) = (path.times[0], path.times[n - 1]);
    let span = t1 - t0;
    let mut values = Array2::zeros((n, d + 1));
    for (j, &t) in path.times.iter().enumerate() {
        values[[j, 0]] = if !normalize {
            t
        } else if n >= 2 {
            (t - t0) / span
        } else {
            0.0
        };
        for c in 0..d {
            values[[j, c + 1]] = path.values[[j, c]];
        }
    }
    Path {
        times: path.times.clone(),
        values,
    }
}

/// Gradient of `<cotangent, S^m(path)>` with respect to the path values,
/// by reverse accumulation through the chain of segment products.
pub fn signature_vjp(path: &Path, m: usize, cotangent: &TruncatedTensor) -> Result<Array2<f64>> {
    let d = path.dim();
    if cotangent.dim() != d || cotangent.depth() != m {
        return Err(Error::shape(format!(
            "cotangent shaped (d={}, m={}) for a signature of (d={d}, m={m})",
            cotangent.dim(),
            cotangent.depth()
        )));
    }
    let n = path.len();
    let mut grad = Array2::zeros((n, d));
    if n < 2 || m == 0 {
        return Ok(grad);
    }
    let stream = stream_signature(path, m);
    let mut g = cotangent.clone();
    for j in (1..n).rev() {
        let inc = path.increment(j - 1);
        let seg = tensor_exp(&inc, m);
        let (ga, gb) = product_vjp(&stream.prefix_sigs[j - 1], &seg, &g);
        let ginc = exp_vjp(&seg, &inc, &gb);
        for c in 0..d {
            grad[[j, c]] += ginc[c];
            grad[[j - 1, c]] -= ginc[c];
        }
        g = ga;
    }
    Ok(grad)
}

/// Cotangents of `a` and `b` for `c = a ⊗ b` given the cotangent of `c`.
fn product_vjp(a: &TruncatedTensor, b: &TruncatedTensor, g: &TruncatedTensor) -> (TruncatedTensor, TruncatedTensor) {
    let (d, m) = (a.dim(), a.depth());
    let mut ga = TruncatedTensor::zeros(d, m);
    let mut gb = TruncatedTensor::zeros(d, m);
    for j in 0..=m {
        let gj = g.level(j);
        for k in 0..=j {
            let i = j - k;
            let ak = a.level(k);
            let bi = b.level(i);
            let width = bi.len();
            let mut gb_acc = vec![0.0; width];
            for (u, &au) in ak.iter().enumerate() {
                let row = &gj[u * width..(u + 1) * width];
                let mut s = 0.0;
                for ((&gv, &bv), acc) in row.iter().zip(bi).zip(gb_acc.iter_mut()) {
                    s += gv * bv;
                    *acc += gv * au;
                }
                ga.level_mut(k)[u] += s;
            }
            for (t, v) in gb.level_mut(i).iter_mut().zip(gb_acc) {
                *t += v;
            }
        }
    }
    (ga, gb)
}

/// Gradient of `<h, exp(Δ)>` with respect to `Δ`, given `seg = exp(Δ)`.
/// Backpropagates through the recursion `E_k = E_{k-1} ⊗ Δ / k`.
fn exp_vjp(seg: &TruncatedTensor, inc: &[f64], h: &TruncatedTensor) -> Vec<f64> {
    let d = inc.len();
    let mut ginc = vec![0.0; d];
    let mut gk: Vec<f64> = h.level(seg.depth()).to_vec();
    for k in (1..=seg.depth()).rev() {
        let prev = seg.level(k - 1);
        let scale = 1.0 / k as f64;
        let mut gprev = h.level(k - 1).to_vec();
        for (u, &pu) in prev.iter().enumerate() {
            let row = &gk[u * d..(u + 1) * d];
            let mut s = 0.0;
            for (v, &gv) in row.iter().enumerate() {
                s += gv * inc[v];
                ginc[v] += gv * pu * scale;
            }
            gprev[u] += s * scale;
        }
        gk = gprev;
    }
    ginc
}

/// Reads a path CSV with header `t,x1,...,xd`. Errors carry 1-based line
/// numbers.
pub fn read_path_csv<R: Read>(reader: R) -> Result<Path> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers().map_err(|e| csv_error(e, 1))?.clone();
    if header.is_empty() || &header[0] != "t" {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with column `t`".into(),
        });
    }
    let d = header.len() - 1;
    if d == 0 {
        return Err(Error::Parse {
            line: 1,
            message: "no value columns".into(),
        });
    }
    let mut times = Vec::new();
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| csv_error(e, 0))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", d + 1, record.len()),
            });
        }
        let mut parsed = Vec::with_capacity(d + 1);
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("not a number: {field:?}"),
            })?;
            parsed.push(v);
        }
        if let Some(&prev) = times.last() {
            if !(parsed[0] > prev) {
                return Err(Error::Parse {
                    line,
                    message: format!("time {} does not exceed previous time {prev}", parsed[0]),
                });
            }
        }
        times.push(parsed[0]);
        rows.push(parsed[1..].to_vec());
    }
    if times.is_empty() {
        return Err(Error::EmptyPath);
    }
    Path::from_rows(times, &rows)
}

fn csv_error(e: csv::Error, fallback_line: u64) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

pub fn write_path_csv<W: Write>(path: &Path, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_string()];
    header.extend((1..=path.dim()).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(|e| csv_error(e, 0))?;
    for (j, &t) in path.times.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend(path.values.row(j).iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(e, 0))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{truncated_product, Word};
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_path(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Path {
        let values = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        Path::uniform(values).unwrap()
    }

    #[test]
    fn single_segment_is_exponential() {
        let p = Path::uniform(array![[0.0, 0.0], [4.0, 16.0]]).unwrap();
        let s = signature(&p, 2);
        assert_eq!(s.levels(), &[vec![1.0], vec![4.0, 16.0], vec![8.0, 32.0, 32.0, 128.0]]);
    }

    #[test]
    fn smooth_cubic_path_level_two() {
        let n = 4001;
        let times: Vec<f64> = (0..n).map(|i| 4.0 * i as f64 / (n - 1) as f64).collect();
        let rows: Vec<Vec<f64>> = times.iter().map(|&t| vec![t, (t - 2.0).powi(3)]).collect();
        let p = Path::from_rows(times, &rows).unwrap();
        let s = signature(&p, 2);
        assert_eq!(s.level(1), &[4.0, 16.0]);
        for (got, want) in s.level(2).iter().zip([8.0, 32.0, 32.0, 128.0]) {
            assert!((got - want).abs() / want < 1e-3, "{got} vs {want}");
        }
    }

    #[test]
    fn constant_path_has_unit_signature() {
        let p = Path::uniform(Array2::from_elem((5, 3), 2.5)).unwrap();
        assert_eq!(signature(&p, 4), TruncatedTensor::unit(3, 4));
    }

    #[test]
    fn empty_and_non_monotone_paths_rejected() {
        assert!(matches!(
            Path::new(vec![], Array2::zeros((0, 2))),
            Err(Error::EmptyPath)
        ));
        assert!(matches!(
            Path::new(vec![0.0, 1.0, 1.0], Array2::zeros((3, 1))),
            Err(Error::NonMonotoneTimes { index: 2 })
        ));
    }

    #[test]
    fn stream_examples() {
        let single = Path::uniform(array![[1.0, 2.0]]).unwrap();
        let st = stream_signature(&single, 3);
        assert_eq!(st.prefix_sigs, vec![TruncatedTensor::unit(2, 3)]);

        let p = Path::uniform(array![[0.0, 0.0], [1.0, 0.5], [0.0, 2.0]]).unwrap();
        let st = stream_signature(&p, 3);
        let expected = truncated_product(&tensor_exp(&[1.0, 0.5], 3), &tensor_exp(&[-1.0, 1.5], 3)).unwrap();
        assert!(st.prefix_sigs[2].max_abs_diff(&expected) < 1e-14);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_path(&mut rng, 10, 2);
        let st = stream_signature(&p, 3);
        assert_eq!(st.prefix_sigs.len(), 10);
        assert!(st.last().max_abs_diff(&signature(&p, 3)) < 1e-12);
    }

    #[test]
    fn time_augment_examples() {
        let p = Path::new(vec![3.0, 5.0, 7.0, 9.0], array![[1.0], [2.0], [0.0], [4.0]]).unwrap();
        let a = time_augment(&p, true);
        assert_eq!(a.dim(), 2);
        assert_eq!(a.values().column(0).to_vec(), vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(a.values().column(1).to_vec(), vec![1.0, 2.0, 0.0, 4.0]);
        assert_eq!(signature(&a, 1).level(1)[0], 1.0);

        let raw = time_augment(&p, false);
        assert_eq!(raw.values().column(0).to_vec(), vec![3.0, 5.0, 7.0, 9.0]);

        let one = Path::new(vec![2.0], array![[5.0]]).unwrap();
        assert_eq!(time_augment(&one, true).values(), &array![[0.0, 5.0]]);
    }

    #[test]
    fn vjp_level_one_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_path(&mut rng, 5, 3);
        let mut cot = TruncatedTensor::zeros(3, 3);
        cot.level_mut(1)[1] = 1.0;
        let g = signature_vjp(&p, 3, &cot).unwrap();
        let mut expected = Array2::zeros((5, 3));
        expected[[4, 1]] = 1.0;
        expected[[0, 1]] = -1.0;
        assert!(g.iter().zip(expected.iter()).all(|(a, b)| (a - b).abs() < 1e-14));

        let mut cot = TruncatedTensor::zeros(3, 3);
        cot.level_mut(0)[0] = 1.0;
        let g = signature_vjp(&p, 3, &cot).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));

        assert!(matches!(
            signature_vjp(&p, 2, &cot),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, d, m) = (6, 2, 3);
        let p = random_path(&mut rng, n, d);
        let levels = (0..=m)
            .map(|k| (0..d.pow(k as u32)).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let cot = TruncatedTensor::from_levels(d, m, levels).unwrap();
        let pair = |t: &TruncatedTensor| -> f64 {
            t.flatten(true).iter().zip(cot.flatten(true)).map(|(a, b)| a * b).sum()
        };
        let g = signature_vjp(&p, m, &cot).unwrap();
        let h = 1e-5;
        for j in 0..n {
            for c in 0..d {
                let mut plus = p.values().clone();
                plus[[j, c]] += h;
                let mut minus = p.values().clone();
                minus[[j, c]] -= h;
                let fp = pair(&signature(&Path::uniform(plus).unwrap(), m));
                let fm = pair(&signature(&Path::uniform(minus).unwrap(), m));
                let fd = (fp - fm) / (2.0 * h);
                let err = (g[[j, c]] - fd).abs() / fd.abs().max(1e-8);
                assert!(err < 1e-4, "({j},{c}): {} vs {fd}", g[[j, c]]);
            }
        }
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let p = Path::new(vec![0.0, 0.5, 1.0], array![[0.0, 1.0], [2.0, -1.5], [3.0, 0.25]]).unwrap();
        let mut buf = Vec::new();
        write_path_csv(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,x1,x2\n"));
        assert_eq!(read_path_csv(text.as_bytes()).unwrap(), p);

        let bad = "t,x1\n0,1\n1,2\n0.5,3\n";
        match read_path_csv(bad.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        let bad = "t,x1\n0,1\n1,abc\n";
        assert!(matches!(read_path_csv(bad.as_bytes()), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(read_path_csv("t,x1\n".as_bytes()), Err(Error::EmptyPath)));
    }

    #[test]
    fn coefficient_lookup_by_word() {
        let p = Path::uniform(array![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0]]).unwrap();
        let s = signature(&p, 2);
        // Area-type term: right then up.
        assert_eq!(s.coeff(&Word::new([1, 2])).unwrap(), 1.0);
        assert_eq!(s.coeff(&Word::new([2, 1])).unwrap(), 0.0);
    }
}
