//! Truncated tensor algebra `T^m(R^d)`.
//!
//! A [`TruncatedTensor`] stores levels `0..=m` as dense flat arrays. Level
//! `k` holds `d^k` coefficients in lexicographic word order: the word
//! `(i_1, ..., i_k)` (letters are 1-based) lives at
//! `sum_j (i_j - 1) * d^(k - j)`.
//!
//! Level 0 is stored explicitly so the algebra stays closed under the
//! truncated product; feature extraction drops it on request.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A word `i_1 ... i_k` over the alphabet `{1, ..., d}`. The empty word
/// indexes the constant term.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Word(Vec<usize>);

impl Word {
    pub fn new(letters: impl Into<Vec<usize>>) -> Self {
        Word(letters.into())
    }

    pub fn empty() -> Self {
        Word(Vec::new())
    }

    pub fn letters(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self.0.iter().find(|&&l| l == 0 || l > dim) {
            Some(&letter) => Err(Error::InvalidWord { letter, dim }),
            None => Ok(()),
        }
    }

    pub fn concat(&self, other: &Word) -> Word {
        let mut letters = self.0.clone();
        letters.extend_from_slice(&other.0);
        Word(letters)
    }
}

impl fmt::Display for Word {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, l) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{l}")?;
        }
        write!(f, ")")
    }
}

impl From<&[usize]> for Word {
    fn from(letters: &[usize]) -> Self {
        Word(letters.to_vec())
    }
}

/// Flat index of `word` within its level.
pub fn word_to_index(word: &Word, dim: usize) -> Result<usize> {
    word.validate(dim)?;
    Ok(word.0.iter().fold(0, |acc, &l| acc * dim + (l - 1)))
}

/// Inverse of [`word_to_index`] for words of length `len`.
pub fn index_to_word(index: usize, len: usize, dim: usize) -> Result<Word> {
    let size = dim.pow(len as u32);
    if index >= size {
        return Err(Error::shape(format!(
            "index {index} out of range for level {len} of dimension {dim}"
        )));
    }
    let mut letters = vec![0; len];
    let mut rest = index;
    for slot in letters.iter_mut().rev() {
        *slot = rest % dim + 1;
        rest /= dim;
    }
    Ok(Word(letters))
}

/// Number of signature coefficients up to depth `m`. Summed level by level,
/// so `d = 1` needs no special case.
pub fn sig_feature_count(d: usize, m: usize, include_constant: bool) -> usize {
    let start = if include_constant { 0 } else { 1 };
    (start..=m).map(|k| d.pow(k as u32)).sum()
}

/// An element of `T^m(R^d)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TensorRepr", into = "TensorRepr")]
pub struct TruncatedTensor {
    dim: usize,
    depth: usize,
    levels: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    dim: usize,
    depth: usize,
    levels: Vec<Vec<f64>>,
}

impl TryFrom<TensorRepr> for TruncatedTensor {
    type Error = Error;

    fn try_from(r: TensorRepr) -> Result<Self> {
        TruncatedTensor::from_levels(r.dim, r.depth, r.levels)
    }
}

impl From<TruncatedTensor> for TensorRepr {
    fn from(t: TruncatedTensor) -> Self {
        TensorRepr {
            dim: t.dim,
            depth: t.depth,
            levels: t.levels,
        }
    }
}

impl TruncatedTensor {
    pub fn zeros(dim: usize, depth: usize) -> Self {
        let levels = (0..=depth).map(|k| vec![0.0; dim.pow(k as u32)]).collect();
        TruncatedTensor { dim, depth, levels }
    }

    /// The algebra unit `(1, 0, 0, ...)`.
    pub fn unit(dim: usize, depth: usize) -> Self {
        let mut t = Self::zeros(dim, depth);
        t.levels[0][0] = 1.0;
        t
    }

    pub fn from_levels(dim: usize, depth: usize, levels: Vec<Vec<f64>>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::shape("tensor dimension must be at least 1"));
        }
        if levels.len() != depth + 1 {
            return Err(Error::shape(format!(
                "expected {} levels for depth {depth}, got {}",
                depth + 1,
                levels.len()
            )));
        }
        for (k, level) in levels.iter().enumerate() {
            let expected = dim.pow(k as u32);
            if level.len() != expected {
                return Err(Error::shape(format!(
                    "level {k} has {} entries, expected {expected}",
                    level.len()
                )));
            }
        }
        Ok(TruncatedTensor { dim, depth, levels })
    }

    /// Rebuilds a tensor from its concatenated levels (see [`Self::flatten`]).
    /// Without the constant the level-0 entry is set to 1.
    pub fn from_flat(dim: usize, depth: usize, flat: &[f64], include_constant: bool) -> Result<Self> {
        let expected = sig_feature_count(dim, depth, include_constant);
        if flat.len() != expected {
            return Err(Error::shape(format!(
                "flat tensor has {} entries, expected {expected}",
                flat.len()
            )));
        }
        let mut t = Self::unit(dim, depth);
        let mut offset = 0;
        let start = if include_constant { 0 } else { 1 };
        for k in start..=depth {
            let n = t.levels[k].len();
            t.levels[k].copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(t)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn level(&self, k: usize) -> &[f64] {
        &self.levels[k]
    }

    pub fn level_mut(&mut self, k: usize) -> &mut [f64] {
        &mut self.levels[k]
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    /// Coefficient of `word`.
    pub fn coeff(&self, word: &Word) -> Result<f64> {
        if word.len() > self.depth {
            return Err(Error::Depth {
                len: word.len(),
                depth: self.depth,
            });
        }
        Ok(self.levels[word.len()][word_to_index(word, self.dim)?])
    }

    /// Levels concatenated in order, optionally without the constant term.
    pub fn flatten(&self, include_constant: bool) -> Vec<f64> {
        let start = if include_constant { 0 } else { 1 };
        self.levels[start..].iter().flatten().copied().collect()
    }

    /// Euclidean norm of level `k`.
    pub fn level_norm(&self, k: usize) -> f64 {
        self.levels[k].iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest absolute coefficient difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &TruncatedTensor) -> f64 {
        assert!(self.dim == other.dim && self.depth == other.depth);
        self.levels
            .iter()
            .flatten()
            .zip(other.levels.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn check_compatible(&self, other: &TruncatedTensor) -> Result<()> {
        if self.dim != other.dim || self.depth != other.depth {
            return Err(Error::shape(format!(
                "tensor shapes differ: (d={}, m={}) vs (d={}, m={})",
                self.dim, self.depth, other.dim, other.depth
            )));
        }
        Ok(())
    }

    /// Truncated tensor product `self ⊗ other`.
    pub fn product(&self, other: &TruncatedTensor) -> Result<TruncatedTensor> {
        truncated_product(self, other)
    }

    /// Multiplies `self` on the right by `exp(increment)` in place, using a
    /// Horner scheme per level. `scratch` is resized as needed.
    pub fn mul_exp_in_place(&mut self, increment: &[f64], scratch: &mut ExpScratch) {
        debug_assert_eq!(increment.len(), self.dim);
        let d = self.dim;
        let max_len = d.pow(self.depth as u32);
        scratch.ensure(max_len);
        let (acc, next) = (&mut scratch.acc, &mut scratch.next);
        for k in (1..=self.depth).rev() {
            // acc_i = acc_{i-1} ⊗ Δ / (k - i + 1) + S_i
            acc[0] = self.levels[0][0];
            let mut len = 1;
            for i in 1..=k {
                let scale = 1.0 / (k - i + 1) as f64;
                let level = &self.levels[i];
                for u in 0..len {
                    let a = acc[u] * scale;
                    let base = u * d;
                    for (v, &dv) in increment.iter().enumerate() {
                        next[base + v] = a * dv + level[base + v];
                    }
                }
                len *= d;
                std::mem::swap(acc, next);
            }
            self.levels[k].copy_from_slice(&acc[..len]);
        }
    }
}

/// Reusable buffers for [`TruncatedTensor::mul_exp_in_place`].
#[derive(Debug, Default, Clone)]
pub struct ExpScratch {
    acc: Vec<f64>,
    next: Vec<f64>,
}

impl ExpScratch {
    fn ensure(&mut self, len: usize) {
        if self.acc.len() < len {
            self.acc.resize(len, 0.0);
            self.next.resize(len, 0.0);
        }
    }
}

/// Level `j` of the result is `sum_{k=0}^{j} a_k ⊗ b_{j-k}`.
pub fn truncated_product(a: &TruncatedTensor, b: &TruncatedTensor) -> Result<TruncatedTensor> {
    a.check_compatible(b)?;
    let mut out = TruncatedTensor::zeros(a.dim, a.depth);
    for j in 0..=a.depth {
        let target = &mut out.levels[j];
        for k in 0..=j {
            let left = &a.levels[k];
            let right = &b.levels[j - k];
            let width = right.len();
            for (u, &au) in left.iter().enumerate() {
                if au == 0.0 {
                    continue;
                }
                let row = &mut target[u * width..(u + 1) * width];
                for (r, &bv) in row.iter_mut().zip(right) {
                    *r += au * bv;
                }
            }
        }
    }
    Ok(out)
}

/// `exp(increment)` truncated at depth `m`: level `k` is `Δ^{⊗k} / k!`.
pub fn tensor_exp(increment: &[f64], m: usize) -> TruncatedTensor {
    let d = increment.len();
    let mut out = TruncatedTensor::unit(d, m);
    for k in 1..=m {
        let (prev, cur) = out.levels.split_at_mut(k);
        let prev = &prev[k - 1];
        let scale = 1.0 / k as f64;
        for (u, &p) in prev.iter().enumerate() {
            for (v, &dv) in increment.iter().enumerate() {
                cur[0][u * d + v] = p * dv * scale;
            }
        }
    }
    out
}

/// All interleavings of `a` and `b`, with multiplicity. The result has
/// `C(|a| + |b|, |a|)` entries.
pub fn shuffle_words(a: &Word, b: &Word) -> Vec<Word> {
    let mut out = Vec::new();
    let mut buf = Vec::with_capacity(a.len() + b.len());
    shuffle_rec(a.letters(), b.letters(), &mut buf, &mut out);
    out
}

fn shuffle_rec(a: &[usize], b: &[usize], buf: &mut Vec<usize>, out: &mut Vec<Word>) {
    if a.is_empty() || b.is_empty() {
        let mut w = buf.clone();
        w.extend_from_slice(a);
        w.extend_from_slice(b);
        out.push(Word(w));
        return;
    }
    buf.push(a[0]);
    shuffle_rec(&a[1..], b, buf, out);
    buf.pop();
    buf.push(b[0]);
    shuffle_rec(a, &b[1..], buf, out);
    buf.pop();
}

/// A finite linear combination of coordinate functionals `e_I^*`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearFunctional {
    dim: usize,
    terms: BTreeMap<Word, f64>,
}

impl LinearFunctional {
    pub fn new(dim: usize) -> Self {
        LinearFunctional {
            dim,
            terms: BTreeMap::new(),
        }
    }

    pub fn from_terms(dim: usize, terms: impl IntoIterator<Item = (Word, f64)>) -> Result<Self> {
        let mut l = Self::new(dim);
        for (w, c) in terms {
            l.add_term(w, c)?;
        }
        Ok(l)
    }

    /// The functional `e_a^* ⧢ e_b^*`.
    pub fn shuffle(dim: usize, a: &Word, b: &Word) -> Result<Self> {
        Self::from_terms(dim, shuffle_words(a, b).into_iter().map(|w| (w, 1.0)))
    }

    /// Adds `coeff` to the coefficient of `word`.
    pub fn add_term(&mut self, word: Word, coeff: f64) -> Result<()> {
        word.validate(self.dim)?;
        *self.terms.entry(word).or_insert(0.0) += coeff;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn terms(&self) -> impl Iterator<Item = (&Word, f64)> {
        self.terms.iter().map(|(w, &c)| (w, c))
    }

    pub fn max_len(&self) -> usize {
        self.terms.keys().map(Word::len).max().unwrap_or(0)
    }
}

/// `sum_I l_I * t[I]`.
pub fn apply_functional(l: &LinearFunctional, t: &TruncatedTensor) -> Result<f64> {
    if l.dim != t.dim {
        return Err(Error::shape(format!(
            "functional over dimension {} applied to tensor of dimension {}",
            l.dim, t.dim
        )));
    }
    l.terms.iter().try_fold(0.0, |acc, (w, &c)| Ok(acc + c * t.coeff(w)?))
}
