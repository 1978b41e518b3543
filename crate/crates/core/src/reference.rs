//! Dense masked-attention oracle and the renormalizing merge of partial
//! outputs. Written for obviousness, not speed.

use std::fmt::{Display, Write as _};
use std::str::FromStr;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::pattern::Pattern;

/// Row-major `rows x cols` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatTensor<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Float> FloatTensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        FloatTensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Shape("tensor entries must be finite".into()));
        }
        Ok(FloatTensor { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::from_vec(rows.len(), cols, rows.concat())
    }

    /// Uniform entries in `[-amplitude, amplitude]` from a pinned seed.
    pub fn random(rows: usize, cols: usize, seed: u64, amplitude: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| T::from(rng.gen_range(-amplitude..=amplitude)).unwrap())
            .collect();
        FloatTensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn map<U: Float>(&self, f: impl Fn(T) -> U) -> FloatTensor<U> {
        FloatTensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Rows reordered so that row `a` of the result is row `perm[a]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, self.cols);
        for (a, &src) in perm.iter().enumerate() {
            out.row_mut(a).copy_from_slice(self.row(src));
        }
        out
    }
}

impl<T: Float + Display> FloatTensor<T> {
    /// Plain text: a `rows cols` header, then one whitespace-separated row per line.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.rows, self.cols);
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|x| x.to_string()).collect();
            let _ = writeln!(out, "{}", line.join(" "));
        }
        out
    }
}

impl<T: Float + FromStr> FloatTensor<T> {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut tokens = text
            .lines()
            .filter(|l| !l.trim_start().starts_with('#'))
            .flat_map(str::split_whitespace);
        let mut dim = || -> Result<usize> {
            tokens
                .next()
                .ok_or_else(|| Error::Parse("missing tensor header".into()))?
                .parse()
                .map_err(|_| Error::Parse("bad tensor header".into()))
        };
        let (rows, cols) = (dim()?, dim()?);
        let data = tokens
            .map(|t| {
                t.parse::<T>()
                    .map_err(|_| Error::Parse(format!("bad number `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_vec(rows, cols, data)
    }
}

/// One fragment's contribution to a query row: its softmax-normalized output
/// and the weight `W_k = sum exp(S_ij)` over the fragment's keys.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialOutput<T> {
    pub vector: Vec<T>,
    pub weight: T,
}

/// Attention of query `i` restricted to `keys`, returned with its weight.
pub fn partial_attention<T: Float>(
    q: &FloatTensor<T>,
    k: &FloatTensor<T>,
    v: &FloatTensor<T>,
    i: usize,
    keys: &[usize],
    scale: bool,
) -> Result<PartialOutput<T>> {
    if keys.is_empty() {
        return Err(Error::EmptyRow(i));
    }
    let d = q.cols();
    let inv_sqrt_d = if scale {
        T::one() / T::from(d).unwrap().sqrt()
    } else {
        T::one()
    };
    let mut weight = T::zero();
    let mut acc = vec![T::zero(); v.cols()];
    for &j in keys {
        let mut s = T::zero();
        for t in 0..d {
            s = s + q.row(i)[t] * k.row(j)[t];
        }
        let e = (s * inv_sqrt_d).exp();
        weight = weight + e;
        for (a, &x) in acc.iter_mut().zip(v.row(j)) {
            *a = *a + e * x;
        }
    }
    let vector = acc.into_iter().map(|a| a / weight).collect();
    Ok(PartialOutput { vector, weight })
}

fn check_shapes<T: Float>(
    q: &FloatTensor<T>,
    k: &FloatTensor<T>,
    v: &FloatTensor<T>,
    n: usize,
) -> Result<()> {
    if q.rows() != n || k.rows() != n || v.rows() != n {
        return Err(Error::Shape(format!(
            "pattern has {n} tokens but Q/K/V have {}/{}/{} rows",
            q.rows(),
            k.rows(),
            v.rows()
        )));
    }
    if q.cols() != k.cols() || q.cols() == 0 {
        return Err(Error::Shape(
            "Q and K must share a non-zero head dim".into(),
        ));
    }
    Ok(())
}

/// `O[i] = sum_j softmax_j(S_ij) V[j]` over the members of row `i`, with
/// `S = Q K^T` (divided by `sqrt(d)` when `scale`).
pub fn masked_attention<T: Float>(
    q: &FloatTensor<T>,
    k: &FloatTensor<T>,
    v: &FloatTensor<T>,
    pattern: &Pattern,
    scale: bool,
) -> Result<FloatTensor<T>> {
    let n = pattern.seq_len();
    check_shapes(q, k, v, n)?;
    let mut out = FloatTensor::zeros(n, v.cols());
    for i in 0..n {
        let keys: Vec<usize> = (0..n).filter(|&j| pattern.membership(i, j)).collect();
        let part = partial_attention(q, k, v, i, &keys, scale)?;
        out.row_mut(i).copy_from_slice(&part.vector);
    }
    Ok(out)
}

/// Renormalizing merge: weight `sum W_k`, vector `sum (W_k / W) v_k`.
pub fn merge<T: Float>(parts: &[PartialOutput<T>]) -> Result<PartialOutput<T>> {
    let first = parts.first().ok_or(Error::EmptyMerge)?;
    let total = parts.iter().fold(T::zero(), |w, p| w + p.weight);
    let mut vector = vec![T::zero(); first.vector.len()];
    for p in parts {
        if p.vector.len() != vector.len() {
            return Err(Error::Shape("partial outputs of different lengths".into()));
        }
        let scale = p.weight / total;
        for (a, &x) in vector.iter_mut().zip(&p.vector) {
            *a = *a + scale * x;
        }
    }
    Ok(PartialOutput {
        vector,
        weight: total,
    })
}

/// Largest row-wise relative difference, `max_i |a_i - b_i|_inf / |b_i|_inf`.
/// Rows of `b` that are exactly zero fall back to absolute difference.
pub fn max_rel_diff<T: Float>(a: &FloatTensor<T>, b: &FloatTensor<T>) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()), "shape mismatch");
    (0..a.rows())
        .map(|i| {
            let diff = a
                .row(i)
                .iter()
                .zip(b.row(i))
                .map(|(&x, &y)| (x - y).abs().to_f64().unwrap())
                .fold(0.0, f64::max);
            let norm = b
                .row(i)
                .iter()
                .map(|y| y.abs().to_f64().unwrap())
                .fold(0.0, f64::max);
            if norm > 0.0 {
                diff / norm
            } else {
                diff
            }
        })
        .fold(0.0, f64::max)
}

pub fn max_abs_diff<T: Float>(a: &FloatTensor<T>, b: &FloatTensor<T>) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()), "shape mismatch");
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| (x - y).abs().to_f64().unwrap())
        .fold(0.0, f64::max)
}
