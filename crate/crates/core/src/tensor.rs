//! Dense row-major f32 matrices and the numeric kernels the model is built on.
//!
//! Model compute is f32. Dot products that feed similarity and norms are
//! accumulated in f64; the matmul kernels accumulate in f32 with eight
//! independent lanes, which keeps them deterministic and vectorizable.

use crate::error::{KamirError, Result};
use crate::rng::SeededRng;

pub const LAYER_NORM_EPS: f32 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(KamirError::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(KamirError::NonFinite(format!("matrix entry {pos}")));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn from N(0, std²).
    pub fn gaussian(rows: usize, cols: usize, std: f32, rng: &mut SeededRng) -> Self {
        let data = (0..rows * cols)
            .map(|_| (rng.normal() * std as f64) as f32)
            .collect();
        DenseMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.rows {
            return Err(KamirError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.cols);
        matmul_nn(
            &self.data,
            &other.data,
            self.rows,
            self.cols,
            other.cols,
            &mut out.data,
        );
        finite_or_err(out, "matmul")
    }

    /// `self · otherᵀ`.
    pub fn matmul_transposed(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        if self.cols != other.cols {
            return Err(KamirError::Shape(format!(
                "cannot multiply {}x{} by transpose of {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = DenseMatrix::zeros(self.rows, other.rows);
        matmul_nt(
            &self.data,
            &other.data,
            self.rows,
            self.cols,
            other.rows,
            &mut out.data,
        );
        finite_or_err(out, "matmul_transposed")
    }
}

fn finite_or_err(m: DenseMatrix, what: &str) -> Result<DenseMatrix> {
    if m.is_finite() {
        Ok(m)
    } else {
        Err(KamirError::NonFinite(format!("{what} overflowed")))
    }
}

/// f32 dot product with eight accumulation lanes.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let pa = &a[c * 8..c * 8 + 8];
        let pb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += pa[l] * pb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s = (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]);
    s + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out[m×n] = a[m×k] · b[k×n]` (overwrites `out`).
pub(crate) fn matmul_nn(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    out[..m * n].fill(0.0);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ` (overwrites `out`).
pub(crate) fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn matmul_tn_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, brow, &mut out[p * n..(p + 1) * n]);
            }
        }
    }
}

/// Cosine similarity with f64 accumulation, clamped to [-1, 1].
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(KamirError::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(KamirError::invalid("cosine of empty vectors"));
    }
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 {
        return Err(KamirError::DegenerateVector("first operand".into()));
    }
    if bb == 0.0 {
        return Err(KamirError::DegenerateVector("second operand".into()));
    }
    let c = ab / (aa.sqrt() * bb.sqrt());
    if !c.is_finite() {
        return Err(KamirError::NonFinite("cosine similarity".into()));
    }
    Ok(c.clamp(-1.0, 1.0))
}

pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(KamirError::invalid("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(KamirError::NonFinite("softmax input".into()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Max-shifted softmax; input assumed finite and non-empty.
pub(crate) fn softmax_in_place(v: &mut [f32]) {
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x as f64;
    }
    let inv = (1.0 / sum) as f32;
    for x in v.iter_mut() {
        *x *= inv;
    }
}

/// `-Σ p ln p` in nats, with `0 ln 0 = 0`.
pub fn shannon_entropy(p: &[f32]) -> Result<f64> {
    if p.is_empty() {
        return Err(KamirError::invalid("entropy of an empty distribution"));
    }
    if p.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(KamirError::invalid("probabilities must be finite and >= 0"));
    }
    let total: f64 = p.iter().map(|&x| x as f64).sum();
    if (total - 1.0).abs() > 1e-5 {
        return Err(KamirError::invalid(format!(
            "probabilities sum to {total}, not 1"
        )));
    }
    Ok(entropy_unchecked(p))
}

/// Entropy of `p` renormalized in f64, which absorbs the f32 rounding of
/// the probabilities.
pub(crate) fn entropy_unchecked(p: &[f32]) -> f64 {
    let total: f64 = p.iter().map(|&x| x as f64).sum();
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| {
            let q = x as f64 / total;
            q * q.ln()
        })
        .sum::<f64>()
}

/// Layer normalization without affine parameters.
pub fn layer_norm(x: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    layer_norm_row(x, None, None, &mut out);
    out
}

/// Normalizes one row, returning `1/sqrt(var + eps)`. `out` receives the
/// affine output when gamma/beta are given, otherwise the standardized row.
pub(crate) fn layer_norm_row(
    x: &[f32],
    gamma: Option<&[f32]>,
    beta: Option<&[f32]>,
    out: &mut [f32],
) -> f32 {
    let n = x.len() as f32;
    let mean = x.iter().sum::<f32>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for (i, o) in out.iter_mut().enumerate() {
        let mut v = (x[i] - mean) * rstd;
        if let Some(g) = gamma {
            v *= g[i];
        }
        if let Some(b) = beta {
            v += b[i];
        }
        *o = v;
    }
    rstd
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}
