//! Minimal dense numeric kernels: matrix products, SPD solves, stable softmax,
//! deterministic top-k.
//!
//! Regression internals run in f64; decode-state storage ([`Tensor4`]) is f32.
//! Every operation uses a fixed summation order so results are bit-reproducible
//! across runs and platforms.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("matrix is not symmetric within tolerance (|a[{i},{j}] - a[{j},{i}]| too large)")]
    NotSymmetric { i: usize, j: usize },
    #[error("matrix is not positive definite (pivot {pivot} at column {col})")]
    NotPositiveDefinite { col: usize, pivot: f64 },
    #[error("softmax over empty support (all entries masked)")]
    EmptySupport,
    #[error("top-k bound error: k = {k} exceeds length {len}")]
    KOutOfBounds { k: usize, len: usize },
}

/// Row-major dense f64 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix, rejecting length mismatches and non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch(format!(
                "{}x{} needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds from row slices; all rows must share a length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(LinalgError::ShapeMismatch("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Contiguous (batch, heads, tokens, dim) f32 tensor.
///
/// Layout index: `(b, h, t, d) -> ((b*H + h)*T + t)*D + d`. Fixed; the trace
/// file format serializes exactly this order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub batch: usize,
    pub heads: usize,
    pub tokens: usize,
    pub dim: usize,
    data: Vec<f32>,
}

impl Tensor4 {
    pub fn zeros(batch: usize, heads: usize, tokens: usize, dim: usize) -> Self {
        Self {
            batch,
            heads,
            tokens,
            dim,
            data: vec![0.0; batch * heads * tokens * dim],
        }
    }

    /// Wraps an existing buffer; length must be `B*H*T*D` and all entries finite.
    pub fn from_data(
        batch: usize,
        heads: usize,
        tokens: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self, LinalgError> {
        if data.len() != batch * heads * tokens * dim {
            return Err(LinalgError::ShapeMismatch(format!(
                "tensor ({batch},{heads},{tokens},{dim}) needs {} values, got {}",
                batch * heads * tokens * dim,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite(i));
        }
        Ok(Self {
            batch,
            heads,
            tokens,
            dim,
            data,
        })
    }

    #[inline]
    fn offset(&self, b: usize, h: usize, t: usize) -> usize {
        ((b * self.heads + h) * self.tokens + t) * self.dim
    }

    /// The dim-contiguous vector at (b, h, t).
    #[inline]
    pub fn vector(&self, b: usize, h: usize, t: usize) -> &[f32] {
        let o = self.offset(b, h, t);
        &self.data[o..o + self.dim]
    }

    /// The full token-major (T × D) block of one (b, h), contiguous by layout.
    #[inline]
    pub fn head_block(&self, b: usize, h: usize) -> &[f32] {
        let o = self.offset(b, h, 0);
        &self.data[o..o + self.tokens * self.dim]
    }

    #[inline]
    pub fn vector_mut(&mut self, b: usize, h: usize, t: usize) -> &mut [f32] {
        let o = self.offset(b, h, t);
        &mut self.data[o..o + self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Dense product `a · b` (or `a · bᵀ`), fixed i-j-k loop order.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix, transpose_b: bool) -> Result<DenseMatrix, LinalgError> {
    let (b_rows, b_cols) = if transpose_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if a.cols != b_rows {
        return Err(LinalgError::ShapeMismatch(format!(
            "inner dims disagree: {}x{} · {}x{}",
            a.rows, a.cols, b_rows, b_cols
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b_cols);
    for i in 0..a.rows {
        for j in 0..b_cols {
            let mut acc = 0.0f64;
            for k in 0..a.cols {
                let bv = if transpose_b { b.get(j, k) } else { b.get(k, j) };
                acc += a.get(i, k) * bv;
            }
            out.data[i * b_cols + j] = acc;
        }
    }
    Ok(out)
}

const SYMMETRY_REL_TOL: f64 = 1e-9;

/// Solves `g · x = b` for SPD `g` by Cholesky factorization.
///
/// `b` may carry multiple right-hand sides as columns. A non-positive pivot
/// reports [`LinalgError::NotPositiveDefinite`] (ridge ε too small or corrupted
/// input).
pub fn solve_spd(g: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let n = g.rows;
    if g.cols != n {
        return Err(LinalgError::ShapeMismatch(format!(
            "solve_spd needs a square matrix, got {}x{}",
            g.rows, g.cols
        )));
    }
    if b.rows != n {
        return Err(LinalgError::ShapeMismatch(format!(
            "rhs rows {} do not match system size {}",
            b.rows, n
        )));
    }
    let scale = g
        .data
        .iter()
        .fold(0.0f64, |m, v| if v.abs() > m { v.abs() } else { m });
    for i in 0..n {
        for j in (i + 1)..n {
            if (g.get(i, j) - g.get(j, i)).abs() > SYMMETRY_REL_TOL * (1.0 + scale) {
                return Err(LinalgError::NotSymmetric { i, j });
            }
        }
    }

    // Lower-triangular Cholesky factor, in place on a copy.
    let mut l = vec![0.0f64; n * n];
    for j in 0..n {
        let mut diag = g.get(j, j);
        for k in 0..j {
            diag -= l[j * n + k] * l[j * n + k];
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(LinalgError::NotPositiveDefinite { col: j, pivot: diag });
        }
        let dsqrt = diag.sqrt();
        l[j * n + j] = dsqrt;
        for i in (j + 1)..n {
            let mut acc = g.get(i, j);
            for k in 0..j {
                acc -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = acc / dsqrt;
        }
    }

    // Forward then back substitution per right-hand side.
    let m = b.cols;
    let mut x = DenseMatrix::zeros(n, m);
    for col in 0..m {
        let mut y = vec![0.0f64; n];
        for i in 0..n {
            let mut acc = b.get(i, col);
            for k in 0..i {
                acc -= l[i * n + k] * y[k];
            }
            y[i] = acc / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut acc = y[i];
            for k in (i + 1)..n {
                acc -= l[k * n + i] * x.get(k, col);
            }
            x.set(i, col, acc / l[i * n + i]);
        }
    }
    Ok(x)
}

/// Numerically stable softmax with an optional keep-mask.
///
/// Masked entries (mask = false) are treated as −∞ before exponentiation and
/// come out exactly 0; the unmasked entries sum to 1.
pub fn softmax(v: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>, LinalgError> {
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite(i));
    }
    if let Some(m) = mask {
        if m.len() != v.len() {
            return Err(LinalgError::ShapeMismatch(format!(
                "mask length {} vs values {}",
                m.len(),
                v.len()
            )));
        }
    }
    let keep = |i: usize| mask.map_or(true, |m| m[i]);
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if keep(i) && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(LinalgError::EmptySupport);
    }
    let mut out = vec![0.0f64; v.len()];
    let mut sum = 0.0f64;
    for (i, &x) in v.iter().enumerate() {
        if keep(i) {
            let e = (x - max).exp();
            out[i] = e;
            sum += e;
        }
    }
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

/// Indices of the k largest scores, sorted ascending.
///
/// Ties break in favor of the larger index (the more recent token). Pure and
/// deterministic: identical inputs give identical index vectors everywhere.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>, LinalgError> {
    if k > scores.len() {
        return Err(LinalgError::KOutOfBounds {
            k,
            len: scores.len(),
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // Total order: higher score first, then higher index first.
    let better = |&a: &usize, &b: &usize| {
        scores[b]
            .total_cmp(&scores[a])
            .then_with(|| b.cmp(&a))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, better);
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}
