//! Dense row-major tensors and the small numerical kernels built on them:
//! matrix products, Frobenius norm, per-axis scaling, and a deterministic
//! truncated SVD.
//!
//! All values are 64-bit reals. Every operation is a pure function on
//! immutable inputs, so callers may invoke them from any number of workers.

use crate::error::{Error, Result};
use crate::par;

/// Dense tensor of 64-bit reals stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and a flat row-major buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::arg(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {expected} values, buffer holds {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    /// All-zero tensor. Panics on a degenerate shape (programmer error).
    pub fn zeros(shape: Vec<usize>) -> Self {
        let len: usize = shape.iter().product();
        Self::new(shape, vec![0.0; len]).expect("zeros: dimensions must be positive")
    }

    /// Convenience constructor for a 2-D matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a `rows x cols` matrix from an element function.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self::matrix(rows, cols, data).expect("from_fn: dimensions must be positive")
    }

    /// `n x n` identity matrix.
    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert!(self.is_matrix(), "rows() requires a 2-D tensor");
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert!(self.is_matrix(), "cols() requires a 2-D tensor");
        self.shape[1]
    }

    /// Size of the last axis; the "channel" axis for activations.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Element of a 2-D tensor.
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Contiguous row of a 2-D tensor.
    pub fn row(&self, r: usize) -> &[f64] {
        let n = self.cols();
        &self.data[r * n..(r + 1) * n]
    }
}

/// Standard matrix product of an `m x k` and a `k x n` tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = require_matrix(a, "matmul lhs")?;
    let (kb, n) = require_matrix(b, "matmul rhs")?;
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul inner dimensions disagree: {m}x{ka} vs {kb}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    par::for_each_chunk(&mut out, n, |i, row| {
        for (kk, &aik) in ad[i * ka..(i + 1) * ka].iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bkj) in row.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    });
    Tensor::matrix(m, n, out)
}

/// Product of `a` with the transpose of `b`: `m x k` times `(n x k)ᵀ`.
///
/// This is the forward kernel for linear layers whose weight is stored as
/// `out_features x in_features`: `y = x · wᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = require_matrix(a, "matmul_nt lhs")?;
    let (n, kb) = require_matrix(b, "matmul_nt rhs")?;
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul_nt inner dimensions disagree: {m}x{ka} vs ({n}x{kb})T"
        )));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    par::for_each_chunk(&mut out, n, |i, row| {
        let arow = &ad[i * ka..(i + 1) * ka];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &bd[j * kb..(j + 1) * kb];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    });
    Tensor::matrix(m, n, out)
}

/// Square root of the sum of squared entries.
pub fn frobenius_norm(a: &Tensor) -> f64 {
    a.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
}

/// Multiplies every entry along the last axis by its per-channel factor.
pub fn scale_columns(a: &Tensor, s: &[f64]) -> Result<Tensor> {
    map_columns(a, s, |x, f| x * f)
}

/// Divides every entry along the last axis by its per-channel factor.
pub fn div_columns(a: &Tensor, s: &[f64]) -> Result<Tensor> {
    map_columns(a, s, |x, f| x / f)
}

/// Multiplies each row of a 2-D tensor by its factor.
pub fn scale_rows(a: &Tensor, s: &[f64]) -> Result<Tensor> {
    map_rows(a, s, |x, f| x * f)
}

/// Divides each row of a 2-D tensor by its factor.
pub fn div_rows(a: &Tensor, s: &[f64]) -> Result<Tensor> {
    map_rows(a, s, |x, f| x / f)
}

/// Element-wise difference `a - b`.
pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "sub operands disagree: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| x - y)
        .collect();
    Tensor::new(a.shape.clone(), data)
}

/// Adds `b` into `a` element-wise.
pub fn add_assign(a: &mut Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::shape(format!(
            "add_assign operands disagree: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    for (x, &y) in a.data.iter_mut().zip(&b.data) {
        *x += y;
    }
    Ok(())
}

/// Adds a per-column bias vector to every row of a 2-D tensor.
pub fn add_bias(a: &Tensor, bias: &[f64]) -> Result<Tensor> {
    let (_, n) = require_matrix(a, "add_bias input")?;
    if bias.len() != n {
        return Err(Error::shape(format!(
            "bias length {} does not match {} columns",
            bias.len(),
            n
        )));
    }
    let mut out = a.clone();
    par::for_each_chunk(out.data_mut(), n, |_, row| {
        for (x, &b) in row.iter_mut().zip(bias) {
            *x += b;
        }
    });
    Ok(out)
}

fn map_columns(a: &Tensor, s: &[f64], op: impl Fn(f64, f64) -> f64 + Sync + Send) -> Result<Tensor> {
    let cols = a.last_dim();
    if s.len() != cols {
        return Err(Error::shape(format!(
            "factor length {} does not match {} channels",
            s.len(),
            cols
        )));
    }
    if s.iter().any(|f| !f.is_finite()) {
        return Err(Error::arg("per-channel factors must be finite"));
    }
    let mut out = a.clone();
    par::for_each_chunk(out.data_mut(), cols, |_, row| {
        for (x, &f) in row.iter_mut().zip(s) {
            *x = op(*x, f);
        }
    });
    Ok(out)
}

fn map_rows(a: &Tensor, s: &[f64], op: impl Fn(f64, f64) -> f64 + Sync + Send) -> Result<Tensor> {
    let (m, n) = require_matrix(a, "row scaling input")?;
    if s.len() != m {
        return Err(Error::shape(format!(
            "factor length {} does not match {} rows",
            s.len(),
            m
        )));
    }
    if s.iter().any(|f| !f.is_finite()) {
        return Err(Error::arg("per-row factors must be finite"));
    }
    let mut out = a.clone();
    par::for_each_chunk(out.data_mut(), n, |i, row| {
        let f = s[i];
        for x in row.iter_mut() {
            *x = op(*x, f);
        }
    });
    Ok(out)
}

fn require_matrix(a: &Tensor, what: &str) -> Result<(usize, usize)> {
    if !a.is_matrix() {
        return Err(Error::shape(format!(
            "{what} must be 2-D, got shape {:?}",
            a.shape
        )));
    }
    Ok((a.shape[0], a.shape[1]))
}

/// Result of a truncated singular value decomposition.
///
/// `u` is `m x k`, `v` is `n x k`, and `u · diag(σ) · vᵀ` is the best rank-k
/// approximation of the input in Frobenius norm. Columns of `u` and `v` are
/// orthonormal; singular values are sorted non-increasing.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Tensor,
    pub singular_values: Vec<f64>,
    pub v: Tensor,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.singular_values.len()
    }

    /// `u · diag(σ) · vᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let scaled = scale_columns(&self.u, &self.singular_values)
            .expect("factor shapes are consistent by construction");
        matmul_nt(&scaled, &self.v).expect("factor shapes are consistent by construction")
    }
}

const SVD_ZERO_REL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 64;

/// Truncated SVD with `k = min(m, n, rank)` retained components.
///
/// Computed through a Jacobi eigendecomposition of the Gram matrix of the
/// smaller dimension. The output is deterministic: the largest-magnitude
/// entry of each `v` column is positive, and columns for zero singular
/// values are filled by Gram-Schmidt completion.
pub fn truncated_svd(a: &Tensor, rank: usize) -> Result<SvdResult> {
    if rank == 0 {
        return Err(Error::arg("svd rank must be at least 1"));
    }
    let (m, n) = require_matrix(a, "svd input")?;
    let k = rank.min(m).min(n);

    if m >= n {
        let gram = gram_matrix(a, true);
        let (sigmas, small_cols) = top_eigenvectors(gram, n, k);
        // v columns come from the eigenvectors; u follows as a·v / σ.
        let mut v = place_columns(n, k, &small_cols);
        for i in 0..k {
            fix_column_sign(&mut v, i, None);
        }
        let mut u = Tensor::zeros(vec![m, k]);
        let sigma_max = sigmas[0];
        for i in 0..k {
            if sigmas[i] > sigma_max * SVD_ZERO_REL && sigma_max > 0.0 {
                let w = apply(a, &column(&v, i));
                set_column(&mut u, i, &normalized(&w));
            } else {
                let filled = complete_orthonormal(&u, i, m);
                set_column(&mut u, i, &filled);
            }
        }
        Ok(SvdResult {
            u,
            singular_values: sigmas,
            v,
        })
    } else {
        let gram = gram_matrix(a, false);
        let (sigmas, small_cols) = top_eigenvectors(gram, m, k);
        let mut u = place_columns(m, k, &small_cols);
        let mut v = Tensor::zeros(vec![n, k]);
        let sigma_max = sigmas[0];
        for i in 0..k {
            if sigmas[i] > sigma_max * SVD_ZERO_REL && sigma_max > 0.0 {
                let w = apply_transpose(a, &column(&u, i));
                set_column(&mut v, i, &normalized(&w));
            } else {
                let filled = complete_orthonormal(&v, i, n);
                set_column(&mut v, i, &filled);
            }
            fix_column_sign(&mut v, i, Some(&mut u));
        }
        Ok(SvdResult {
            u,
            singular_values: sigmas,
            v,
        })
    }
}

/// `aᵀa` (when `transpose_first`) or `a aᵀ`, exactly symmetric by mirroring.
fn gram_matrix(a: &Tensor, transpose_first: bool) -> Vec<f64> {
    let (m, n) = (a.rows(), a.cols());
    let p = if transpose_first { n } else { m };
    let mut g = vec![0.0; p * p];
    let data = a.data();
    par::for_each_chunk(&mut g, p, |i, grow| {
        for (j, out) in grow.iter_mut().enumerate().skip(i) {
            let mut acc = 0.0;
            if transpose_first {
                for r in 0..m {
                    acc += data[r * n + i] * data[r * n + j];
                }
            } else {
                for c in 0..n {
                    acc += data[i * n + c] * data[j * n + c];
                }
            }
            *out = acc;
        }
    });
    for i in 0..p {
        for j in 0..i {
            g[i * p + j] = g[j * p + i];
        }
    }
    g
}

/// Cyclic Jacobi eigendecomposition of a symmetric `p x p` matrix.
///
/// Returns eigenvalues on the diagonal of the rotated matrix and the
/// accumulated rotation matrix whose columns are the eigenvectors.
fn jacobi_eigen_sym(mut a: Vec<f64>, p: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; p * p];
    for i in 0..p {
        v[i * p + i] = 1.0;
    }
    let total_norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = {
            let mut acc = 0.0;
            for i in 0..p {
                for j in (i + 1)..p {
                    let x = a[i * p + j];
                    acc += x * x;
                }
            }
            acc.sqrt()
        };
        if off <= 1e-14 * total_norm.max(f64::MIN_POSITIVE) {
            break;
        }
        for i in 0..p {
            for j in (i + 1)..p {
                let apq = a[i * p + j];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[j * p + j] - a[i * p + i]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    1.0 / (tau - (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for r in 0..p {
                    let x = a[r * p + i];
                    let y = a[r * p + j];
                    a[r * p + i] = c * x - s * y;
                    a[r * p + j] = s * x + c * y;
                }
                for col in 0..p {
                    let x = a[i * p + col];
                    let y = a[j * p + col];
                    a[i * p + col] = c * x - s * y;
                    a[j * p + col] = s * x + c * y;
                }
                for r in 0..p {
                    let x = v[r * p + i];
                    let y = v[r * p + j];
                    v[r * p + i] = c * x - s * y;
                    v[r * p + j] = s * x + c * y;
                }
            }
        }
    }
    let eig = (0..p).map(|i| a[i * p + i]).collect();
    (eig, v)
}

/// Top-k eigenpairs of a symmetric matrix, as singular values and columns.
fn top_eigenvectors(gram: Vec<f64>, p: usize, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let (vals, vecs) = jacobi_eigen_sym(gram, p);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&x, &y| {
        vals[y]
            .partial_cmp(&vals[x])
            .expect("symmetric eigenvalues are real")
            .then(x.cmp(&y))
    });
    let sigmas: Vec<f64> = order
        .iter()
        .take(k)
        .map(|&i| vals[i].max(0.0).sqrt())
        .collect();
    let cols: Vec<Vec<f64>> = order
        .iter()
        .take(k)
        .map(|&i| (0..p).map(|r| vecs[r * p + i]).collect())
        .collect();
    (sigmas, cols)
}

fn place_columns(rows: usize, k: usize, cols: &[Vec<f64>]) -> Tensor {
    Tensor::from_fn(rows, k, |r, c| cols[c][r])
}

fn column(t: &Tensor, c: usize) -> Vec<f64> {
    (0..t.rows()).map(|r| t.at(r, c)).collect()
}

fn set_column(t: &mut Tensor, c: usize, values: &[f64]) {
    let cols = t.cols();
    for (r, &v) in values.iter().enumerate() {
        t.data_mut()[r * cols + c] = v;
    }
}

fn apply(a: &Tensor, x: &[f64]) -> Vec<f64> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m];
    for (r, o) in out.iter_mut().enumerate() {
        let row = &a.data()[r * n..(r + 1) * n];
        let mut acc = 0.0;
        for (&w, &v) in row.iter().zip(x) {
            acc += w * v;
        }
        *o = acc;
    }
    out
}

fn apply_transpose(a: &Tensor, x: &[f64]) -> Vec<f64> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; n];
    for r in 0..m {
        let row = &a.data()[r * n..(r + 1) * n];
        let xr = x[r];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += xr * w;
        }
    }
    out
}

fn normalized(x: &[f64]) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return x.to_vec();
    }
    x.iter().map(|v| v / norm).collect()
}

/// Flips column `i` of `v` (and the matching `u` column when given) so the
/// largest-magnitude entry is positive. First occurrence wins on ties.
fn fix_column_sign(v: &mut Tensor, i: usize, u: Option<&mut Tensor>) {
    let rows = v.rows();
    let mut best = 0usize;
    let mut best_abs = -1.0;
    for r in 0..rows {
        let abs = v.at(r, i).abs();
        if abs > best_abs {
            best_abs = abs;
            best = r;
        }
    }
    if v.at(best, i) < 0.0 {
        let cols = v.cols();
        for r in 0..rows {
            v.data_mut()[r * cols + i] = -v.at(r, i);
        }
        if let Some(u) = u {
            let ucols = u.cols();
            for r in 0..u.rows() {
                u.data_mut()[r * ucols + i] = -u.at(r, i);
            }
        }
    }
}

/// Deterministic Gram-Schmidt completion: picks the standard basis vector
/// whose residual against the existing columns is largest, orthogonalizes
/// it twice, and normalizes.
fn complete_orthonormal(existing: &Tensor, filled: usize, dim: usize) -> Vec<f64> {
    let project_out = |x: &mut Vec<f64>| {
        for c in 0..filled {
            let col = column(existing, c);
            let dot: f64 = x.iter().zip(&col).map(|(&a, &b)| a * b).sum();
            for (xi, &ci) in x.iter_mut().zip(&col) {
                *xi -= dot * ci;
            }
        }
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for cand in 0..dim {
        let mut x = vec![0.0; dim];
        x[cand] = 1.0;
        project_out(&mut x);
        let norm2: f64 = x.iter().map(|v| v * v).sum();
        if best.as_ref().map_or(true, |(n, _)| norm2 > *n) {
            best = Some((norm2, x));
        }
    }
    let (_, mut x) = best.expect("dimension is positive");
    project_out(&mut x);
    normalized(&x)
}
