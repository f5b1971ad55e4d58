//! Dense row-major matrices and the handful of decompositions the rest of
//! the crate is built on.
//!
//! Arithmetic helpers (`matmul`, `add`, ...) panic on shape mismatch, the
//! same way indexing does. Anything that validates user-facing input returns
//! a [`Result`] instead.

use std::fmt;
use std::ops::{Index, IndexMut, Range};

use crate::error::{Error, Result};

/// Sweep cap for the one-sided Jacobi SVD.
pub const SVD_MAX_SWEEPS: usize = 100;
/// Relative factor in the numerical-rank threshold `max(m, n) * sigma_max * 1e-12`.
pub const RANK_TOLERANCE: f64 = 1e-12;
/// Rows with a Euclidean norm below this are treated as zero by [`cosine_rows`].
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        if self.rows > 8 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "DenseMatrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DenseMatrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("DenseMatrix::from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_raw(rows, cols, data)
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[f64]) -> Self {
        Self::from_raw(1, values.len(), values.to_vec())
    }

    /// A single-column matrix.
    pub fn column_vector(values: &[f64]) -> Self {
        Self::from_raw(values.len(), 1, values.to_vec())
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let n = other.cols;
        let mut out = vec![0.0; self.rows * n];
        for i in 0..self.rows {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::from_raw(self.rows, n, out)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Self) -> Self {
        assert_eq!(
            self.cols, other.cols,
            "matmul_t: {}x{} * ({}x{})^T",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Vec::with_capacity(self.rows * other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.push(dot(a, other.row(j)));
            }
        }
        Self::from_raw(self.rows, other.rows, out)
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Self) -> Self {
        assert_eq!(
            self.rows, other.rows,
            "t_matmul: ({}x{})^T * {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let n = other.cols;
        let mut out = vec![0.0; self.cols * n];
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::from_raw(self.cols, n, out)
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "add: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self::from_raw(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "sub: shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self::from_raw(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|v| v * s).collect())
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Self, s: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Adds `bias` to every row.
    pub fn add_row_broadcast(&self, bias: &[f64]) -> Self {
        assert_eq!(self.cols, bias.len(), "add_row_broadcast: bias length");
        let mut out = self.clone();
        for i in 0..out.rows {
            for (o, b) in out.row_mut(i).iter_mut().zip(bias) {
                *o += b;
            }
        }
        out
    }

    /// Sum over rows, one value per column.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.rows as f64;
        self.column_sums().into_iter().map(|s| s / n).collect()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.rows).map(|i| self.row(i).iter().sum()).collect()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.frobenius_norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Self {
        assert!(range.end <= self.rows, "slice_rows out of bounds");
        let data = self.data[range.start * self.cols..range.end * self.cols].to_vec();
        Self::from_raw(range.end - range.start, self.cols, data)
    }

    pub fn slice_cols(&self, range: Range<usize>) -> Self {
        assert!(range.end <= self.cols, "slice_cols out of bounds");
        let width = range.end - range.start;
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[range.clone()]);
        }
        Self::from_raw(self.rows, width, data)
    }

    /// Writes `block` into columns `col_start..col_start + block.cols()`.
    pub fn set_cols(&mut self, col_start: usize, block: &Self) {
        assert_eq!(self.rows, block.rows, "set_cols: row mismatch");
        assert!(col_start + block.cols <= self.cols, "set_cols out of bounds");
        for i in 0..self.rows {
            self.row_mut(i)[col_start..col_start + block.cols].copy_from_slice(block.row(i));
        }
    }

    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self::from_raw(indices.len(), self.cols, data)
    }

    /// Stacks `top` above `bottom`.
    pub fn vstack(top: &Self, bottom: &Self) -> Self {
        if top.rows == 0 {
            return bottom.clone();
        }
        if bottom.rows == 0 {
            return top.clone();
        }
        assert_eq!(top.cols, bottom.cols, "vstack: column mismatch");
        let mut data = Vec::with_capacity(top.data.len() + bottom.data.len());
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Self::from_raw(top.rows + bottom.rows, top.cols, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_raw(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Thin singular value decomposition `A = U diag(s) V^T`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `rows x r` with `r = min(rows, cols)`.
    pub u: DenseMatrix,
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// `cols x r`, right singular vectors as columns.
    pub v: DenseMatrix,
    pub numerical_rank: usize,
}

impl SvdResult {
    pub fn rank_threshold(rows: usize, cols: usize, sigma_max: f64) -> f64 {
        rows.max(cols) as f64 * sigma_max * RANK_TOLERANCE
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.singular_values.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul_t(&self.v)
    }

    /// First `numerical_rank` columns of `u`.
    pub fn u_range(&self) -> DenseMatrix {
        self.u.slice_cols(0..self.numerical_rank)
    }

    /// First `numerical_rank` columns of `v`.
    pub fn v_range(&self) -> DenseMatrix {
        self.v.slice_cols(0..self.numerical_rank)
    }
}

/// One-sided Jacobi SVD.
///
/// Works on the columns of `a` (or of `a^T` when `a` is wide), so the
/// orthogonality of the singular vectors is accurate to roughly machine
/// precision independent of the conditioning of `a`.
pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    if a.is_empty() {
        return Err(Error::Parameter("svd of an empty matrix".into()));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    if a.rows() < a.cols() {
        let t = svd_tall(&a.transpose())?;
        return Ok(SvdResult {
            u: t.v,
            singular_values: t.singular_values,
            v: t.u,
            numerical_rank: t.numerical_rank,
        });
    }
    svd_tall(a)
}

fn svd_tall(a: &DenseMatrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    // Column-major working copies: cols[j] is column j of A V.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            op: "svd",
            iterations: SVD_MAX_SWEEPS,
        });
    }

    let mut order: Vec<(usize, f64)> = cols.iter().map(|c| norm(c)).enumerate().collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));

    let sigma_max = order.first().map_or(0.0, |o| o.1);
    let threshold = SvdResult::rank_threshold(m, n, sigma_max);
    let numerical_rank = order.iter().filter(|o| o.1 > threshold).count();

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    let mut v_out = DenseMatrix::zeros(n, n);
    for (slot, &(j, sigma)) in order.iter().enumerate() {
        singular_values.push(sigma);
        for i in 0..n {
            v_out[(i, slot)] = v[j][i];
        }
        if slot < numerical_rank {
            u_cols.push(cols[j].iter().map(|x| x / sigma).collect());
        }
    }
    complete_orthonormal(&mut u_cols, m, n);

    let mut u = DenseMatrix::zeros(m, n);
    for (j, col) in u_cols.iter().enumerate() {
        for i in 0..m {
            u[(i, j)] = col[i];
        }
    }
    Ok(SvdResult {
        u,
        singular_values,
        v: v_out,
        numerical_rank,
    })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Extends `basis` (orthonormal vectors in R^dim) to `target` vectors using
/// Gram-Schmidt over the standard basis.
fn complete_orthonormal(basis: &mut Vec<Vec<f64>>, dim: usize, target: usize) {
    let mut e = 0;
    while basis.len() < target && e < dim {
        let mut cand = vec![0.0; dim];
        cand[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for b in basis.iter() {
                let proj = dot(&cand, b);
                for (c, bv) in cand.iter_mut().zip(b) {
                    *c -= proj * bv;
                }
            }
        }
        let len = norm(&cand);
        if len > 1e-8 {
            basis.push(cand.into_iter().map(|x| x / len).collect());
        }
    }
}

/// Moore-Penrose pseudoinverse with rank truncation at the SVD threshold.
pub fn pseudoinverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    let svd = svd(a)?;
    let r = svd.numerical_rank;
    let mut v_scaled = svd.v.slice_cols(0..r);
    for i in 0..v_scaled.rows() {
        for j in 0..r {
            v_scaled[(i, j)] /= svd.singular_values[j];
        }
    }
    let out = v_scaled.matmul_t(&svd.u.slice_cols(0..r));
    if r == 0 {
        return Ok(DenseMatrix::zeros(a.cols(), a.rows()));
    }
    Ok(out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(a: &DenseMatrix) -> DenseMatrix {
    let mut out = a.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Cosine similarity matrix between the rows of two matrices.
#[derive(Debug, Clone)]
pub struct CosineSimilarity {
    pub matrix: DenseMatrix,
    /// Rows of `a` whose norm fell below [`DEGENERATE_NORM`].
    pub degenerate_a: Vec<usize>,
    /// Rows of `b` whose norm fell below [`DEGENERATE_NORM`].
    pub degenerate_b: Vec<usize>,
}

impl CosineSimilarity {
    pub fn has_degenerate_rows(&self) -> bool {
        !self.degenerate_a.is_empty() || !self.degenerate_b.is_empty()
    }
}

/// Entry `(i, j)` is `cos(a_i, b_j)`. Zero-norm rows yield zero similarity
/// and are reported in the result.
pub fn cosine_rows(a: &DenseMatrix, b: &DenseMatrix) -> Result<CosineSimilarity> {
    if a.cols() != b.cols() {
        return Err(Error::shape(
            "cosine_rows",
            format!("{} vs {} columns", a.cols(), b.cols()),
        ));
    }
    let normalize = |m: &DenseMatrix| {
        let mut out = m.clone();
        let mut degenerate = Vec::new();
        for i in 0..m.rows() {
            let n = norm(m.row(i));
            let row = out.row_mut(i);
            if n < DEGENERATE_NORM {
                row.fill(0.0);
                degenerate.push(i);
            } else {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        (out, degenerate)
    };
    let (na, degenerate_a) = normalize(a);
    let (nb, degenerate_b) = normalize(b);
    Ok(CosineSimilarity {
        matrix: na.matmul_t(&nb),
        degenerate_a,
        degenerate_b,
    })
}

/// Indices of the `k` largest scores, ordered by descending score and then
/// ascending index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Parameter(format!(
            "top-k with k = {k} over {} scores",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    idx.truncate(k);
    Ok(idx)
}

/// Orthogonal projector onto the column space of `b`, restricted to its
/// numerical rank. Agrees with `B (B^T B)^{-1} B^T` whenever `b` has full
/// column rank.
pub fn projector_onto_colspace(b: &DenseMatrix) -> Result<DenseMatrix> {
    let svd = svd(b)?;
    let ur = svd.u_range();
    Ok(ur.matmul_t(&ur))
}
