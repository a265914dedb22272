//! Dense row-major matrices and the factorizations the rest of the crate
//! builds on. SVD and symmetric eigendecomposition are delegated to
//! `nalgebra`; results are re-sorted and sign-normalized here so every
//! caller sees one deterministic convention.

use std::ops::{Index, IndexMut};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};
use crate::rng;

/// Relative cutoff below which singular values count as zero.
pub const RANK_TOL: f64 = 1e-12;

const SVD_MAX_ITER: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        DenseMatrix::new(raw.rows, raw.cols, raw.entries)
    }
}

impl From<DenseMatrix> for RawMatrix {
    fn from(m: DenseMatrix) -> Self {
        RawMatrix { rows: m.rows, cols: m.cols, entries: m.data }
    }
}

impl DenseMatrix {
    /// Builds a matrix from row-major entries, rejecting bad lengths and
    /// non-finite values.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return arg(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return arg(format!("non-finite entry at ({}, {})", pos / cols.max(1), pos % cols.max(1)));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        DenseMatrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
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
        DenseMatrix { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return arg("ragged rows");
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    /// Matrix whose columns are the given equal-length vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let rows = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != rows) {
            return arg("ragged columns");
        }
        let cols = columns.len();
        Self::new(rows, cols, (0..rows * cols).map(|k| columns[k % cols][k / cols]).collect())
    }

    /// n×1 matrix holding `v`.
    pub fn column_vector(v: &[f64]) -> Self {
        DenseMatrix { rows: v.len(), cols: 1, data: v.to_vec() }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
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

    pub fn set_column(&mut self, j: usize, v: &[f64]) {
        assert_eq!(v.len(), self.rows, "column length");
        for (i, &x) in v.iter().enumerate() {
            self[(i, j)] = x;
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    /// First `k` columns.
    pub fn leading_columns(&self, k: usize) -> DenseMatrix {
        assert!(k <= self.cols);
        DenseMatrix::from_fn(self.rows, k, |i, j| self[(i, j)])
    }

    pub fn select_rows(&self, idx: &[usize]) -> DenseMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        DenseMatrix { rows: idx.len(), cols: self.cols, data }
    }

    pub fn transpose(&self) -> DenseMatrix {
        DenseMatrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · other`.
    ///
    /// # Panics
    /// If the inner dimensions differ.
    pub fn mul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let n = other.cols;
        let mut out = vec![0.0; self.rows * n];
        for i in 0..self.rows {
            let dst = &mut out[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    for (d, &b) in dst.iter_mut().zip(other.row(k)) {
                        *d += a * b;
                    }
                }
            }
        }
        DenseMatrix { rows: self.rows, cols: n, data: out }
    }

    /// `selfᵀ · other` without forming the transpose.
    pub fn tr_mul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.rows, other.rows, "row counts differ");
        let (p, n) = (self.cols, other.cols);
        let mut out = vec![0.0; p * n];
        for r in 0..self.rows {
            let b = other.row(r);
            for (k, &a) in self.row(r).iter().enumerate() {
                if a != 0.0 {
                    for (d, &bv) in out[k * n..(k + 1) * n].iter_mut().zip(b) {
                        *d += a * bv;
                    }
                }
            }
        }
        DenseMatrix { rows: p, cols: n, data: out }
    }

    /// `selfᵀ · self`.
    pub fn gram(&self) -> DenseMatrix {
        self.tr_mul(self)
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "vector length");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v`.
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len(), "vector length");
        let mut out = vec![0.0; self.cols];
        for (i, &w) in v.iter().enumerate() {
            if w != 0.0 {
                axpy(&mut out, w, self.row(i));
            }
        }
        out
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        DenseMatrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.shape(), other.shape());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        DenseMatrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        DenseMatrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * s).collect() }
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, s: f64, other: &DenseMatrix) {
        assert_eq!(self.shape(), other.shape());
        axpy(&mut self.data, s, &other.data);
    }

    /// Adds `s · u vᵀ` in place.
    pub fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) {
        assert_eq!((u.len(), v.len()), self.shape());
        for (i, &ui) in u.iter().enumerate() {
            if ui != 0.0 {
                let c = self.cols;
                axpy(&mut self.data[i * c..(i + 1) * c], s * ui, v);
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    /// Frobenius inner product `⟨self, other⟩`.
    pub fn inner(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        dot(&self.data, &other.data)
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Symmetric part `(M + Mᵀ)/2`.
    pub fn symmetrize(&self) -> DenseMatrix {
        assert_eq!(self.rows, self.cols);
        DenseMatrix::from_fn(self.rows, self.cols, |i, j| 0.5 * (self[(i, j)] + self[(j, i)]))
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> DenseMatrix {
        DenseMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
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
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += s · x`.
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (a, b) in y.iter_mut().zip(x) {
        *a += s * b;
    }
}

pub fn scaled(v: &[f64], s: f64) -> Vec<f64> {
    v.iter().map(|x| x * s).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Thin SVD `M = U·diag(s)·Vᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdResult {
    pub left_vectors: DenseMatrix,
    pub singular_values: Vec<f64>,
    pub right_vectors: DenseMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> DenseMatrix {
        let mut us = self.left_vectors.clone();
        for i in 0..us.rows() {
            for (j, s) in self.singular_values.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.mul(&self.right_vectors.transpose())
    }

    /// Number of singular values above `RANK_TOL` times the largest.
    pub fn rank(&self) -> usize {
        let top = self.singular_values.first().copied().unwrap_or(0.0);
        self.singular_values.iter().filter(|&&s| s > RANK_TOL * top).count()
    }
}

/// Flips each column pair so the first entry of `left[:, j]` above a small
/// floor is nonnegative.
fn normalize_signs(left: &mut DenseMatrix, right: Option<&mut DenseMatrix>) {
    let mut flips = Vec::with_capacity(left.cols());
    for j in 0..left.cols() {
        let col = left.column(j);
        let scale = col.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let lead = col.iter().find(|v| v.abs() > 1e-12 * scale).copied().unwrap_or(0.0);
        flips.push(lead < 0.0);
    }
    let flip = |m: &mut DenseMatrix| {
        for i in 0..m.rows() {
            for (j, &f) in flips.iter().enumerate() {
                if f {
                    m[(i, j)] = -m[(i, j)];
                }
            }
        }
    };
    flip(left);
    if let Some(r) = right {
        flip(r);
    }
}

fn check_finite(m: &DenseMatrix) -> Result<()> {
    if m.rows() == 0 || m.cols() == 0 {
        return arg("empty matrix");
    }
    if !m.is_finite() {
        return arg("matrix has non-finite entries");
    }
    Ok(())
}

/// Thin SVD with nonincreasing singular values and the sign convention
/// "first nonzero entry of each left vector is nonnegative".
pub fn svd(m: &DenseMatrix) -> Result<SvdResult> {
    check_finite(m)?;
    let k = m.rows().min(m.cols());
    let decomposed = m
        .to_nalgebra()
        .try_svd(true, true, 5.0 * f64::EPSILON, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let u = decomposed.u.expect("requested U");
    let v_t = decomposed.v_t.expect("requested V");
    let s = decomposed.singular_values;
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut left = DenseMatrix::from_fn(m.rows(), k, |i, j| u[(i, order[j])]);
    let mut right = DenseMatrix::from_fn(m.cols(), k, |i, j| v_t[(order[j], i)]);
    normalize_signs(&mut left, Some(&mut right));
    let singular_values = order.iter().map(|&i| s[i].max(0.0)).collect();
    Ok(SvdResult { left_vectors: left, singular_values, right_vectors: right })
}

/// Moore-Penrose pseudoinverse; singular values at or below
/// `RANK_TOL · σ_max` are treated as zero.
pub fn pinv(m: &DenseMatrix) -> Result<DenseMatrix> {
    let f = svd(m)?;
    let top = f.singular_values[0];
    let mut out = DenseMatrix::zeros(m.cols(), m.rows());
    for (j, &s) in f.singular_values.iter().enumerate() {
        if s > RANK_TOL * top && s > 0.0 {
            out.add_outer(1.0 / s, &f.right_vectors.column(j), &f.left_vectors.column(j));
        }
    }
    Ok(out)
}

/// Best rank-`r` approximation as truncated factors.
pub fn rank_r_approx(m: &DenseMatrix, r: usize) -> Result<SvdResult> {
    let k = m.rows().min(m.cols());
    if r == 0 || r > k {
        return arg(format!("rank {r} outside 1..={k}"));
    }
    let f = svd(m)?;
    Ok(SvdResult {
        left_vectors: f.left_vectors.leading_columns(r),
        singular_values: f.singular_values[..r].to_vec(),
        right_vectors: f.right_vectors.leading_columns(r),
    })
}

/// `σ_max / σ_min(m, n)`; `f64::INFINITY` when the smallest is below the
/// rank tolerance.
pub fn condition_number(m: &DenseMatrix) -> Result<f64> {
    check_finite(m)?;
    if m.as_slice().iter().all(|&v| v == 0.0) {
        return arg("condition number of the zero matrix");
    }
    let s = svd(m)?.singular_values;
    let (top, low) = (s[0], s[s.len() - 1]);
    Ok(if low <= RANK_TOL * top { f64::INFINITY } else { top / low })
}

/// Cosine and (nonnegative) sine of the angle between two vectors.
///
/// The sine is computed from the rejection `û − cos·v̂` rather than from
/// `√(1 − cos²)`, which keeps it accurate for nearly parallel inputs.
pub fn cos_sin(u: &[f64], v: &[f64]) -> Result<(f64, f64)> {
    if u.len() != v.len() {
        return arg(format!("vector lengths differ ({} vs {})", u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return arg("zero vector has no angle");
    }
    let uh = scaled(u, 1.0 / nu);
    let vh = scaled(v, 1.0 / nv);
    let c = dot(&uh, &vh).clamp(-1.0, 1.0);
    let rej: Vec<f64> = uh.iter().zip(&vh).map(|(a, b)| a - c * b).collect();
    Ok((c, norm(&rej).clamp(0.0, 1.0)))
}

/// Haar-distributed d×d orthonormal matrix: QR of a Gaussian matrix with
/// the signs of `diag(R)` folded into Q.
pub fn random_orthonormal(d: usize, seed: u64) -> DenseMatrix {
    assert!(d >= 1, "dimension must be positive");
    let mut r = rng::from_seed(seed);
    let g = DenseMatrix::from_vec_unchecked(d, d, rng::gaussian_vec(&mut r, d * d));
    let qr = g.to_nalgebra().qr();
    let (q, rr) = (qr.q(), qr.r());
    DenseMatrix::from_fn(d, d, |i, j| if rr[(j, j)] < 0.0 { -q[(i, j)] } else { q[(i, j)] })
}

/// Eigendecomposition of a symmetric matrix, eigenvalues nonincreasing.
#[derive(Clone, Debug)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

pub fn sym_eigen(m: &DenseMatrix) -> Result<SymEigen> {
    check_finite(m)?;
    if m.rows() != m.cols() {
        return arg("eigendecomposition needs a square matrix");
    }
    let e = nalgebra::SymmetricEigen::try_new(m.symmetrize().to_nalgebra(), 5.0 * f64::EPSILON, SVD_MAX_ITER)
        .ok_or_else(|| Error::Numerical("symmetric eigensolver did not converge".into()))?;
    let n = m.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]).then(a.cmp(&b)));
    let mut vectors = DenseMatrix::from_fn(n, n, |i, j| e.eigenvectors[(i, order[j])]);
    normalize_signs(&mut vectors, None);
    Ok(SymEigen { values: order.iter().map(|&i| e.eigenvalues[i]).collect(), vectors })
}

/// Orthonormal basis of the column span, ordered by singular value.
pub fn orthonormal_basis(m: &DenseMatrix) -> Result<DenseMatrix> {
    let f = svd(m)?;
    let r = f.rank();
    if r == 0 {
        return arg("zero matrix spans nothing");
    }
    Ok(f.left_vectors.leading_columns(r))
}

/// Sines of the principal angles between the column spans of `a` and `b`,
/// largest first. Equal-dimensional spans give zero exactly when the spans
/// coincide.
pub fn principal_angle_sines(a: &DenseMatrix, b: &DenseMatrix) -> Result<Vec<f64>> {
    if a.rows() != b.rows() {
        return arg("subspaces live in different dimensions");
    }
    let qa = orthonormal_basis(a)?;
    let qb = orthonormal_basis(b)?;
    let cosines = svd(&qa.tr_mul(&qb))?.singular_values;
    let mut sines: Vec<f64> = cosines.iter().map(|c| (1.0 - c.min(1.0).powi(2)).max(0.0).sqrt()).collect();
    sines.sort_by(|x, y| y.total_cmp(x));
    Ok(sines)
}
