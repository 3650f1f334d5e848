//! Dense complex linear algebra: matrices, SVD, pseudo-inverse and the
//! orthogonal projections built from it.
//!
//! Matrices are stored row-major. The heavy factorizations (SVD, LU) are
//! delegated to `faer`; everything else is plain loops over slices.

use std::ops::{Index, IndexMut, Range};

use faer::linalg::solvers::Solve;
use faer::Mat;
use num_complex::Complex64;
use thiserror::Error;

/// Column vector of complex scalars.
pub type ComplexVector = Vec<Complex64>;

/// Relative threshold on `sigma_min / sigma_max` below which a matrix is
/// treated as rank deficient.
pub const RANK_TOL: f64 = 1e-10;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("SVD of a {rows}x{cols} matrix did not converge")]
    SvdNoConvergence { rows: usize, cols: usize },
    #[error(
        "{rows}x{cols} matrix is rank deficient: smallest singular value {smallest:.3e} \
         is below {threshold:.3e}"
    )]
    RankDeficient {
        rows: usize,
        cols: usize,
        smallest: f64,
        threshold: f64,
    },
    #[error("{rows}x{cols} matrix has no entries")]
    Empty { rows: usize, cols: usize },
    #[error("{rows}x{cols} matrix has non-finite entries")]
    NonFinite { rows: usize, cols: usize },
    #[error("linear solve with a singular {dim}x{dim} system")]
    Singular { dim: usize },
    #[error("invalid factors: {0}")]
    InvalidFactors(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row-major entries.
    ///
    /// Panics if `data.len() != rows * cols`.
    pub fn from_row_major(rows: usize, cols: usize, data: Vec<Complex64>) -> Self {
        assert_eq!(data.len(), rows * cols, "row-major buffer has wrong length");
        Self { rows, cols, data }
    }

    /// Stacks the given vectors as columns. `rows` fixes the height when
    /// `columns` is empty.
    pub fn from_columns(rows: usize, columns: &[ComplexVector]) -> Self {
        let cols = columns.len();
        let mut m = Self::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            assert_eq!(c.len(), rows, "column {j} has length {} != {rows}", c.len());
            for (i, &z) in c.iter().enumerate() {
                m.data[i * cols + j] = z;
            }
        }
        m
    }

    pub fn from_diagonal(diag: &[Complex64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    /// A single column as an `n x 1` matrix.
    pub fn column_matrix(v: &[Complex64]) -> Self {
        Self::from_row_major(v.len(), 1, v.to_vec())
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

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[Complex64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Complex64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> ComplexVector {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn columns(&self) -> Vec<ComplexVector> {
        (0..self.cols).map(|j| self.column(j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn adjoint(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j].conj();
            }
        }
        out
    }

    /// Copy of the block `rows x cols`.
    pub fn block(&self, rows: Range<usize>, cols: Range<usize>) -> Self {
        assert!(rows.end <= self.rows && cols.end <= self.cols, "block out of range");
        let (r0, c0) = (rows.start, cols.start);
        Self::from_fn(rows.len(), cols.len(), |i, j| self[(r0 + i, c0 + j)])
    }

    /// Leading `k` columns.
    pub fn leading_columns(&self, k: usize) -> Self {
        self.block(0..self.rows, 0..k)
    }

    /// Trailing columns starting at `k`.
    pub fn trailing_columns(&self, k: usize) -> Self {
        self.block(0..self.rows, k..self.cols)
    }

    /// Horizontal concatenation `[self, other]`.
    pub fn hcat(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "hcat row mismatch");
        let cols = self.cols + other.cols;
        let mut out = Self::zeros(self.rows, cols);
        for i in 0..self.rows {
            out.data[i * cols..i * cols + self.cols].copy_from_slice(self.row(i));
            out.data[i * cols + self.cols..(i + 1) * cols].copy_from_slice(other.row(i));
        }
        out
    }

    /// Vertical concatenation `[self; other]`.
    pub fn vcat(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.cols, "vcat column mismatch");
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::from_row_major(self.rows + other.rows, self.cols, data)
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {:?} * {:?}",
            self.shape(),
            other.shape()
        );
        let n = other.cols;
        let mut out = Self::zeros(self.rows, n);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == ZERO {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self^H * other` without materializing the adjoint.
    pub fn adjoint_matmul(&self, other: &Self) -> Self {
        assert_eq!(self.rows, other.rows, "adjoint_matmul shape mismatch");
        let (m, n) = (self.cols, other.cols);
        let mut out = Self::zeros(m, n);
        for k in 0..self.rows {
            let brow = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                let a = a.conj();
                if a == ZERO {
                    continue;
                }
                let out_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[Complex64]) -> ComplexVector {
        assert_eq!(self.cols, v.len(), "matvec length mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self^H * v`.
    pub fn adjoint_matvec(&self, v: &[Complex64]) -> ComplexVector {
        assert_eq!(self.rows, v.len(), "adjoint_matvec length mismatch");
        let mut out = vec![ZERO; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a.conj() * vi;
            }
        }
        out
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Self::from_row_major(self.rows, self.cols, data)
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Self::from_row_major(self.rows, self.cols, data)
    }

    pub fn scale(&self, s: Complex64) -> Self {
        let data = self.data.iter().map(|a| a * s).collect();
        Self::from_row_major(self.rows, self.cols, data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub(crate) fn to_faer(&self) -> Mat<Complex64> {
        Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)])
    }

    pub(crate) fn from_faer(m: faer::MatRef<'_, Complex64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = Complex64;

    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// `a^H b`.
pub fn dot(a: &[Complex64], b: &[Complex64]) -> Complex64 {
    assert_eq!(a.len(), b.len(), "dot length mismatch");
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

pub fn norm_sqr(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

pub fn sub(a: &[Complex64], b: &[Complex64]) -> ComplexVector {
    assert_eq!(a.len(), b.len(), "sub length mismatch");
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[Complex64], b: &[Complex64]) -> ComplexVector {
    assert_eq!(a.len(), b.len(), "add length mismatch");
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[Complex64], s: Complex64) -> ComplexVector {
    a.iter().map(|x| x * s).collect()
}

/// `y += alpha * x`.
pub fn axpy(alpha: Complex64, x: &[Complex64], y: &mut [Complex64]) {
    assert_eq!(x.len(), y.len(), "axpy length mismatch");
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn is_finite(v: &[Complex64]) -> bool {
    v.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Product of Householder reflectors followed by a diagonal phase,
/// `H_0 H_1 ... H_{r-1} diag(phases)`, where `H_k = I - 2 u_k u_k^H` acts on
/// coordinates `k..dim` and `u_k` has unit norm.
///
/// Applying it to a vector costs `O(dim^2)` without ever forming the matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct HouseholderProduct {
    dim: usize,
    vectors: Vec<ComplexVector>,
    phases: ComplexVector,
}

impl HouseholderProduct {
    /// Panics unless `vectors[k].len() == dim - k`, `vectors.len() < dim`
    /// (or `dim == 0`), and `phases.len() == dim`.
    pub fn new(dim: usize, vectors: Vec<ComplexVector>, phases: ComplexVector) -> Self {
        assert_eq!(phases.len(), dim, "one phase per coordinate");
        assert!(vectors.len() <= dim, "too many reflectors");
        for (k, u) in vectors.iter().enumerate() {
            assert_eq!(u.len(), dim - k, "reflector {k} has the wrong length");
        }
        Self {
            dim,
            vectors,
            phases,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn apply(&self, x: &[Complex64]) -> ComplexVector {
        assert_eq!(x.len(), self.dim, "apply length mismatch");
        let mut w: ComplexVector = x.iter().zip(&self.phases).map(|(a, p)| a * p).collect();
        for (k, u) in self.vectors.iter().enumerate().rev() {
            reflect(u, &mut w[k..]);
        }
        w
    }

    pub fn apply_adjoint(&self, x: &[Complex64]) -> ComplexVector {
        assert_eq!(x.len(), self.dim, "apply_adjoint length mismatch");
        let mut w = x.to_vec();
        for (k, u) in self.vectors.iter().enumerate() {
            reflect(u, &mut w[k..]);
        }
        for (wi, p) in w.iter_mut().zip(&self.phases) {
            *wi *= p.conj();
        }
        w
    }

    /// Column `j` of the product, in `O(j * dim)`.
    pub fn column(&self, j: usize) -> ComplexVector {
        let mut w = vec![ZERO; self.dim];
        w[j] = self.phases[j];
        // Reflectors with k > j never touch e_j.
        let last = self.vectors.len().min(j + 1);
        for k in (0..last).rev() {
            reflect(&self.vectors[k], &mut w[k..]);
        }
        w
    }

    pub fn to_dense(&self) -> ComplexMatrix {
        let n = self.dim;
        let mut q = ComplexMatrix::from_diagonal(&self.phases);
        let mut s = vec![ZERO; n];
        // Backward accumulation: when H_k is applied, rows k.. are zero
        // outside columns k.., so only that block is touched.
        for (k, u) in self.vectors.iter().enumerate().rev() {
            let s = &mut s[k..];
            s.fill(ZERO);
            for (i, &ui) in u.iter().enumerate() {
                let uc = ui.conj();
                for (sj, &qij) in s.iter_mut().zip(&q.row(k + i)[k..]) {
                    *sj += uc * qij;
                }
            }
            for (i, &ui) in u.iter().enumerate() {
                let f = ui * 2.0;
                for (qij, &sj) in q.row_mut(k + i)[k..].iter_mut().zip(s.iter()) {
                    *qij -= f * sj;
                }
            }
        }
        q
    }
}

fn reflect(u: &[Complex64], w: &mut [Complex64]) {
    let s = dot(u, w) * 2.0;
    for (wi, ui) in w.iter_mut().zip(u) {
        *wi -= ui * s;
    }
}

/// A unitary operator stored either densely or as a reflector product.
#[derive(Clone, Debug, PartialEq)]
pub enum Unitary {
    Dense(ComplexMatrix),
    Householder(HouseholderProduct),
}

impl Unitary {
    pub fn dim(&self) -> usize {
        match self {
            Unitary::Dense(m) => m.rows(),
            Unitary::Householder(h) => h.dim(),
        }
    }

    pub fn apply(&self, x: &[Complex64]) -> ComplexVector {
        match self {
            Unitary::Dense(m) => m.matvec(x),
            Unitary::Householder(h) => h.apply(x),
        }
    }

    pub fn apply_adjoint(&self, x: &[Complex64]) -> ComplexVector {
        match self {
            Unitary::Dense(m) => m.adjoint_matvec(x),
            Unitary::Householder(h) => h.apply_adjoint(x),
        }
    }

    pub fn to_dense(&self) -> ComplexMatrix {
        match self {
            Unitary::Dense(m) => m.clone(),
            Unitary::Householder(h) => h.to_dense(),
        }
    }
}

/// `A = left * (Sigma, 0) * right^H` for `rows <= cols`, or
/// `left * (Sigma; 0) * right^H` otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors {
    left: Unitary,
    singular: Vec<f64>,
    right: Unitary,
}

impl SvdFactors {
    /// Checks shapes and that the singular values are finite, nonnegative
    /// and sorted in descending order.
    pub fn new(left: Unitary, singular: Vec<f64>, right: Unitary) -> Result<Self, LinalgError> {
        let k = left.dim().min(right.dim());
        if singular.len() != k {
            return Err(LinalgError::InvalidFactors(format!(
                "expected {k} singular values, got {}",
                singular.len()
            )));
        }
        if singular.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(LinalgError::InvalidFactors(
                "singular values must be finite and nonnegative".into(),
            ));
        }
        if singular.windows(2).any(|w| w[0] < w[1]) {
            return Err(LinalgError::InvalidFactors(
                "singular values must be sorted in descending order".into(),
            ));
        }
        Ok(Self {
            left,
            singular,
            right,
        })
    }

    pub fn rows(&self) -> usize {
        self.left.dim()
    }

    pub fn cols(&self) -> usize {
        self.right.dim()
    }

    pub fn left(&self) -> &Unitary {
        &self.left
    }

    pub fn right(&self) -> &Unitary {
        &self.right
    }

    pub fn singular(&self) -> &[f64] {
        &self.singular
    }

    /// Same factors with the right unitary replaced.
    pub fn with_right(&self, right: Unitary) -> Self {
        assert_eq!(right.dim(), self.cols(), "replacement right factor has wrong size");
        Self {
            left: self.left.clone(),
            singular: self.singular.clone(),
            right,
        }
    }

    /// `A x`.
    pub fn apply(&self, x: &[Complex64]) -> ComplexVector {
        let b = self.right.apply_adjoint(x);
        let mut t = vec![ZERO; self.rows()];
        for (i, s) in self.singular.iter().enumerate() {
            t[i] = b[i] * *s;
        }
        self.left.apply(&t)
    }

    /// `A^H y`.
    pub fn apply_adjoint(&self, y: &[Complex64]) -> ComplexVector {
        let t = self.left.apply_adjoint(y);
        let mut b = vec![ZERO; self.cols()];
        for (i, s) in self.singular.iter().enumerate() {
            b[i] = t[i] * *s;
        }
        self.right.apply(&b)
    }

    pub fn reconstruct(&self) -> ComplexMatrix {
        let k = self.singular.len();
        let left = self.left.to_dense().leading_columns(k);
        let right = self.right.to_dense().leading_columns(k);
        let mut scaled = left;
        for i in 0..scaled.rows() {
            for (z, s) in scaled.row_mut(i).iter_mut().zip(&self.singular) {
                *z *= *s;
            }
        }
        scaled.matmul(&right.adjoint())
    }
}

fn check_input(a: &ComplexMatrix) -> Result<(), LinalgError> {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return Err(LinalgError::Empty { rows, cols });
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite { rows, cols });
    }
    Ok(())
}

/// Full singular value decomposition with square unitary factors.
pub fn svd(a: &ComplexMatrix) -> Result<SvdFactors, LinalgError> {
    check_input(a)?;
    let (rows, cols) = a.shape();
    let dec = a
        .to_faer()
        .svd()
        .map_err(|_| LinalgError::SvdNoConvergence { rows, cols })?;
    let s = dec.S().column_vector();
    let mut order: Vec<usize> = (0..rows.min(cols)).collect();
    let values: Vec<f64> = order.iter().map(|&i| s[i].re.max(0.0)).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    let singular: Vec<f64> = order.iter().map(|&i| values[i]).collect();

    let u = dec.U();
    let v = dec.V();
    let left = permute_leading(ComplexMatrix::from_faer(u), &order);
    let right = permute_leading(ComplexMatrix::from_faer(v), &order);
    if !left.is_finite() || !right.is_finite() {
        return Err(LinalgError::SvdNoConvergence { rows, cols });
    }
    SvdFactors::new(Unitary::Dense(left), singular, Unitary::Dense(right))
}

fn permute_leading(m: ComplexMatrix, order: &[usize]) -> ComplexMatrix {
    if order.iter().enumerate().all(|(i, &j)| i == j) {
        return m;
    }
    let mut out = m.clone();
    for i in 0..m.rows() {
        for (dst, &src) in order.iter().enumerate() {
            out[(i, dst)] = m[(i, src)];
        }
    }
    out
}

fn rank_checked_svd(a: &ComplexMatrix) -> Result<(SvdFactors, ComplexMatrix, ComplexMatrix), LinalgError> {
    let f = svd(a)?;
    let (rows, cols) = a.shape();
    let largest = f.singular[0];
    let smallest = *f.singular.last().expect("nonempty");
    let threshold = RANK_TOL * largest;
    if largest == 0.0 || smallest <= threshold {
        return Err(LinalgError::RankDeficient {
            rows,
            cols,
            smallest,
            threshold,
        });
    }
    let left = f.left.to_dense();
    let right = f.right.to_dense();
    Ok((f, left, right))
}

/// Moore-Penrose inverse of a full-rank matrix: `(M^H M)^{-1} M^H` when
/// tall, `M^H (M M^H)^{-1}` otherwise. Evaluated through the SVD.
pub fn pseudo_inverse(m: &ComplexMatrix) -> Result<ComplexMatrix, LinalgError> {
    let (f, left, right) = rank_checked_svd(m)?;
    let k = f.singular.len();
    // V_k Sigma^{-1} U_k^H
    let mut vk = right.leading_columns(k);
    for i in 0..vk.rows() {
        for (z, s) in vk.row_mut(i).iter_mut().zip(&f.singular) {
            *z /= *s;
        }
    }
    Ok(vk.matmul(&left.leading_columns(k).adjoint()))
}

/// Orthogonal projection onto the range of `M` when tall (`M M^+`), or onto
/// the row space when `rows <= cols` (`M^+ M`).
pub fn proj_parallel(m: &ComplexMatrix) -> Result<ComplexMatrix, LinalgError> {
    let (f, left, right) = rank_checked_svd(m)?;
    let k = f.singular.len();
    let basis = if m.rows() > m.cols() {
        left.leading_columns(k)
    } else {
        right.leading_columns(k)
    };
    Ok(basis.matmul(&basis.adjoint()))
}

/// `I - proj_parallel(M)`.
pub fn proj_perp(m: &ComplexMatrix) -> Result<ComplexMatrix, LinalgError> {
    let p = proj_parallel(m)?;
    Ok(ComplexMatrix::identity(p.rows()).sub(&p))
}

/// Solves `A X = B` for square `A` by partial-pivoting LU.
pub fn solve(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<ComplexMatrix, LinalgError> {
    assert_eq!(a.rows(), a.cols(), "solve needs a square system");
    assert_eq!(a.rows(), b.rows(), "solve right-hand side mismatch");
    check_input(a)?;
    let lu = a.to_faer().partial_piv_lu();
    let x = lu.solve(b.to_faer());
    let x = ComplexMatrix::from_faer(x.as_ref());
    if !x.is_finite() {
        return Err(LinalgError::Singular { dim: a.rows() });
    }
    Ok(x)
}

pub fn inverse(a: &ComplexMatrix) -> Result<ComplexMatrix, LinalgError> {
    solve(a, &ComplexMatrix::identity(a.rows()))
}

/// Relative discrepancy `||a - b||_F / max(||a||_F, ||b||_F)`; zero when
/// both are zero.
pub fn relative_residual(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    let scale = a.frobenius_norm().max(b.frobenius_norm());
    if scale == 0.0 {
        return 0.0;
    }
    a.sub(b).frobenius_norm() / scale
}

pub fn relative_vector_residual(a: &[Complex64], b: &[Complex64]) -> f64 {
    let scale = norm_sqr(a).max(norm_sqr(b)).sqrt();
    if scale == 0.0 {
        return 0.0;
    }
    norm_sqr(&sub(a, b)).sqrt() / scale
}
