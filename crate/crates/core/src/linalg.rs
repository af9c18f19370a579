//! Dense row-major linear algebra for the GP core.
//!
//! Problem sizes here are at most a few hundred points, so everything is a
//! straightforward dense loop. All values are `f64`.

use std::fmt;
use std::ops::{Index, IndexMut};

use thiserror::Error;

/// Absolute tolerance used when checking that a Cholesky input is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Number of times the jitter is escalated by a factor of ten.
pub const JITTER_ESCALATIONS: u32 = 6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (largest jitter tried: {max_jitter:e})")]
    NotPositiveDefinite { max_jitter: f64 },
    #[error("matrix is not symmetric: |A[{row},{col}] - A[{col},{row}]| = {diff:e}")]
    AsymmetricInput { row: usize, col: usize, diff: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

/// A dense real matrix stored in row-major order.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data.
    ///
    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "matrix data length does not match its shape"
        );
        Matrix { rows, cols, data }
    }

    /// Builds a matrix from a list of equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// A column vector.
    pub fn column(values: &[f64]) -> Self {
        Matrix::from_vec(values.len(), 1, values.to_vec())
    }

    /// A row vector.
    pub fn row_vector(values: &[f64]) -> Self {
        Matrix::from_vec(1, values.len(), values.to_vec())
    }

    pub fn scalar(value: f64) -> Self {
        Matrix::from_vec(1, 1, vec![value])
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col_vec(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    /// Value of a 1x1 matrix.
    pub fn to_scalar(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "not a scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t[(c, r)] = self[(r, c)];
            }
        }
        t
    }

    /// Same data, new shape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, self.data.clone())
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {:?} x {:?}",
            self.shape(),
            other.shape()
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul shape mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out[(i, j)] = dot(a, other.row(j));
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Adds `value` to every diagonal entry.
    pub fn add_diagonal(&mut self, value: f64) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            self[(i, i)] += value;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Returns the first pair violating symmetry beyond `tol`, if any.
    pub fn asymmetry(&self, tol: f64) -> Option<(usize, usize, f64)> {
        for r in 0..self.rows {
            for c in 0..r {
                let diff = (self[(r, c)] - self[(c, r)]).abs();
                if diff > tol || diff.is_nan() {
                    return Some((r, c, diff));
                }
            }
        }
        None
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        assert!(self.is_square());
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..r {
                let v = 0.5 * (self[(r, c)] + self[(c, r)]);
                out[(r, c)] = v;
                out[(c, r)] = v;
            }
        }
        out
    }

    /// Lower triangle (including the diagonal); the strict upper part is zeroed.
    pub fn lower_triangle(&self) -> Matrix {
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in (r + 1)..self.cols {
                out[(r, c)] = 0.0;
            }
        }
        out
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    /// Appends a row; the row length must equal the column count.
    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.cols, "row length does not match column count");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn vstack(parts: &[&Matrix]) -> Matrix {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols, "vstack column mismatch");
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Matrix { rows, cols, data }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Which triangle of a Cholesky factor to solve against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// Solve `L x = b`.
    Lower,
    /// Solve `Lᵀ x = b`.
    Upper,
}

/// Lower Cholesky factor `L` with `L Lᵀ = A + jitter_applied · I`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholFactor {
    lower: Matrix,
    jitter_applied: f64,
}

impl CholFactor {
    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn jitter_applied(&self) -> f64 {
        self.jitter_applied
    }

    pub fn dim(&self) -> usize {
        self.lower.rows()
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        self.lower.matmul_t(&self.lower)
    }

    /// `log det(L Lᵀ)`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.lower.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    /// Solves `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>, LinalgError> {
        let z = tri_solve(self, b, Side::Lower)?;
        tri_solve(self, &z, Side::Upper)
    }

    /// `(L Lᵀ)⁻¹` as a dense matrix.
    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let linv = tri_solve_matrix(self, &Matrix::identity(n), Side::Lower)
            .expect("identity has matching dimension");
        linv.t_matmul(&linv)
    }
}

fn try_factor(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows();
    let scale = a.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs())) + jitter;
    let floor = f64::EPSILON * scale;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)] + jitter;
        {
            let lj = l.row(j);
            d -= dot(&lj[..j], &lj[..j]);
        }
        if !d.is_finite() || d <= floor {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let s = {
                let (li, lj) = (l.row(i), l.row(j));
                a[(i, j)] - dot(&li[..j], &lj[..j])
            };
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Cholesky factorization with jitter escalation.
///
/// The matrix is first factored as given. On failure the diagonal is
/// augmented by `base_jitter · 10^j` for `j = 0..=6` until a factorization
/// succeeds.
pub fn cholesky(a: &Matrix, base_jitter: f64) -> Result<CholFactor, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::DimensionMismatch {
            expected: a.rows(),
            found: a.cols(),
        });
    }
    if let Some((row, col, diff)) = a.asymmetry(SYMMETRY_TOL) {
        return Err(LinalgError::AsymmetricInput { row, col, diff });
    }
    if let Some(lower) = try_factor(a, 0.0) {
        return Ok(CholFactor {
            lower,
            jitter_applied: 0.0,
        });
    }
    let mut max_jitter = 0.0;
    if base_jitter > 0.0 {
        for j in 0..=JITTER_ESCALATIONS {
            let jitter = base_jitter * 10f64.powi(j as i32);
            max_jitter = jitter;
            if let Some(lower) = try_factor(a, jitter) {
                return Ok(CholFactor {
                    lower,
                    jitter_applied: jitter,
                });
            }
        }
    }
    Err(LinalgError::NotPositiveDefinite { max_jitter })
}

/// Solves `L x = b` or `Lᵀ x = b` for a single right-hand side.
pub fn tri_solve(l: &CholFactor, b: &[f64], side: Side) -> Result<Vec<f64>, LinalgError> {
    let n = l.dim();
    if b.len() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            found: b.len(),
        });
    }
    let mut out = Matrix::column(b);
    solve_in_place(l.lower(), &mut out, side);
    Ok(out.into_vec())
}

/// Solves against every column of `b`.
pub fn tri_solve_matrix(l: &CholFactor, b: &Matrix, side: Side) -> Result<Matrix, LinalgError> {
    if b.rows() != l.dim() {
        return Err(LinalgError::DimensionMismatch {
            expected: l.dim(),
            found: b.rows(),
        });
    }
    let mut out = b.clone();
    solve_in_place(l.lower(), &mut out, side);
    Ok(out)
}

/// Triangular solve on a raw lower-triangular matrix (no factor wrapper).
pub(crate) fn solve_lower_raw(l: &Matrix, b: &Matrix, side: Side) -> Matrix {
    let mut out = b.clone();
    solve_in_place(l, &mut out, side);
    out
}

fn solve_in_place(l: &Matrix, x: &mut Matrix, side: Side) {
    let n = l.rows();
    let m = x.cols();
    match side {
        Side::Lower => {
            for i in 0..n {
                for k in 0..i {
                    let lik = l[(i, k)];
                    if lik == 0.0 {
                        continue;
                    }
                    for c in 0..m {
                        let v = x[(k, c)];
                        x[(i, c)] -= lik * v;
                    }
                }
                let d = l[(i, i)];
                for c in 0..m {
                    x[(i, c)] /= d;
                }
            }
        }
        Side::Upper => {
            for i in (0..n).rev() {
                for k in (i + 1)..n {
                    let lki = l[(k, i)];
                    if lki == 0.0 {
                        continue;
                    }
                    for c in 0..m {
                        let v = x[(k, c)];
                        x[(i, c)] -= lki * v;
                    }
                }
                let d = l[(i, i)];
                for c in 0..m {
                    x[(i, c)] /= d;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut a = b.matmul_t(&b);
        a.add_diagonal(1.0);
        a
    }

    /// Gauss-Jordan inverse, independent of the Cholesky path.
    fn dense_inverse(a: &Matrix) -> Matrix {
        let n = a.rows();
        let mut aug = Matrix::zeros(n, 2 * n);
        for r in 0..n {
            for c in 0..n {
                aug[(r, c)] = a[(r, c)];
            }
            aug[(r, n + r)] = 1.0;
        }
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| aug[(i, col)].abs().total_cmp(&aug[(j, col)].abs()))
                .unwrap();
            for c in 0..2 * n {
                let tmp = aug[(col, c)];
                aug[(col, c)] = aug[(pivot, c)];
                aug[(pivot, c)] = tmp;
            }
            let p = aug[(col, col)];
            for c in 0..2 * n {
                aug[(col, c)] /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[(r, col)];
                    for c in 0..2 * n {
                        let v = aug[(col, c)];
                        aug[(r, c)] -= f * v;
                    }
                }
            }
        }
        let mut inv = Matrix::zeros(n, n);
        for r in 0..n {
            for c in 0..n {
                inv[(r, c)] = aug[(r, n + c)];
            }
        }
        inv
    }

    #[test]
    fn cholesky_identity() {
        let f = cholesky(&Matrix::identity(3), 0.0).unwrap();
        assert_eq!(f.lower(), &Matrix::identity(3));
        assert_eq!(f.jitter_applied(), 0.0);
    }

    #[test]
    fn cholesky_scalar() {
        let f = cholesky(&Matrix::scalar(4.0), 1e-8).unwrap();
        assert_eq!(f.lower().to_scalar(), 2.0);
    }

    #[test]
    fn cholesky_random_spd_reconstructs() {
        let a = random_spd(5, 11);
        let f = cholesky(&a, 1e-8).unwrap();
        assert_eq!(f.jitter_applied(), 0.0);
        assert!(f.reconstruct().max_abs_diff(&a) <= 1e-10);
        let l = f.lower();
        for r in 0..5 {
            assert!(l[(r, r)] > 0.0);
            for c in (r + 1)..5 {
                assert_eq!(l[(r, c)], 0.0);
            }
        }
    }

    #[test]
    fn cholesky_rejects_asymmetric() {
        let a = Matrix::from_rows(&[[1.0, 0.5], [0.4, 1.0]]);
        assert!(matches!(
            cholesky(&a, 1e-8),
            Err(LinalgError::AsymmetricInput { row: 1, col: 0, .. })
        ));
    }

    #[test]
    fn cholesky_escalates_jitter_for_singular_input() {
        let a = Matrix::from_rows(&[[1.0, 1.0], [1.0, 1.0]]);
        let f = cholesky(&a, 1e-8).unwrap();
        assert!(f.jitter_applied() > 0.0);
        let mut shifted = a.clone();
        shifted.add_diagonal(f.jitter_applied());
        assert!(f.reconstruct().max_abs_diff(&shifted) <= 1e-8 * 2.0);
    }

    #[test]
    fn cholesky_fails_on_negative_definite() {
        let a = Matrix::from_rows(&[[-1.0, 0.0], [0.0, -1.0]]);
        assert!(matches!(
            cholesky(&a, 1e-8),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
        assert!(matches!(
            cholesky(&a, 0.0),
            Err(LinalgError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn tri_solve_identity() {
        let f = cholesky(&Matrix::identity(3), 0.0).unwrap();
        assert_eq!(
            tri_solve(&f, &[1.0, 2.0, 3.0], Side::Lower).unwrap(),
            vec![1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn tri_solve_forward_substitution() {
        // L = [[2,0],[1,1]] is the factor of [[4,2],[2,2]].
        let a = Matrix::from_rows(&[[4.0, 2.0], [2.0, 2.0]]);
        let f = cholesky(&a, 0.0).unwrap();
        assert_eq!(f.lower(), &Matrix::from_rows(&[[2.0, 0.0], [1.0, 1.0]]));
        let x = tri_solve(&f, &[2.0, 2.0], Side::Lower).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn tri_solve_dimension_mismatch() {
        let f = cholesky(&Matrix::identity(3), 0.0).unwrap();
        assert_eq!(
            tri_solve(&f, &[1.0], Side::Upper),
            Err(LinalgError::DimensionMismatch {
                expected: 3,
                found: 1
            })
        );
    }

    #[test]
    fn round_trip_solve_matches_dense_inverse() {
        let a = random_spd(4, 3);
        let f = cholesky(&a, 0.0).unwrap();
        let b = [0.3, -1.2, 2.0, 0.7];
        let x = tri_solve(&f, &tri_solve(&f, &b, Side::Lower).unwrap(), Side::Upper).unwrap();
        let oracle = dense_inverse(&a).matvec(&b);
        for (u, v) in x.iter().zip(&oracle) {
            assert!((u - v).abs() <= 1e-9);
        }
        assert!(f.inverse().max_abs_diff(&dense_inverse(&a)) <= 1e-9);
    }

    #[test]
    fn transpose_products_agree() {
        let a = random_spd(4, 5);
        let b = Matrix::from_vec(4, 2, (0..8).map(|i| i as f64 * 0.5 - 1.0).collect());
        assert!(a.t_matmul(&b).max_abs_diff(&a.transpose().matmul(&b)) < 1e-14);
        assert!(b.transpose().matmul_t(&a).max_abs_diff(&b.transpose().matmul(&a)) < 1e-14);
    }

    mod props {
        use super::*;
        use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn reconstruction_within_tolerance(n in 1usize..8, seed in any::<u64>()) {
                let a = random_spd(n, seed);
                let f = cholesky(&a, 1e-8).unwrap();
                let mut target = a.clone();
                target.add_diagonal(f.jitter_applied());
                prop_assert!(f.reconstruct().max_abs_diff(&target) <= 1e-8 * (1.0 + a.max_abs()));
            }

            #[test]
            fn tri_solve_inverts_multiplication(n in 1usize..8, seed in any::<u64>()) {
                let a = random_spd(n, seed);
                let f = cholesky(&a, 0.0).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
                let lx = f.lower().matvec(&x);
                let back = tri_solve(&f, &lx, Side::Lower).unwrap();
                let ltx = f.lower().transpose().matvec(&x);
                let back_t = tri_solve(&f, &ltx, Side::Upper).unwrap();
                for i in 0..n {
                    prop_assert!((back[i] - x[i]).abs() <= 1e-10);
                    prop_assert!((back_t[i] - x[i]).abs() <= 1e-10);
                }
            }
        }
    }
}
