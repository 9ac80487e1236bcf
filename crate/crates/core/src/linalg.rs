//! Small dense linear algebra: flat row-major matrices plus the handful of
//! factorizations the spectral code needs (full Householder QR for orthonormal
//! complements, Jacobi eigenvalues for symmetric matrices, Gauss-Jordan
//! inverses for tiny systems). Everything is generic over [`crate::Scalar`];
//! sizes are a few dozen rows at most, so no BLAS is involved.

use crate::{Error, Result, Scalar};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = S::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Mat { rows: r, cols: c, data: rows.iter().flatten().copied().collect() }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length != rows*cols");
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<S> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Mat<S> {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Mat<S>) -> Mat<S> {
        assert_eq!(self.cols, rhs.rows, "inner dimensions must agree");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == S::zero() {
                    continue;
                }
                for j in 0..rhs.cols {
                    out[(i, j)] += a * rhs[(k, j)];
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[S]) -> Vec<S> {
        assert_eq!(self.cols, x.len(), "vector length must match cols");
        let mut y = vec![S::zero(); self.rows];
        for i in 0..self.rows {
            let mut acc = S::zero();
            for j in 0..self.cols {
                acc += self[(i, j)] * x[j];
            }
            y[i] = acc;
        }
        y
    }

    pub fn scale(&self, c: S) -> Mat<S> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| v * c).collect() }
    }

    pub fn sub(&self, rhs: &Mat<S>) -> Mat<S> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        let data = self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    pub fn frobenius_norm(&self) -> S {
        self.data.iter().map(|&v| v * v).sum::<S>().sqrt()
    }

    /// Columns `lo..hi` as a new matrix.
    pub fn col_block(&self, lo: usize, hi: usize) -> Mat<S> {
        assert!(lo <= hi && hi <= self.cols);
        let mut out = Mat::zeros(self.rows, hi - lo);
        for i in 0..self.rows {
            for j in lo..hi {
                out[(i, j - lo)] = self[(i, j)];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<S: Scalar> std::ops::Index<(usize, usize)> for Mat<S> {
    type Output = S;
    fn index(&self, (i, j): (usize, usize)) -> &S {
        &self.data[i * self.cols + j]
    }
}

impl<S: Scalar> std::ops::IndexMut<(usize, usize)> for Mat<S> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut S {
        &mut self.data[i * self.cols + j]
    }
}

/// Full QR of a tall matrix `a` (m >= n) by Householder reflections.
///
/// Returns the complete m x m orthogonal `Q`; its first n columns span
/// col(a) when `a` has full column rank, the remaining m-n columns span the
/// orthogonal complement.
pub fn full_qr_q<S: Scalar>(a: &Mat<S>) -> Mat<S> {
    let (m, n) = (a.rows, a.cols);
    assert!(m >= n, "full_qr_q expects a tall matrix");
    let mut r = a.clone();
    // v-vectors of the reflections, applied later to I to expand Q.
    let mut vs: Vec<Vec<S>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v = vec![S::zero(); m];
        let mut norm = S::zero();
        for i in k..m {
            let x = r[(i, k)];
            v[i] = x;
            norm += x * x;
        }
        let norm = norm.sqrt();
        if norm == S::zero() {
            vs.push(Vec::new());
            continue;
        }
        let sign = if v[k] >= S::zero() { S::one() } else { -S::one() };
        v[k] += sign * norm;
        let vnorm2: S = v[k..].iter().map(|&x| x * x).sum();
        if vnorm2 == S::zero() {
            vs.push(Vec::new());
            continue;
        }
        // Apply H = I - 2 v v^T / (v^T v) to the remaining columns of r.
        for j in k..n {
            let mut dot = S::zero();
            for i in k..m {
                dot += v[i] * r[(i, j)];
            }
            let f = S::cst(2.0) * dot / vnorm2;
            for i in k..m {
                let d = f * v[i];
                r[(i, j)] -= d;
            }
        }
        vs.push(v);
    }
    // Q = H_0 H_1 ... H_{n-1} applied to I.
    let mut q = Mat::identity(m);
    for k in (0..n).rev() {
        let v = &vs[k];
        if v.is_empty() {
            continue;
        }
        let vnorm2: S = v[k..].iter().map(|&x| x * x).sum();
        for j in 0..m {
            let mut dot = S::zero();
            for i in k..m {
                dot += v[i] * q[(i, j)];
            }
            let f = S::cst(2.0) * dot / vnorm2;
            for i in k..m {
                let d = f * v[i];
                q[(i, j)] -= d;
            }
        }
    }
    q
}

/// Eigenvalues and eigenvectors of a symmetric matrix by cyclic Jacobi
/// rotations. Returns (eigenvalues descending, eigenvector columns in the
/// matching order).
pub fn sym_eig<S: Scalar>(a: &Mat<S>) -> (Vec<S>, Mat<S>) {
    let n = a.rows;
    assert_eq!(n, a.cols, "sym_eig expects a square matrix");
    let mut m = a.clone();
    let mut v = Mat::identity(n);
    let tol = S::cst(1e-30);
    for _sweep in 0..100 {
        let mut off = S::zero();
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[(i, j)] * m[(i, j)];
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == S::zero() {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (S::cst(2.0) * apq);
                let t = {
                    let s = if theta >= S::zero() { S::one() } else { -S::one() };
                    s / (theta.abs() + (theta * theta + S::one()).sqrt())
                };
                let c = S::one() / (t * t + S::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].partial_cmp(&m[(i, i)]).expect("finite eigenvalues"));
    let vals: Vec<S> = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vecs = Mat::zeros(n, n);
    for (new_j, &old_j) in order.iter().enumerate() {
        for i in 0..n {
            vecs[(i, new_j)] = v[(i, old_j)];
        }
    }
    (vals, vecs)
}

/// Singular values of an arbitrary matrix, descending, via the eigenvalues of
/// the smaller Gram matrix.
pub fn singular_values<S: Scalar>(a: &Mat<S>) -> Vec<S> {
    let gram = if a.rows <= a.cols {
        a.matmul(&a.transpose())
    } else {
        a.transpose().matmul(a)
    };
    let (vals, _) = sym_eig(&gram);
    vals.into_iter().map(|v| v.max(S::zero()).sqrt()).collect()
}

/// 2-norm condition number estimate.
pub fn condition_number<S: Scalar>(a: &Mat<S>) -> S {
    let sv = singular_values(a);
    let smax = sv.first().copied().unwrap_or(S::zero());
    let smin = sv.last().copied().unwrap_or(S::zero());
    if smin == S::zero() {
        S::infinity()
    } else {
        smax / smin
    }
}

/// Inverse of a small square matrix by Gauss-Jordan with partial pivoting.
pub fn inverse<S: Scalar>(a: &Mat<S>) -> Result<Mat<S>> {
    let n = a.rows;
    if n != a.cols {
        return Err(Error::Shape(format!("inverse of non-square {}x{} matrix", a.rows, a.cols)));
    }
    let mut m = a.clone();
    let mut inv = Mat::identity(n);
    for col in 0..n {
        let mut pivot = col;
        for r in (col + 1)..n {
            if m[(r, col)].abs() > m[(pivot, col)].abs() {
                pivot = r;
            }
        }
        if m[(pivot, col)].abs() == S::zero() {
            return Err(Error::Degenerate(format!("singular matrix at pivot column {col}")));
        }
        if pivot != col {
            for j in 0..n {
                let (a1, a2) = (m[(col, j)], m[(pivot, j)]);
                m[(col, j)] = a2;
                m[(pivot, j)] = a1;
                let (b1, b2) = (inv[(col, j)], inv[(pivot, j)]);
                inv[(col, j)] = b2;
                inv[(pivot, j)] = b1;
            }
        }
        let d = m[(col, col)];
        for j in 0..n {
            m[(col, j)] /= d;
            inv[(col, j)] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[(r, col)];
            if f == S::zero() {
                continue;
            }
            for j in 0..n {
                let mj = m[(col, j)];
                let ij = inv[(col, j)];
                m[(r, j)] -= f * mj;
                inv[(r, j)] -= f * ij;
            }
        }
    }
    Ok(inv)
}

/// Solve `a x = b` for a small square system.
pub fn solve<S: Scalar>(a: &Mat<S>, b: &[S]) -> Result<Vec<S>> {
    Ok(inverse(a)?.matvec(b))
}

/// Moore-Penrose pseudo-inverse of a full-row-rank wide matrix (m <= n):
/// `A^T (A A^T)^-1`.
pub fn pinv_full_row_rank<S: Scalar>(a: &Mat<S>) -> Result<Mat<S>> {
    if a.rows > a.cols {
        return Err(Error::Shape("pinv_full_row_rank expects a wide matrix".into()));
    }
    let gram = a.matmul(&a.transpose());
    let gram_inv = inverse(&gram)
        .map_err(|_| Error::Degenerate("rank-deficient matrix in pseudo-inverse".into()))?;
    Ok(a.transpose().matmul(&gram_inv))
}

/// Orthonormal basis of the null space of a full-row-rank wide matrix
/// (m < n), as the trailing columns of the full QR of `a^T`.
pub fn null_space_basis<S: Scalar>(a: &Mat<S>) -> Result<Mat<S>> {
    if a.rows >= a.cols {
        return Err(Error::Shape("null_space_basis expects a wide matrix".into()));
    }
    // Rank must be checked on the spectrum: QR happily returns a too-small
    // trailing block for rank-deficient input without any residual leak.
    let sv = singular_values(a);
    let smax = sv[0];
    if smax == S::zero() || sv[a.rows - 1] < S::cst(1e-9) * smax {
        return Err(Error::Degenerate("rank-deficient matrix has no clean null-space split".into()));
    }
    let q = full_qr_q(&a.transpose());
    let basis = q.col_block(a.rows, a.cols);
    let leak = a.matmul(&basis).frobenius_norm();
    if leak / smax > S::cst(1e-8) {
        return Err(Error::Degenerate("null-space split failed to annihilate".into()));
    }
    Ok(basis)
}

/// Max absolute entry of `q^T q - I`; zero for an orthonormal column set.
pub fn orthonormality_defect<S: Scalar>(q: &Mat<S>) -> S {
    let g = q.transpose().matmul(q);
    let mut worst = S::zero();
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let target = if i == j { S::one() } else { S::zero() };
            worst = worst.max((g[(i, j)] - target).abs());
        }
    }
    worst
}
