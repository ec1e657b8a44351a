//! Row-major dense matrices, GEMM, and a blocked Cholesky solver.
//!
//! Large products go through `matrixmultiply`; everything else is written
//! out here so the Kalman code can run the same path at p = 7 and at
//! n = 2790.

use crate::error::{Error, Result};

/// Condition estimates above this are treated as singular.
pub const CONDITION_LIMIT: f64 = 1e12;

const BLOCK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, scale: f64) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = scale;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::shape("matrix", &[rows, cols], &[data.len()]));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::shape("matrix row", &[cols], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
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

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::shape(
                "matrix sum",
                &[self.rows, self.cols],
                &[other.rows, other.cols],
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matrix product",
                &[self.cols, other.cols],
                &[other.rows, other.cols],
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            Op::N,
            Op::N,
            self.rows,
            other.cols,
            self.cols,
            1.0,
            &self.data,
            &other.data,
            0.0,
            &mut out.data,
        );
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape("matrix-vector product", &[self.cols], &[x.len()]));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.rows {
            for c in r + 1..self.cols.min(self.rows) {
                worst = worst.max((self.get(r, c) - self.get(c, r)).abs());
            }
        }
        worst
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

/// `c = alpha * op(a) * op(b) + beta * c` on contiguous row-major buffers.
/// `op(a)` is m×k and `op(b)` is k×n.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    op_a: Op,
    op_b: Op,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    gemm_strided(m, n, k, alpha, a, rsa, csa, b, rsb, csb, beta, c, n as isize, 1);
}

#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices whose extents cover every strided index
    // touched for the given m, n, k (checked by the public wrappers).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Lower Cholesky factor `A = L Lᵀ` of a symmetric positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
    condition: f64,
}

impl Cholesky {
    /// Factorizes `a`, reading only its lower triangle.
    ///
    /// Fails with [`Error::Singular`] on a non-positive pivot or when the
    /// squared ratio of the largest to smallest pivot of `L` exceeds
    /// [`CONDITION_LIMIT`]. That ratio is a lower bound on the 2-norm
    /// condition number.
    pub fn factor(a: &Matrix) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::shape("cholesky", &[a.rows, a.rows], &[a.rows, a.cols]));
        }
        let n = a.rows;
        let mut l = a.data.clone();
        for kb in (0..n).step_by(BLOCK) {
            let nb = BLOCK.min(n - kb);
            factor_diagonal_block(&mut l, n, kb, nb)?;
            let below = kb + nb;
            if below == n {
                continue;
            }
            // panel: L[i, kb..kb+nb] = A[i, kb..kb+nb] * L_kk^{-T}
            for i in below..n {
                for j in kb..kb + nb {
                    let mut s = l[i * n + j];
                    for t in kb..j {
                        s -= l[i * n + t] * l[j * n + t];
                    }
                    l[i * n + j] = s / l[j * n + j];
                }
            }
            // trailing update, lower block rows only: A22 -= P Pᵀ
            for rb in (below..n).step_by(BLOCK) {
                let rows = BLOCK.min(n - rb);
                let cols = rb + rows - below;
                let base = l.as_mut_ptr();
                // SAFETY: the panel reads columns kb..kb+nb and the update
                // writes columns below.. of the same rows; the element sets
                // are disjoint and all indices lie inside the n×n buffer.
                unsafe {
                    matrixmultiply::dgemm(
                        rows,
                        nb,
                        cols,
                        -1.0,
                        base.add(rb * n + kb),
                        n as isize,
                        1,
                        base.add(below * n + kb),
                        1,
                        n as isize,
                        1.0,
                        base.add(rb * n + below),
                        n as isize,
                        1,
                    );
                }
            }
        }
        // zero the strict upper triangle
        for i in 0..n {
            for j in i + 1..n {
                l[i * n + j] = 0.0;
            }
        }
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let d = l[i * n + i];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        let condition = if n == 0 { 1.0 } else { (hi / lo).powi(2) };
        if !condition.is_finite() || condition > CONDITION_LIMIT {
            return Err(Error::Singular { condition });
        }
        Ok(Cholesky { n, l, condition })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn condition_estimate(&self) -> f64 {
        self.condition
    }

    pub fn factor_matrix(&self) -> Matrix {
        Matrix {
            rows: self.n,
            cols: self.n,
            data: self.l.clone(),
        }
    }

    /// Solves `A X = B` for a right-hand side matrix.
    pub fn solve_matrix(&self, b: &Matrix) -> Result<Matrix> {
        if b.rows != self.n {
            return Err(Error::shape("cholesky solve", &[self.n], &[b.rows]));
        }
        let mut x = b.clone();
        self.forward(&mut x.data, b.cols);
        self.backward(&mut x.data, b.cols);
        Ok(x)
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.n {
            return Err(Error::shape("cholesky solve", &[self.n], &[b.len()]));
        }
        let mut x = b.to_vec();
        self.forward(&mut x, 1);
        self.backward(&mut x, 1);
        Ok(x)
    }

    /// In place `L Y = B`, B row-major n×m.
    fn forward(&self, y: &mut [f64], m: usize) {
        let n = self.n;
        let l = &self.l;
        for ib in (0..n).step_by(BLOCK) {
            let nb = BLOCK.min(n - ib);
            if ib > 0 {
                let (done, rest) = y.split_at_mut(ib * m);
                gemm_strided(
                    nb,
                    m,
                    ib,
                    -1.0,
                    &l[ib * n..],
                    n as isize,
                    1,
                    done,
                    m as isize,
                    1,
                    1.0,
                    rest,
                    m as isize,
                    1,
                );
            }
            for i in ib..ib + nb {
                for t in ib..i {
                    let f = l[i * n + t];
                    if f != 0.0 {
                        let (src, dst) = y.split_at_mut(i * m);
                        axpy(-f, &src[t * m..t * m + m], &mut dst[..m]);
                    }
                }
                let d = 1.0 / l[i * n + i];
                y[i * m..i * m + m].iter_mut().for_each(|v| *v *= d);
            }
        }
    }

    /// In place `Lᵀ X = Y`.
    fn backward(&self, x: &mut [f64], m: usize) {
        let n = self.n;
        let l = &self.l;
        let blocks: Vec<usize> = (0..n).step_by(BLOCK).collect();
        for &ib in blocks.iter().rev() {
            let nb = BLOCK.min(n - ib);
            let after = ib + nb;
            if after < n {
                // X_I -= L[after.., I]ᵀ X[after..]
                let (head, tail) = x.split_at_mut(after * m);
                gemm_strided(
                    nb,
                    m,
                    n - after,
                    -1.0,
                    &l[after * n + ib..],
                    1,
                    n as isize,
                    tail,
                    m as isize,
                    1,
                    1.0,
                    &mut head[ib * m..],
                    m as isize,
                    1,
                );
            }
            for i in (ib..after).rev() {
                for t in i + 1..after {
                    let f = l[t * n + i];
                    if f != 0.0 {
                        let (head, tail) = x.split_at_mut(t * m);
                        axpy(-f, &tail[..m], &mut head[i * m..i * m + m]);
                    }
                }
                let d = 1.0 / l[i * n + i];
                x[i * m..i * m + m].iter_mut().for_each(|v| *v *= d);
            }
        }
    }
}

fn factor_diagonal_block(l: &mut [f64], n: usize, kb: usize, nb: usize) -> Result<()> {
    for j in kb..kb + nb {
        let mut d = l[j * n + j];
        for t in kb..j {
            d -= l[j * n + t] * l[j * n + t];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::Singular {
                condition: f64::INFINITY,
            });
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..kb + nb {
            let mut s = l[i * n + j];
            for t in kb..j {
                s -= l[i * n + t] * l[j * n + t];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(())
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotation, ascending.
/// Intended for small matrices (p up to a few hundred).
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    if a.rows != a.cols {
        return Err(Error::shape("eigenvalues", &[a.rows, a.rows], &[a.rows, a.cols]));
    }
    let n = a.rows;
    let mut m = a.data.clone();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        let scale: f64 = m.iter().map(|v| v * v).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        a.matmul(&a.transpose())
            .unwrap()
            .add(&Matrix::scaled_identity(n, n as f64 * 0.1))
            .unwrap()
    }

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::from_vec(5, 7, (0..35).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let b = Matrix::from_vec(7, 4, (0..28).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap();
        let expected = naive_matmul(&a, &b);
        assert!(a.matmul(&b).unwrap().max_abs_diff(&expected) < 1e-12);

        let at = a.transpose();
        let bt = b.transpose();
        let mut c = vec![0.0; 20];
        gemm(Op::T, Op::T, 5, 4, 7, 1.0, at.data(), bt.data(), 0.0, &mut c);
        let c = Matrix::from_vec(5, 4, c).unwrap();
        assert!(c.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn cholesky_reconstructs_across_block_boundaries() {
        for &n in &[1, 3, 64, 65, 150] {
            let a = random_spd(n, n as u64);
            let ch = Cholesky::factor(&a).unwrap();
            let l = ch.factor_matrix();
            let rebuilt = naive_matmul(&l, &l.transpose());
            assert!(rebuilt.max_abs_diff(&a) < 1e-9 * n as f64, "n={n}");
        }
    }

    #[test]
    fn solve_matches_residual() {
        for &n in &[4, 70, 131] {
            let a = random_spd(n, 10 + n as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
            let b = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
            let x = Cholesky::factor(&a).unwrap().solve_matrix(&b).unwrap();
            let r = naive_matmul(&a, &x);
            assert!(r.max_abs_diff(&b) < 1e-9, "n={n}");
        }
    }

    #[test]
    fn singular_and_indefinite_rejected() {
        let a = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(Cholesky::factor(&a), Err(Error::Singular { .. })));
        let b = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -1.0]]).unwrap();
        assert!(Cholesky::factor(&b).is_err());
        let c = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1e-14]]).unwrap();
        assert!(matches!(Cholesky::factor(&c), Err(Error::Singular { .. })));
    }

    #[test]
    fn jacobi_eigenvalues_of_known_matrix() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = symmetric_eigenvalues(&a).unwrap();
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 3.0).abs() < 1e-12);
    }
}
