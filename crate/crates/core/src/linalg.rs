//! Dense small-matrix linear algebra.
//!
//! Everything here is sized for manifolds of ambient dimension ≲ 16: a
//! Householder QR used to orthonormalise tangent bases, and a one-sided
//! Jacobi SVD used for the orthogonal-group retraction.

use std::fmt;

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`.
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
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("matrix entries must be finite".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds a matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        let mut m = Matrix::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(Error::Contract("ragged column list".into()));
            }
            for (i, v) in c.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
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

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.data[k * other.cols + j];
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Determinant by partial-pivot LU. Square matrices only.
    pub fn determinant(&self) -> f64 {
        assert_eq!(self.rows, self.cols, "determinant of non-square matrix");
        let n = self.rows;
        let mut a = self.data.clone();
        let mut det = 1.0;
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| a[i * n + k].abs().total_cmp(&a[j * n + k].abs()))
                .unwrap();
            if a[p * n + k] == 0.0 {
                return 0.0;
            }
            if p != k {
                for c in 0..n {
                    a.swap(k * n + c, p * n + c);
                }
                det = -det;
            }
            let pivot = a[k * n + k];
            det *= pivot;
            for i in k + 1..n {
                let f = a[i * n + k] / pivot;
                for c in k..n {
                    a[i * n + c] -= f * a[k * n + c];
                }
            }
        }
        det
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

/// Thin QR factorisation.
#[derive(Debug, Clone)]
pub struct Qr {
    /// `m×k` with orthonormal columns.
    pub q: Matrix,
    /// `k×k` upper triangular with nonnegative diagonal.
    pub r: Matrix,
}

/// Householder QR of an `m×k` matrix with `k ≤ m`.
pub fn qr_decompose(a: &Matrix) -> Result<Qr> {
    let (m, k) = (a.rows, a.cols);
    if k > m {
        return Err(Error::Contract(format!("qr needs k <= m, got {m}x{k}")));
    }
    let scale = (0..k)
        .map(|j| a.column(j).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(1.0, f64::max);
    let tol = 1e-10 * scale;

    let mut work = a.clone();
    let mut reflectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let norm = (j..m).map(|i| work[(i, j)].powi(2)).sum::<f64>().sqrt();
        if norm < tol {
            return Err(Error::RankDeficient { column: j, norm });
        }
        let alpha = if work[(j, j)] > 0.0 { -norm } else { norm };
        let mut v: Vec<f64> = (j..m).map(|i| work[(i, j)]).collect();
        v[0] -= alpha;
        let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vnorm > 0.0 {
            v.iter_mut().for_each(|x| *x /= vnorm);
            for c in j..k {
                let dot: f64 = (j..m).map(|i| v[i - j] * work[(i, c)]).sum();
                for i in j..m {
                    work[(i, c)] -= 2.0 * v[i - j] * dot;
                }
            }
        }
        reflectors.push(v);
    }

    let mut r = Matrix::zeros(k, k);
    for i in 0..k {
        for j in i..k {
            r[(i, j)] = work[(i, j)];
        }
    }

    // Q = H_0 H_1 ... H_{k-1} applied to the first k columns of I_m.
    let mut q = Matrix::zeros(m, k);
    for j in 0..k {
        q[(j, j)] = 1.0;
    }
    for j in (0..k).rev() {
        let v = &reflectors[j];
        for c in 0..k {
            let dot: f64 = (j..m).map(|i| v[i - j] * q[(i, c)]).sum();
            for i in j..m {
                q[(i, c)] -= 2.0 * v[i - j] * dot;
            }
        }
    }

    for j in 0..k {
        if r[(j, j)] < 0.0 {
            for c in j..k {
                r[(j, c)] = -r[(j, c)];
            }
            for i in 0..m {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(Qr { q, r })
}

/// Singular value decomposition `A = U diag(S) Vᵀ` of a square matrix.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// One-sided (Hestenes) Jacobi SVD. Singular values are returned in
/// descending order.
pub fn svd_square(a: &Matrix) -> Result<Svd> {
    let n = a.rows;
    if n == 0 || a.cols != n {
        return Err(Error::Contract(format!("svd_square needs a square matrix, got {}x{}", a.rows, a.cols)));
    }
    if a.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("svd input must be finite".into()));
    }
    let mut u = a.clone();
    let mut v = Matrix::identity(n);
    let eps = f64::EPSILON;

    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..n {
                    let (up, uq) = (u[(i, p)], u[(i, q)]);
                    alpha += up * up;
                    beta += uq * uq;
                    gamma += up * uq;
                }
                if gamma.abs() <= eps * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for m in [&mut u, &mut v] {
                    for i in 0..n {
                        let (xp, xq) = (m[(i, p)], m[(i, q)]);
                        m[(i, p)] = c * xp - s * xq;
                        m[(i, q)] = s * xp + c * xq;
                    }
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!("jacobi svd did not converge in {JACOBI_MAX_SWEEPS} sweeps")));
    }

    let mut sigma: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| u[(i, j)].powi(2)).sum::<f64>().sqrt())
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]));

    let mut u_sorted = Matrix::zeros(n, n);
    let mut v_sorted = Matrix::zeros(n, n);
    let mut s_sorted = Vec::with_capacity(n);
    let smax = sigma[order[0]].max(f64::MIN_POSITIVE);
    for (dst, &src) in order.iter().enumerate() {
        let sj = sigma[src];
        s_sorted.push(sj);
        for i in 0..n {
            v_sorted[(i, dst)] = v[(i, src)];
            if sj > 1e-14 * smax {
                u_sorted[(i, dst)] = u[(i, src)] / sj;
            }
        }
    }
    // Null singular directions: complete U with an orthonormal basis.
    for j in 0..n {
        if s_sorted[j] > 1e-14 * smax {
            continue;
        }
        s_sorted[j] = 0.0;
        'candidates: for e in 0..n {
            let mut c = vec![0.0; n];
            c[e] = 1.0;
            for k in 0..n {
                if k == j || (k > j && s_sorted[k] <= 1e-14 * smax) {
                    continue;
                }
                let col = u_sorted.column(k);
                let d: f64 = col.iter().zip(&c).map(|(a, b)| a * b).sum();
                c.iter_mut().zip(&col).for_each(|(x, y)| *x -= d * y);
            }
            let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for i in 0..n {
                    u_sorted[(i, j)] = c[i] / norm;
                }
                break 'candidates;
            }
        }
    }
    sigma.clear();
    Ok(Svd { u: u_sorted, s: s_sorted, v: v_sorted })
}

/// Inner product with four independent accumulators so the loop vectorizes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    const LANES: usize = 4;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; LANES];
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for k in 0..LANES {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn orthonormality_defect(q: &Matrix) -> f64 {
        q.transpose().matmul(q).max_abs_diff(&Matrix::identity(q.cols()))
    }

    #[test]
    fn qr_of_identity_is_identity() {
        let qr = qr_decompose(&Matrix::identity(3)).unwrap();
        assert!(qr.q.max_abs_diff(&Matrix::identity(3)) < 1e-15);
        assert!(qr.r.max_abs_diff(&Matrix::identity(3)) < 1e-15);
    }

    #[test]
    fn qr_of_permuted_columns() {
        let a = Matrix::from_row_major(3, 2, vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let qr = qr_decompose(&a).unwrap();
        assert!(qr.q.max_abs_diff(&a) < 1e-15);
        assert!(qr.r.max_abs_diff(&Matrix::identity(2)) < 1e-15);
    }

    #[test]
    fn qr_random_reconstruction() {
        let mut rng = RngStream::new(42, 0).generator();
        let a = Matrix::from_row_major(5, 3, crate::rng::gaussian_vec(&mut rng, 15)).unwrap();
        let qr = qr_decompose(&a).unwrap();
        assert!(qr.q.matmul(&qr.r).max_abs_diff(&a) < 1e-12);
        assert!(orthonormality_defect(&qr.q) < 1e-12);
        for i in 0..3 {
            assert!(qr.r[(i, i)] >= 0.0);
            for j in 0..i {
                assert_eq!(qr.r[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn qr_rank_deficient() {
        let a = Matrix::from_row_major(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert!(matches!(qr_decompose(&a), Err(Error::RankDeficient { column: 1, .. })));
        let wide = Matrix::zeros(2, 3);
        assert!(matches!(qr_decompose(&wide), Err(Error::Contract(_))));
    }

    #[test]
    fn svd_diagonal() {
        let a = Matrix::from_row_major(2, 2, vec![3.0, 0.0, 0.0, 2.0]).unwrap();
        let svd = svd_square(&a).unwrap();
        assert_eq!(svd.s, vec![3.0, 2.0]);
        for i in 0..2 {
            assert!((svd.u[(i, i)].abs() - 1.0).abs() < 1e-15);
            assert!((svd.v[(i, i)].abs() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn svd_scaled_rotation() {
        let th: f64 = 0.7;
        let r = Matrix::from_row_major(2, 2, vec![th.cos(), -th.sin(), th.sin(), th.cos()]).unwrap();
        let a = Matrix::from_row_major(2, 2, r.as_slice().iter().map(|v| 2.0 * v).collect()).unwrap();
        let svd = svd_square(&a).unwrap();
        assert!((svd.s[0] - 2.0).abs() < 1e-12 && (svd.s[1] - 2.0).abs() < 1e-12);
        assert!(svd.u.matmul(&svd.v.transpose()).max_abs_diff(&r) < 1e-12);
    }

    #[test]
    fn svd_random_reconstruction() {
        let mut rng = RngStream::new(7, 0).generator();
        let a = Matrix::from_row_major(3, 3, crate::rng::gaussian_vec(&mut rng, 9)).unwrap();
        let svd = svd_square(&a).unwrap();
        let mut us = svd.u.clone();
        for i in 0..3 {
            for j in 0..3 {
                us[(i, j)] *= svd.s[j];
            }
        }
        assert!(us.matmul(&svd.v.transpose()).max_abs_diff(&a) < 1e-10);
        assert!(orthonormality_defect(&svd.u) < 1e-10);
        assert!(orthonormality_defect(&svd.v) < 1e-10);
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]) && svd.s[2] >= 0.0);
    }

    #[test]
    fn svd_singular_matrix_still_orthogonal() {
        let a = Matrix::from_row_major(3, 3, vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 0.0]).unwrap();
        let svd = svd_square(&a).unwrap();
        assert!(orthonormality_defect(&svd.u) < 1e-10);
        assert!(svd.s[1].abs() < 1e-12 && svd.s[2].abs() < 1e-12);
    }

    #[test]
    fn determinant_matches_known_values() {
        let a = Matrix::from_row_major(3, 3, vec![2.0, 0.0, 1.0, 1.0, 3.0, 0.0, 0.0, 1.0, 4.0]).unwrap();
        assert!((a.determinant() - 25.0).abs() < 1e-12);
        let mut p = Matrix::identity(3);
        p[(0, 0)] = 0.0;
        p[(1, 1)] = 0.0;
        p[(0, 1)] = 1.0;
        p[(1, 0)] = 1.0;
        assert_eq!(p.determinant(), -1.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn qr_reconstructs_full_rank(seed in 0u64..10_000, m in 1usize..7, k_off in 0usize..4) {
                let k = m.saturating_sub(k_off).max(1);
                let mut rng = RngStream::new(seed, 3).generator();
                let a = Matrix::from_row_major(m, k, crate::rng::gaussian_vec(&mut rng, m * k)).unwrap();
                let qr = qr_decompose(&a).unwrap();
                prop_assert!(qr.q.matmul(&qr.r).max_abs_diff(&a) < 1e-12);
                prop_assert!(orthonormality_defect(&qr.q) < 1e-12);
            }

            #[test]
            fn svd_reconstructs(seed in 0u64..10_000, n in 1usize..10) {
                let mut rng = RngStream::new(seed, 5).generator();
                let a = Matrix::from_row_major(n, n, crate::rng::gaussian_vec(&mut rng, n * n)).unwrap();
                let svd = svd_square(&a).unwrap();
                let mut us = svd.u.clone();
                for i in 0..n { for j in 0..n { us[(i, j)] *= svd.s[j]; } }
                prop_assert!(us.matmul(&svd.v.transpose()).max_abs_diff(&a) < 1e-10);
                prop_assert!(orthonormality_defect(&svd.u) < 1e-10);
                prop_assert!(orthonormality_defect(&svd.v) < 1e-10);
                prop_assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }
}
