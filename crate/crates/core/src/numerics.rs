//! Small dense linear algebra and seeded randomness.
//!
//! Everything here is `f64`. Matrices are row-major and tiny (at most a few
//! hundred rows), so the routines favour clarity over blocking or SIMD.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Default relative shrinkage applied before inverting a covariance.
pub const DEFAULT_EPS_REL: f64 = 1e-3;

const SHRINK_FLOOR: f64 = 1e-9;
const MAX_JACOBI_SWEEPS: usize = 100;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Mat::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        ensure!(!rows.is_empty(), "matrix needs at least one row");
        let cols = rows[0].len();
        ensure!(cols > 0, "matrix needs at least one column");
        ensure!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Ok(Mat { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            rows * cols == data.len(),
            "matrix shape {rows}x{cols} does not match {} values",
            data.len()
        );
        Ok(Mat { rows, cols, data })
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Result<Mat> {
        ensure!(
            self.cols == other.rows,
            "cannot multiply {}x{} by {}x{}",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let src = other.row(k);
                for (o, &b) in out.row_mut(i).iter_mut().zip(src) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            self.cols == v.len(),
            "matrix has {} columns but vector has {} entries",
            self.cols,
            v.len()
        );
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn matvec_t(&self, v: &[f64]) -> Result<Vec<f64>> {
        ensure!(
            self.rows == v.len(),
            "matrix has {} rows but vector has {} entries",
            self.rows,
            v.len()
        );
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi == 0.0 {
                continue;
            }
            axpy(&mut out, vi, self.row(i));
        }
        Ok(out)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest `|m[i][j] - m[j][i]|`; infinite for non-square matrices.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s · other` (shapes must agree).
    pub fn add_scaled(&mut self, s: f64, other: &Mat) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        axpy(&mut self.data, s, &other.data);
    }

    /// Quadratic form `vᵀ · self · v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (i, &vi) in v.iter().enumerate() {
            acc += vi * dot(self.row(i), v);
        }
        acc
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `y += a · x`.
pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// `log Σ exp(x_i)` with the maximum subtracted first.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of `xs`, stable against large entries.
pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    out
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEig {
    /// Sorted descending.
    pub values: Vec<f64>,
    /// Column `k` is the unit eigenvector for `values[k]`.
    pub vectors: Mat,
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// Each sweep visits every off-diagonal entry once and annihilates it with a
/// plane rotation; rotations are accumulated into the eigenvector matrix.
/// Converges quadratically once the off-diagonal mass is small.
pub fn sym_eig(m: &Mat, tol: f64) -> Result<SymEig> {
    ensure!(m.is_square(), "sym_eig needs a square matrix, got {}x{}", m.rows, m.cols);
    ensure!(m.rows > 0, "sym_eig needs a non-empty matrix");
    ensure!(m.rows <= 512, "sym_eig supports dimension <= 512, got {}", m.rows);
    ensure!(m.is_finite(), "sym_eig input has non-finite entries");
    let asym = m.asymmetry();
    ensure!(asym <= tol, "matrix is not symmetric (max asymmetry {asym:e} > tol {tol:e})");

    let n = m.rows;
    let mut a = m.clone();
    // symmetrize exactly so rotations stay consistent
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
    let mut v = Mat::identity(n);
    let scale = a.max_abs().max(f64::MIN_POSITIVE);

    let mut converged = n == 1;
    for _ in 0..MAX_JACOBI_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
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
    if !converged {
        return Err(Error::numerical(format!(
            "Jacobi eigensolver did not converge in {MAX_JACOBI_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, dst)] = v[(k, src)];
        }
    }
    Ok(SymEig { values, vectors })
}

/// Shrinkage used by [`inverse_shrunk`]: `eps_rel · trace/dim + 1e-9`.
pub fn shrinkage(sigma: &Mat, eps_rel: f64) -> f64 {
    eps_rel * sigma.trace() / sigma.rows as f64 + SHRINK_FLOOR
}

/// `(Σ + εI)⁻¹` with `ε = eps_rel · trace(Σ)/dim + 1e-9`, via Cholesky.
pub fn inverse_shrunk(sigma: &Mat, eps_rel: f64) -> Result<Mat> {
    ensure!(sigma.is_square() && sigma.rows > 0, "covariance must be square");
    ensure!(eps_rel >= 0.0 && eps_rel.is_finite(), "eps_rel must be >= 0, got {eps_rel}");
    ensure!(sigma.is_finite(), "covariance has non-finite entries");
    let n = sigma.rows;
    let tol = 1e-9 * (1.0 + sigma.max_abs());
    ensure!(sigma.asymmetry() <= tol, "covariance is not symmetric");

    let eps = shrinkage(sigma, eps_rel);
    let mut a = sigma.clone();
    for i in 0..n {
        a[(i, i)] += eps;
    }

    // lower-triangular L with A = L Lᵀ
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err(Error::numerical(
                "shrunk covariance is not positive definite".to_string(),
            ));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }

    // invert L by forward substitution, then A⁻¹ = L⁻ᵀ L⁻¹
    let mut linv = Mat::zeros(n, n);
    for col in 0..n {
        for i in col..n {
            let mut s = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                s -= l[(i, k)] * linv[(k, col)];
            }
            linv[(i, col)] = s / l[(i, i)];
        }
    }
    let mut inv = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (i..n).map(|k| linv[(k, i)] * linv[(k, j)]).sum();
            inv[(i, j)] = s;
            inv[(j, i)] = s;
        }
    }
    Ok(inv)
}

/// Seeded, platform-independent random stream (ChaCha8).
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream `stream` derived from the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_gaussian(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }
}
