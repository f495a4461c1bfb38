//! Dense row-major matrices, vectors and the norms the rest of the crate is
//! built on.
//!
//! The spectral norm is computed by power iteration on `MᵀM`. A cyclic Jacobi
//! eigen-solver ([`svd_bruteforce`]) is kept alongside it as an exact
//! reference for small matrices.

use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest dimension accepted by [`svd_bruteforce`].
pub const BRUTEFORCE_LIMIT: usize = 16;

const RESTART_SEED: u64 = 0x005e_ed0f_5eed;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm_l2(&self) -> f64 {
        l2(&self.0)
    }

    pub fn norm_linf(&self) -> f64 {
        self.0.iter().fold(0.0, |acc, x| acc.max(x.abs()))
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn add(&self, other: &[f64]) -> Vector {
        debug_assert_eq!(self.dim(), other.len());
        Vector(self.0.iter().zip(other).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &[f64]) -> Vector {
        debug_assert_eq!(self.dim(), other.len());
        Vector(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|a| a * s).collect())
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &[f64]) -> Vector {
        debug_assert_eq!(self.dim(), other.len());
        Vector(self.0.iter().zip(other).map(|(a, b)| a + s * b).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector(data)
    }
}

impl From<&[f64]> for Vector {
    fn from(data: &[f64]) -> Self {
        Vector(data.to_vec())
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Dense matrix stored in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {bad}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_diag(&vec![1.0; n])
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, d) in diag.iter().enumerate() {
            m.data[i * n + i] = *d;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// `M v`.
    pub fn matvec(&self, v: &[f64]) -> Vector {
        debug_assert_eq!(v.len(), self.cols);
        Vector(
            self.data
                .chunks_exact(self.cols.max(1))
                .take(self.rows)
                .map(|row| dot(row, v))
                .collect(),
        )
    }

    /// `Mᵀ v`.
    pub fn matvec_t(&self, v: &[f64]) -> Vector {
        debug_assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            if vr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * vr;
            }
        }
        Vector(out)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                let dst = &mut out.data[r * other.cols..(r + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(other.row(k)) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "shape {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    pub fn frobenius(&self) -> f64 {
        l2(&self.data)
    }

    pub fn max_row_norm(&self) -> f64 {
        (0..self.rows).map(|r| l2(self.row(r))).fold(0.0, f64::max)
    }

    /// Swaps rows `a` and `b` in place.
    pub fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for c in 0..self.cols {
            self.data.swap(a * self.cols + c, b * self.cols + c);
        }
    }

    /// Swaps columns `a` and `b` in place.
    pub fn swap_cols(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        for r in 0..self.rows {
            self.data.swap(r * self.cols + a, r * self.cols + b);
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Result of a power-iteration run.
#[derive(Debug, Clone)]
pub struct SpectralEstimate {
    pub value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Unit-norm estimate of the leading right singular vector.
    pub right: Vector,
}

/// Largest singular value of `m` by power iteration started from the
/// normalized all-ones vector.
pub fn spectral_norm(m: &Matrix, tol: f64, max_iters: usize) -> Result<SpectralEstimate> {
    spectral_norm_from(m, None, tol, max_iters)
}

/// Power iteration warm-started from `start` when it is supplied and usable.
///
/// Once the Rayleigh quotient stops moving, one restart from a seeded random
/// mixture of the current iterate checks that the iteration did not stall in
/// a subspace orthogonal to the leading singular vector.
pub fn spectral_norm_from(
    m: &Matrix,
    start: Option<&[f64]>,
    tol: f64,
    max_iters: usize,
) -> Result<SpectralEstimate> {
    if m.is_empty() {
        return Err(Error::InvalidArgument("spectral norm of an empty matrix".into()));
    }
    if !(tol > 0.0) || max_iters == 0 {
        return Err(Error::InvalidArgument(format!(
            "power iteration needs tol > 0 and max_iters >= 1 (got {tol}, {max_iters})"
        )));
    }
    let n = m.cols();
    let v0 = match start {
        Some(s) if s.len() == n && l2(s) > 0.0 && s.iter().all(|x| x.is_finite()) => s.to_vec(),
        _ => vec![1.0; n],
    };
    let first = power_iterate(m, v0, tol, max_iters);
    if !first.converged {
        return Ok(first);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(RESTART_SEED);
    let mixed: Vec<f64> = first
        .right
        .iter()
        .map(|v| v + 0.1 * rng.random_range(-1.0..1.0))
        .collect();
    let budget = max_iters.saturating_sub(first.iterations).max(1);
    let second = power_iterate(m, mixed, tol, budget);
    let iterations = first.iterations + second.iterations;
    if second.value > first.value * (1.0 + tol) {
        Ok(SpectralEstimate {
            iterations,
            ..second
        })
    } else {
        Ok(SpectralEstimate {
            iterations,
            ..first
        })
    }
}

fn power_iterate(m: &Matrix, mut v: Vec<f64>, tol: f64, max_iters: usize) -> SpectralEstimate {
    let nv = l2(&v);
    if nv == 0.0 {
        v = vec![1.0; m.cols()];
    }
    let nv = l2(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut sigma = m.matvec(&v).norm_l2();
    for it in 1..=max_iters {
        let u = m.matvec(&v);
        let w = m.matvec_t(&u);
        let rq = dot(&v, &w).max(0.0);
        let nw = w.norm_l2();
        if nw == 0.0 {
            // v lies in the null space; MᵀM v = 0.
            return SpectralEstimate {
                value: 0.0,
                converged: true,
                iterations: it,
                right: Vector(v),
            };
        }
        v = w.iter().map(|x| x / nw).collect();
        let next = m.matvec(&v).norm_l2().max(rq.sqrt());
        let done = (next - sigma).abs() <= tol * next;
        sigma = next;
        if done {
            return SpectralEstimate {
                value: sigma,
                converged: true,
                iterations: it,
                right: Vector(v),
            };
        }
    }
    SpectralEstimate {
        value: sigma,
        converged: false,
        iterations: max_iters,
        right: Vector(v),
    }
}

/// Sum of the L2 norms of the rows of `m`.
pub fn norm_2_1(m: &Matrix) -> f64 {
    (0..m.rows()).map(|r| l2(m.row(r))).sum()
}

/// Exact largest singular value via cyclic Jacobi on `MᵀM`.
///
/// Intended as a test oracle; refuses matrices larger than
/// [`BRUTEFORCE_LIMIT`] in either dimension.
pub fn svd_bruteforce(m: &Matrix) -> Result<f64> {
    if m.rows() > BRUTEFORCE_LIMIT || m.cols() > BRUTEFORCE_LIMIT {
        return Err(Error::TooLarge {
            rows: m.rows(),
            cols: m.cols(),
            limit: BRUTEFORCE_LIMIT,
        });
    }
    if m.is_empty() {
        return Ok(0.0);
    }
    let n = m.cols();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = (0..m.rows()).map(|r| m.get(r, i) * m.get(r, j)).sum();
        }
    }
    let eig = jacobi_eigenvalues(&mut a, n);
    Ok(eig.into_iter().fold(0.0, f64::max).max(0.0).sqrt())
}

fn jacobi_eigenvalues(a: &mut [f64], n: usize) -> Vec<f64> {
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale == 0.0 {
        return vec![0.0; n];
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| a[i * n + i]).collect()
}

/// Projection onto the L2 ball of the given radius. Vectors within a few ulps
/// of the sphere count as inside, which makes the projection idempotent.
pub fn project_l2(v: &[f64], radius: f64) -> Vector {
    let n = l2(v);
    if n <= radius * (1.0 + 4.0 * f64::EPSILON) {
        Vector(v.to_vec())
    } else {
        let s = radius / n;
        Vector(v.iter().map(|x| x * s).collect())
    }
}

/// Projection onto the L∞ ball: componentwise clamp to `[-radius, radius]`.
pub fn project_linf(v: &[f64], radius: f64) -> Vector {
    Vector(v.iter().map(|x| x.clamp(-radius, radius)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn seeded(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    #[test]
    fn spectral_norm_of_identity_and_diagonal() {
        let s = spectral_norm(&Matrix::identity(3), 1e-8, 100).unwrap();
        assert!(s.converged);
        assert_relative_eq!(s.value, 1.0, max_relative = 1e-8);

        let d = Matrix::from_diag(&[3.0, 1.0, 0.5]);
        let s = spectral_norm(&d, 1e-8, 1000).unwrap();
        assert_relative_eq!(s.value, 3.0, max_relative = 1e-8);
    }

    #[test]
    fn spectral_norm_matches_bruteforce_on_seeded_matrix() {
        let m = seeded(6, 4, 11);
        let exact = svd_bruteforce(&m).unwrap();
        let est = spectral_norm(&m, 1e-12, 10_000).unwrap();
        assert!(est.converged);
        assert_relative_eq!(est.value, exact, max_relative = 1e-6);
    }

    #[test]
    fn orthogonal_start_is_recovered_by_restart() {
        // The all-ones start is orthogonal to the leading singular vector (1, -1).
        let m = Matrix::from_rows(&[vec![1.0, -1.0], vec![0.1, 0.1]]).unwrap();
        let est = spectral_norm(&m, 1e-12, 10_000).unwrap();
        assert_relative_eq!(est.value, 2f64.sqrt(), max_relative = 1e-9);
    }

    #[test]
    fn spectral_norm_rejects_bad_arguments() {
        assert!(spectral_norm(&Matrix::zeros(0, 0), 1e-6, 10).is_err());
        assert!(spectral_norm(&Matrix::identity(2), 0.0, 10).is_err());
        assert!(spectral_norm(&Matrix::identity(2), 1e-6, 0).is_err());
    }

    #[test]
    fn nonconvergence_sets_flag() {
        let m = seeded(8, 8, 3);
        let est = spectral_norm(&m, 1e-15, 1).unwrap();
        assert!(!est.converged);
        assert!(est.value > 0.0);
    }

    #[test]
    fn zero_matrix_has_zero_norm() {
        let est = spectral_norm(&Matrix::zeros(3, 2), 1e-8, 10).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(svd_bruteforce(&Matrix::zeros(3, 2)).unwrap(), 0.0);
    }

    #[test]
    fn norm_2_1_examples() {
        assert_eq!(norm_2_1(&Matrix::identity(2)), 2.0);
        let m = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(norm_2_1(&m), 5.0);

        let m = seeded(5, 3, 7);
        let expected: f64 = (0..5)
            .map(|r| (0..3).map(|c| m.get(r, c).powi(2)).sum::<f64>().sqrt())
            .sum();
        assert_relative_eq!(norm_2_1(&m), expected, max_relative = 1e-15);

        let single = seeded(1, 4, 2);
        assert_relative_eq!(norm_2_1(&single), single.frobenius(), max_relative = 1e-15);
    }

    #[test]
    fn bruteforce_examples_and_limit() {
        assert_relative_eq!(svd_bruteforce(&Matrix::identity(4)).unwrap(), 1.0, max_relative = 1e-12);
        let r1 = Matrix::from_rows(&[vec![0.0, 2.0], vec![0.0, 0.0]]).unwrap();
        assert_relative_eq!(svd_bruteforce(&r1).unwrap(), 2.0, max_relative = 1e-12);
        let d = Matrix::from_diag(&[1.0, 2.0, 3.0]);
        assert_relative_eq!(svd_bruteforce(&d).unwrap(), 3.0, max_relative = 1e-12);
        assert!(matches!(
            svd_bruteforce(&Matrix::zeros(17, 2)),
            Err(Error::TooLarge { .. })
        ));
    }

    #[test]
    fn projection_examples() {
        assert_eq!(&*project_l2(&[3.0, 4.0], 10.0), &[3.0, 4.0]);
        assert_eq!(&*project_l2(&[3.0, 4.0], 5.0), &[3.0, 4.0]);
        let p = project_l2(&[3.0, 4.0], 1.0);
        assert_relative_eq!(p[0], 0.6, max_relative = 1e-15);
        assert_relative_eq!(p[1], 0.8, max_relative = 1e-15);

        assert_eq!(&*project_linf(&[0.5, -0.2], 1.0), &[0.5, -0.2]);
        assert_eq!(&*project_linf(&[2.0, -3.0], 1.0), &[1.0, -1.0]);
        assert_eq!(&*project_linf(&[0.0, 0.0], 0.0), &[0.0, 0.0]);
    }

    #[test]
    fn matrix_constructor_validates() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn matvec_transpose_agree() {
        let m = seeded(4, 3, 5);
        let v = [0.3, -1.2, 0.7, 2.0];
        let a = m.matvec_t(&v);
        let b = m.transpose().matvec(&v);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_relative_eq!(x, y, max_relative = 1e-14);
        }
    }
}
