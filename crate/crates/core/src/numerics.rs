//! Dense matrices of `f64`, cosine kernels, a stable row softmax and the
//! central-difference gradient oracle used by every gradient test.
//!
//! Everything here is written as plain loops. Accumulation order inside a
//! row is fixed, so sharding rows across threads cannot change results.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("row {row} of {which} has zero norm")]
    ZeroNorm { which: &'static str, row: usize },
    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(NumericsError::Shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `y = self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `y = selfᵀ · x`
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            for (yj, &a) in y.iter_mut().zip(self.row(i)) {
                *yj += a * xi;
            }
        }
        y
    }

    /// `self += outer(u, v)`
    pub fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            for (a, &vj) in self.row_mut(i).iter_mut().zip(v) {
                *a += ui * vj;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|a| *a = v);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    pub fn check_finite(&self) -> Result<(), NumericsError> {
        match self.data.iter().position(|a| !a.is_finite()) {
            None => Ok(()),
            Some(k) => Err(NumericsError::NonFinite { row: k / self.cols.max(1), col: k % self.cols.max(1) }),
        }
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

/// Divides every row by its Euclidean norm and returns the norms.
pub fn normalize_rows(m: &Mat, which: &'static str) -> Result<(Mat, Vec<f64>), NumericsError> {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = norm(m.row(i));
        if !(n > 0.0) || !n.is_finite() {
            return Err(NumericsError::ZeroNorm { which, row: i });
        }
        out.row_mut(i).iter_mut().for_each(|x| *x /= n);
        norms.push(n);
    }
    Ok((out, norms))
}

/// Pairwise cosine similarity between the rows of `a` (N×d) and `b` (M×d).
pub fn cosine_matrix(a: &Mat, b: &Mat) -> Result<Mat, NumericsError> {
    if a.cols() != b.cols() {
        return Err(NumericsError::Shape(format!(
            "embedding widths differ: {} vs {}",
            a.cols(),
            b.cols()
        )));
    }
    let (an, _) = normalize_rows(a, "A")?;
    let (bn, _) = normalize_rows(b, "B")?;
    Ok(Mat::from_fn(a.rows(), b.rows(), |i, j| dot(an.row(i), bn.row(j))))
}

/// Log-softmax of one row of logits, max-subtracted.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Row softmax of `m / tau`.
pub fn row_softmax(m: &Mat, tau: f64) -> Result<Mat, NumericsError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(NumericsError::Temperature(tau));
    }
    m.check_finite()?;
    let mut out = Mat::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let z: Vec<f64> = m.row(i).iter().map(|v| v / tau).collect();
        out.row_mut(i).copy_from_slice(&softmax(&z));
    }
    Ok(out)
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + h;
            let up = f(&probe);
            probe[k] = orig - h;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Floor on the denominator of [`max_relative_error`]; components whose
/// magnitude is below it are compared absolutely.
pub const REL_ERR_FLOOR: f64 = 1e-6;

/// `max_k |a_k - b_k| / max(|a_k|, |b_k|, REL_ERR_FLOOR)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient lengths differ");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(REL_ERR_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn cosine_of_equal_rows_is_one() {
        let a = Mat::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
        let c = cosine_matrix(&a, &a).unwrap();
        assert!((c[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_of_orthogonal_rows_is_zero() {
        let a = Mat::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        let b = Mat::from_rows(&[vec![0.0, 3.0, 0.0], vec![0.0, 0.0, -2.0]]).unwrap();
        let c = cosine_matrix(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn cosine_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(4, 3, &mut rng);
        let b = random(5, 3, &mut rng);
        let c = cosine_matrix(&a, &b).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let (x, y) = (a.row(i), b.row(j));
                let num = x[0] * y[0] + x[1] * y[1] + x[2] * y[2];
                let nx = (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt();
                let ny = (y[0] * y[0] + y[1] * y[1] + y[2] * y[2]).sqrt();
                assert!((c[(i, j)] - num / (nx * ny)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let a = Mat::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Mat::from_rows(&[vec![1.0, 1.0]]).unwrap();
        assert_eq!(cosine_matrix(&a, &b), Err(NumericsError::ZeroNorm { which: "A", row: 1 }));
    }

    #[test]
    fn cosine_self_is_symmetric_and_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(6, 4, &mut rng);
        let c = cosine_matrix(&a, &a).unwrap();
        let mut scaled = a.clone();
        for i in 0..6 {
            let s = rng.random_range(0.1..10.0);
            scaled.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let cs = cosine_matrix(&scaled, &scaled).unwrap();
        for i in 0..6 {
            assert!((c[(i, i)] - 1.0).abs() < 1e-14);
            for j in 0..6 {
                assert_eq!(c[(i, j)], c[(j, i)]);
                assert!((c[(i, j)] - cs[(i, j)]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let m = Mat::from_rows(&[vec![3.0; 4]]).unwrap();
        let p = row_softmax(&m, 0.5).unwrap();
        assert!(p.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_two_logits_closed_form() {
        let m = Mat::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let p = row_softmax(&m, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((p[(0, 0)] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p[(0, 1)] - 1.0 / (e + 1.0)).abs() < 1e-15);
        assert!((p[(0, 0)] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn softmax_high_temperature_is_uniform() {
        let m = Mat::from_rows(&[vec![1.0, -2.0, 5.0]]).unwrap();
        let p = row_softmax(&m, 1e6).unwrap();
        assert!(p.as_slice().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-5));
    }

    #[test]
    fn softmax_is_shift_invariant_and_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = random(5, 7, &mut rng);
        let mut shifted = m.clone();
        for i in 0..5 {
            let c = rng.random_range(-50.0..50.0);
            shifted.row_mut(i).iter_mut().for_each(|x| *x += c);
        }
        let p = row_softmax(&m, 0.3).unwrap();
        let q = row_softmax(&shifted, 0.3).unwrap();
        for i in 0..5 {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..7 {
                assert!((p[(i, j)] - q[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        let m = Mat::from_rows(&[vec![1.0, f64::NAN]]).unwrap();
        assert!(matches!(row_softmax(&m, 1.0), Err(NumericsError::NonFinite { row: 0, col: 1 })));
        assert!(matches!(row_softmax(&Mat::zeros(1, 1), 0.0), Err(NumericsError::Temperature(_))));
    }

    #[test]
    fn finite_diff_of_squared_norm() {
        let g = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5);
        assert!((g[0] - 2.0).abs() < 1e-6);
        assert!((g[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_of_constant_is_zero() {
        let g = finite_diff_grad(|_| 4.2, &[1.0, -3.0, 0.5], 1e-5);
        assert_eq!(g, vec![0.0, 0.0, 0.0]);
    }
}
