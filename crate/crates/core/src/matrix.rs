//! Dense row-major f32 matrices and the handful of primitives the rest of
//! the crate is built from: matmul, softmax, RMS normalization, cosine
//! similarity.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Row-major dense matrix of f32 values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from a row-major buffer. Rejects length mismatches and
    /// non-finite elements.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "expected {}x{} = {} elements, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite element {bad}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build element-wise from a function of (row, col).
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        Matrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    /// Matrix with entries drawn uniformly from `[-scale, scale]`.
    pub fn random(rows: usize, cols: usize, scale: f32, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-scale..=scale))
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    /// Standard matrix product `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row.iter()) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Product with the transposed right factor: `self * other^T`.
    ///
    /// This is the linear-layer orientation used throughout the engine:
    /// activations are (tokens x in) and weights are stored output-major
    /// (out x in), so each output row is a dot against a weight row.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "matmul_nt {}x{} * ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = other.row(j);
                let mut acc = 0.0f32;
                for (&a, &b) in a_row.iter().zip(b_row.iter()) {
                    acc += a * b;
                }
                *o = acc;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Element-wise sum. Shapes must match.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape(format!(
                "add {}x{} + {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn scale(&self, s: f32) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Frobenius norm, accumulated in f64.
    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    /// Sum of absolute values of all elements, accumulated in f64.
    pub fn abs_sum(&self) -> f64 {
        self.data.iter().map(|&v| v.abs() as f64).sum()
    }

    /// Row-wise softmax in place, numerically stabilized by max subtraction.
    pub fn softmax_rows(&mut self) {
        for i in 0..self.rows {
            softmax_in_place(self.row_mut(i));
        }
    }
}

/// Stable softmax over a slice.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    if sum > 0.0 {
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// RMS normalization of `x` with per-channel `gain`:
/// `x[j] * gain[j] / sqrt(mean(x^2) + eps)`.
pub fn rms_norm(x: &[f32], gain: &[f32], out: &mut [f32]) {
    debug_assert_eq!(x.len(), gain.len());
    let ms = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for ((o, &v), &g) in out.iter_mut().zip(x.iter()).zip(gain.iter()) {
        *o = (v as f64 * inv) as f32 * g;
    }
}

/// Epsilon inside the RMS denominator.
pub const RMS_EPS: f64 = 1e-6;

/// SiLU activation `x * sigmoid(x)`.
pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Cosine similarity `u.v / (|u||v|)` with Euclidean norms.
///
/// Errors on length mismatch or when either vector has zero norm; the
/// similarity is undefined there and must not silently read as 0.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f32> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine over lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let mut dot = 0.0f64;
    let mut nu = 0.0f64;
    let mut nv = 0.0f64;
    for (&a, &b) in u.iter().zip(v.iter()) {
        dot += a as f64 * b as f64;
        nu += a as f64 * a as f64;
        nv += b as f64 * b as f64;
    }
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let s = dot / (nu.sqrt() * nv.sqrt());
    Ok(s.clamp(-1.0, 1.0) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Naive triple-loop product, kept independent of Matrix::matmul.
    fn matmul_oracle(a: &Matrix, b: &Matrix) -> Vec<f32> {
        let mut out = vec![0.0f32; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0f32;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out[i * b.cols() + j] = acc;
            }
        }
        out
    }

    #[test]
    fn matmul_identity_left() {
        let m = Matrix::from_vec(2, 2, vec![3.0, -1.5, 0.25, 7.0]).unwrap();
        let id = Matrix::identity(2);
        assert_eq!(id.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_identity_right() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let id = Matrix::identity(2);
        assert_eq!(m.matmul(&id).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Matrix::random(8, 8, 1.0, &mut rng);
        let b = Matrix::random(8, 8, 1.0, &mut rng);
        let got = a.matmul(&b).unwrap();
        let want = matmul_oracle(&a, &b);
        for (g, w) in got.data().iter().zip(want.iter()) {
            let denom = w.abs().max(1.0);
            assert!((g - w).abs() / denom < 1e-6, "got {g}, want {w}");
        }
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Matrix::random(5, 7, 1.0, &mut rng);
        let w = Matrix::random(3, 7, 1.0, &mut rng);
        let got = a.matmul_nt(&w).unwrap();
        let want = a.matmul(&w.transpose()).unwrap();
        for (g, v) in got.data().iter().zip(want.data().iter()) {
            assert!((g - v).abs() < 1e-5);
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn from_vec_rejects_non_finite() {
        assert!(Matrix::from_vec(1, 2, vec![1.0, f32::NAN]).is_err());
        assert!(Matrix::from_vec(1, 2, vec![f32::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn cosine_identical_vectors() {
        let s = cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cosine_orthogonal() {
        let s = cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn cosine_hand_computed_zero() {
        // (1)(1) + (1)(-1) = 0, norms sqrt(2) each.
        let s = cosine_similarity(&[1.0, 1.0], &[1.0, -1.0]).unwrap();
        assert!(s.abs() < 1e-7);
    }

    #[test]
    fn cosine_zero_norm_is_error() {
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 2.0]),
            Err(Error::ZeroNorm)
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut m = Matrix::from_vec(2, 4, vec![0.5, -1.0, 2.0, 0.0, 10.0, 10.0, 10.0, 10.0])
            .unwrap();
        m.softmax_rows();
        for i in 0..2 {
            let s: f32 = m.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_unit_gain_has_unit_rms() {
        let x = [3.0f32, -4.0, 0.5, 1.0];
        let gain = [1.0f32; 4];
        let mut out = [0.0f32; 4];
        rms_norm(&x, &gain, &mut out);
        let ms: f64 = out.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 4.0;
        assert!((ms - 1.0).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn cosine_stays_in_unit_interval(
            u in proptest::collection::vec(-100.0f32..100.0, 1..16),
            v in proptest::collection::vec(-100.0f32..100.0, 1..16),
        ) {
            let n = u.len().min(v.len());
            if let Ok(s) = cosine_similarity(&u[..n], &v[..n]) {
                prop_assert!((-1.0..=1.0).contains(&s));
            }
        }

        #[test]
        fn matmul_stays_finite(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Matrix::random(4, 6, 10.0, &mut rng);
            let b = Matrix::random(6, 3, 10.0, &mut rng);
            let c = a.matmul(&b).unwrap();
            prop_assert!(c.data().iter().all(|v| v.is_finite()));
        }
    }
}
