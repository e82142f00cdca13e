//! Minimal dense linear algebra and reverse-mode differentiation.
//!
//! Everything is 64-bit and single-threaded per operation so that training
//! runs are bit-reproducible. Tensors are immutable values; rank 1 and 2
//! are the only shapes the rest of the crate needs.

mod linalg;
mod tape;

pub use linalg::{lstsq_residual, lstsq_solve, solve, solve_vec};
pub use tape::{gelu as gelu_scalar, gelu_grad, GradTape, Gradients, Var};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
///
/// Invariant: `data.len() == shape.iter().product()` and every value is
/// finite; constructors and operations reject NaN/Inf.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} wants {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        let t = Tensor { shape, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = values[i];
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Number of rows when viewed as a matrix (rank-1 tensors are rows).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Number of columns when viewed as a matrix.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => self.numel(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    fn check_finite(&self, ctx: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(ctx.to_string()))
        }
    }

    /// Standard matrix product. Rank-1 operands are treated as a single row
    /// (left) or a single column (right).
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = if rhs.shape.len() == 1 {
            (rhs.shape[0], 1)
        } else {
            (rhs.rows(), rhs.cols())
        };
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul: inner dims {k} vs {k2} (shapes {:?} x {:?})",
                self.shape, rhs.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &aik) in arow.iter().enumerate() {
                let brow = &rhs.data[kk * n..(kk + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow.iter()) {
                    *o += aik * b;
                }
            }
        }
        let t = Tensor { shape: vec![m, n], data: out };
        t.check_finite("matmul")?;
        Ok(t)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor { shape: vec![n, m], data: out }
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "sub", |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.zip(rhs, "mul", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let data = self.data.iter().map(|v| v * c).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let data = self.data.iter().map(|v| v + c).collect();
        Tensor { shape: self.shape.clone(), data }
    }

    fn zip(&self, rhs: &Tensor, ctx: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != rhs.shape {
            return Err(Error::ShapeMismatch(format!(
                "{ctx}: {:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let t = Tensor { shape: self.shape.clone(), data };
        t.check_finite(ctx)?;
        Ok(t)
    }

    pub fn dot(&self, rhs: &Tensor) -> Result<f64> {
        if self.numel() != rhs.numel() {
            return Err(Error::ShapeMismatch("dot: length mismatch".into()));
        }
        Ok(self
            .data
            .iter()
            .zip(rhs.data.iter())
            .map(|(a, b)| a * b)
            .sum())
    }

    pub fn norm2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum::<f64>()
    }

    pub fn frobenius(&self) -> f64 {
        self.norm2()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Operator 2-norm via power iteration on AᵀA (deterministic start).
    pub fn op_norm(&self) -> f64 {
        let (m, n) = (self.rows(), self.cols());
        if self.data.iter().all(|&v| v == 0.0) {
            return 0.0;
        }
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut sigma = 0.0;
        for _ in 0..200 {
            // u = A v
            let mut u = vec![0.0; m];
            for i in 0..m {
                u[i] = self.row(i).iter().zip(v.iter()).map(|(a, b)| a * b).sum();
            }
            // w = Aᵀ u
            let mut w = vec![0.0; n];
            for i in 0..m {
                let r = self.row(i);
                for j in 0..n {
                    w[j] += r[j] * u[i];
                }
            }
            let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nw == 0.0 {
                return 0.0;
            }
            let next = nw.sqrt();
            let rel = (next - sigma).abs() / next.max(1e-300);
            sigma = next;
            for j in 0..n {
                v[j] = w[j] / nw;
            }
            if rel < 1e-13 {
                break;
            }
        }
        sigma
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn matmul_identity() {
        let i = Tensor::eye(2);
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(i.matmul(&b).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut r = rng::rng(42);
        let a = Tensor::matrix(4, 3, (0..12).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let b = Tensor::matrix(3, 2, (0..6).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
        let c = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((c.get(i, j) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(a.matmul(&b).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Tensor::vector(vec![1.0, f64::NAN]).is_err());
        let a = Tensor::matrix(1, 1, vec![1e308]).unwrap();
        assert!(a.mul(&a).is_err() || a.matmul(&a).is_err());
    }

    #[test]
    fn op_norm_of_diagonal() {
        let d = Tensor::diag(&[0.5, -3.0, 1.0]);
        assert!((d.op_norm() - 3.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn matmul_associative_on_4x4_chains(seed in 0u64..200) {
            let mut r = rng::rng(seed);
            let mk = |r: &mut rand_chacha::ChaCha8Rng| {
                Tensor::matrix(4, 4, (0..16).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
            };
            let (a, b, c) = (mk(&mut r), mk(&mut r), mk(&mut r));
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let diff = left.sub(&right).unwrap().max_abs();
            prop_assert!(diff <= 1e-10);
        }
    }
}
