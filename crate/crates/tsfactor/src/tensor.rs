//! Dense row-major tensors and the few raw kernels the models are built on.
//!
//! Values are stored as f64. The checkpoint wire format stays 32-bit floats
//! (see `checkpoint`), but keeping full precision in memory makes finite-
//! difference gradient checks and cached-vs-full decoder parity comfortably
//! inside their tolerances instead of at the edge of f32 rounding noise.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n], requires_grad: false }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n], requires_grad: false }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    /// I.i.d. normal entries scaled by `std`.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Tensor { shape, data, requires_grad: false }
    }

    /// Mark as a trainable parameter (fluent form for initializers).
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// First / second dimension (rank-2 helpers).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {} elements to {:?}",
                self.data.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Transposed copy of a rank-2 tensor.
    pub fn transposed(&self) -> Result<Tensor> {
        if !self.is_matrix() {
            return Err(Error::Dimension(format!("transpose wants rank 2, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Squared Euclidean distance.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

/// General matrix multiply with optional operand transposes: op(A) x op(B).
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<Tensor> {
    if !a.is_matrix() || !b.is_matrix() {
        return Err(Error::Dimension(format!(
            "matmul wants rank-2 operands, got {:?} and {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k1) = if ta { (a.cols(), a.rows()) } else { (a.rows(), a.cols()) };
    let (k2, n) = if tb { (b.cols(), b.rows()) } else { (b.rows(), b.cols()) };
    if k1 != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dims differ: {:?}{} x {:?}{}",
            a.shape,
            if ta { "^T" } else { "" },
            b.shape,
            if tb { "^T" } else { "" }
        )));
    }
    let mut out = Tensor::zeros(vec![m, n]);
    matmul_into(out.data_mut(), a, b, ta, tb, m, n, k1, false);
    Ok(out)
}

/// Shared kernel: writes (or accumulates into) `out`, an m×n row-major buffer.
///
/// Loops are ordered i-k-j so the inner loop walks both B and the output
/// contiguously; `accumulate` adds into `out` instead of overwriting.
pub(crate) fn matmul_into(
    out: &mut [f64],
    a: &Tensor,
    b: &Tensor,
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    accumulate: bool,
) {
    debug_assert_eq!(out.len(), m * n);
    if !accumulate {
        out.fill(0.0);
    }
    let (a_rs, a_ks) = if ta { (1, a.cols()) } else { (a.cols(), 1) };
    let (b_ks, b_ns) = if tb { (1, b.cols()) } else { (b.cols(), 1) };
    let ad = a.data();
    let bd = b.data();
    if b_ns == 1 {
        // op(B) rows are contiguous: stream them.
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * a_rs + p * a_ks];
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * b_ks..p * b_ks + n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    } else {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                let mut ai = i * a_rs;
                let mut bj = j * b_ns;
                for _ in 0..k {
                    acc += ad[ai] * bd[bj];
                    ai += a_ks;
                    bj += b_ks;
                }
                out[i * n + j] += acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_shape() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_matches_hand_result() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b, false, false).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transpose_variants_agree() {
        let mut rng = Rng::from_seed(3);
        let a = Tensor::randn(vec![4, 5], 1.0, &mut rng);
        let b = Tensor::randn(vec![5, 3], 1.0, &mut rng);
        let base = matmul(&a, &b, false, false).unwrap();
        let at = a.transposed().unwrap();
        let bt = b.transposed().unwrap();
        let v1 = matmul(&at, &b, true, false).unwrap();
        let v2 = matmul(&a, &bt, false, true).unwrap();
        let v3 = matmul(&at, &bt, true, true).unwrap();
        for v in [v1, v2, v3] {
            assert_eq!(v.shape(), base.shape());
            for (x, y) in v.data().iter().zip(base.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_bad_dims() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        assert!(matmul(&a, &b, false, false).is_err());
        assert!(matmul(&a, &b, false, true).is_ok());
    }

    #[test]
    fn matmul_brute_force_oracle() {
        // Triple-loop reference on random shapes, all transpose combos.
        let mut rng = Rng::from_seed(17);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (3, 2, 4), (5, 7, 2)] {
            for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
                let a_shape = if ta { vec![k, m] } else { vec![m, k] };
                let b_shape = if tb { vec![n, k] } else { vec![k, n] };
                let a = Tensor::randn(a_shape, 1.0, &mut rng);
                let b = Tensor::randn(b_shape, 1.0, &mut rng);
                let c = matmul(&a, &b, ta, tb).unwrap();
                for i in 0..m {
                    for j in 0..n {
                        let mut want = 0.0;
                        for p in 0..k {
                            let av = if ta { a.at2(p, i) } else { a.at2(i, p) };
                            let bv = if tb { b.at2(j, p) } else { b.at2(p, j) };
                            want += av * bv;
                        }
                        assert!((c.at2(i, j) - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = Rng::from_seed(4);
        let a = Tensor::randn(vec![3, 7], 1.0, &mut rng);
        let back = a.transposed().unwrap().transposed().unwrap();
        assert_eq!(a, back);
    }
}
