//! Dense row-major f64 tensor plus the handful of BLAS-style kernels the
//! tape needs (matrix products in all transpose combinations).

use serde::{Deserialize, Serialize};

/// Dense row-major tensor of `f64` values.
///
/// Rank is arbitrary, but almost all math happens on rank-2 views
/// (`[rows, cols]`); convolution ops treat rank-4 tensors as
/// `[batch, height, width, channels]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Tensor filled with zeros.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Tensor filled with a constant.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    /// Rank-0-like scalar stored as shape `[1]`.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Build from an explicit buffer; `data.len()` must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            data.len(),
            expected,
            "buffer length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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

    /// Single stored value; panics unless the tensor has exactly one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of len {}", self.len());
        self.data[0]
    }

    /// Reinterpret the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        let expected: usize = shape.iter().product();
        assert_eq!(
            self.data.len(),
            expected,
            "cannot reshape {:?} ({} elems) to {:?}",
            self.shape,
            self.data.len(),
            shape
        );
        self.shape = shape.to_vec();
        self
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on rank-{} tensor", self.rank());
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on rank-{} tensor", self.rank());
        self.shape[1]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map into a new tensor.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// `c += a @ b` for row-major rank-2 tensors (`a: [m,k]`, `b: [k,n]`,
/// `c: [m,n]`). `beta` scales the existing contents of `c` first.
pub(crate) fn gemm_nn(a: &Tensor, b: &Tensor, c: &mut Tensor, beta: f64) {
    let (m, k) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(k, kb, "gemm_nn inner dims: a is [{m},{k}], b is [{kb},{n}]");
    assert_eq!(c.shape(), &[m, n], "gemm_nn output shape");
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            n as isize,
            1,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a @ b^T` (`a: [m,k]`, `b: [n,k]`, `c: [m,n]`).
pub(crate) fn gemm_nt(a: &Tensor, b: &Tensor, c: &mut Tensor, beta: f64) {
    let (m, k) = (a.rows(), a.cols());
    let (n, kb) = (b.rows(), b.cols());
    assert_eq!(k, kb, "gemm_nt inner dims: a is [{m},{k}], b is [{n},{kb}]");
    assert_eq!(c.shape(), &[m, n], "gemm_nt output shape");
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            1,
            k as isize,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c += a^T @ b` (`a: [k,m]`, `b: [k,n]`, `c: [m,n]`).
pub(crate) fn gemm_tn(a: &Tensor, b: &Tensor, c: &mut Tensor, beta: f64) {
    let (k, m) = (a.rows(), a.cols());
    let (kb, n) = (b.rows(), b.cols());
    assert_eq!(k, kb, "gemm_tn inner dims: a is [{k},{m}], b is [{kb},{n}]");
    assert_eq!(c.shape(), &[m, n], "gemm_tn output shape");
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            1,
            m as isize,
            b.data.as_ptr(),
            n as isize,
            1,
            beta,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let t = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
    }

    #[test]
    #[should_panic(expected = "does not match shape")]
    fn from_vec_rejects_bad_length() {
        let _ = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0]);
    }

    /// 2x2 product worked out by hand:
    /// [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]].
    #[test]
    fn gemm_nn_matches_hand_computation() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = Tensor::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let mut c = Tensor::zeros(&[2, 2]);
        gemm_nn(&a, &b, &mut c, 0.0);
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn gemm_transpose_variants_agree_with_explicit_transpose() {
        // a: [3,2], b: [3,4]; a^T @ b computed two ways.
        let a = Tensor::from_vec(&[3, 2], (0..6).map(|i| i as f64 * 0.5 - 1.0).collect());
        let b = Tensor::from_vec(&[3, 4], (0..12).map(|i| (i as f64).sin()).collect());
        let mut c = Tensor::zeros(&[2, 4]);
        gemm_tn(&a, &b, &mut c, 0.0);

        // Explicit transpose of a, then plain product.
        let mut at = Tensor::zeros(&[2, 3]);
        for i in 0..3 {
            for j in 0..2 {
                at.data_mut()[j * 3 + i] = a.data()[i * 2 + j];
            }
        }
        let mut c2 = Tensor::zeros(&[2, 4]);
        gemm_nn(&at, &b, &mut c2, 0.0);
        for (x, y) in c.data().iter().zip(c2.data()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }

        // And a @ b2^T against a @ transpose(b2).
        let b2 = Tensor::from_vec(&[4, 2], (0..8).map(|i| (i as f64).cos()).collect());
        let mut d = Tensor::zeros(&[3, 4]);
        gemm_nt(&a, &b2, &mut d, 0.0);
        let mut b2t = Tensor::zeros(&[2, 4]);
        for i in 0..4 {
            for j in 0..2 {
                b2t.data_mut()[j * 4 + i] = b2.data()[i * 2 + j];
            }
        }
        let mut d2 = Tensor::zeros(&[3, 4]);
        gemm_nn(&a, &b2t, &mut d2, 0.0);
        for (x, y) in d.data().iter().zip(d2.data()) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn gemm_beta_accumulates() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]);
        let b = Tensor::from_vec(&[2, 1], vec![2.0, 3.0]);
        let mut c = Tensor::filled(&[1, 1], 10.0);
        gemm_nn(&a, &b, &mut c, 1.0);
        assert_eq!(c.item(), 15.0);
    }
}
