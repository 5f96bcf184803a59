//! Dense row-major `f64` arrays.
//!
//! Feature maps are stored channel-last. Batched activations inside the
//! autodiff graph are `[batch, height, width, channels]`; a single
//! [`FeatureMap`] is `[height, width, channels]`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Panics when `data.len()` disagrees with `shape`; use [`Tensor::try_from_vec`]
    /// for untrusted input.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn try_from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self::from_vec(shape, data))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    /// Last dimension (channels for feature maps).
    pub fn channels(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// `(batch, height, width, channels)` of a rank-4 tensor.
    pub fn nhwc(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NHWC tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_inplace(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Select one batch entry of an NHWC tensor as an HWC tensor.
    pub fn batch_item(&self, index: usize) -> Tensor {
        let (b, h, w, c) = self.nhwc();
        assert!(index < b);
        let n = h * w * c;
        Tensor::from_vec(&[h, w, c], self.data[index * n..(index + 1) * n].to_vec())
    }

    /// Stack equally-shaped HWC tensors into NHWC.
    /// Concatenates `[n_i, ...]` tensors along the leading dimension.
    pub fn concat_batch(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty());
        let inner = items[0].shape[1..].to_vec();
        let mut data = Vec::new();
        let mut n = 0;
        for t in items {
            assert_eq!(t.shape[1..], inner[..], "cannot concatenate tensors of different shapes");
            data.extend_from_slice(&t.data);
            n += t.shape[0];
        }
        let mut shape = vec![n];
        shape.extend(inner);
        Tensor::from_vec(&shape, data)
    }

    pub fn stack(items: &[&Tensor]) -> Tensor {
        assert!(!items.is_empty());
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for t in items {
            assert_eq!(t.shape, inner, "cannot stack tensors of different shapes");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::from_vec(&shape, data)
    }
}

/// A feature map produced by one codec stage: `[height, width, channels]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub scale_index: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, scale_index: usize) -> Result<Self> {
        let s = data.shape();
        if s.len() != 3 || s.contains(&0) {
            return Err(Error::Shape(format!(
                "feature map must be (h, w, c) with every extent >= 1, got {s:?}"
            )));
        }
        if !data.all_finite() {
            return Err(Error::Numeric("feature map contains non-finite entries".into()));
        }
        Ok(Self { data, scale_index })
    }

    /// Wraps a tensor without validating it; used for grids that may be empty.
    pub(crate) fn unchecked(data: Tensor, scale_index: usize) -> Self {
        Self { data, scale_index }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        let (w, ch) = (self.width(), self.channels());
        self.data.data()[(y * w + x) * ch + c]
    }

    /// Shape with a leading batch dimension of one.
    pub fn to_batch(&self) -> Tensor {
        let s = self.data.shape();
        self.data.clone().reshape(&[1, s[0], s[1], s[2]])
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` for row-major slices.
///
/// `op(A)` is `m x k`, `op(B)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice bounds checked above; strides describe row-major layouts
    // of exactly those extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    naive[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, 0.0);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
        // transpose A storage: at is k x m
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let mut bt = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, 0.0);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn feature_map_rejects_empty_and_nan() {
        assert!(FeatureMap::new(Tensor::zeros(&[0, 2, 1]), 0).is_err());
        assert!(FeatureMap::new(Tensor::full(&[1, 1, 1], f64::NAN), 0).is_err());
        assert!(FeatureMap::new(Tensor::zeros(&[1, 1, 1]), 0).is_ok());
    }
}
