//! Row-major dense tensor.

use super::Scalar;
use crate::error::{CoreError, Result};

/// Contiguous row-major tensor. `product(shape) == data.len()` always holds;
/// constructors and kernels reject anything else.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(CoreError::ShapeMismatch {
                op: "tensor::new",
                detail: format!("shape {:?} needs {} values, got {}", shape, expect, data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self { shape, data: vec![T::zero(); len] }
    }

    pub fn scalar(v: T) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn from_f64_slice(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        Self::new(shape, values.iter().map(|&v| T::from_f64(v)).collect())
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

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Extent pair for rank-2 tensors.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(CoreError::ShapeMismatch {
                op,
                detail: format!("expected rank-2 tensor, got shape {:?}", self.shape),
            }),
        }
    }

    pub fn scalar_value(&self) -> Result<T> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(CoreError::NonScalarLoss { shape: self.shape.clone() })
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Lossy dtype conversion (used to lift `f32` parameters into the `f64`
    /// verification path).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    /// Softmax along `axis`, numerically stabilized by max-subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let rank = self.shape.len().max(1);
        let shape = if self.shape.is_empty() { vec![1] } else { self.shape.clone() };
        if axis >= rank {
            return Err(CoreError::ShapeMismatch {
                op: "softmax",
                detail: format!("axis {} out of range for shape {:?}", axis, self.shape),
            });
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = self.data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let idx = |j: usize| base + j * inner;
                let mut max = T::neg_infinity();
                for j in 0..lane {
                    max = max.max(out[idx(j)]);
                }
                let mut sum = T::zero();
                for j in 0..lane {
                    let e = (out[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    sum = sum + e;
                }
                for j in 0..lane {
                    out[idx(j)] = out[idx(j)] / sum;
                }
            }
        }
        let out = Tensor { shape: self.shape.clone(), data: out };
        if !out.all_finite() {
            return Err(CoreError::NonFinite { op: "softmax" });
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn softmax_symmetry() {
        let t = Tensor::<f64>::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap();
        let s = t.softmax(0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_extreme_magnitudes_stay_normalized() {
        let t = Tensor::<f32>::new(vec![2], vec![1000.0, 0.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!(s.data()[0] > 0.999);
        assert!((s.data().iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let t = Tensor::<f64>::new(vec![4], vec![1e4, -1e4, 1e4, 0.0]).unwrap();
        let s = t.softmax(0).unwrap();
        assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_reference_values() {
        // exp/sum of [1,2,3] evaluated in high precision.
        let t = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let s = t.softmax(0).unwrap();
        let expect = [0.09003057317038046, 0.24472847105479765, 0.6652409557748219];
        for (got, want) in s.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn softmax_middle_axis() {
        let t = Tensor::<f64>::new(vec![2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        let s = t.softmax(1).unwrap();
        // lanes along axis 1: (0,2), (1,3), (4,6), (5,7)
        for (a, b) in [(0, 2), (1, 3), (4, 6), (5, 7)] {
            assert!((s.data()[a] + s.data()[b] - 1.0).abs() < 1e-12);
        }
    }
}
