//! Dense row-major tensors, generic over element precision.
//!
//! Training runs in f32; gradient checks switch the whole stack to f64
//! because central differences are unreliable in single precision.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use std::fmt;

/// Element type for every numeric path in the crate: f32 or f64.
pub trait Real:
    num_traits::Float + num_traits::NumAssign + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    const DTYPE_TAG: u8;

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    /// Size of one element in bytes when serialized.
    fn byte_len() -> usize;
}

impl Real for f32 {
    const DTYPE_TAG: u8 = 4;

    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
    fn byte_len() -> usize {
        4
    }
}

impl Real for f64 {
    const DTYPE_TAG: u8 = 8;

    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes([
            bytes[0], bytes[1], bytes[2], bytes[3], bytes[4], bytes[5], bytes[6], bytes[7],
        ])
    }
    fn byte_len() -> usize {
        8
    }
}

/// Dense n-dimensional array, row-major. Gradient buffers live on the tape,
/// not here; a `Tensor` is a plain value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// r×c identity. With r != c, row i is the one-hot e_{i mod c}.
    pub fn identity_rows(rows: usize, cols: usize) -> Self {
        let mut t = Tensor::zeros(vec![rows, cols]);
        for r in 0..rows {
            t.data[r * cols + r % cols] = F::one();
        }
        t
    }

    /// Gaussian init, N(0, std²). Draws in f64 so f32/f64 models share a stream.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                F::from_f64(z * std)
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.is_empty()
    }

    /// Number of rows / row width for rank-2 tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> F {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: F) {
        let w = self.shape[1];
        self.data[r * w + c] = v;
    }

    pub fn row(&self, r: usize) -> &[F] {
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    /// Index of the first non-finite element, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    pub fn assert_finite(&self, context: &'static str) -> Result<()> {
        match self.first_non_finite() {
            None => Ok(()),
            Some(_) => Err(Error::NonFinite { context, op: None }),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn l1_diff(&self, other: &Tensor<F>) -> f64 {
        assert_eq!(self.shape, other.shape, "l1_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .sum()
    }

    pub fn inf_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }

    /// Convert element precision (used when loading a checkpoint written at
    /// a different precision is *not* allowed; this is for test oracles).
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64(v.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_len() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("shape mismatch"));
    }

    #[test]
    fn identity_rows_cycles() {
        let t = Tensor::<f64>::identity_rows(6, 4);
        for r in 0..6 {
            for c in 0..4 {
                let expect = if c == r % 4 { 1.0 } else { 0.0 };
                assert_eq!(t.at2(r, c), expect);
            }
        }
    }

    #[test]
    fn finite_check_finds_nan() {
        let mut t = Tensor::<f32>::zeros(vec![2, 2]);
        assert!(t.assert_finite("test").is_ok());
        t.data_mut()[3] = f32::NAN;
        assert_eq!(t.first_non_finite(), Some(3));
        assert!(t.assert_finite("test").is_err());
    }
}
