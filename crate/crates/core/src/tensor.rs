//! Dense row-major tensors and the untraced forms of the core operations.
//!
//! The traced forms live on [`crate::autograd::Tape`]; both call the same
//! kernels, so their forward values agree bit for bit.

use crate::error::{Error, Result};
use crate::kernels;
use crate::scalar::Scalar;

/// Dense row-major array.
///
/// `grad`, when present, always has the same length as `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F = f32> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![F::zero(); n],
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    /// Builds a tensor from `f64` values, rounding to the element type.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| F::from_f64_lossy(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading axes.
    pub fn rows(&self) -> usize {
        let c = self.cols();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Converts to another element type.
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| G::from_f64_lossy(v.as_f64()))
                .collect(),
            grad: None,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the stored gradient.
    pub fn accumulate_grad(&mut self, g: &[F]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of length {}",
                g.len(),
                self.data.len()
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a = *a + b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Bitwise equality of shape and data.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bits() == b.bits())
    }
}

/// Matrix product of `a[m×k]` and `b[k×n]`.
pub fn matmul<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k, n) = matmul_dims(a.shape(), b.shape())?;
    Tensor::new(vec![m, n], kernels::matmul(a.data(), b.data(), m, k, n))
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 {
        return Err(Error::Dimension(format!(
            "matmul expects 2-D operands, got {a:?} and {b:?}"
        )));
    }
    if a[1] != b[0] {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions differ: {a:?} x {b:?}"
        )));
    }
    Ok((a[0], a[1], b[1]))
}

/// Softmax along the last axis.
pub fn softmax<F: Scalar>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if x.cols() == 0 || x.shape().is_empty() {
        return Err(Error::Dimension("softmax over an empty axis".into()));
    }
    Tensor::new(
        x.shape().to_vec(),
        kernels::softmax_rows(x.data(), x.rows(), x.cols()),
    )
}

/// `x / sqrt(mean(x²) + eps) * w` over the last axis.
pub fn rms_norm<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>, eps: F) -> Result<Tensor<F>> {
    let d = x.cols();
    if d == 0 || w.len() != d {
        return Err(Error::Dimension(format!(
            "rms_norm weight of length {} for feature size {d}",
            w.len()
        )));
    }
    let (out, _) = kernels::rms_norm(x.data(), w.data(), x.rows(), d, eps);
    Tensor::new(x.shape().to_vec(), out)
}

/// Mean negative log-likelihood over unmasked positions.
///
/// `logits` is `[..., V]` with one row per target; `mask` selects which rows count
/// (all rows when `None`).
pub fn cross_entropy<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[u32],
    mask: Option<&[bool]>,
) -> Result<Tensor<F>> {
    let (loss, _) = kernels::cross_entropy(logits.data(), logits.rows(), logits.cols(), targets, mask)?;
    Ok(Tensor::scalar(loss))
}
