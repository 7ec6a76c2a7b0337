//! Dense tensors and the reverse-mode autodiff tape built on them.

mod adam;
mod gradcheck;
mod kernels;
mod param;
mod tape;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_at, relative_error};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{BinaryOp, Gradients, ReduceOp, Tape, UnaryOp, Var};

/// Immutable row-major array. Cloning shares the underlying buffer.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<[T]>,
}

impl<T: std::fmt::Debug> std::fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", &self.data[..])?;
        }
        Ok(())
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: impl Into<Vec<T>>) -> Result<Self> {
        let shape = shape.into();
        let data = data.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data: data.into() })
    }

    /// Internal constructor for callers that already guarantee the invariant.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data: data.into() }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor::from_parts(shape, vec![value; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Tensor::full(shape, T::zero())
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_parts(vec![1], vec![value])
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, values: &[f64]) -> Result<Self> {
        Tensor::new(shape, values.iter().map(|&v| T::lit(v)).collect::<Vec<_>>())
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn randn(shape: impl Into<Vec<usize>>, std: f64, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.normal() * std)).collect();
        Tensor::from_parts(shape, data)
    }

    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(rng.uniform_range(lo, hi))).collect();
        Tensor::from_parts(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.data.to_vec()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// New tensor with the same values under a different shape.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Same values converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| U::lit(v.to_f64().unwrap_or(f64::NAN))).collect(),
        )
    }

    /// Copy with one element replaced.
    pub fn with_value(&self, index: usize, value: T) -> Self {
        let mut data = self.to_vec();
        data[index] = value;
        Tensor::from_parts(self.shape.clone(), data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (*a - *b).abs().to_f64().unwrap_or(f64::NAN))
            .fold(0.0, f64::max)
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Broadcast iteration over `out_shape` for `K` operands (right-aligned,
/// size-1 axes broadcast). Adjacent axes are merged wherever every operand
/// walks them contiguously or not at all, so the innermost run is as long as
/// possible and each operand reads it with stride 0 or 1.
pub(crate) struct Runs<const K: usize> {
    dims: Vec<usize>,
    strides: Vec<[usize; K]>,
}

impl<const K: usize> Runs<K> {
    pub(crate) fn new(out_shape: &[usize], operands: [&[usize]; K]) -> Self {
        let rank = out_shape.len();
        let mut full = vec![[0usize; K]; rank];
        for (k, shape) in operands.iter().enumerate() {
            let pad = rank - shape.len();
            let mut acc = 1;
            for i in (0..shape.len()).rev() {
                full[i + pad][k] = if shape[i] == 1 { 0 } else { acc };
                acc *= shape[i];
            }
        }
        let mut dims: Vec<usize> = Vec::new();
        let mut strides: Vec<[usize; K]> = Vec::new();
        for ax in (0..rank).rev() {
            let (d, s) = (out_shape[ax], full[ax]);
            if d == 1 {
                continue;
            }
            if let (Some(last_d), Some(last_s)) = (dims.last_mut(), strides.last()) {
                if (0..K).all(|k| s[k] == last_s[k] * *last_d) {
                    *last_d *= d;
                    continue;
                }
            }
            dims.push(d);
            strides.push(s);
        }
        if dims.is_empty() {
            dims.push(1);
            strides.push([0; K]);
        }
        dims.reverse();
        strides.reverse();
        Runs { dims, strides }
    }

    /// Length of each innermost run.
    pub(crate) fn inner(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Stride of operand `k` inside a run.
    pub(crate) fn inner_stride(&self, k: usize) -> usize {
        self.strides.last().unwrap()[k]
    }

    /// Calls `f(out_offset, operand_offsets)` at the start of every run.
    pub(crate) fn for_each(&self, mut f: impl FnMut(usize, [usize; K])) {
        let outer = self.dims.len() - 1;
        let count: usize = self.dims[..outer].iter().product();
        let inner = self.inner();
        let mut idx = vec![0usize; outer];
        let mut offs = [0usize; K];
        for run in 0..count {
            f(run * inner, offs);
            for ax in (0..outer).rev() {
                idx[ax] += 1;
                if idx[ax] < self.dims[ax] {
                    for k in 0..K {
                        offs[k] += self.strides[ax][k];
                    }
                    break;
                }
                for k in 0..K {
                    offs[k] -= self.strides[ax][k] * (idx[ax] - 1);
                }
                idx[ax] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn offsets(out: &[usize], a: &[usize]) -> Vec<usize> {
        let runs = Runs::new(out, [a]);
        let (n, s) = (runs.inner(), runs.inner_stride(0));
        let mut v = Vec::new();
        runs.for_each(|_, [o]| v.extend((0..n).map(|j| o + s * j)));
        v
    }

    #[test]
    fn runs_enumerate_broadcast_offsets() {
        assert_eq!(offsets(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(offsets(&[2, 3], &[1, 3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(offsets(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(offsets(&[2, 2], &[2, 2]), vec![0, 1, 2, 3]);
        assert_eq!(offsets(&[1], &[1]), vec![0]);
        assert_eq!(offsets(&[2, 3, 2, 2], &[1, 3, 1, 1]), vec![0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]);
        assert_eq!(offsets(&[2, 1, 3], &[2, 1, 1]), vec![0, 0, 0, 1, 1, 1]);
        let runs = Runs::new(&[4, 8, 5, 5], [&[4, 8, 5, 5][..], &[1, 8, 1, 1][..]]);
        assert_eq!(runs.inner(), 25);
        assert_eq!(Runs::new(&[4, 8, 5, 5], [&[4, 8, 5, 5][..]]).inner(), 800);
    }

    #[test]
    fn shape_must_match_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], Vec::<f32>::new()).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn reshape_keeps_values_and_rejects_bad_counts() {
        let t = Tensor::<f64>::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = t.reshape([4]).unwrap();
        assert_eq!(r.data(), t.data());
        assert_eq!(t.shape(), &[2, 2]);
        assert!(t.reshape([3]).is_err());
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 1], &[1, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[4, 2, 3], &[3]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3, 2]), None);
    }
}
