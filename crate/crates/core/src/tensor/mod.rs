//! Dense `f32` tensors and the forward numeric kernels shared by the network,
//! the autodiff tape and the stimulus tooling.
//!
//! Images are laid out as `(batch, channels, height, width)` and vectors as
//! `(batch, features)`, both row-major. Every kernel is a pure function of its
//! arguments and validates shapes before touching data.

pub(crate) mod conv;
mod gemm;
pub(crate) mod ops;

pub use conv::{conv2d, conv_transpose2d, ConvSpec};
pub use gemm::{gemm, Layout};
pub use ops::{
    batch_norm, dense_head, linear, mse, mse_per_item, pointwise, relu, sigmoid, softmax,
    Activation, BatchNormParams, BnMode, DenseHeadParams,
};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "Tensor::new",
                dim: "element count",
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.data.len() != 1 {
            return Err(Error::Shape {
                op: "Tensor::item",
                dim: "element count",
                expected: 1,
                actual: self.data.len(),
            });
        }
        Ok(self.data[0])
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "Tensor::reshape",
                dim: "element count",
                expected: self.data.len(),
                actual: n,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(batch, channels, height, width)` of a rank-4 tensor.
    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::Rank {
                op,
                expected: 4,
                actual: self.shape.clone(),
            }),
        }
    }

    /// `(batch, features)` of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [b, f] => Ok((b, f)),
            _ => Err(Error::Rank {
                op,
                expected: 2,
                actual: self.shape.clone(),
            }),
        }
    }

    /// Leading extent, or 1 for scalars.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per batch item.
    pub fn item_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    /// Contiguous slice for batch item `b`.
    pub fn item_slice(&self, b: usize) -> &[f32] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn item_slice_mut(&mut self, b: usize) -> &mut [f32] {
        let n = self.item_len();
        &mut self.data[b * n..(b + 1) * n]
    }

    /// Copies out batch items `[start, end)`.
    pub fn slice_batch(&self, start: usize, end: usize) -> Result<Self> {
        let b = self.batch();
        if self.shape.is_empty() || start > end || end > b {
            return Err(Error::Input(format!(
                "batch slice {start}..{end} out of range for shape {:?}",
                self.shape
            )));
        }
        let n = self.item_len();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * n..end * n].to_vec(),
        })
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Input("cannot stack zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut data = Vec::with_capacity(items.iter().map(Tensor::len).sum());
        let mut batch = 0;
        for t in items {
            if t.shape.is_empty() || t.shape[1..] != *tail {
                return Err(Error::Input(format!(
                    "cannot stack shape {:?} onto {:?}",
                    t.shape, first.shape
                )));
            }
            batch += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = batch;
        Ok(Self { shape, data })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        self.expect_same_shape("Tensor::zip_map", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Tensor, scale: f32) -> Result<()> {
        self.expect_same_shape("Tensor::add_scaled", other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f32 {
        self.sum() / self.data.len() as f32
    }

    pub fn dot(&self, other: &Tensor) -> Result<f32> {
        self.expect_same_shape("Tensor::dot", other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Debug-build check that no NaN or infinity slipped through a kernel.
    pub fn debug_assert_finite(&self, what: &str) {
        debug_assert!(self.all_finite(), "{what}: non-finite values");
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            if self.shape.len() != other.shape.len() {
                return Err(Error::Rank {
                    op,
                    expected: self.shape.len(),
                    actual: other.shape.clone(),
                });
            }
            let (i, (&e, &a)) = self
                .shape
                .iter()
                .zip(&other.shape)
                .enumerate()
                .find(|(_, (e, a))| e != a)
                .expect("shapes differ");
            return Err(Error::Shape {
                op,
                dim: AXIS_NAMES.get(i).copied().unwrap_or("axis"),
                expected: e,
                actual: a,
            });
        }
        Ok(())
    }
}

const AXIS_NAMES: [&str; 4] = ["axis 0", "axis 1", "axis 2", "axis 3"];
