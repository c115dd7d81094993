//! Dense tensors, reverse-mode autodiff and the parameter registry.

mod checkpoint;
mod ops;
mod param;
mod scalar;
mod tape;

use std::sync::Arc;

pub use checkpoint::{config_hash, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT_VERSION};
pub use ops::{conv_out_extent, sigmoid, Conv3dSpec, INSTANCE_NORM_EPS};
pub use param::{ParamId, ParamKind, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{Backward, Gradients, Tape, Var};

use crate::error::{config_err, Error, Result};

/// Dense row-major array. Feature maps use the N x C x D x H x W layout.
///
/// Values are immutable once created and cheap to clone.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(config_err!(
                "shape {:?} holds {} elements but {} were given",
                shape,
                numel,
                data.len()
            ));
        }
        Ok(Tensor { shape, data: Arc::new(data) })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![value; n]) }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor { shape, data: Arc::new((0..n).map(&mut f).collect()) }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![value]) }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_vec(self) -> Vec<T> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(config_err!("cannot reshape {:?} into {:?}", self.shape, shape));
        }
        Ok(Tensor { shape, data: Arc::clone(&self.data) })
    }

    /// Spatial feature map extents `[N, C, D, H, W]`.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        <[usize; 5]>::try_from(self.shape.as_slice())
            .map_err(|_| config_err!("expected a 5-d N x C x D x H x W tensor, got {:?}", self.shape))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: Arc::new(self.data.iter().map(|&x| f(x)).collect()) }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&x| U::of(x.f64())).collect()),
        }
    }

    /// Fails with a numeric fault naming `layer` if any value is NaN or infinite.
    pub fn check_finite(&self, layer: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NumericFault {
                layer: layer.to_string(),
                detail: format!("non-finite value {} at flat index {} of {:?}", self.data[i], i, self.shape),
            }),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Copy of sample `n` along the leading axis, keeping a leading axis of 1.
    pub fn sample(&self, n: usize) -> Result<Self> {
        let lead = *self.shape.first().ok_or_else(|| config_err!("sample of a 0-d tensor"))?;
        if n >= lead {
            return Err(config_err!("sample {} out of range for leading extent {}", n, lead));
        }
        let per = self.numel() / lead;
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor::new(shape, self.data[n * per..(n + 1) * per].to_vec())
    }

    /// Stacks tensors of identical shape `[1, ...]` along the leading axis.
    pub fn stack(parts: &[Tensor<T>]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| config_err!("stack of zero tensors"))?;
        if first.shape.first() != Some(&1) {
            return Err(config_err!("stack expects leading extent 1, got {:?}", first.shape));
        }
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(config_err!("stack shape mismatch: {:?} vs {:?}", p.shape, first.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = parts.len();
        Tensor::new(shape, data)
    }
}
