//! Minimal reverse-mode tensor engine.
//!
//! Just enough machinery for this network: NCHW feature maps, 3x3/1x1
//! convolutions via im2col + matmul, 2x2 max pooling, nearest-neighbor
//! upsampling, batch normalization, and a handful of elementwise ops, all
//! recorded on a [`tape::Tape`] so gradients for every parameter come out of
//! one reverse sweep. Generic over `f32`/`f64`; gradient tests run the same
//! graph in double precision against central finite differences.

pub mod ops;
pub mod tape;

pub use tape::{GradStore, NodeId, NormMode, Tape};

use ndarray::ArrayD;

/// Element type of all tensors.
pub trait Elem:
    num_traits::Float
    + num_traits::NumAssignOps
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Handle to one tensor in a [`Params`] store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamTensor<E> {
    pub name: String,
    pub data: ArrayD<E>,
    /// False for buffers (running statistics) that persist in checkpoints but
    /// receive no gradients and do not count as model parameters.
    pub trainable: bool,
}

/// Ordered, named parameter store. Order is the canonical serialization and
/// iteration order everywhere (checkpoints, optimizer state, grad stores).
#[derive(Debug, Clone, Default)]
pub struct Params<E> {
    tensors: Vec<ParamTensor<E>>,
}

impl<E: Elem> Params<E> {
    pub fn new() -> Self {
        Params {
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, data: ArrayD<E>, trainable: bool) -> ParamId {
        self.tensors.push(ParamTensor {
            name: name.into(),
            data,
            trainable,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<E> {
        &self.tensors[id.0].data
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<E> {
        &mut self.tensors[id.0].data
    }

    pub fn tensor(&self, id: ParamId) -> &ParamTensor<E> {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamTensor<E>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut ParamTensor<E>)> {
        self.tensors
            .iter_mut()
            .enumerate()
            .map(|(i, t)| (ParamId(i), t))
    }

    /// Number of scalars in trainable tensors.
    pub fn count_trainable(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.trainable)
            .map(|t| t.data.len())
            .sum()
    }

    pub fn cast<F: Elem>(&self) -> Params<F> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    name: t.name.clone(),
                    data: t.data.mapv(|v| F::from_f64(v.to_f64())),
                    trainable: t.trainable,
                })
                .collect(),
        }
    }
}
