//! Dense tensors, the layer kernels the encoder/decoder blocks are built
//! from, and reverse-mode differentiation for the training loop.
//!
//! Feature maps are stored channel-major (C, H, W), row-major within a
//! channel. That layout is also the wire order used by the codec.

mod macs;
pub mod ops;
pub mod tape;

pub use macs::{count_macs, macs_recorded};
pub use tape::{Gradients, NodeId, ParamId, Tape};

use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch: {op} expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("{op}: tensor must have rank {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: invalid layer geometry: {reason}")]
    BadGeometry { op: &'static str, reason: String },
    #[error("gradient requested for a node not in the recorded graph (tape {expected}, node from tape {actual})")]
    ForeignNode { expected: u64, actual: u64 },
    #[error("backward requires a scalar root, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

/// Dense N-dimensional array, channel-major for feature maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self, TensorError> {
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self, TensorError> {
        Self::new(
            shape.to_vec(),
            values.iter().map(|&v| T::from_f64(v)).collect(),
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> T {
        debug_assert_eq!(self.data.len(), 1, "item() on multi-element tensor");
        self.data[0]
    }

    /// Dimensions of a rank-3 (C, H, W) feature map.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
        match self.shape.as_slice() {
            [c, h, w] => Ok((*c, *h, *w)),
            _ => Err(TensorError::BadRank {
                op,
                expected: 3,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "zip_map",
                expected: format!("{:?}", self.shape),
                actual: format!("{:?}", other.shape),
            });
        }
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

    /// `self += scale * other`, shape-checked.
    pub fn add_scaled_in_place(&mut self, other: &Self, scale: T) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add_scaled",
                expected: format!("{:?}", self.shape),
                actual: format!("{:?}", other.shape),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Mean of all elements.
    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        let sum: T = self.data.iter().copied().sum();
        sum / T::from_f64(self.data.len() as f64)
    }

    /// Convert element type (used by the f32 inference path and checkpoints).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

/// Parameters of a single convolution layer.
///
/// For regular convolutions the weight is (out_channels, in_channels, K, K);
/// for transpose convolutions it is (in_channels, out_channels, K, K).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub kernel: usize,
    pub padding: usize,
    /// Extra rows/cols appended to a transpose convolution's output
    /// (ignored by forward convolution). Must stay below `stride`.
    pub output_padding: usize,
}

impl<T: Scalar> LayerParams<T> {
    pub fn new(
        weights: Tensor<T>,
        bias: Option<Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        let shape = weights.shape();
        if shape.len() != 4 || shape[2] != shape[3] {
            return Err(TensorError::BadRank {
                op: "layer_params",
                expected: 4,
                shape: shape.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::BadGeometry {
                op: "layer_params",
                reason: "stride must be >= 1".into(),
            });
        }
        let kernel = shape[2];
        Ok(Self {
            weights,
            bias,
            stride,
            kernel,
            padding,
            output_padding: 0,
        })
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Result<Self, TensorError> {
        if output_padding >= self.stride {
            return Err(TensorError::BadGeometry {
                op: "layer_params",
                reason: format!(
                    "output padding {output_padding} must be < stride {}",
                    self.stride
                ),
            });
        }
        self.output_padding = output_padding;
        Ok(self)
    }
}
