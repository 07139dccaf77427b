//! Adaptive split computing: a lightweight encoder ensemble on the edge
//! device compresses intermediate features, a server-side reconstructor
//! restores them, and a deadline-driven controller picks how many encoder
//! members (s) and how many bits per symbol (b) to use for each frame.
//!
//! The crate is generic over the scalar type: training runs in `f64`,
//! inference can run in `f32`. Use the [`Tensor32`]/[`Tensor64`] aliases
//! for the common cases.

pub mod codec;
pub mod controller;
pub mod model;
pub mod netsim;
pub mod protocol;
pub mod runtime;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use model::SlimModel;
pub use scalar::Scalar;
pub use tensor::{count_macs, LayerParams, Tensor, TensorError};

/// Single-precision tensor, the inference-side default.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor, the training-side default.
pub type Tensor64 = Tensor<f64>;
