//! Low-precision neural network training on dynamic fixed point.
//!
//! Tensors carry integer codes with one shared power-of-two exponent per
//! tensor. Parameters are updated either directly or through a wider
//! accumulator that keeps the part of each update the parameter cannot yet
//! represent (a Kahan-style lazy update). Around that core sit a layer
//! library with a float reference path, optimizers, a classifier bit-width
//! advisor, a softmax-gradient quantization sweep, IDX data loading and a
//! checkpointing trainer.

pub mod analyzer;
pub mod bitwidth;
pub mod data;
pub mod error;
pub mod fixedpoint;
pub(crate) mod kernels;
pub mod nn;
pub mod optim;
pub mod qtensor;
pub mod scalar;
pub mod trainer;
pub mod tensor;

pub use data::Dataset;
pub use error::{Error, Result};
pub use fixedpoint::{FixedPointFormat, QValue};
pub use nn::{Architecture, FloatNetwork, Network};
pub use optim::{KahanParam, OptimizerConfig};
pub use qtensor::{ExactTensor, QTensor};
pub use scalar::Scalar;
pub use tensor::RealTensor;
pub use trainer::{RunConfig, Trainer};

pub type RealTensor32 = RealTensor<f32>;
pub type RealTensor64 = RealTensor<f64>;
pub type FloatNetwork32 = FloatNetwork<f32>;
pub type FloatNetwork64 = FloatNetwork<f64>;
pub type Dataset32 = Dataset<f32>;
pub type Dataset64 = Dataset<f64>;
pub type Trainer32 = Trainer<f32>;
pub type Trainer64 = Trainer<f64>;
