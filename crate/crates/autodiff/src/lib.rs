//! Minimal reverse-mode tensor engine: the primitives the encoder/decoder and
//! downstream models need, Adam, finite-difference checks, and the `MMVQ`
//! checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod scalar;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use checkpoint::{Container, ContainerScalar, EntryData};
pub use conv::ConvSpec;
pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tape::{softmax_row, Gradients, Tape, Var};
pub use tensor::Tensor;
