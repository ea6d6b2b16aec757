//! NCHW tensor engine for the MZNet demoiréing network.
//!
//! The operator set is exactly what the network needs: grouped/dilated
//! convolution, pixel (un)shuffle, bilinear resize, channel layer norm,
//! pooling, SimpleGate and a handful of elementwise/reduction ops, each
//! with a hand-written backward pass driven by [`Tape`].

pub mod conv;
pub mod error;
mod gemm;
pub mod ops;
pub mod tape;
mod tensor;

pub use conv::ConvSpec;
pub use error::{Result, TensorError};
pub use tape::{Tape, Var};
pub use tensor::{Shape, Tensor};
