use thiserror::Error;

use crate::Shape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape} ({expected} elements)")]
    DataLength { shape: Shape, len: usize, expected: usize },
    #[error("{op}: shape mismatch, {lhs} vs {rhs}")]
    ShapeMismatch { op: &'static str, lhs: Shape, rhs: Shape },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("conv2d: {channels} channels not divisible by {groups} groups")]
    GroupDivisibility { channels: usize, groups: usize },
    #[error("{op}: spatial size {h}x{w} not divisible by {factor}")]
    IndivisibleSpatial {
        op: &'static str,
        h: usize,
        w: usize,
        factor: usize,
    },
    #[error("{op}: {channels} channels not divisible by {divisor}")]
    IndivisibleChannels {
        op: &'static str,
        channels: usize,
        divisor: usize,
    },
    #[error("backward: loss must be a 1x1x1x1 scalar, got {0}")]
    NotScalar(Shape),
    #[error("backward: tensor is not recorded on this tape")]
    NotOnTape,
    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
